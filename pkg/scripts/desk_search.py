"""Desk-scale search: train supernets, run the evolution, write log, front CSV and DOTs.

    python3 scripts/desk_search.py --out runs/desk --exponents 1 1 1
"""

import argparse
import time
from pathlib import Path

from mmnas import engine as E
from mmnas.cli import write_dots, front_csv
from mmnas.config import desk_preset, save_config
from mmnas.supernet import save_supernets


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--exponents", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = desk_preset().replace(exponents=tuple(args.exponents), seed=args.seed)
    save_config(cfg, out / "config.json")

    start = time.perf_counter()
    ctx = E.build_context(cfg)
    save_supernets(ctx.supernets, out / "supernets.npz")
    print(f"supernets trained in {time.perf_counter() - start:.1f}s")

    result = E.run(ctx, out / "run_log.jsonl")
    (out / "front.csv").write_text(front_csv(result.records, cfg.modalities))
    write_dots([m.record for m in result.front], out / "graphs")
    print(f"{len(result.records)} candidates in {time.perf_counter() - start:.1f}s")
    for m in result.front:
        r = m.record
        print(f"  id={r.candidate_id:>3} macro={r.macro} acc={r.acc:.4f} test={r.test_acc:.4f} lat={r.lat_ms:.3f}ms ops={r.ops}")


if __name__ == "__main__":
    main()
