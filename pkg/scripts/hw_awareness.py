"""Accuracy-only vs hardware-aware search on the same seed, supernets and LUT.

    python3 scripts/hw_awareness.py --out runs/hw
"""

import argparse
from pathlib import Path

from mmnas import engine as E
from mmnas.cli import front_csv
from mmnas.config import desk_preset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/hw")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = E.build_context(desk_preset())
    fronts = {}
    for tag, exps in (("acc", (1.0, 0.0, 0.0)), ("hw", (1.0, 1.0, 1.0))):
        cfg = base.config.replace(exponents=exps)
        ctx = E.build_context(cfg, base.dataset, base.supernets, base.lut)
        result = E.run(ctx, out / f"run_log_{tag}.jsonl")
        (out / f"front_{tag}.csv").write_text(front_csv(result.records, cfg.modalities))
        fronts[tag] = [m.record for m in result.front]

    min_lat = min(r.lat_ms for r in fronts["acc"])
    best_acc = max(r.acc for r in fronts["acc"])
    print(f"accuracy-only front: best acc {best_acc:.4f}, min latency {min_lat:.4f} ms")
    for r in sorted(fronts["hw"], key=lambda r: r.lat_ms):
        mark = "*" if r.lat_ms < min_lat and r.acc >= best_acc - 0.05 else " "
        print(f" {mark} hw id={r.candidate_id:>3} acc={r.acc:.4f} lat={r.lat_ms:.4f} ms ops={r.ops}")


if __name__ == "__main__":
    main()
