"""Progressive ablation rows and the single-operator sweep on shared supernets.

    python3 scripts/ablations.py --out runs/ablate [--sweep-only]
"""

import argparse
from pathlib import Path

from mmnas import engine as E
from mmnas.config import desk_preset


def show(rows) -> None:
    for r in rows:
        print(f"{r.mode:<18} acc={r.acc:.4f} test={r.test_acc:.4f} lat={r.lat_ms:.3f}ms en={r.ergy_mj:.3f}mJ macro={r.macro} ops={r.ops}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--sweep-only", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ctx = E.build_context(desk_preset())
    if not args.sweep_only:
        rows = [E.ablation_run(mode, ctx, out / f"ablation_{mode}_log.jsonl") for mode in E.ABLATION_MODES]
        E.write_jsonl((r.to_dict() for r in rows), out / "ablation_all.jsonl")
        show(rows)
    sweep = E.operator_sweep(ctx)
    E.write_jsonl((r.to_dict() for r in sweep), out / "ablation_operators.jsonl")
    show(sweep)


if __name__ == "__main__":
    main()
