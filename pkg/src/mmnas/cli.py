"""Command-line driver.

Every command accepts ``--config FILE`` (JSON), ``--preset {desk,full}`` and
one flag per :class:`RunConfig` field; flags override the file, which
overrides the preset. Artifacts go to ``--out``, else ``$MMNAS_OUTPUT_DIR``,
else ``./mmnas-out``::

    data/{train,val,test}.npz   gen-data
    lut_<device>.json           gen-lut
    supernets.npz               train-supernet (+ supernet_trace.json)
    run_log.jsonl, front.csv    search (+ config.json, graphs/cand_<id>.dot)
    ablation_<mode>.jsonl       ablate
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence

from . import engine as E
from . import fusion as F
from .config import PRESETS, RunConfig, load_config, save_config
from .data import MultimodalDataset, generate, load_dataset, save_dataset
from .hwcost import LUTFormatError, MissingCostError, save_lut, synth_device
from .moo import DIRECTIONS, eval_order, rank_and_crowding
from .supernet import ElasticSupernet, load_supernets, save_supernets

OUTPUT_ENV = "MMNAS_OUTPUT_DIR"
DEFAULT_OUTPUT = "mmnas-out"
ABLATE_CHOICES = E.ABLATION_MODES + ("all", "operators")


class StageError(RuntimeError):
    """A command failed; ``stage`` names the step for the diagnostic."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration flags
# ---------------------------------------------------------------------------
def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    parser.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    group = parser.add_argument_group("run configuration")
    defaults = RunConfig()
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        if isinstance(value, tuple):
            group.add_argument(flag, dest=f.name, nargs="+", type=type(value[0]), metavar=f.name.upper())
        elif isinstance(value, bool):
            group.add_argument(flag, dest=f.name, type=_parse_bool, metavar="BOOL")
        elif value is None:
            group.add_argument(flag, dest=f.name, type=str)
        else:
            group.add_argument(flag, dest=f.name, type=type(value))


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(RunConfig)}
    try:
        return load_config(args.config, args.preset, **overrides)
    except (ValueError, FileNotFoundError) as exc:
        raise StageError("config", str(exc)) from None


def output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("output", f"cannot create {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# prerequisites
# ---------------------------------------------------------------------------
def _dataset(cfg: RunConfig, out: Path, path: str | None) -> MultimodalDataset:
    data_dir = Path(path) if path else out / "data"
    if not data_dir.exists():
        if path:
            raise StageError("load dataset", f"no dataset at {data_dir}")
        return generate(E.task_spec(cfg), cfg.seed)
    try:
        ds = load_dataset(data_dir)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise StageError("load dataset", str(exc)) from None
    expected = dataclasses.replace(E.task_spec(cfg), channels=ds.spec.channels)
    if ds.spec != expected:
        raise StageError("load dataset", f"{data_dir} was generated with {ds.spec}, config asks for {expected}")
    return ds


def _supernets(cfg: RunConfig, out: Path, path: str | None, ds: MultimodalDataset) -> dict[str, ElasticSupernet]:
    ckpt = Path(path) if path else out / "supernets.npz"
    if not ckpt.exists():
        if path:
            raise StageError("load supernets", f"no checkpoint at {ckpt}")
        return E.train_supernets(cfg, ds)
    try:
        nets = load_supernets(ckpt)
    except (ValueError, KeyError) as exc:
        raise StageError("load supernets", f"{ckpt}: {exc}") from None
    for m in cfg.modalities:
        net = nets.get(m)
        if net is None or net.space != cfg.search_space() or net.base != cfg.base_channels:
            raise StageError("load supernets", f"{ckpt} does not match the configured space for modality {m!r}")
    return nets


def _context(cfg: RunConfig, out: Path, args: argparse.Namespace) -> E.SearchContext:
    ds = _dataset(cfg, out, args.data)
    try:
        lut = E.make_lut(cfg)
    except (LUTFormatError, FileNotFoundError) as exc:
        raise StageError("load LUT", str(exc)) from None
    nets = _supernets(cfg, out, args.supernets, ds)
    return E.build_context(cfg, ds, nets, lut)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------
def front_header(modalities: Sequence[str]) -> list[str]:
    return (
        ["candidate_id", "generation"]
        + [f"genome_{m}" for m in modalities]
        + ["C", "D", "acc", "lat_ms", "ergy_mj", "rank", "crowding"]
    )


def front_csv(records: Sequence[E.RunRecord], modalities: Sequence[str]) -> str:
    """Every evaluated candidate with its non-domination rank; rank 0 is the front.

    Rows follow eval order: rank, then crowding (descending), then id.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(front_header(modalities))
    if records:
        values = [r.objectives for r in records]
        ranks, crowd = rank_and_crowding(values, DIRECTIONS)
        for i in eval_order(values, DIRECTIONS, [r.candidate_id for r in records]):
            r = records[i]
            missing = [m for m in modalities if m not in r.genomes]
            if missing:
                raise ValueError(f"candidate {r.candidate_id} has no genome for {missing}")
            c = float(crowd[i])
            writer.writerow(
                [r.candidate_id, r.generation]
                + [" ".join(str(v) for v in r.genomes[m]) for m in modalities]
                + [r.macro[0], r.macro[1], repr(float(r.acc)), repr(float(r.lat_ms)), repr(float(r.ergy_mj)), int(ranks[i])]
                + ["inf" if math.isinf(c) else repr(c)]
            )
    return buf.getvalue()


def _read_log(path: str | Path) -> list[E.RunRecord]:
    try:
        return E.read_log(path)
    except FileNotFoundError:
        raise StageError("read log", f"no run log at {path}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise StageError("read log", f"{path} is malformed: {exc!r}") from None


def write_dots(records: Sequence[E.RunRecord], graph_dir: Path) -> list[Path]:
    graph_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in records:
        if r.graph is None:
            continue
        name = f"cand_{r.candidate_id}"
        path = graph_dir / f"{name}.dot"
        path.write_text(F.graph_to_dot(F.FusionGraph.from_dict(r.graph), name))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig, out: Path) -> None:
    paths = save_dataset(generate(E.task_spec(cfg), cfg.seed), out / "data")
    for p in paths:
        print(p)


def cmd_gen_lut(args, cfg: RunConfig, out: Path) -> None:
    path = Path(args.path) if args.path else out / f"lut_{cfg.device}.json"
    try:
        lut = synth_device(cfg.lut_seed, cfg.device, cfg.search_space())
    except ValueError as exc:
        raise StageError("gen-lut", str(exc)) from None
    save_lut(lut, path)
    print(path)


def cmd_train_supernet(args, cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg, out, args.data)
    traces: dict[str, list[float]] = {}
    nets = E.train_supernets(cfg, ds, traces)
    ckpt = out / "supernets.npz"
    save_supernets(nets, ckpt)
    (out / "supernet_trace.json").write_text(json.dumps(traces, indent=1, sort_keys=True) + "\n")
    for m, losses in traces.items():
        last = f"{losses[-1]:.4f}" if losses else "n/a"
        print(f"{m}: {len(losses)} epochs, final loss {last}")
    print(ckpt)


def cmd_search(args, cfg: RunConfig, out: Path) -> None:
    ctx = _context(cfg, out, args)
    save_config(cfg, out / "config.json")
    log_path = out / "run_log.jsonl"
    result = E.run(ctx, log_path)
    (out / "front.csv").write_text(front_csv(result.records, cfg.modalities))
    dots = write_dots([m.record for m in result.front], out / "graphs")
    print(f"{len(result.records)} candidates, {len(result.front)} on the front")
    for m in result.front:
        r = m.record
        print(f"  cand {r.candidate_id}: acc={r.acc:.4f} lat={r.lat_ms:.3f}ms energy={r.ergy_mj:.3f}mJ ops={r.ops}")
    print(f"log {log_path}, front {out / 'front.csv'}, {len(dots)} graph(s) in {out / 'graphs'}")


def cmd_ablate(args, cfg: RunConfig, out: Path) -> None:
    ctx = _context(cfg, out, args)
    if args.mode == "operators":
        rows = E.operator_sweep(ctx)
    else:
        modes = E.ABLATION_MODES if args.mode == "all" else (args.mode,)
        rows = [E.ablation_run(m, ctx, out / f"ablation_{m}_log.jsonl") for m in modes]
    path = out / f"ablation_{args.mode}.jsonl"
    E.write_jsonl([r.to_dict() for r in rows], path)
    print(f"{'mode':<18} {'acc':>7} {'test':>7} {'lat_ms':>8} {'ergy_mj':>8}  ops")
    for r in rows:
        print(f"{r.mode:<18} {r.acc:7.4f} {r.test_acc:7.4f} {r.lat_ms:8.3f} {r.ergy_mj:8.3f}  {','.join(r.ops)}")
    print(path)


def cmd_export_front(args, cfg: RunConfig, out: Path) -> None:
    records = _read_log(args.log)
    try:
        text = front_csv(records, cfg.modalities)
    except ValueError as exc:
        raise StageError("export-front", str(exc)) from None
    if args.csv == "-":
        sys.stdout.write(text)
        return
    path = Path(args.csv) if args.csv else out / "front.csv"
    path.write_text(text)
    print(path)


def cmd_export_graph(args, cfg: RunConfig, out: Path) -> None:
    if (args.graph is None) == (args.log is None):
        raise StageError("export-graph", "give exactly one of --graph or --log")
    if args.graph is not None:
        try:
            graph = F.FusionGraph.from_dict(json.loads(Path(args.graph).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise StageError("export-graph", f"cannot read graph {args.graph}: {exc}") from None
        name = Path(args.graph).stem
    else:
        if args.candidate is None:
            raise StageError("export-graph", "--log needs --candidate")
        matches = [r for r in _read_log(args.log) if r.candidate_id == args.candidate]
        if not matches or matches[0].graph is None:
            raise StageError("export-graph", f"candidate {args.candidate} has no fusion graph in {args.log}")
        graph = F.FusionGraph.from_dict(matches[0].graph)
        name = f"cand_{args.candidate}"
    text = F.graph_to_dot(graph, name)
    if args.dot == "-":
        sys.stdout.write(text)
        return
    path = Path(args.dot) if args.dot else out / "graphs" / f"{name}.dot"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-lut": cmd_gen_lut,
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "ablate": cmd_ablate,
    "export-front": cmd_export_front,
    "export-graph": cmd_export_graph,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmnas", description="Two-tier hardware-aware multimodal search.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write the synthetic train/val/test splits",
        "gen-lut": "write a synthetic device LUT",
        "train-supernet": "train one elastic supernet per modality",
        "search": "run the evolutionary search and export the front",
        "ablate": "run ablation rows or the single-operator sweep",
        "export-front": "rank a run log and write the front CSV",
        "export-graph": "write a fusion graph as DOT",
    }
    subs = {}
    for name, text in helps.items():
        subs[name] = sub.add_parser(name, help=text, description=text)
        _add_config_flags(subs[name])
    subs["gen-lut"].add_argument("--path", help="output file (default <out>/lut_<device>.json)")
    for name in ("train-supernet", "search", "ablate"):
        subs[name].add_argument("--data", help="dataset directory (default <out>/data, generated if absent)")
    for name in ("search", "ablate"):
        subs[name].add_argument("--supernets", help="checkpoint (default <out>/supernets.npz, trained if absent)")
    subs["ablate"].add_argument("--mode", default="all", choices=ABLATE_CHOICES)
    subs["export-front"].add_argument("--log", required=True)
    subs["export-front"].add_argument("--csv", help="output CSV, '-' for stdout (default <out>/front.csv)")
    subs["export-graph"].add_argument("--graph", help="fusion graph JSON")
    subs["export-graph"].add_argument("--log", help="run log to take the graph from")
    subs["export-graph"].add_argument("--candidate", type=int)
    subs["export-graph"].add_argument("--dot", help="output DOT, '-' for stdout")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = output_dir(args)
        COMMANDS[args.command](args, cfg, out)
    except StageError as exc:
        print(f"mmnas {args.command}: {exc.stage}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, LUTFormatError, MissingCostError) as exc:
        print(f"mmnas {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
