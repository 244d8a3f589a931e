"""Two-tier search loop.

Each generation:

1. first stage: score every backbone of every modality on (val accuracy,
   latency, energy) and keep the top ``select_fraction`` per modality;
2. second stage: pair the kept backbones across modalities by rank, search a
   fusion network for each pair and score the discrete result;
3. the best ``elite_fraction`` of the multimodal candidates survive and seed
   crossover and mutation for the next population.

Every multimodal evaluation is appended to a JSON-lines log as soon as it
finishes. The returned front is taken over everything ever evaluated.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import fusion as F
from .config import RunConfig
from .data import MultimodalDataset, SyntheticTaskSpec, generate
from .hwcost import DeviceLUT, backbone_cost, candidate_cost, dense_fusion_cost, load_lut, synth_device
from .moo import DIRECTIONS, crowding_distance, eval_order, non_dominated_sort, select_fraction
from .searchspace import (
    FUSION_OPS,
    BackboneGenome,
    FusionMacroConfig,
    MultimodalGenome,
    crossover,
    decode,
    encode,
    max_subnet,
    mutate,
    mutate_macro,
    sample_macro,
    sample_uniform,
)
from .supernet import (
    ElasticSupernet,
    SamplingPolicy,
    TrainSettings,
    build_supernets,
    evaluate_subnet,
    extract_features,
    train_supernet,
)

ABLATION_MODES = ("FB+FF", "FB+SF", "SB+SF", "SB+SF+HW")


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------
@dataclass
class SearchContext:
    """Everything a search reads but never modifies."""

    config: RunConfig
    dataset: MultimodalDataset
    supernets: dict[str, ElasticSupernet]
    lut: DeviceLUT

    @property
    def space(self):
        return self.config.search_space()

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.config.modalities)


def task_spec(config: RunConfig) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        n_train=config.n_train,
        n_val=config.n_val,
        n_test=config.n_test,
        length=config.length,
        sigma=config.sigma,
        modalities=tuple(config.modalities),
    )


def make_lut(config: RunConfig) -> DeviceLUT:
    if config.lut_path is not None:
        return load_lut(config.lut_path, config.search_space())
    return synth_device(config.lut_seed, config.device, config.search_space())


def train_supernets(
    config: RunConfig, dataset: MultimodalDataset, traces: dict[str, list[float]] | None = None
) -> dict[str, ElasticSupernet]:
    """Sandwich-train one supernet per modality. Epoch losses go into ``traces`` if given."""
    space = config.search_space()
    nets = build_supernets(dataset.modalities, space, dataset.spec.channels, dataset.n_classes, config.base_channels, config.seed)
    policy = SamplingPolicy(n_random=config.n_random, kd_weight=config.kd_weight)
    for i, (m, net) in enumerate(nets.items()):
        settings = TrainSettings(
            batch_size=config.supernet_batch,
            lr=config.supernet_lr,
            min_lr=config.supernet_min_lr,
            weight_decay=config.weight_decay,
            seed=config.seed + i,
        )
        trace = train_supernet(net, dataset.train.x[m], dataset.train.y, config.supernet_epochs, policy, settings)
        if traces is not None:
            traces[m] = trace.epoch_losses
    return nets


def build_context(
    config: RunConfig,
    dataset: MultimodalDataset | None = None,
    supernets: dict[str, ElasticSupernet] | None = None,
    lut: DeviceLUT | None = None,
) -> SearchContext:
    config.validate()
    dataset = dataset if dataset is not None else generate(task_spec(config), config.seed)
    if tuple(dataset.modalities) != tuple(config.modalities):
        raise ValueError(f"dataset modalities {dataset.modalities} differ from config {config.modalities}")
    lut = lut if lut is not None else make_lut(config)
    supernets = supernets if supernets is not None else train_supernets(config, dataset)
    missing = [m for m in config.modalities if m not in supernets]
    if missing:
        raise ValueError(f"no supernet for modalities {missing}")
    return SearchContext(config, dataset, supernets, lut)


def candidate_seed(run_seed: int, candidate_id: int) -> int:
    return int(np.random.SeedSequence([run_seed, candidate_id]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------
@dataclass
class RunRecord:
    generation: int
    candidate_id: int
    genomes: dict[str, list[int]]
    macro: tuple[int, int]
    unimodal: dict[str, dict[str, float]]
    acc: float
    test_acc: float
    lat_ms: float
    ergy_mj: float
    ops: list[str]
    graph: dict | None
    seed: int
    cached: bool = False

    @property
    def objectives(self) -> tuple[float, float, float]:
        return (self.acc, self.lat_ms, self.ergy_mj)

    def genome(self, config: RunConfig) -> MultimodalGenome:
        space = config.search_space()
        return MultimodalGenome(
            tuple(decode(self.genomes[m], space, m) for m in config.modalities), FusionMacroConfig(*self.macro)
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["macro"] = list(self.macro)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        d = dict(d)
        d["macro"] = tuple(d["macro"])
        return cls(**d)


def read_log(path: str | os.PathLike) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(RunRecord.from_dict(json.loads(line)))
    return out


@dataclass
class FrontMember:
    record: RunRecord
    rank: int
    crowding: float


def pareto_front(records: Sequence[RunRecord]) -> list[FrontMember]:
    """Non-dominated records in eval-score order (crowding within the front)."""
    if not records:
        return []
    values = np.array([r.objectives for r in records])
    first = non_dominated_sort(values, DIRECTIONS)[0]
    crowd = crowding_distance(values[first])
    members = [FrontMember(records[i], 0, float(c)) for i, c in zip(first, crowd)]
    return sorted(members, key=lambda m: (-m.crowding, m.record.candidate_id))


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------
@dataclass
class Population:
    generation: int
    members: list[MultimodalGenome]

    def __len__(self) -> int:
        return len(self.members)

    def backbones(self, modality: str) -> list[BackboneGenome]:
        return [m.backbone(modality) for m in self.members]


def initial_population(config: RunConfig, rng: np.random.Generator) -> Population:
    space, fspace = config.search_space(), config.fusion_space()
    members = []
    for _ in range(config.population):
        backbones = tuple(sample_uniform(space, rng, m) for m in config.modalities)
        members.append(MultimodalGenome(backbones, sample_macro(fspace, rng)))
    return Population(0, members)


# ---------------------------------------------------------------------------
# first stage
# ---------------------------------------------------------------------------
@dataclass
class UnimodalScore:
    acc: float
    test_acc: float
    lat_ms: float
    ergy_mj: float


@dataclass
class FirstStageResult:
    scores: dict[str, list[UnimodalScore]]
    order: dict[str, list[int]]
    selected: dict[str, list[int]]


def run_first_stage(population: Population, ctx: SearchContext) -> FirstStageResult:
    """Score every backbone per modality and keep the top fraction by eval order."""
    if len(population) == 0:
        raise ValueError("empty population")
    ds, cfg = ctx.dataset, ctx.config
    scores, orders, selected = {}, {}, {}
    for m in ctx.modalities:
        net = ctx.supernets[m]
        rows = []
        memo: dict[BackboneGenome, UnimodalScore] = {}
        for g in population.backbones(m):
            if g not in memo:
                lat, en = backbone_cost(g, ctx.lut)
                memo[g] = UnimodalScore(
                    evaluate_subnet(net, g, ds.val.x[m], ds.val.y),
                    evaluate_subnet(net, g, ds.test.x[m], ds.test.y),
                    lat,
                    en,
                )
            rows.append(memo[g])
        values = np.array([(s.acc, s.lat_ms, s.ergy_mj) for s in rows])
        order = eval_order(values, DIRECTIONS)
        scores[m] = rows
        orders[m] = order
        selected[m] = select_fraction(order, cfg.select_fraction)
    return FirstStageResult(scores, orders, selected)


def pair_candidates(
    first: FirstStageResult, population: Population, config: RunConfig, rng: np.random.Generator
) -> list[tuple[MultimodalGenome, dict[str, int]]]:
    """Combine per-modality selections into multimodal candidates.

    Rank pairing matches the i-th best of each modality; random pairing
    shuffles the second modality. The fusion macro comes from the first
    modality's population member.
    """
    m1, m2 = config.modalities
    s1 = list(first.selected[m1])
    s2 = list(first.selected[m2])
    if config.pairing == "random":
        s2 = [s2[i] for i in rng.permutation(len(s2))]
    out = []
    for i, j in zip(s1, s2):
        genome = MultimodalGenome(
            (population.members[i].backbone(m1), population.members[j].backbone(m2)), population.members[i].macro
        )
        out.append((genome, {m1: i, m2: j}))
    return out


# ---------------------------------------------------------------------------
# second stage
# ---------------------------------------------------------------------------
@dataclass
class FusionOutcome:
    acc: float
    test_acc: float
    lat_ms: float
    ergy_mj: float
    ops: list[str]
    graph: F.FusionGraph | None


def candidate_features(
    genome: MultimodalGenome, ctx: SearchContext, split: str
) -> tuple[list[np.ndarray], list[F.SourceSpec]]:
    """Frozen block outputs of every backbone, in source order."""
    feats, sources = [], []
    data = ctx.dataset.split(split)
    for g in genome.backbones:
        maps, _ = extract_features(ctx.supernets[g.modality], g, data.x[g.modality])
        for fm in maps:
            feats.append(fm.values)
            sources.append(F.SourceSpec(g.modality, fm.source[1], fm.values.shape[1]))
    return feats, sources


def fusion_settings(config: RunConfig, seed: int) -> F.FusionTrainSettings:
    return F.FusionTrainSettings(
        batch_size=config.fusion_batch,
        lr=config.fusion_lr,
        min_lr=config.fusion_min_lr,
        arch_lr=config.arch_lr,
        arch_min_lr=config.arch_min_lr,
        weight_decay=config.weight_decay,
        gate_budget=config.gate_budget,
        final_gate_temperature=config.final_gate_temperature,
        seed=seed,
    )


def search_fusion(
    genome: MultimodalGenome,
    ctx: SearchContext,
    exponents: tuple[float, float, float],
    seed: int,
    dense: bool = False,
    fixed_op: str | None = None,
) -> FusionOutcome:
    """Train a fusion hypernet on frozen backbone features and score the result.

    ``dense`` keeps every input gate on Identity and gamma uniform, and scores
    the hypernet itself. Otherwise the hypernet is discretized (and optionally
    fine-tuned) and the discrete graph is scored.
    """
    cfg = ctx.config
    ds = ctx.dataset
    train_f, sources = candidate_features(genome, ctx, "train")
    val_f, _ = candidate_features(genome, ctx, "val")
    test_f, _ = candidate_features(genome, ctx, "test")
    hyper = F.FusionHypernet(
        sources,
        genome.macro,
        width=cfg.fusion_width,
        n_classes=ds.n_classes,
        seed=seed,
        fixed_gates=dense,
        fixed_op=fixed_op,
        frozen_gamma=dense,
        arch_init_std=cfg.arch_init_std,
    )
    settings = fusion_settings(cfg, seed)
    F.train_fusion(hyper, train_f, ds.train.y, cfg.fusion_epochs, ctx.lut, tuple(exponents), settings)
    if dense:
        lat_b = en_b = 0.0
        for g in genome.backbones:
            dl, de = backbone_cost(g, ctx.lut)
            lat_b, en_b = lat_b + dl, en_b + de
        fl, fe = dense_fusion_cost(genome.macro, ctx.lut)
        ops = list(FUSION_OPS) * (genome.macro.cells * genome.macro.nodes)
        return FusionOutcome(
            F.hypernet_accuracy(hyper, val_f, ds.val.y),
            F.hypernet_accuracy(hyper, test_f, ds.test.y),
            lat_b + fl,
            en_b + fe,
            ops,
            None,
        )
    graph = F.discretize(hyper)
    if cfg.finetune_epochs > 0:
        F.finetune_graph(graph, train_f, ds.train.y, cfg.finetune_epochs, settings)
    lat, en = candidate_cost(genome, graph.ops(), ctx.lut)
    return FusionOutcome(
        F.graph_accuracy(graph, val_f, ds.val.y),
        F.graph_accuracy(graph, test_f, ds.test.y),
        lat,
        en,
        graph.ops(),
        graph,
    )


def _genome_key(genome: MultimodalGenome) -> tuple:
    return tuple(tuple(encode(g)) for g in genome.backbones) + ((genome.macro.cells, genome.macro.nodes),)


def run_second_stage(
    pairs: Sequence[tuple[MultimodalGenome, dict[str, int]]],
    first: FirstStageResult,
    ctx: SearchContext,
    exponents: tuple[float, float, float],
    generation: int,
    first_id: int,
    log: IO[str] | None = None,
    cache: dict | None = None,
) -> list[RunRecord]:
    """Fusion search for every pair; one record per pair, ids ``first_id, first_id + 1, ...``."""
    if not pairs:
        raise ValueError("second stage needs at least one candidate pair")
    records = []
    for k, (genome, members) in enumerate(pairs):
        cid = first_id + k
        seed = candidate_seed(ctx.config.seed, cid)
        key = _genome_key(genome)
        cached = cache is not None and key in cache
        if cached:
            outcome = cache[key]
        else:
            outcome = search_fusion(genome, ctx, exponents, seed)
            if cache is not None:
                cache[key] = outcome
        unimodal = {m: {k: float(v) for k, v in asdict(first.scores[m][i]).items()} for m, i in members.items()}
        rec = RunRecord(
            generation=generation,
            candidate_id=cid,
            genomes={g.modality: encode(g) for g in genome.backbones},
            macro=(genome.macro.cells, genome.macro.nodes),
            unimodal=unimodal,
            acc=float(outcome.acc),
            test_acc=float(outcome.test_acc),
            lat_ms=float(outcome.lat_ms),
            ergy_mj=float(outcome.ergy_mj),
            ops=list(outcome.ops),
            graph=outcome.graph.to_dict(with_params=False) if outcome.graph is not None else None,
            seed=seed,
            cached=cached,
        )
        records.append(rec)
        if log is not None:
            log.write(rec.to_json() + "\n")
            log.flush()
    return records


# ---------------------------------------------------------------------------
# next generation
# ---------------------------------------------------------------------------
def select_elites(records: Sequence[RunRecord], fraction: float) -> list[RunRecord]:
    order = eval_order([r.objectives for r in records], DIRECTIONS, [r.candidate_id for r in records])
    return select_fraction([records[i] for i in order], fraction)


def next_generation(
    records: Sequence[RunRecord], population: Population, rng: np.random.Generator, config: RunConfig
) -> Population:
    """Elites survive unchanged; offspring of elite pairs refill the population."""
    if not records:
        raise ValueError("cannot breed from an empty set of multimodal candidates")
    space, fspace = config.search_space(), config.fusion_space()
    elites = [r.genome(config) for r in select_elites(records, config.elite_fraction)]
    size = len(population)
    members = list(elites[:size])
    while len(members) < size:
        a, b = (elites[int(i)] for i in rng.integers(len(elites), size=2))
        kids: list[list[BackboneGenome]] = [[], []]
        for m in config.modalities:
            ca, cb = crossover(a.backbone(m), b.backbone(m), config.p_cross, rng)
            kids[0].append(mutate(ca, config.p_mut, rng, space))
            kids[1].append(mutate(cb, config.p_mut, rng, space))
        macros = [a.macro, b.macro]
        if rng.random() < config.p_cross:
            macros.reverse()
        for backbones, macro in zip(kids, macros):
            if len(members) < size:
                members.append(MultimodalGenome(tuple(backbones), mutate_macro(macro, config.p_mut, rng, fspace)))
    return Population(population.generation + 1, members)


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------
@dataclass
class RunResult:
    front: list[FrontMember]
    records: list[RunRecord]
    populations: list[Population] = field(default_factory=list)


def run(
    ctx: SearchContext,
    log_path: str | os.PathLike | None = None,
    exponents: tuple[float, float, float] | None = None,
) -> RunResult:
    """Iterate first stage, second stage and breeding for the configured budget."""
    cfg = ctx.config
    exponents = tuple(cfg.exponents if exponents is None else exponents)
    rng = np.random.default_rng(cfg.seed)
    records: list[RunRecord] = []
    populations: list[Population] = []
    cache: dict | None = {} if cfg.cache_second_stage else None
    log = open(log_path, "w") if log_path is not None else None
    try:
        if cfg.generations > 0:
            population = initial_population(cfg, rng)
        for g in range(cfg.generations):
            populations.append(population)
            first = run_first_stage(population, ctx)
            pairs = pair_candidates(first, population, cfg, rng)
            gen_records = run_second_stage(pairs, first, ctx, exponents, g, len(records), log, cache)
            records.extend(gen_records)
            if g + 1 < cfg.generations:
                population = next_generation(gen_records, population, rng, cfg)
    finally:
        if log is not None:
            log.close()
    return RunResult(pareto_front(records), records, populations)


def cumulative_fronts(records: Sequence[RunRecord]) -> list[list[RunRecord]]:
    """Front of the archive after each generation."""
    out = []
    gens = sorted({r.generation for r in records})
    for g in gens:
        out.append([m.record for m in pareto_front([r for r in records if r.generation <= g])])
    return out


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------
@dataclass
class AblationRow:
    mode: str
    acc: float
    test_acc: float
    lat_ms: float
    ergy_mj: float
    macro: tuple[int, int]
    ops: list[str]
    generations: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro"] = list(self.macro)
        return d


def _fixed_backbone_genome(ctx: SearchContext) -> MultimodalGenome:
    cfg = ctx.config
    return MultimodalGenome(
        tuple(max_subnet(ctx.space, m) for m in cfg.modalities), FusionMacroConfig(cfg.ablation_cells, cfg.ablation_nodes)
    )


def hardware_exponents(config: RunConfig) -> tuple[float, float, float]:
    a, b, c = config.exponents
    return (a, b if b > 0 else 1.0, c if c > 0 else 1.0)


def accuracy_exponents(config: RunConfig) -> tuple[float, float, float]:
    return (config.exponents[0], 0.0, 0.0)


def representative(front: Sequence[FrontMember], tolerance: float) -> FrontMember:
    """Lowest-latency front member within ``tolerance`` of the best front accuracy."""
    if not front:
        raise ValueError("empty front")
    best = max(m.record.acc for m in front)
    ok = [m for m in front if m.record.acc >= best - tolerance]
    return min(ok, key=lambda m: (m.record.lat_ms, -m.record.acc, m.record.candidate_id))


def ablation_run(mode: str, ctx: SearchContext, log_path: str | os.PathLike | None = None) -> AblationRow:
    """One row of the progressive ablation.

    FB fixes both backbones to the max subnet, FF uses the dense fixed fusion,
    SF searches the fusion, SB runs the evolutionary backbone search and +HW
    turns the hardware loss terms on.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    cfg = ctx.config
    seed = candidate_seed(cfg.seed, 0)
    if mode.startswith("FB"):
        genome = _fixed_backbone_genome(ctx)
        out = search_fusion(genome, ctx, accuracy_exponents(cfg), seed, dense=(mode == "FB+FF"))
        return AblationRow(mode, out.acc, out.test_acc, out.lat_ms, out.ergy_mj, (genome.macro.cells, genome.macro.nodes), out.ops, 0)
    exps = hardware_exponents(cfg) if mode.endswith("+HW") else accuracy_exponents(cfg)
    result = run(ctx, log_path, exps)
    rec = representative(result.front, cfg.ablation_acc_tolerance).record
    return AblationRow(mode, rec.acc, rec.test_acc, rec.lat_ms, rec.ergy_mj, rec.macro, rec.ops, cfg.generations)


def operator_sweep(ctx: SearchContext) -> list[AblationRow]:
    """Fixed backbones and macro; one row per single fusion operator plus the searched mix."""
    cfg = ctx.config
    genome = _fixed_backbone_genome(ctx)
    seed = candidate_seed(cfg.seed, 0)
    exps = accuracy_exponents(cfg)
    macro = (genome.macro.cells, genome.macro.nodes)
    rows = []
    for op in FUSION_OPS:
        out = search_fusion(genome, ctx, exps, seed, fixed_op=op)
        rows.append(AblationRow(op, out.acc, out.test_acc, out.lat_ms, out.ergy_mj, macro, out.ops, 0))
    out = search_fusion(genome, ctx, exps, seed)
    rows.append(AblationRow("searchable", out.acc, out.test_acc, out.lat_ms, out.ergy_mj, macro, out.ops, 0))
    return rows


def write_jsonl(rows: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
