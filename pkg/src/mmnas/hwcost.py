"""Device lookup tables and the latency/energy cost models built on them.

Backbone cost is additive over active layers; multimodal cost follows a
sequential pipeline (all backbones, then every fusion node). The relaxed
fusion cost is the softmax(gamma)-weighted expectation of per-operator LUT
entries, differentiable in gamma.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .searchspace import FUSION_OPS, BackboneGenome, FusionMacroConfig, MultimodalGenome, SearchSpace
from .tensor import Tensor

LUT_VERSION = 1
METRICS = ("latency", "energy")

LayerKey = tuple[int, int, int, int]  # (block, slot, kernel, expand)


class MissingCostError(KeyError):
    """A cost lookup hit a key the LUT does not contain."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing LUT entry"


class LUTFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceLUT:
    device: str
    layer_costs: Mapping[LayerKey, tuple[float, float]]
    fusion_costs: Mapping[str, tuple[float, float]]
    overheads: tuple[float, float] = (0.0, 0.0)
    version: int = LUT_VERSION

    def layer(self, block: int, slot: int, k: int, e: int) -> tuple[float, float]:
        key = (block, slot, k, e)
        try:
            return self.layer_costs[key]
        except KeyError:
            raise MissingCostError(f"{self.device}: no layer cost for (block={block}, slot={slot}, k={k}, e={e})") from None

    def fusion(self, op: str) -> tuple[float, float]:
        try:
            return self.fusion_costs[op]
        except KeyError:
            raise MissingCostError(f"{self.device}: no fusion cost for operator {op!r}") from None

    def fusion_vector(self, metric: str) -> np.ndarray:
        col = _metric_column(metric)
        return np.array([self.fusion(op)[col] for op in FUSION_OPS])


def _metric_column(metric: str) -> int:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return METRICS.index(metric)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------
def validate_lut(lut: DeviceLUT, space: SearchSpace | None = None) -> None:
    """Reject LUTs with non-positive costs or holes in their layer grid."""
    for key, cost in itertools.chain(lut.layer_costs.items(), lut.fusion_costs.items()):
        if len(cost) != 2 or not all(np.isfinite(c) and c > 0 for c in cost):
            raise LUTFormatError(f"cost for {key} must be two positive finite numbers, got {cost}")
    if not all(c >= 0 and np.isfinite(c) for c in lut.overheads):
        raise LUTFormatError(f"overheads must be finite and >= 0, got {lut.overheads}")
    missing_ops = [op for op in FUSION_OPS if op not in lut.fusion_costs]
    if missing_ops:
        raise LUTFormatError(f"LUT {lut.device!r} lacks fusion operators {missing_ops}")
    unknown = [op for op in lut.fusion_costs if op not in FUSION_OPS]
    if unknown:
        raise LUTFormatError(f"unknown fusion operators {unknown}")
    if not lut.layer_costs:
        if space is not None and space.n_blocks > 0:
            raise LUTFormatError("LUT has no layer costs")
        return
    keys = list(lut.layer_costs)
    blocks = range(max(k[0] for k in keys) + 1)
    slots = range(max(k[1] for k in keys) + 1)
    kernels = sorted({k[2] for k in keys})
    expands = sorted({k[3] for k in keys})
    if space is not None:
        blocks = range(max(len(blocks), space.n_blocks))
        slots = range(max(len(slots), space.max_depth))
        kernels = sorted(set(kernels) | set(space.kernels))
        expands = sorted(set(expands) | set(space.expands))
    for key in itertools.product(blocks, slots, kernels, expands):
        if key not in lut.layer_costs:
            raise LUTFormatError(f"LUT {lut.device!r} is incomplete: missing layer entry {key}")


# ---------------------------------------------------------------------------
# cost models
# ---------------------------------------------------------------------------
def backbone_cost(genome: BackboneGenome, lut: DeviceLUT) -> tuple[float, float]:
    lat, en = lut.overheads
    for j, block in enumerate(genome.blocks):
        for slot in range(block.depth):
            dl, de = lut.layer(j, slot, block.kernels[slot], block.expands[slot])
            lat += dl
            en += de
    return float(lat), float(en)


def fusion_ops_cost(ops: Iterable[str], lut: DeviceLUT) -> tuple[float, float]:
    lat = en = 0.0
    for op in ops:
        dl, de = lut.fusion(op)
        lat += dl
        en += de
    return lat, en


def candidate_cost(genome: MultimodalGenome, ops: Sequence[str], lut: DeviceLUT) -> tuple[float, float]:
    """Sequential-pipeline cost: every backbone plus every chosen fusion node."""
    lat = en = 0.0
    for g in genome.backbones:
        dl, de = backbone_cost(g, lut)
        lat += dl
        en += de
    fl, fe = fusion_ops_cost(ops, lut)
    return lat + fl, en + fe


def dense_fusion_cost(macro: FusionMacroConfig, lut: DeviceLUT) -> tuple[float, float]:
    """Cost of a fusion network that evaluates all operators at every node."""
    lat, en = fusion_ops_cost(FUSION_OPS, lut)
    n = macro.cells * macro.nodes
    return n * lat, n * en


def fusion_relaxed_cost(gamma: Tensor, macro: FusionMacroConfig, lut: DeviceLUT, metric: str) -> Tensor:
    """Expected fusion cost ``sum_{p,d} softmax(gamma[p, d]) . LUT(ops, metric)``.

    ``gamma`` has shape (cells, nodes, n_ops); the result is a scalar tensor.
    """
    expected = (macro.cells, macro.nodes, len(FUSION_OPS))
    if tuple(gamma.shape) != expected:
        raise ValueError(f"gamma shape {gamma.shape} != {expected}")
    costs = Tensor(lut.fusion_vector(metric))
    per_node = T.tsum(T.mul(T.softmax(gamma, axis=-1), costs), axis=-1)
    # accumulate nodes one by one, in the order fusion_ops_cost visits them
    total = None
    for p in range(macro.cells):
        for d in range(macro.nodes):
            term = T.getitem(per_node, (p, d))
            total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# synthetic devices
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DeviceProfile:
    name: str
    latency_scale: float
    energy_scale: float


PROFILES = {
    "fast-gpu": DeviceProfile("fast-gpu", latency_scale=1.0, energy_scale=3.0),
    "slow-edge": DeviceProfile("slow-edge", latency_scale=2.2, energy_scale=1.0),
}

# relative per-node operator cost (latency, energy); cheap additive ops first
FUSION_BASE = {
    "Sum": (0.05, 0.04),
    "SqueezeExcitation": (0.12, 0.10),
    "LinearGLU": (0.25, 0.22),
    "ConcatFC": (0.30, 0.26),
    "ConcatMish": (0.40, 0.36),
    "ScaleDotAttn": (0.45, 0.40),
}
LAYER_BASE_MS = 0.05
OVERHEAD_BASE = (0.10, 0.08)


def synth_device(seed: int, profile: str | DeviceProfile, space: SearchSpace | None = None) -> DeviceLUT:
    """Deterministic complete LUT for ``space``.

    Layer cost grows with expand ratio (linearly) and kernel width; one
    jitter factor per (block, slot) keeps costs strictly monotone in k and e.
    Jitter depends only on ``seed``, so profiles differ by their scales alone.
    """
    space = space or SearchSpace()
    if isinstance(profile, str):
        if profile not in PROFILES:
            raise ValueError(f"unknown device profile {profile!r}; choose from {sorted(PROFILES)}")
        profile = PROFILES[profile]
    rng = np.random.default_rng(seed)
    kmin, emin = min(space.kernels), min(space.expands)
    layers: dict[LayerKey, tuple[float, float]] = {}
    for j in range(space.n_blocks):
        for slot in range(space.max_depth):
            jit_l, jit_e = rng.uniform(0.85, 1.15, size=2)
            for k in space.kernels:
                for e in space.expands:
                    work = (e / emin) * (0.6 + 0.4 * k / kmin)
                    lat = LAYER_BASE_MS * work * jit_l * (1.0 + 0.1 * j)
                    en = LAYER_BASE_MS * work * jit_e * (1.0 + 0.05 * j)
                    layers[(j, slot, k, e)] = (lat * profile.latency_scale, en * profile.energy_scale)
    fusion = {}
    for op in FUSION_OPS:
        jl, je = rng.uniform(0.9, 1.1, size=2)
        bl, be = FUSION_BASE[op]
        fusion[op] = (bl * jl * profile.latency_scale, be * je * profile.energy_scale)
    overheads = (OVERHEAD_BASE[0] * profile.latency_scale, OVERHEAD_BASE[1] * profile.energy_scale)
    lut = DeviceLUT(profile.name, layers, fusion, overheads)
    validate_lut(lut, space)
    return lut


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
def lut_to_dict(lut: DeviceLUT) -> dict:
    return {
        "device": lut.device,
        "version": lut.version,
        "overheads": {"lat_ms": lut.overheads[0], "ergy_mj": lut.overheads[1]},
        "layer_costs": [
            {"block": b, "slot": s, "k": k, "e": e, "lat_ms": c[0], "ergy_mj": c[1]}
            for (b, s, k, e), c in sorted(lut.layer_costs.items())
        ],
        "fusion_costs": [
            {"op": op, "lat_ms": lut.fusion_costs[op][0], "ergy_mj": lut.fusion_costs[op][1]}
            for op in FUSION_OPS
            if op in lut.fusion_costs
        ],
    }


def lut_from_dict(d: dict) -> DeviceLUT:
    expected = {"device", "version", "overheads", "layer_costs", "fusion_costs"}
    if set(d) != expected:
        raise LUTFormatError(f"LUT keys must be exactly {sorted(expected)}, got {sorted(d)}")
    if d["version"] != LUT_VERSION:
        raise LUTFormatError(f"unsupported LUT version {d['version']}")
    try:
        layers = {}
        for row in d["layer_costs"]:
            key = (int(row["block"]), int(row["slot"]), int(row["k"]), int(row["e"]))
            if key in layers:
                raise LUTFormatError(f"duplicate layer entry {key}")
            layers[key] = (float(row["lat_ms"]), float(row["ergy_mj"]))
        fusion = {}
        for row in d["fusion_costs"]:
            if row["op"] in fusion:
                raise LUTFormatError(f"duplicate fusion entry {row['op']}")
            fusion[str(row["op"])] = (float(row["lat_ms"]), float(row["ergy_mj"]))
        over = (float(d["overheads"]["lat_ms"]), float(d["overheads"]["ergy_mj"]))
    except (KeyError, TypeError) as exc:
        raise LUTFormatError(f"malformed LUT entry: {exc!r}") from None
    return DeviceLUT(str(d["device"]), layers, fusion, over, int(d["version"]))


def save_lut(lut: DeviceLUT, path: str | os.PathLike) -> None:
    text = json.dumps(lut_to_dict(lut), indent=1)
    Path(path).write_text(text + "\n")


def load_lut(path: str | os.PathLike, space: SearchSpace | None = None) -> DeviceLUT:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LUTFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise LUTFormatError(f"{path}: top level must be an object")
    lut = lut_from_dict(d)
    validate_lut(lut, space)
    return lut
