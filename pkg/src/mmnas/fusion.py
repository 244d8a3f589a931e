"""Fusion operators, the relaxed fusion hypernetwork and its discretization.

Layout of a fusion network with ``C`` cells of ``D`` nodes:

* every tapped backbone block output is projected by a 1x1 conv to a common
  width ``C_f``;
* cell ``p`` picks two inputs (X, Y) from the projected block outputs and the
  outputs of cells ``< p``;
* node ``d`` of a cell picks two inputs from ``[X, Y, node_0 .. node_{d-1}]``
  and applies one fusion operator;
* a cell outputs its last node; the last cell feeds a mean-pool + linear head.

In the relaxed hypernet each input slot is a gated mixture over candidates
(Identity/Zero gates, softmax per candidate) and each node mixes all six
operators by softmax(gamma). :func:`discretize` turns that into a
:class:`FusionGraph` with single inputs and single operators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .hwcost import DeviceLUT, fusion_relaxed_cost
from .optim import Adam, CosineSchedule, cosine_lr
from .searchspace import FUSION_OPS, FusionMacroConfig
from .tensor import Tensor

TASK_LOSS_FLOOR = 1e-12
SATURATION_LOGIT = 50.0

_OP_PARAM_SHAPES = {
    "Sum": {},
    "ScaleDotAttn": {},
    "LinearGLU": {"w1": "cc", "w2": "cc"},
    "ConcatFC": {"w": "c2c", "b": "c"},
    "SqueezeExcitation": {"w": "cc", "b": "c"},
    "ConcatMish": {"w1": "cc", "w2": "cc", "wp": "c2c", "bp": "c"},
}


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------
def init_op_params(kind: str, width: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if kind not in _OP_PARAM_SHAPES:
        raise ValueError(f"unknown fusion operator {kind!r}")
    params = {}
    for name, shape in _OP_PARAM_SHAPES[kind].items():
        if shape == "cc":
            arr = rng.standard_normal((width, width)) / np.sqrt(width)
        elif shape == "c2c":
            arr = rng.standard_normal((width, 2 * width)) / np.sqrt(2 * width)
        else:
            arr = np.zeros(width)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def _channel_linear(w: Tensor, x: Tensor) -> Tensor:
    return T.channel_linear(w, x)


def _col(b: Tensor) -> Tensor:
    return T.reshape(b, (b.shape[0], 1))


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each sample of (B, C, L) to unit root-mean-square (no learnable affine)."""
    ms = T.mean(T.mul(x, x), axis=(1, 2), keepdims=True)
    return T.mul(x, T.power(T.add(ms, eps), -0.5))


def project_source(w: Tensor, b: Tensor, f: Tensor) -> Tensor:
    """1x1 projection to the fusion width followed by RMS normalization.

    Normalizing removes the projection's freedom to rescale a source, so the
    input gates alone decide how much each candidate contributes.
    """
    return rms_normalize(T.add(_channel_linear(w, f), _col(b)))


def apply_fusion_op(kind: str, x: Tensor, y: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Fuse two (B, C, L) tensors into one (B, C, L) tensor with operator ``kind``."""
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError(f"fusion inputs must share a (B, C, L) shape, got {x.shape} and {y.shape}")
    if kind not in _OP_PARAM_SHAPES:
        raise ValueError(f"unknown fusion operator {kind!r}")
    if set(params) != set(_OP_PARAM_SHAPES[kind]):
        raise ValueError(f"{kind} expects parameters {sorted(_OP_PARAM_SHAPES[kind])}, got {sorted(params)}")
    c = x.shape[1]
    if kind == "Sum":
        return T.add(x, y)
    if kind == "ScaleDotAttn":
        # queries from X, keys and values from Y, attention over the length axis
        scores = T.scale(T.matmul(T.swapaxes(x, 1, 2), y), 1.0 / math.sqrt(c))
        attn = T.softmax(scores, axis=-1)
        return T.swapaxes(T.matmul(attn, T.swapaxes(y, 1, 2)), 1, 2)
    if kind == "LinearGLU":
        return T.mul(_channel_linear(params["w1"], x), T.sigmoid(_channel_linear(params["w2"], y)))
    if kind == "ConcatFC":
        z = T.concat([x, y], axis=1)
        return T.relu(T.add(_channel_linear(params["w"], z), _col(params["b"])))
    if kind == "SqueezeExcitation":
        squeeze = T.mean(x, axis=2)
        excite = T.sigmoid(T.add(T.matmul(squeeze, T.transpose(params["w"])), params["b"]))
        return T.mul(T.reshape(excite, (excite.shape[0], c, 1)), y)
    # ConcatMish
    z = T.concat([_channel_linear(params["w1"], x), _channel_linear(params["w2"], y)], axis=1)
    return T.add(_channel_linear(params["wp"], T.mish(z)), _col(params["bp"]))


# ---------------------------------------------------------------------------
# relaxed selection
# ---------------------------------------------------------------------------
def identity_probabilities(gates: Tensor) -> Tensor:
    """Softmax over the (Identity, Zero) gates of each candidate -> P(Identity)."""
    return T.getitem(T.softmax(gates, axis=-1), (Ellipsis, 0))


def relaxed_cell_input(gates: Tensor, candidates: Sequence[Tensor]) -> Tensor:
    """Gated mixture ``sum_k P_k(Identity) * c_k + P_k(Zero) * 0`` over candidates.

    ``gates`` is (n_candidates, 2) for one input slot.
    """
    if gates.shape != (len(candidates), 2):
        raise ValueError(f"gate matrix {gates.shape} does not match {len(candidates)} candidates")
    shapes = {c.shape for c in candidates}
    if len(shapes) != 1:
        raise ValueError(f"candidates disagree in shape: {sorted(shapes)}")
    return T.stack_weighted(identity_probabilities(gates), candidates)


def relaxed_op_mixture(gamma_row: Tensor, x: Tensor, y: Tensor, params: dict[str, dict[str, Tensor]]) -> Tensor:
    weights = T.softmax(gamma_row, axis=-1)
    outs = [apply_fusion_op(kind, x, y, params[kind]) for kind in FUSION_OPS]
    return T.stack_weighted(weights, outs)


def relaxed_node_forward(
    beta: Tensor, gamma_row: Tensor, candidates: Sequence[Tensor], params: dict[str, dict[str, Tensor]]
) -> Tensor:
    """One relaxed node: two beta-gated input mixtures, then the gamma-weighted operator mix.

    ``beta`` is (2, n_candidates, 2): one gate matrix per input slot.
    """
    if gamma_row.shape != (len(FUSION_OPS),):
        raise ValueError(f"gamma row must have {len(FUSION_OPS)} entries, got {gamma_row.shape}")
    x = relaxed_cell_input(T.getitem(beta, 0), candidates)
    y = relaxed_cell_input(T.getitem(beta, 1), candidates)
    return relaxed_op_mixture(gamma_row, x, y, params)


# ---------------------------------------------------------------------------
# hypernet
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SourceSpec:
    modality: str
    block: int
    channels: int


class FusionHypernet:
    """Relaxed fusion network over a fixed set of backbone feature sources.

    Args:
        sources: tapped backbone outputs, in candidate order.
        macro: number of cells and nodes per cell.
        width: common fusion channel width.
        fixed_gates: keep every input gate saturated on Identity and untrained
            (the dense fixed-fusion baseline).
        fixed_op: evaluate only this operator at every node and freeze gamma.
        frozen_gamma: keep gamma untrained at its initial (uniform) value.
        arch_init_std: spread of the initial gate logits. It must be large
            enough to break the symmetry between the X and Y slots, which
            otherwise receive identical gradients under symmetric operators.
    """

    def __init__(
        self,
        sources: Sequence[SourceSpec],
        macro: FusionMacroConfig,
        width: int = 8,
        n_classes: int = 4,
        seed: int = 0,
        fixed_gates: bool = False,
        fixed_op: str | None = None,
        frozen_gamma: bool = False,
        arch_init_std: float = 0.5,
    ):
        if not sources:
            raise ValueError("fusion needs at least one feature source")
        if fixed_op is not None and fixed_op not in FUSION_OPS:
            raise ValueError(f"unknown fusion operator {fixed_op!r}")
        self.sources = list(sources)
        self.macro = macro
        self.width = width
        self.n_classes = n_classes
        self.fixed_gates = fixed_gates
        self.fixed_op = fixed_op
        rng = np.random.default_rng(seed)
        n_src = len(self.sources)
        self.proj = [
            (
                Tensor(rng.standard_normal((width, s.channels)) / np.sqrt(s.channels), requires_grad=True),
                Tensor(np.zeros(width), requires_grad=True),
            )
            for s in self.sources
        ]
        gates_trainable = not fixed_gates

        def gate_init(n):
            if fixed_gates:
                arr = np.zeros((2, n, 2))
                arr[..., 0] = SATURATION_LOGIT
                return Tensor(arr)
            return Tensor(arch_init_std * rng.standard_normal((2, n, 2)), requires_grad=True)

        self.alpha = [gate_init(n_src + p) for p in range(macro.cells)]
        self.beta = [[gate_init(2 + d) for d in range(macro.nodes)] for _ in range(macro.cells)]
        gamma = np.zeros((macro.cells, macro.nodes, len(FUSION_OPS)))
        gamma_trainable = fixed_op is None and not frozen_gamma
        if fixed_op is not None:
            gamma[..., FUSION_OPS.index(fixed_op)] = SATURATION_LOGIT
        elif gamma_trainable:
            gamma += 1e-3 * rng.standard_normal(gamma.shape)
        self.gamma = Tensor(gamma, requires_grad=gamma_trainable)
        self.op_params = [
            [{kind: init_op_params(kind, width, rng) for kind in FUSION_OPS} for _ in range(macro.nodes)]
            for _ in range(macro.cells)
        ]
        self.head_w = Tensor(rng.standard_normal((n_classes, width)) / np.sqrt(width), requires_grad=True)
        self.head_b = Tensor(np.zeros(n_classes), requires_grad=True)
        self._gates_trainable = gates_trainable
        self.gate_temperature = 1.0

    # parameter groups ------------------------------------------------------
    def weight_parameters(self) -> list[Tensor]:
        out = [t for pair in self.proj for t in pair]
        for cell in self.op_params:
            for node in cell:
                for kind in FUSION_OPS:
                    if self.fixed_op is None or kind == self.fixed_op:
                        out.extend(node[kind].values())
        out += [self.head_w, self.head_b]
        return out

    def arch_parameters(self) -> list[Tensor]:
        out = []
        if self._gates_trainable:
            out += self.alpha
            out += [b for cell in self.beta for b in cell]
        if self.gamma.requires_grad:
            out.append(self.gamma)
        return out

    def parameters(self) -> list[Tensor]:
        return self.weight_parameters() + self.arch_parameters()

    # forward ---------------------------------------------------------------
    def _gates(self, gates: Tensor, slot: int) -> Tensor:
        g = T.getitem(gates, slot)
        if self.gate_temperature != 1.0:
            g = T.scale(g, 1.0 / self.gate_temperature)
        return g

    def project(self, features: Sequence[Tensor]) -> list[Tensor]:
        if len(features) != len(self.sources):
            raise ValueError(f"expected {len(self.sources)} feature maps, got {len(features)}")
        out = []
        for f, s, (w, b) in zip(features, self.sources, self.proj):
            if f.ndim != 3 or f.shape[1] != s.channels:
                raise ValueError(f"source {s.modality}/{s.block} expects {s.channels} channels, got {f.shape}")
            out.append(project_source(w, b, f))
        return out

    def _node(self, p: int, d: int, candidates: list[Tensor]) -> Tensor:
        beta = self.beta[p][d]
        x = relaxed_cell_input(self._gates(beta, 0), candidates)
        y = relaxed_cell_input(self._gates(beta, 1), candidates)
        if self.fixed_op is None:
            return relaxed_op_mixture(T.getitem(self.gamma, (p, d)), x, y, self.op_params[p][d])
        return apply_fusion_op(self.fixed_op, x, y, self.op_params[p][d][self.fixed_op])

    def fused(self, features: Sequence[Tensor]) -> Tensor:
        sources = self.project(features)
        lengths = {s.shape for s in sources}
        if len(lengths) != 1:
            raise ValueError(f"projected sources disagree in shape: {sorted(lengths)}")
        cells: list[Tensor] = []
        for p in range(self.macro.cells):
            f1 = sources + cells
            x = relaxed_cell_input(self._gates(self.alpha[p], 0), f1)
            y = relaxed_cell_input(self._gates(self.alpha[p], 1), f1)
            nodes: list[Tensor] = []
            for d in range(self.macro.nodes):
                nodes.append(self._node(p, d, [x, y] + nodes))
            cells.append(nodes[-1])
        return cells[-1]

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        return _head(self.fused(features), self.head_w, self.head_b)

    __call__ = forward


def _head(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(T.mean(h, axis=2), T.transpose(w)), b)


def hypernet_forward(hypernet: FusionHypernet, features: Sequence) -> Tensor:
    return hypernet.forward([T.as_tensor(f) for f in features])


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------
def fusion_loss(
    hypernet: FusionHypernet,
    features: Sequence,
    labels,
    lut: DeviceLUT | None,
    exponents: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Tensor:
    """``task^a + latency^b + energy^c`` with the relaxed (softmax(gamma)) hardware costs."""
    a, b, c = exponents
    if min(a, b, c) < 0:
        raise ValueError(f"loss exponents must be >= 0, got {exponents}")
    logits = hypernet_forward(hypernet, features)
    task = T.clamp_min(T.cross_entropy(logits, labels), TASK_LOSS_FLOOR)
    loss = T.power(task, a)
    if lut is None:
        if b > 0 or c > 0:
            raise ValueError("hardware exponents > 0 need a device LUT")
        return T.add(loss, Tensor(2.0))
    lat = fusion_relaxed_cost(hypernet.gamma, hypernet.macro, lut, "latency")
    en = fusion_relaxed_cost(hypernet.gamma, hypernet.macro, lut, "energy")
    return T.add(T.add(loss, T.power(lat, b)), T.power(en, c))


@dataclass
class FusionTrainSettings:
    """Optimizer settings for hypernet training.

    ``final_gate_temperature`` anneals the input-gate logits geometrically
    from temperature 1 to this value over training. A low final value makes
    the relaxed network rely on roughly one candidate per slot, so the pair
    kept by :func:`discretize` is one the network actually learned to use.
    Evaluation always runs at temperature 1.
    """

    batch_size: int = 64
    lr: float = 1e-4
    min_lr: float = 1e-6
    arch_lr: float = 1e-4
    arch_min_lr: float = 1e-6
    weight_decay: float = 1e-4
    gate_budget: float = 1.0
    final_gate_temperature: float = 1.0
    seed: int = 0


@dataclass
class FusionTrace:
    epoch_losses: list[float] = field(default_factory=list)


def gate_budget_penalty(hypernet: FusionHypernet) -> Tensor | None:
    """``sum over input slots of (sum_k P_k(Identity) - 1)^2``.

    Pushes every slot towards passing roughly one candidate, so the pair
    picked at discretization carries what the relaxed network relied on.
    """
    terms = []
    for gates in hypernet.arch_parameters():
        if gates is hypernet.gamma:
            continue
        excess = T.add(T.tsum(identity_probabilities(gates), axis=-1), -1.0)
        terms.append(T.tsum(T.mul(excess, excess)))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_fusion(
    hypernet: FusionHypernet,
    features: Sequence[np.ndarray],
    labels: np.ndarray,
    epochs: int,
    lut: DeviceLUT | None,
    exponents: tuple[float, float, float] = (1.0, 1.0, 1.0),
    settings: FusionTrainSettings | None = None,
) -> FusionTrace:
    """Jointly train hypernet weights and (alpha, beta, gamma) with Adam + cosine decay.

    ``features`` are precomputed outputs of frozen backbones, one array per source.
    """
    settings = settings or FusionTrainSettings()
    if settings.final_gate_temperature <= 0:
        raise ValueError("final_gate_temperature must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(settings.seed)
    w_opt = Adam(hypernet.weight_parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    arch = hypernet.arch_parameters()
    a_opt = Adam(arch, lr=settings.arch_lr, weight_decay=0.0) if arch else None
    total_steps = max(epochs * -(-n // settings.batch_size), 1)
    w_sched = CosineSchedule(settings.lr, settings.min_lr, total_steps)
    a_sched = CosineSchedule(settings.arch_lr, settings.arch_min_lr, total_steps)
    trace = FusionTrace()
    step = 0
    for _ in range(epochs):
        total = 0.0
        for idx in _minibatches(n, settings.batch_size, rng):
            batch = [Tensor(f[idx]) for f in features]
            frac = step / max(total_steps - 1, 1)
            hypernet.gate_temperature = settings.final_gate_temperature**frac
            loss = fusion_loss(hypernet, batch, labels[idx], lut, exponents)
            penalty = gate_budget_penalty(hypernet) if settings.gate_budget > 0 else None
            if penalty is not None:
                loss = T.add(loss, T.scale(penalty, settings.gate_budget))
            w_opt.zero_grad()
            if a_opt:
                a_opt.zero_grad()
            loss.backward()
            hypernet.gate_temperature = 1.0
            w_opt.state.lr = cosine_lr(step, w_sched)
            w_opt.step()
            if a_opt:
                a_opt.state.lr = cosine_lr(step, a_sched)
                a_opt.step()
            step += 1
            total += loss.item() * len(idx)
        trace.epoch_losses.append(total / n)
    return trace


def predict(model_forward, features: Sequence[np.ndarray], chunk: int = 1000) -> np.ndarray:
    n = features[0].shape[0]
    outs = []
    with T.no_grad():
        for i in range(0, n, chunk):
            outs.append(model_forward([Tensor(f[i : i + chunk]) for f in features]).data)
    return np.concatenate(outs)


def hypernet_accuracy(hypernet: FusionHypernet, features: Sequence[np.ndarray], labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(hypernet.forward, features).argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# discrete graph
# ---------------------------------------------------------------------------
@dataclass
class NodeChoice:
    inputs: tuple[int, int]
    op: str
    params: dict[str, Tensor]


@dataclass
class CellChoice:
    inputs: tuple[int, int]
    nodes: list[NodeChoice]


@dataclass
class FusionGraph:
    sources: list[SourceSpec]
    width: int
    cells: list[CellChoice]
    proj: list[tuple[Tensor, Tensor]]
    head_w: Tensor
    head_b: Tensor

    def ops(self) -> list[str]:
        return [node.op for cell in self.cells for node in cell.nodes]

    @property
    def macro(self) -> FusionMacroConfig | None:
        if not self.cells:
            return None
        return FusionMacroConfig(len(self.cells), len(self.cells[0].nodes))

    def validate(self) -> None:
        n_src = len(self.sources)
        if len(self.proj) != n_src:
            raise ValueError("projection count differs from source count")
        for p, cell in enumerate(self.cells):
            _check_pair(cell.inputs, n_src + p, f"cell {p}")
            if not cell.nodes:
                raise ValueError(f"cell {p} has no nodes")
            for d, node in enumerate(cell.nodes):
                _check_pair(node.inputs, 2 + d, f"cell {p} node {d}")
                if node.op not in FUSION_OPS:
                    raise ValueError(f"cell {p} node {d}: unknown operator {node.op!r}")

    def parameters(self) -> list[Tensor]:
        used = self.used_sources()
        out = [t for i in used for t in self.proj[i]]
        for cell in self.cells:
            for node in cell.nodes:
                out.extend(node.params.values())
        return out + [self.head_w, self.head_b]

    def used_sources(self) -> list[int]:
        """Indices of backbone sources reachable from the head."""
        n_src = len(self.sources)
        needed_cells = {len(self.cells) - 1} if self.cells else set()
        used: set[int] = set()
        for p in range(len(self.cells) - 1, -1, -1):
            if p not in needed_cells:
                continue
            for i in self.cells[p].inputs:
                if i < n_src:
                    used.add(i)
                else:
                    needed_cells.add(i - n_src)
        return sorted(used)

    def to_dict(self, with_params: bool = True) -> dict:
        d = {
            "version": 1,
            "width": self.width,
            "sources": [[s.modality, s.block, s.channels] for s in self.sources],
            "cells": [
                {
                    "inputs": list(c.inputs),
                    "nodes": [
                        {
                            "inputs": list(n.inputs),
                            "op": n.op,
                            **({"params": {k: v.data.tolist() for k, v in sorted(n.params.items())}} if with_params else {}),
                        }
                        for n in c.nodes
                    ],
                }
                for c in self.cells
            ],
        }
        if with_params:
            d["proj"] = [[w.data.tolist(), b.data.tolist()] for w, b in self.proj]
            d["head"] = [self.head_w.data.tolist(), self.head_b.data.tolist()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FusionGraph:
        try:
            sources = [SourceSpec(str(m), int(b), int(c)) for m, b, c in d["sources"]]
            cells = [
                CellChoice(
                    tuple(c["inputs"]),
                    [
                        NodeChoice(
                            tuple(n["inputs"]),
                            n["op"],
                            {k: Tensor(np.array(v, dtype=np.float64)) for k, v in n.get("params", {}).items()},
                        )
                        for n in c["nodes"]
                    ],
                )
                for c in d["cells"]
            ]
            if "proj" in d:
                proj = [(Tensor(np.array(w)), Tensor(np.array(b))) for w, b in d["proj"]]
                head_w, head_b = Tensor(np.array(d["head"][0])), Tensor(np.array(d["head"][1]))
            else:
                width = int(d["width"])
                proj = [(Tensor(np.zeros((width, s.channels))), Tensor(np.zeros(width))) for s in sources]
                head_w, head_b = Tensor(np.zeros((1, width))), Tensor(np.zeros(1))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed fusion graph document: {exc!r}") from None
        g = cls(sources, int(d["width"]), cells, proj, head_w, head_b)
        g.validate()
        return g

    def to_json(self, with_params: bool = True) -> str:
        return json.dumps(self.to_dict(with_params))


def _check_pair(pair, n_candidates: int, where: str) -> None:
    if len(pair) != 2:
        raise ValueError(f"{where}: expected two inputs, got {pair}")
    i, j = pair
    if i == j:
        raise ValueError(f"{where}: inputs must be distinct, got {pair}")
    for k in (i, j):
        if not 0 <= k < n_candidates:
            raise ValueError(f"{where}: dangling input index {k} (only {n_candidates} candidates)")


def select_pair(gates: np.ndarray) -> tuple[int, int]:
    """Ordered pair (i, j), i != j, maximizing P_x(Identity | i) * P_y(Identity | j).

    ``gates`` is (2, n, 2). Ties go to the lexicographically smallest pair.
    """
    n = gates.shape[1]
    if n < 2:
        raise ValueError(f"need at least two candidate inputs, got {n}")
    z = np.exp(gates - gates.max(axis=-1, keepdims=True))
    prob = z[..., 0] / z.sum(axis=-1)
    score = np.outer(prob[0], prob[1])
    np.fill_diagonal(score, -np.inf)
    flat = int(np.argmax(score))
    return divmod(flat, n)


def discretize(hypernet: FusionHypernet) -> FusionGraph:
    """Argmax extraction: best input pair per cell and node, best operator per node."""

    def copy(t: Tensor) -> Tensor:
        return Tensor(t.data.copy())

    cells = []
    for p in range(hypernet.macro.cells):
        cell_in = select_pair(hypernet.alpha[p].data)
        nodes = []
        for d in range(hypernet.macro.nodes):
            node_in = select_pair(hypernet.beta[p][d].data)
            op = FUSION_OPS[int(np.argmax(hypernet.gamma.data[p, d]))]
            params = {k: copy(v) for k, v in hypernet.op_params[p][d][op].items()}
            nodes.append(NodeChoice(node_in, op, params))
        cells.append(CellChoice(cell_in, nodes))
    graph = FusionGraph(
        list(hypernet.sources),
        hypernet.width,
        cells,
        [(copy(w), copy(b)) for w, b in hypernet.proj],
        copy(hypernet.head_w),
        copy(hypernet.head_b),
    )
    graph.validate()
    return graph


def graph_fused(graph: FusionGraph, features: Sequence) -> Tensor:
    if len(features) != len(graph.sources):
        raise ValueError(f"expected {len(graph.sources)} feature maps, got {len(features)}")
    if not graph.cells:
        raise ValueError("fusion graph has no cells")
    n_src = len(graph.sources)
    projected: dict[int, Tensor] = {}

    def source(i: int) -> Tensor:
        if i not in projected:
            w, b = graph.proj[i]
            projected[i] = project_source(w, b, T.as_tensor(features[i]))
        return projected[i]

    cell_out: list[Tensor] = []
    for p, cell in enumerate(graph.cells):
        f1 = [source(i) if i < n_src else cell_out[i - n_src] for i in cell.inputs]
        f2 = list(f1)
        for node in cell.nodes:
            x, y = (f2[i] for i in node.inputs)
            f2.append(apply_fusion_op(node.op, x, y, node.params))
        cell_out.append(f2[-1])
    return cell_out[-1]


def graph_forward(graph: FusionGraph, features: Sequence) -> Tensor:
    graph.validate()
    return _head(graph_fused(graph, features), graph.head_w, graph.head_b)


def graph_accuracy(graph: FusionGraph, features: Sequence[np.ndarray], labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    graph.validate()
    logits = predict(lambda fs: _head(graph_fused(graph, fs), graph.head_w, graph.head_b), features)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def finetune_graph(
    graph: FusionGraph,
    features: Sequence[np.ndarray],
    labels: np.ndarray,
    epochs: int,
    settings: FusionTrainSettings | None = None,
) -> FusionTrace:
    """Optionally retrain the discrete graph's weights (architecture fixed)."""
    settings = settings or FusionTrainSettings()
    params = graph.parameters()
    for t in params:
        t.requires_grad = True
    opt = Adam(params, lr=settings.lr, weight_decay=settings.weight_decay)
    n = len(labels)
    sched = CosineSchedule(settings.lr, settings.min_lr, max(epochs * -(-n // settings.batch_size), 1))
    rng = np.random.default_rng(settings.seed + 1)
    trace = FusionTrace()
    step = 0
    for _ in range(epochs):
        total = 0.0
        for idx in _minibatches(n, settings.batch_size, rng):
            loss = T.cross_entropy(graph_forward(graph, [Tensor(f[idx]) for f in features]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.state.lr = cosine_lr(step, sched)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
        trace.epoch_losses.append(total / n)
    for t in params:
        t.requires_grad = False
        t.grad = None
    return trace


def graph_to_dot(graph: FusionGraph, name: str = "fusion") -> str:
    """DOT digraph: backbone blocks -> cells -> nodes (labelled by operator) -> head."""
    lines = [f"digraph {json.dumps(name)} {{", "  rankdir=LR;"]
    for i, s in enumerate(graph.sources):
        lines.append(f'  src{i} [shape=box, label="{s.modality} block {s.block}"];')
    n_src = len(graph.sources)
    for p, cell in enumerate(graph.cells):
        for d, node in enumerate(cell.nodes):
            lines.append(f'  c{p}n{d} [label="cell {p} node {d}\\n{node.op}"];')
    for p, cell in enumerate(graph.cells):
        slot_names = []
        for i in cell.inputs:
            slot_names.append(f"src{i}" if i < n_src else f"c{i - n_src}n{len(graph.cells[i - n_src].nodes) - 1}")
        for d, node in enumerate(cell.nodes):
            for i in node.inputs:
                parent = slot_names[i] if i < 2 else f"c{p}n{i - 2}"
                lines.append(f"  {parent} -> c{p}n{d};")
    if graph.cells:
        last = len(graph.cells) - 1
        lines.append('  head [shape=doublecircle, label="head"];')
        lines.append(f"  c{last}n{len(graph.cells[last].nodes) - 1} -> head;")
    lines.append("}")
    return "\n".join(lines) + "\n"
