"""Elastic weight-sharing 1-D convolutional backbones.

One supernet per modality holds maximal tensors: a stem conv to ``base``
channels, ``n_blocks`` blocks of ``max_depth`` conv layers (kernel
``max_kernel``, ``base * max_expand`` channels) and a linear head. A subnet
reads the first ``depth`` layer slots of every block, the centre ``k`` taps
of each kernel and the first ``base * e`` output channels. Subnets never own
weights; gradients flow straight into the shared tensors.

Two weight-free details keep every slice trainable without normalization
layers: a sliced kernel is multiplied by ``sqrt(fan_in_max / fan_in)``, and
each layer adds a scaled conv branch onto a channel-truncated (or
zero-padded) copy of its input.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .optim import Adam, CosineSchedule, cosine_lr
from .searchspace import (
    BackboneGenome,
    SearchSpace,
    max_subnet,
    min_subnet,
    sample_uniform,
    validate_genome,
)
from .tensor import Tensor

CHECKPOINT_VERSION = 1
STEM_KERNEL = 3
BRANCH_SCALE = 0.25


def kernel_crop(max_kernel: int, k: int) -> slice:
    start = (max_kernel - k) // 2
    return slice(start, start + k)


def layer_index(c_out: int, c_in: int, k: int, max_kernel: int) -> tuple[slice, slice, slice]:
    """Index selecting a subnet layer's view of a maximal conv kernel."""
    return slice(0, c_out), slice(0, c_in), kernel_crop(max_kernel, k)


def fan_in_scale(c_in: int, k: int, c_in_max: int, k_max: int) -> float:
    """Rescale factor keeping a sliced layer's activation variance at the max subnet's."""
    return float(np.sqrt((c_in_max * k_max) / (c_in * k)))


def shortcut(h: Tensor, c_out: int) -> Tensor:
    """Weight-free skip path: keep the first ``c_out`` channels, zero-pad if short."""
    c_in = h.shape[1]
    if c_in == c_out:
        return h
    if c_in > c_out:
        return T.getitem(h, (slice(None), slice(0, c_out)))
    pad = Tensor(np.zeros((h.shape[0], c_out - c_in, h.shape[2])))
    return T.concat([h, pad], axis=1)


def param_key(modality: str, block: str, layer: str, role: str) -> str:
    return f"{modality}/{block}/{layer}/{role}"


@dataclass
class FeatureMap:
    values: np.ndarray
    source: tuple[str, int]


class ElasticSupernet:
    def __init__(
        self,
        modality: str,
        space: SearchSpace,
        in_channels: int = 1,
        n_classes: int = 4,
        base: int = 8,
        seed: int = 0,
    ):
        self.modality = modality
        self.space = space
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.base = base
        rng = np.random.default_rng(seed)
        kmax = space.max_kernel
        cmax = base * space.max_expand
        p: dict[str, Tensor] = {}

        def he(shape, fan_in):
            return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)

        p[self._key("stem", "-", "weight")] = he((base, in_channels, STEM_KERNEL), in_channels * STEM_KERNEL)
        p[self._key("stem", "-", "bias")] = Tensor(np.zeros(base), requires_grad=True)
        for j in range(space.n_blocks):
            for slot in range(space.max_depth):
                p[self._key(f"block{j}", f"layer{slot}", "weight")] = he((cmax, cmax, kmax), cmax * kmax)
                p[self._key(f"block{j}", f"layer{slot}", "bias")] = Tensor(np.zeros(cmax), requires_grad=True)
        head = rng.standard_normal((n_classes, cmax)) * np.sqrt(1.0 / cmax)
        p[self._key("head", "-", "weight")] = Tensor(head, requires_grad=True)
        p[self._key("head", "-", "bias")] = Tensor(np.zeros(n_classes), requires_grad=True)
        self.params = p

    def _key(self, block: str, layer: str, role: str) -> str:
        return param_key(self.modality, block, layer, role)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layer_weight(self, block: int, slot: int) -> Tensor:
        return self.params[self._key(f"block{block}", f"layer{slot}", "weight")]

    def layer_bias(self, block: int, slot: int) -> Tensor:
        return self.params[self._key(f"block{block}", f"layer{slot}", "bias")]

    def check_genome(self, genome: BackboneGenome) -> None:
        if genome.modality != self.modality:
            raise ValueError(f"genome modality {genome.modality!r} != supernet {self.modality!r}")
        validate_genome(genome, self.space)

    def forward(self, genome: BackboneGenome, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run the subnet ``genome`` on ``x`` of shape (B, C_in, L).

        Returns the output of every block plus classifier logits.
        """
        self.check_genome(genome)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected input (B, {self.in_channels}, L), got {x.shape}")
        kmax = self.space.max_kernel
        cmax = self.base * self.space.max_expand
        h = T.relu(T.conv1d(x, self.params[self._key("stem", "-", "weight")], self.params[self._key("stem", "-", "bias")]))
        c_in = self.base
        feats = []
        for j, block in enumerate(genome.blocks):
            for slot in range(block.depth):
                c_out = self.base * block.expands[slot]
                k = block.kernels[slot]
                w = T.getitem(self.layer_weight(j, slot), layer_index(c_out, c_in, k, kmax))
                w = T.scale(w, fan_in_scale(c_in, k, cmax, kmax))
                b = T.getitem(self.layer_bias(j, slot), slice(0, c_out))
                h = T.add(T.scale(T.relu(T.conv1d(h, w, b)), BRANCH_SCALE), shortcut(h, c_out))
                c_in = c_out
            feats.append(h)
        pooled = T.mean(h, axis=2)
        hw = T.getitem(self.params[self._key("head", "-", "weight")], (slice(None), slice(0, c_in)))
        hw = T.scale(hw, fan_in_scale(c_in, 1, cmax, 1))
        logits = T.add(T.matmul(pooled, T.transpose(hw)), self.params[self._key("head", "-", "bias")])
        return feats, logits

    def logits(self, genome: BackboneGenome, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        outs = []
        with T.no_grad():
            for i in range(0, x.shape[0], batch_size):
                _, lg = self.forward(genome, Tensor(x[i : i + batch_size]))
                outs.append(lg.data)
        return np.concatenate(outs) if outs else np.zeros((0, self.n_classes))


def extract_features(
    supernet: ElasticSupernet, genome: BackboneGenome, batch: np.ndarray, chunk: int = 1000
) -> tuple[list[FeatureMap], np.ndarray]:
    """Per-block feature maps (B, base*e_last, L) and logits, without recording a graph."""
    if batch.ndim != 3 or batch.shape[1] != supernet.in_channels:
        raise ValueError(f"expected batch (B, {supernet.in_channels}, L), got {batch.shape}")
    supernet.check_genome(genome)
    per_block: list[list[np.ndarray]] = [[] for _ in genome.blocks]
    logits = []
    with T.no_grad():
        for i in range(0, batch.shape[0], chunk):
            feats, lg = supernet.forward(genome, Tensor(batch[i : i + chunk]))
            for j, f in enumerate(feats):
                per_block[j].append(f.data)
            logits.append(lg.data)
    maps = [FeatureMap(np.concatenate(v), (supernet.modality, j)) for j, v in enumerate(per_block)]
    return maps, np.concatenate(logits)


def evaluate_subnet(supernet: ElasticSupernet, genome: BackboneGenome, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = supernet.logits(genome, x).argmax(axis=1)
    return float((pred == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# sandwich-rule training
# ---------------------------------------------------------------------------
@dataclass
class SamplingPolicy:
    n_random: int = 2
    anchors: tuple[str, ...] = ("max", "min")
    kd_weight: float = 1.0

    def __post_init__(self):
        if self.n_random < 0:
            raise ValueError("n_random must be >= 0")
        if not self.anchors and self.n_random == 0:
            raise ValueError("policy samples no subnets")
        for a in self.anchors:
            if a not in ("max", "min"):
                raise ValueError(f"unknown anchor {a!r}")


@dataclass
class TrainSettings:
    batch_size: int = 128
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class TrainTrace:
    epoch_losses: list[float] = field(default_factory=list)


def train_supernet(
    supernet: ElasticSupernet,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    policy: SamplingPolicy | None = None,
    settings: TrainSettings | None = None,
) -> TrainTrace:
    """Train the shared weights with the sandwich rule and in-place distillation.

    Each step samples the anchor subnets plus ``n_random`` uniform subnets.
    The loss sums cross-entropy over all of them and adds
    ``kd_weight * KL(teacher || student)`` for every non-max subnet, where the
    teacher is the max subnet's detached logits. One Adam step per batch.
    """
    policy = policy or SamplingPolicy()
    settings = settings or TrainSettings()
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    space = supernet.space
    mod = supernet.modality
    big = max_subnet(space, mod)
    small = min_subnet(space, mod)
    rng = np.random.default_rng(settings.seed)
    opt = Adam(supernet.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    steps_per_epoch = -(-n // settings.batch_size)
    schedule = CosineSchedule(settings.lr, settings.min_lr, max(epochs * steps_per_epoch, 1))
    trace = TrainTrace()
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, settings.batch_size):
            idx = order[i : i + settings.batch_size]
            xb, yb = Tensor(x[idx]), y[idx]
            subnets = [big if a == "max" else small for a in policy.anchors]
            subnets += [sample_uniform(space, rng, mod) for _ in range(policy.n_random)]
            distill = policy.kd_weight > 0 and any(g != big for g in subnets)
            teacher = None
            if distill and "max" not in policy.anchors:
                with T.no_grad():
                    teacher = supernet.forward(big, xb)[1]
            outputs = []
            for g in subnets:
                _, lg = supernet.forward(g, xb)
                outputs.append((g, lg))
                if distill and teacher is None and g == big:
                    teacher = lg.detach()
            loss = None
            for g, lg in outputs:
                term = T.cross_entropy(lg, yb)
                if distill and g != big:
                    term = T.add(term, T.scale(T.kl_divergence(lg, teacher), policy.kd_weight))
                loss = term if loss is None else T.add(loss, term)
            opt.zero_grad()
            loss.backward()
            opt.state.lr = cosine_lr(step, schedule)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
        trace.epoch_losses.append(total / n)
    return trace


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_supernets(supernets: dict[str, ElasticSupernet], path: str | os.PathLike) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "modalities": {
            m: {
                "space": s.space.to_dict(),
                "in_channels": s.in_channels,
                "n_classes": s.n_classes,
                "base": s.base,
            }
            for m, s in supernets.items()
        },
    }
    arrays = {}
    for s in supernets.values():
        for key, t in s.params.items():
            arrays[key] = t.data
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_supernets(path: str | os.PathLike) -> dict[str, ElasticSupernet]:
    if not Path(path).exists():
        raise FileNotFoundError(f"supernet checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        out = {}
        for m, cfg in meta["modalities"].items():
            net = ElasticSupernet(
                m, SearchSpace.from_dict(cfg["space"]), cfg["in_channels"], cfg["n_classes"], cfg["base"]
            )
            for key in net.params:
                if key not in z:
                    raise ValueError(f"checkpoint is missing tensor {key}")
                net.params[key] = Tensor(z[key], requires_grad=True)
            out[m] = net
    return out


def build_supernets(
    modalities: Sequence[str], space: SearchSpace, in_channels: int, n_classes: int, base: int, seed: int
) -> dict[str, ElasticSupernet]:
    return {m: ElasticSupernet(m, space, in_channels, n_classes, base, seed + i) for i, m in enumerate(modalities)}
