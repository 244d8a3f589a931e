"""Value-encoded backbone genomes and fusion macro-configurations.

A backbone genome is a tuple of per-block configs. Each block carries
``max_depth`` kernel/expand entries; only the first ``depth`` are active,
the tail is carried along (inherited through variation) but never compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_SPACE_SIZE = 2**63

FUSION_OPS = ("Sum", "ScaleDotAttn", "LinearGLU", "ConcatFC", "SqueezeExcitation", "ConcatMish")
GATES = ("Identity", "Zero")


@dataclass(frozen=True)
class SearchSpace:
    n_blocks: int = 3
    depths: tuple[int, ...] = (2, 3, 4)
    kernels: tuple[int, ...] = (3, 5, 7)
    expands: tuple[int, ...] = (3, 4, 6)

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        for name in ("depths", "kernels", "expands"):
            values = getattr(self, name)
            if not values or any(int(v) != v or v < 1 for v in values):
                raise ValueError(f"{name} must be a nonempty set of positive integers")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError("kernel sizes must be odd")

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    @property
    def max_kernel(self) -> int:
        return max(self.kernels)

    @property
    def max_expand(self) -> int:
        return max(self.expands)

    @property
    def vector_length(self) -> int:
        return self.n_blocks * (1 + 2 * self.max_depth)

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "depths": list(self.depths),
            "kernels": list(self.kernels),
            "expands": list(self.expands),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        return cls(
            n_blocks=int(d["n_blocks"]),
            depths=tuple(d["depths"]),
            kernels=tuple(d["kernels"]),
            expands=tuple(d["expands"]),
        )


@dataclass(frozen=True, eq=False)
class BlockConfig:
    depth: int
    kernels: tuple[int, ...]
    expands: tuple[int, ...]

    def active(self) -> tuple[int, tuple[int, ...], tuple[int, ...]]:
        return self.depth, self.kernels[: self.depth], self.expands[: self.depth]

    def __eq__(self, other):
        if not isinstance(other, BlockConfig):
            return NotImplemented
        return self.active() == other.active()

    def __hash__(self):
        return hash(self.active())

    @property
    def last_expand(self) -> int:
        return self.expands[self.depth - 1]


@dataclass(frozen=True)
class BackboneGenome:
    blocks: tuple[BlockConfig, ...]
    modality: str = "m0"

    def encode(self) -> list[int]:
        return encode(self)


@dataclass(frozen=True)
class FusionSpace:
    cells: tuple[int, ...] = (1, 2)
    nodes: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if not self.cells or not self.nodes or min(self.cells) < 1 or min(self.nodes) < 1:
            raise ValueError("fusion cell/node bounds must be nonempty and >= 1")


@dataclass(frozen=True)
class FusionMacroConfig:
    cells: int = 1
    nodes: int = 1

    def __post_init__(self):
        if self.cells < 1 or self.nodes < 1:
            raise ValueError(f"invalid fusion macro ({self.cells}, {self.nodes})")


@dataclass(frozen=True)
class MultimodalGenome:
    backbones: tuple[BackboneGenome, ...]
    macro: FusionMacroConfig

    def __post_init__(self):
        tags = [g.modality for g in self.backbones]
        if len(set(tags)) != len(tags):
            raise ValueError(f"duplicate modality tags {tags}")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(g.modality for g in self.backbones)

    def backbone(self, modality: str) -> BackboneGenome:
        for g in self.backbones:
            if g.modality == modality:
                return g
        raise KeyError(modality)


# ---------------------------------------------------------------------------
# validation and (de)serialization
# ---------------------------------------------------------------------------
def validate_block(block: BlockConfig, space: SearchSpace) -> None:
    md = space.max_depth
    if block.depth not in space.depths:
        raise ValueError(f"depth {block.depth} not in {space.depths}")
    if len(block.kernels) != md or len(block.expands) != md:
        raise ValueError(f"block must carry {md} kernel and expand entries")
    if any(k not in space.kernels for k in block.kernels):
        raise ValueError(f"kernel entry outside {space.kernels}: {block.kernels}")
    if any(e not in space.expands for e in block.expands):
        raise ValueError(f"expand entry outside {space.expands}: {block.expands}")


def validate_genome(genome: BackboneGenome, space: SearchSpace) -> None:
    if len(genome.blocks) != space.n_blocks:
        raise ValueError(f"genome has {len(genome.blocks)} blocks, space expects {space.n_blocks}")
    for b in genome.blocks:
        validate_block(b, space)


def encode(genome: BackboneGenome) -> list[int]:
    """Flatten to ``[d, k_1..k_max, e_1..e_max]`` per block."""
    vec: list[int] = []
    for b in genome.blocks:
        vec.append(int(b.depth))
        vec.extend(int(k) for k in b.kernels)
        vec.extend(int(e) for e in b.expands)
    return vec


def decode(vector: Sequence[int], space: SearchSpace, modality: str = "m0") -> BackboneGenome:
    md = space.max_depth
    width = 1 + 2 * md
    if len(vector) != space.vector_length:
        raise ValueError(f"vector length {len(vector)} != expected {space.vector_length}")
    blocks = []
    for j in range(space.n_blocks):
        chunk = [int(v) for v in vector[j * width : (j + 1) * width]]
        block = BlockConfig(chunk[0], tuple(chunk[1 : 1 + md]), tuple(chunk[1 + md :]))
        validate_block(block, space)
        blocks.append(block)
    return BackboneGenome(tuple(blocks), modality)


# ---------------------------------------------------------------------------
# sampling and variation
# ---------------------------------------------------------------------------
def _choice(rng: np.random.Generator, values: Sequence[int]) -> int:
    return int(values[rng.integers(len(values))])


def _sample_block(space: SearchSpace, rng: np.random.Generator) -> BlockConfig:
    md = space.max_depth
    depth = _choice(rng, space.depths)
    kernels = tuple(_choice(rng, space.kernels) for _ in range(md))
    expands = tuple(_choice(rng, space.expands) for _ in range(md))
    return BlockConfig(depth, kernels, expands)


def sample_uniform(space: SearchSpace, rng: np.random.Generator, modality: str = "m0") -> BackboneGenome:
    """Draw every depth, kernel and expand entry independently and uniformly."""
    return BackboneGenome(tuple(_sample_block(space, rng) for _ in range(space.n_blocks)), modality)


def max_subnet(space: SearchSpace, modality: str = "m0") -> BackboneGenome:
    md = space.max_depth
    block = BlockConfig(md, (space.max_kernel,) * md, (space.max_expand,) * md)
    return BackboneGenome((block,) * space.n_blocks, modality)


def min_subnet(space: SearchSpace, modality: str = "m0") -> BackboneGenome:
    md = space.max_depth
    block = BlockConfig(min(space.depths), (min(space.kernels),) * md, (min(space.expands),) * md)
    return BackboneGenome((block,) * space.n_blocks, modality)


def mutate(genome: BackboneGenome, p_mut: float, rng: np.random.Generator, space: SearchSpace) -> BackboneGenome:
    """Resample whole blocks, each independently with probability ``p_mut``.

    A triggered block gets a fresh depth and fresh values at every position
    that is active under the new depth; inert tail entries are inherited.
    """
    if not 0.0 <= p_mut <= 1.0:
        raise ValueError(f"p_mut {p_mut} outside [0, 1]")
    blocks = []
    for b in genome.blocks:
        if rng.random() < p_mut:
            depth = _choice(rng, space.depths)
            kernels = list(b.kernels)
            expands = list(b.expands)
            for i in range(depth):
                kernels[i] = _choice(rng, space.kernels)
                expands[i] = _choice(rng, space.expands)
            b = BlockConfig(depth, tuple(kernels), tuple(expands))
        blocks.append(b)
    return BackboneGenome(tuple(blocks), genome.modality)


def crossover(
    g1: BackboneGenome, g2: BackboneGenome, p_cross: float, rng: np.random.Generator
) -> tuple[BackboneGenome, BackboneGenome]:
    """Swap the parents' blocks position by position with probability ``p_cross``."""
    if g1.modality != g2.modality:
        raise ValueError(f"cannot cross {g1.modality!r} with {g2.modality!r}")
    if len(g1.blocks) != len(g2.blocks):
        raise ValueError("parents differ in block count")
    if not 0.0 <= p_cross <= 1.0:
        raise ValueError(f"p_cross {p_cross} outside [0, 1]")
    a, b = list(g1.blocks), list(g2.blocks)
    for j in range(len(a)):
        if rng.random() < p_cross:
            a[j], b[j] = b[j], a[j]
    return BackboneGenome(tuple(a), g1.modality), BackboneGenome(tuple(b), g2.modality)


def sample_macro(fspace: FusionSpace, rng: np.random.Generator) -> FusionMacroConfig:
    return FusionMacroConfig(_choice(rng, fspace.cells), _choice(rng, fspace.nodes))


def mutate_macro(
    macro: FusionMacroConfig, p_mut: float, rng: np.random.Generator, fspace: FusionSpace
) -> FusionMacroConfig:
    if rng.random() < p_mut:
        return sample_macro(fspace, rng)
    return macro


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------
def block_choices(space: SearchSpace) -> int:
    per_layer = len(space.kernels) * len(space.expands)
    return sum(per_layer**d for d in space.depths)


def space_size(space: SearchSpace) -> int:
    """Number of distinct genomes (inert tails not distinguished)."""
    total = block_choices(space) ** space.n_blocks
    if total >= MAX_SPACE_SIZE:
        raise OverflowError(f"search space size {total} exceeds 2**63")
    return total

