"""Run configuration: one flat dataclass, a desk-scale preset and JSON loading."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .hwcost import PROFILES
from .searchspace import FusionSpace, SearchSpace


@dataclass
class RunConfig:
    """Every knob of a search run. Defaults are the full-scale settings."""

    seed: int = 0
    # synthetic task
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    length: int = 16
    sigma: float = 0.3
    modalities: tuple[str, ...] = ("image", "audio")
    # backbone space and supernets
    n_blocks: int = 3
    depths: tuple[int, ...] = (2, 3, 4)
    kernels: tuple[int, ...] = (3, 5, 7)
    expands: tuple[int, ...] = (3, 4, 6)
    base_channels: int = 8
    supernet_epochs: int = 10
    supernet_lr: float = 1e-3
    supernet_min_lr: float = 1e-5
    supernet_batch: int = 128
    n_random: int = 2
    kd_weight: float = 1.0
    weight_decay: float = 1e-4
    # evolution
    generations: int = 30
    population: int = 128
    select_fraction: float = 0.25
    elite_fraction: float = 0.5
    p_mut: float = 0.4
    p_cross: float = 0.8
    pairing: str = "rank"
    cache_second_stage: bool = False
    # fusion
    cells: tuple[int, ...] = (1, 2)
    nodes: tuple[int, ...] = (1, 2, 3)
    fusion_width: int = 8
    fusion_epochs: int = 25
    fusion_batch: int = 64
    fusion_lr: float = 1e-4
    fusion_min_lr: float = 1e-6
    arch_lr: float = 1e-4
    arch_min_lr: float = 1e-6
    arch_init_std: float = 0.5
    gate_budget: float = 1.0
    final_gate_temperature: float = 0.03
    finetune_epochs: int = 0
    exponents: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # hardware
    device: str = "fast-gpu"
    lut_seed: int = 0
    lut_path: str | None = None
    # ablation
    ablation_cells: int = 1
    ablation_nodes: int = 2
    ablation_acc_tolerance: float = 0.05

    def search_space(self) -> SearchSpace:
        return SearchSpace(self.n_blocks, tuple(self.depths), tuple(self.kernels), tuple(self.expands))

    def fusion_space(self) -> FusionSpace:
        return FusionSpace(tuple(self.cells), tuple(self.nodes))

    def validate(self) -> RunConfig:
        """Raise ValueError naming the first offending field."""

        def bad(name, why):
            raise ValueError(f"config field {name!r} {why} (got {getattr(self, name)!r})")

        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("length", "n_blocks", "base_channels", "supernet_batch", "fusion_width", "fusion_batch"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("supernet_epochs", "fusion_epochs", "finetune_epochs", "generations", "n_random"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if self.population < 1:
            bad("population", "must be >= 1")
        if self.sigma < 0:
            bad("sigma", "must be >= 0")
        if len(self.modalities) != 2 or len(set(self.modalities)) != 2:
            bad("modalities", "must name two distinct modalities")
        for name in ("select_fraction", "elite_fraction"):
            if not 0.0 < getattr(self, name) <= 1.0:
                bad(name, "must lie in (0, 1]")
        for name in ("p_mut", "p_cross"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(name, "must lie in [0, 1]")
        for name in ("supernet_lr", "fusion_lr", "arch_lr", "final_gate_temperature"):
            if getattr(self, name) <= 0:
                bad(name, "must be > 0")
        for name in ("supernet_min_lr", "fusion_min_lr", "arch_min_lr", "weight_decay", "kd_weight", "gate_budget", "arch_init_std"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if self.pairing not in ("rank", "random"):
            bad("pairing", "must be 'rank' or 'random'")
        if len(self.exponents) != 3 or min(self.exponents) < 0:
            bad("exponents", "must be three numbers >= 0")
        if self.lut_path is not None and not Path(self.lut_path).is_file():
            bad("lut_path", "does not name an existing file")
        if self.device not in PROFILES and self.lut_path is None:
            bad("device", f"must be one of {sorted(PROFILES)} unless lut_path is set")
        if self.ablation_cells < 1 or self.ablation_nodes < 1:
            bad("ablation_cells", "and ablation_nodes must be >= 1")
        try:
            self.search_space()
        except ValueError as exc:
            raise ValueError(f"config fields depths/kernels/expands: {exc}") from None
        try:
            self.fusion_space()
        except ValueError as exc:
            raise ValueError(f"config fields cells/nodes: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> RunConfig:
        return from_dict({**self.to_dict(), **changes})


_TUPLE_FIELDS = {f.name for f in dataclasses.fields(RunConfig) if str(f.type).startswith("tuple")}


def from_dict(d: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown config fields {unknown}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS and v is not None else v for k, v in d.items()}
    return RunConfig(**values).validate()


def desk_preset() -> RunConfig:
    """Laptop-scale budget: 6 generations x 16 candidates, 10 fusion epochs.

    Learning rates are raised to match the much shorter schedules.
    """
    return RunConfig(
        base_channels=4,
        supernet_epochs=5,
        supernet_batch=64,
        generations=6,
        population=16,
        fusion_epochs=10,
        fusion_batch=128,
        fusion_lr=1e-2,
        fusion_min_lr=1e-4,
        arch_lr=3e-2,
        arch_min_lr=3e-4,
        finetune_epochs=2,
    ).validate()


PRESETS = {"desk": desk_preset, "full": lambda: RunConfig().validate()}


def load_config(path: str | os.PathLike | None = None, preset: str = "desk", **overrides) -> RunConfig:
    """Preset, then values from a JSON file, then explicit overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[preset]().to_dict()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        d.update(loaded)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(d)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
