"""Synthetic two-modality, four-class task.

Each sample draws two independent signs ``s_a, s_b``. Modality one sees
``s_a * template_1 + sigma * noise``, modality two sees ``s_b * template_2 +
sigma * noise`` and the label is ``2 * [s_a > 0] + [s_b > 0]``. A single
modality resolves only one of the two bits, so unimodal accuracy tops out
near 0.5 while a fused model can approach 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    length: int = 16
    channels: int = 1
    sigma: float = 0.3
    modalities: tuple[str, ...] = ("image", "audio")

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")
        if self.length < 1 or self.channels < 1:
            raise ValueError("length and channels must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if len(self.modalities) != 2 or len(set(self.modalities)) != 2:
            raise ValueError("the synthetic task has exactly two distinct modalities")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass
class Split:
    x: dict[str, np.ndarray]
    y: np.ndarray
    signs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> Split:
        return Split({m: v[idx] for m, v in self.x.items()}, self.y[idx], self.signs[idx])


@dataclass
class MultimodalDataset:
    spec: SyntheticTaskSpec
    train: Split
    val: Split
    test: Split
    templates: dict[str, np.ndarray]

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.spec.modalities

    @property
    def n_classes(self) -> int:
        return 4

    def split(self, name: str) -> Split:
        return getattr(self, name)


def _templates(spec: SyntheticTaskSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    t = np.arange(spec.length)
    out = {}
    for i, m in enumerate(spec.modalities):
        freq = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        rows = []
        for c in range(spec.channels):
            rows.append(np.sin(2 * np.pi * freq * (t + c) / spec.length + phase + i))
        tpl = np.stack(rows)
        tpl = tpl / np.sqrt((tpl**2).mean())
        out[m] = tpl
    return out


def _balanced_signs(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % 4
    rng.shuffle(labels)
    sa = np.where(labels >= 2, 1.0, -1.0)
    sb = np.where(labels % 2 == 1, 1.0, -1.0)
    return np.stack([sa, sb], axis=1)


def generate(spec: SyntheticTaskSpec, seed: int) -> MultimodalDataset:
    rng = np.random.default_rng(seed)
    templates = _templates(spec, rng)
    splits = {}
    m1, m2 = spec.modalities
    for name in SPLITS:
        n = spec.split_sizes()[name]
        signs = _balanced_signs(n, rng)
        x = {}
        for col, m in ((0, m1), (1, m2)):
            noise = rng.standard_normal((n, spec.channels, spec.length))
            x[m] = signs[:, col, None, None] * templates[m][None] + spec.sigma * noise
        y = (2 * (signs[:, 0] > 0) + (signs[:, 1] > 0)).astype(np.int64)
        splits[name] = Split(x, y, signs)
    return MultimodalDataset(spec, splits["train"], splits["val"], splits["test"], templates)


def save_dataset(ds: MultimodalDataset, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    spec = asdict(ds.spec)
    for name in SPLITS:
        s = ds.split(name)
        arrays = {f"x_{m}": s.x[m] for m in ds.modalities}
        arrays.update({f"template_{m}": ds.templates[m] for m in ds.modalities})
        path = out / f"{name}.npz"
        np.savez(path, y=s.y, signs=s.signs, spec=np.array(json.dumps(spec, sort_keys=True)), **arrays)
        paths.append(path)
    return paths


def load_dataset(data_dir: str | os.PathLike) -> MultimodalDataset:
    data_dir = Path(data_dir)
    splits = {}
    spec = None
    templates = {}
    for name in SPLITS:
        path = data_dir / f"{name}.npz"
        if not path.exists():
            raise FileNotFoundError(f"missing dataset split {path}")
        with np.load(path, allow_pickle=False) as z:
            items = json.loads(str(z["spec"]))
            items["modalities"] = tuple(items["modalities"])
            spec = SyntheticTaskSpec(**items)
            x = {m: z[f"x_{m}"] for m in spec.modalities}
            templates = {m: z[f"template_{m}"] for m in spec.modalities}
            splits[name] = Split(x, z["y"], z["signs"])
    return MultimodalDataset(spec, splits["train"], splits["val"], splits["test"], templates)
