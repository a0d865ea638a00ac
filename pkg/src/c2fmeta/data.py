"""Coarsely-labelled datasets, the synthetic hierarchical generator, and file I/O.

Fine labels of training samples are kept on the dataset object but only
reachable through :meth:`CoarseDataset.hidden_fine_labels`, which is meant for
evaluation code (metrics, N_s estimation). Training code receives features and
coarse labels only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySplit, FormatError, InvalidSpec, OverlappingSplit
from .numerics import make_rng

HIDDEN = -1


@dataclass(eq=False)
class CoarseDataset:
    X: np.ndarray
    coarse: np.ndarray
    num_coarse_classes: int
    _fine: np.ndarray | None = field(default=None, repr=False)
    seed: int | None = None
    split: str = "train"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.coarse.shape[0]:
            raise InvalidSpec(f"X shape {self.X.shape} does not match {self.coarse.shape[0]} labels")
        if self.num_coarse_classes < 1:
            raise InvalidSpec("num_coarse_classes must be positive")
        if self.coarse.size and (self.coarse.min() < 0 or self.coarse.max() >= self.num_coarse_classes):
            raise InvalidSpec("coarse label out of range")
        counts = np.bincount(self.coarse, minlength=self.num_coarse_classes)
        if np.any(counts == 0):
            raise InvalidSpec(f"coarse classes {np.flatnonzero(counts == 0).tolist()} are empty")
        if self._fine is not None:
            self._fine = np.asarray(self._fine, dtype=np.int64)
            if self._fine.shape != self.coarse.shape:
                raise InvalidSpec("fine label array has the wrong length")
        if not np.all(np.isfinite(self.X)):
            raise InvalidSpec("features must be finite")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoarseDataset):
            return NotImplemented
        fa = self.hidden_fine_labels()
        fb = other.hidden_fine_labels()
        return (
            self.num_coarse_classes == other.num_coarse_classes
            and self.seed == other.seed
            and self.split == other.split
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.coarse, other.coarse)
            and ((fa is None and fb is None) or (fa is not None and fb is not None and np.array_equal(fa, fb)))
        )

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def hidden_fine_labels(self) -> np.ndarray | None:
        """Ground-truth fine labels. Evaluation only; never pass these to training code."""
        return None if self._fine is None else self._fine.copy()

    def class_indices(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.coarse == c) for c in range(self.num_coarse_classes)}


@dataclass(eq=False)
class FineDataset:
    X: np.ndarray
    labels: np.ndarray
    seed: int | None = None
    split: str = "test"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.labels.shape[0]:
            raise InvalidSpec(f"X shape {self.X.shape} does not match {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise InvalidSpec("fine labels must be nonnegative")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FineDataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.split == other.split
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def num_fine_classes(self) -> int:
        return int(np.unique(self.labels).size)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def class_indices(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the hierarchical Gaussian mixture.

    Spreads are per-coordinate standard deviations. Coordinates are laid out
    as ``[coarse | fine | nuisance]``:

    * ``fine_dims == 0`` (default): coarse centres and fine offsets share every
      signal coordinate, so fine clusters sit inside their coarse region.
    * ``fine_dims > 0``: coarse centres occupy the first signal coordinates and
      fine offsets only the next ``fine_dims`` ones.
    * the last ``nuisance_dims`` coordinates carry no class signal, only
      label-independent Gaussian variation of scale ``nuisance_sigma``.

    ``noise_sigma`` is added to every coordinate.
    """

    C: int = 4
    fine_per_coarse: int = 5
    samples_per_fine: int = 40
    D_in: int = 32
    coarse_spread: float = 4.0
    fine_spread: float = 0.5
    noise_sigma: float = 0.2
    seed: int = 0
    nuisance_dims: int = 0
    nuisance_sigma: float = 0.0
    fine_dims: int = 0

    def validate(self) -> None:
        for name in ("C", "fine_per_coarse", "samples_per_fine", "D_in"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        for name in ("coarse_spread", "fine_spread", "noise_sigma", "nuisance_sigma"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be nonnegative")
        if not self.fine_spread < self.coarse_spread:
            raise InvalidSpec("fine_spread must be smaller than coarse_spread")
        if not 0 <= self.nuisance_dims < self.D_in:
            raise InvalidSpec("nuisance_dims must leave at least one signal coordinate")
        if not 0 <= self.fine_dims < self.D_in - self.nuisance_dims:
            raise InvalidSpec("fine_dims must leave at least one coarse coordinate")


def generate_hierarchical(spec: SynthSpec) -> CoarseDataset:
    spec.validate()
    rng = make_rng(spec.seed)
    n_sig = spec.D_in - spec.nuisance_dims
    n_fine = spec.C * spec.fine_per_coarse
    n = n_fine * spec.samples_per_fine

    n_fine_dims = spec.fine_dims or n_sig
    n_coarse_dims = n_sig - spec.fine_dims
    coarse_centers = np.zeros((spec.C, n_sig))
    coarse_centers[:, :n_coarse_dims] = rng.normal(0.0, spec.coarse_spread, size=(spec.C, n_coarse_dims))
    offsets = np.zeros((spec.C, spec.fine_per_coarse, n_sig))
    offsets[:, :, n_sig - n_fine_dims:] = rng.normal(
        0.0, spec.fine_spread, size=(spec.C, spec.fine_per_coarse, n_fine_dims))
    fine_centers = (coarse_centers[:, None, :] + offsets).reshape(n_fine, n_sig)

    fine = np.repeat(np.arange(n_fine), spec.samples_per_fine)
    coarse = fine // spec.fine_per_coarse
    X = np.zeros((n, spec.D_in))
    X[:, :n_sig] = fine_centers[fine]
    X += rng.normal(0.0, spec.noise_sigma, size=X.shape)
    if spec.nuisance_dims:
        X[:, n_sig:] += rng.normal(0.0, spec.nuisance_sigma, size=(n, spec.nuisance_dims))
    return CoarseDataset(X, coarse, spec.C, _fine=fine, seed=spec.seed, split="train")


def split_meta(
    dataset: CoarseDataset, train_coarse, val_coarse, test_coarse
) -> tuple[CoarseDataset, FineDataset, FineDataset]:
    """Split by coarse class into (coarse-only train, fine val, fine test)."""
    parts = [set(int(c) for c in s) for s in (train_coarse, val_coarse, test_coarse)]
    for a in range(3):
        for b in range(a + 1, 3):
            if parts[a] & parts[b]:
                raise OverlappingSplit(f"coarse ids {sorted(parts[a] & parts[b])} appear in two splits")
    if any(not p for p in parts):
        raise EmptySplit("every split needs at least one coarse class")
    if set().union(*parts) != set(range(dataset.num_coarse_classes)):
        raise EmptySplit("splits must cover every coarse class exactly once")

    fine = dataset.hidden_fine_labels()
    train_ids = sorted(parts[0])
    remap = {c: i for i, c in enumerate(train_ids)}
    mask = np.isin(dataset.coarse, train_ids)
    train = CoarseDataset(
        dataset.X[mask],
        np.array([remap[c] for c in dataset.coarse[mask]], dtype=np.int64),
        len(train_ids),
        _fine=None if fine is None else fine[mask],
        seed=dataset.seed,
        split="train",
    )

    def _fine_split(ids, name):
        if fine is None:
            raise EmptySplit(f"{name} split needs fine labels")
        m = np.isin(dataset.coarse, sorted(ids))
        return FineDataset(dataset.X[m], fine[m], seed=dataset.seed, split=name)

    return train, _fine_split(parts[1], "val"), _fine_split(parts[2], "test")


# --- persistence -----------------------------------------------------------

def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _fmt(v: float) -> str:
    return "%.17g" % v


def _header(first: str, second: str, dim: int) -> list[str]:
    return [first, second] + [f"x_{i}" for i in range(dim)]


def write_rows(path, first: str, second: str, col1, col2, X, manifest: dict) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(first, second, X.shape[1]))
        for a, b, row in zip(col1, col2, X):
            w.writerow([int(a), int(b)] + [_fmt(v) for v in row])
    with open(_manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_rows(path, first: str, second: str) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    with open(_manifest_path(path)) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    try:
        dim = int(manifest["input_dim"])
        n = int(manifest["num_samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing field: {exc}") from exc

    with open(path, newline="") as fh:
        text = fh.read()
    if text and not text.endswith("\n"):
        raise FormatError("file is truncated (no trailing newline)")
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != _header(first, second, dim):
        raise FormatError("malformed header")
    body = rows[1:]
    if len(body) != n:
        raise FormatError(f"expected {n} rows, found {len(body)}")
    c1 = np.empty(n, dtype=np.int64)
    c2 = np.empty(n, dtype=np.int64)
    X = np.empty((n, dim))
    for i, row in enumerate(body):
        if len(row) != dim + 2:
            raise FormatError(f"row {i} has {len(row)} fields, expected {dim + 2}")
        try:
            c1[i] = int(row[0])
            c2[i] = int(row[1])
            X[i] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise FormatError(f"row {i}: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise FormatError("non-finite feature value")
    return manifest, c1, c2, X


def save_dataset(dataset: CoarseDataset | FineDataset, path) -> None:
    if isinstance(dataset, CoarseDataset):
        fine = dataset.hidden_fine_labels()
        fine = np.full(len(dataset), HIDDEN) if fine is None else fine
        manifest = {
            "num_coarse_classes": dataset.num_coarse_classes,
            "input_dim": dataset.input_dim,
            "num_samples": len(dataset),
            "seed": dataset.seed,
            "split": dataset.split,
        }
        write_rows(path, "coarse_label", "fine_label", dataset.coarse, fine, dataset.X, manifest)
    else:
        manifest = {
            "num_coarse_classes": 0,
            "num_fine_classes": dataset.num_fine_classes,
            "input_dim": dataset.input_dim,
            "num_samples": len(dataset),
            "seed": dataset.seed,
            "split": dataset.split,
        }
        coarse = np.full(len(dataset), HIDDEN)
        write_rows(path, "coarse_label", "fine_label", coarse, dataset.labels, dataset.X, manifest)


def load_dataset(path) -> CoarseDataset | FineDataset:
    """Load a dataset written by :func:`save_dataset`.

    Train splits come back as :class:`CoarseDataset`; ``val``/``test`` splits,
    which carry fine labels only, come back as :class:`FineDataset`.
    """
    manifest, coarse, fine, X = read_rows(path, "coarse_label", "fine_label")
    split = manifest.get("split")
    if split not in ("train", "val", "test"):
        raise FormatError(f"unknown split {split!r}")
    if np.any(fine < HIDDEN):
        raise FormatError("fine label out of range")
    if split == "train":
        C = int(manifest["num_coarse_classes"])
        if np.any(coarse < 0) or np.any(coarse >= C):
            raise FormatError(f"coarse label outside [0, {C})")
        has_fine = bool(np.all(fine >= 0))
        if not has_fine and np.any(fine >= 0):
            raise FormatError("fine labels must be all present or all hidden")
        try:
            return CoarseDataset(X, coarse, C, _fine=fine if has_fine else None,
                                 seed=manifest.get("seed"), split=split)
        except InvalidSpec as exc:
            raise FormatError(str(exc)) from exc
    if np.any(fine < 0):
        raise FormatError(f"{split} split requires fine labels")
    return FineDataset(X, fine, seed=manifest.get("seed"), split=split)
