"""Ground-truth scan datasets, patch geometry and the replay oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np


class OracleUnavailable(RuntimeError):
    """Raised when a measurement is requested from a dataset without a scalarizer map."""


class CandidateIndex(NamedTuple):
    """Flat row-major index of a valid patch centre plus its pixel coordinates."""

    index: int
    row: int
    col: int


@dataclass(frozen=True)
class Patch:
    values: np.ndarray
    center: tuple[int, int]
    standardized: bool


@dataclass(frozen=True, eq=False)
class ScanDataset:
    """Overview image, optional scalarizer map and patch geometry.

    Pixel grids are held as float32 so that the MDT1 container round-trips
    bit-exactly; ``noise_std`` is likewise rounded to float32 on construction.
    """

    image: np.ndarray
    scalar_map: Optional[np.ndarray] = None
    patch_size: int = 16
    noise_std: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        image = np.ascontiguousarray(self.image, dtype=np.float32)
        if image.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {image.shape}")
        if not np.all(np.isfinite(image)):
            raise ValueError("image contains non-finite values")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        if self.scalar_map is not None:
            smap = np.ascontiguousarray(self.scalar_map, dtype=np.float32)
            if smap.shape != image.shape:
                raise ValueError(
                    f"scalar_map shape {smap.shape} does not match image shape {image.shape}"
                )
            if not np.all(np.isfinite(smap)):
                raise ValueError("scalar_map contains non-finite values")
            smap.setflags(write=False)
            object.__setattr__(self, "scalar_map", smap)
        p = int(self.patch_size)
        if p < 1 or p > min(image.shape):
            raise ValueError(f"patch_size {p} must lie in [1, {min(image.shape)}]")
        object.__setattr__(self, "patch_size", p)
        noise = float(np.float32(self.noise_std))
        if not np.isfinite(noise) or noise < 0:
            raise ValueError(f"noise_std must be a nonnegative finite number, got {self.noise_std}")
        object.__setattr__(self, "noise_std", noise)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def has_map(self) -> bool:
        return self.scalar_map is not None

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Number of valid centres along rows and columns."""
        h, w = self.image.shape
        p = self.patch_size
        return h - p + 1, w - p + 1

    @property
    def n_candidates(self) -> int:
        gr, gc = self.grid_shape
        return gr * gc

    @property
    def margin(self) -> tuple[int, int]:
        """(before, after) pixel offsets of the window around its centre."""
        p = self.patch_size
        return p // 2, p - p // 2 - 1

    def coords(self, index) -> np.ndarray:
        """(row, col) centres for flat candidate indices, shape ``(..., 2)``."""
        index = np.asarray(index, dtype=np.int64)
        if np.any(index < 0) or np.any(index >= self.n_candidates):
            raise IndexError("candidate index out of range")
        gr, gc = self.grid_shape
        before = self.margin[0]
        return np.stack([index // gc + before, index % gc + before], axis=-1)

    def all_patches(self, standardize: bool = True) -> np.ndarray:
        """All candidate windows as a float64 array of shape ``(N, p, p)``.

        Cached per dataset; the returned array is read-only.
        """
        key = ("patches", bool(standardize))
        if key not in self._cache:
            p = self.patch_size
            img = self.image.astype(np.float64)
            windows = np.lib.stride_tricks.sliding_window_view(img, (p, p)).reshape(-1, p, p)
            windows = np.array(windows)
            if standardize:
                windows = _standardize(windows)
            windows.setflags(write=False)
            self._cache[key] = windows
        return self._cache[key]

    def ground_truth(self) -> np.ndarray:
        """Scalarizer values at every candidate centre, float64 of shape ``(N,)``."""
        if self.scalar_map is None:
            raise OracleUnavailable("oracle unavailable: dataset has no scalarizer map")
        if "truth" not in self._cache:
            rc = self.coords(np.arange(self.n_candidates))
            truth = self.scalar_map[rc[:, 0], rc[:, 1]].astype(np.float64)
            truth.setflags(write=False)
            self._cache["truth"] = truth
        return self._cache["truth"]


def _standardize(windows: np.ndarray) -> np.ndarray:
    mean = windows.mean(axis=(-2, -1), keepdims=True)
    std = windows.std(axis=(-2, -1), keepdims=True)
    flat = std < 1e-12
    out = (windows - mean) / np.where(flat, 1.0, std)
    return np.where(flat, 0.0, out)


def candidate_set(dataset: ScanDataset) -> list[CandidateIndex]:
    """Every centre whose full window fits, in row-major order.

    A window centred at ``(row, col)`` spans rows ``row - p//2`` through
    ``row + ceil(p/2) - 1`` (likewise columns).
    """
    gr, gc = dataset.grid_shape
    before = dataset.margin[0]
    return [
        CandidateIndex(r * gc + c, r + before, c + before) for r in range(gr) for c in range(gc)
    ]


def _resolve(dataset: ScanDataset, idx) -> CandidateIndex:
    if isinstance(idx, CandidateIndex):
        flat = idx.index
    else:
        flat = int(idx)
    if not 0 <= flat < dataset.n_candidates:
        raise IndexError(f"candidate index {flat} out of range [0, {dataset.n_candidates})")
    row, col = dataset.coords(flat)
    if isinstance(idx, CandidateIndex) and (idx.row, idx.col) != (row, col):
        raise IndexError(f"candidate {idx} has coordinates inconsistent with its flat index")
    return CandidateIndex(flat, int(row), int(col))


def extract_patch(dataset: ScanDataset, idx, standardize: bool = True) -> Patch:
    cand = _resolve(dataset, idx)
    before = dataset.margin[0]
    p = dataset.patch_size
    r0, c0 = cand.row - before, cand.col - before
    values = dataset.image[r0 : r0 + p, c0 : c0 + p].astype(np.float64)
    if standardize:
        values = _standardize(values)
    return Patch(values=values, center=(cand.row, cand.col), standardized=standardize)


def measure(dataset: ScanDataset, idx, rng: Optional[np.random.Generator] = None) -> float:
    """Replay the scalarizer at a candidate centre, plus optional Gaussian noise.

    With ``noise_std == 0`` the generator is not consumed and the exact map
    value is returned.
    """
    if dataset.scalar_map is None:
        raise OracleUnavailable("oracle unavailable: dataset has no scalarizer map")
    cand = _resolve(dataset, idx)
    value = float(dataset.scalar_map[cand.row, cand.col])
    if dataset.noise_std > 0:
        if rng is None:
            raise ValueError("a seeded generator is required when noise_std > 0")
        value += float(rng.normal(0.0, dataset.noise_std))
    return value


class Oracle(Protocol):
    """Anything that can return a scalarized response at a candidate index."""

    def measure(self, index: int) -> float: ...


class TwinOracle:
    """Digital-twin oracle replaying a dataset's scalarizer map.

    A live-instrument client would implement the same ``measure`` method.
    """

    def __init__(self, dataset: ScanDataset, rng: Optional[np.random.Generator] = None):
        if dataset.scalar_map is None:
            raise OracleUnavailable("oracle unavailable: dataset has no scalarizer map")
        self.dataset = dataset
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def measure(self, index: int) -> float:
        return measure(self.dataset, index, self.rng)


def seed_sample(
    candidates: Sequence, n_seed: int, rng: np.random.Generator
) -> list:
    """Draw ``n_seed`` distinct candidates uniformly without replacement."""
    n = len(candidates)
    if not 1 <= n_seed <= n:
        raise ValueError(f"n_seed must lie in [1, {n}], got {n_seed}")
    picks = rng.choice(n, size=n_seed, replace=False)
    return [candidates[int(i)] for i in picks]
