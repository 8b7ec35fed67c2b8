"""Binary containers: MDT1 datasets and DKL1 surrogate checkpoints.

Both formats are little-endian. MDT1 stores float32 payloads; DKL1 stores
float64 parameters so a restored model predicts bit-identically.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from novscope.dataset import ScanDataset
from novscope.surrogate import Architecture, KernelHyperparams, SurrogateState

MDT_MAGIC = b"MDT1"
DKL_MAGIC = b"DKL1"
DKL_VERSION = 1
_MDT_HEADER = struct.Struct("<4sIIIBf")
_DKL_HEADER = struct.Struct("<4sIIIIIII")
PADDING_CODES = {"valid": 0, "same": 1}


class FormatError(ValueError):
    """Malformed or truncated container."""


def write_bytes(path, payload: bytes) -> None:
    """Write through a sibling temporary file so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# MDT1


def encode_dataset(ds: ScanDataset) -> bytes:
    h, w = ds.shape
    parts = [
        _MDT_HEADER.pack(MDT_MAGIC, h, w, ds.patch_size, int(ds.has_map), ds.noise_std),
        ds.image.astype("<f4").tobytes(),
    ]
    if ds.has_map:
        parts.append(ds.scalar_map.astype("<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> ScanDataset:
    if len(buf) < _MDT_HEADER.size:
        raise FormatError("MDT1 header truncated")
    magic, h, w, p, has_map, noise = _MDT_HEADER.unpack_from(buf)
    if magic != MDT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MDT_MAGIC!r}")
    if has_map not in (0, 1):
        raise FormatError(f"has_map must be 0 or 1, got {has_map}")
    if h == 0 or w == 0:
        raise FormatError("image dimensions must be positive")
    count = h * w
    expected = _MDT_HEADER.size + 4 * count * (1 + has_map)
    if len(buf) != expected:
        raise FormatError(f"MDT1 payload is {len(buf)} bytes, expected {expected}")
    off = _MDT_HEADER.size
    image = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(h, w)
    smap = None
    if has_map:
        smap = np.frombuffer(buf, dtype="<f4", count=count, offset=off + 4 * count).reshape(h, w)
    try:
        return ScanDataset(image, smap, patch_size=p, noise_std=noise)
    except ValueError as exc:
        raise FormatError(f"invalid dataset: {exc}") from exc


def write_dataset(path, ds: ScanDataset) -> None:
    write_bytes(path, encode_dataset(ds))


def read_dataset(path) -> ScanDataset:
    return decode_dataset(Path(path).read_bytes())


def read_dataset_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_MDT_HEADER.size)
    if len(head) < _MDT_HEADER.size:
        raise FormatError("MDT1 header truncated")
    magic, h, w, p, has_map, noise = _MDT_HEADER.unpack(head)
    if magic != MDT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MDT_MAGIC!r}")
    return {"height": h, "width": w, "patch_size": p, "has_map": has_map, "noise_std": noise}


# ---------------------------------------------------------------------------
# DKL1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Surrogate parameters plus the training set they were fitted on."""

    arch: Architecture
    weights: np.ndarray
    hyper: np.ndarray
    indices: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_state(cls, state: SurrogateState) -> "Checkpoint":
        if state.indices is None:
            raise ValueError("checkpoint needs the candidate indices of the training set")
        return cls(state.arch, state.extractor.weights, state.kernel.as_array(), state.indices, state.targets)

    def restore(self, dataset: ScanDataset) -> SurrogateState:
        if dataset.patch_size != self.arch.patch_size:
            raise ValueError(f"checkpoint patch size {self.arch.patch_size} != dataset {dataset.patch_size}")
        if self.indices.size and self.indices.max() >= dataset.n_candidates:
            raise ValueError("checkpoint indices exceed the dataset's candidate count")
        patches = dataset.all_patches(standardize=True)[self.indices]
        return SurrogateState.create(
            self.arch, patches, self.targets, indices=self.indices, kernel=KernelHyperparams.from_array(self.hyper)
        ).with_params(np.concatenate([self.weights, self.hyper]))


def encode_checkpoint(ck: Checkpoint) -> bytes:
    a = ck.arch
    n = ck.indices.size
    return b"".join(
        [
            _DKL_HEADER.pack(
                DKL_MAGIC, DKL_VERSION, a.patch_size, a.c1, a.c2, a.latent_dim, PADDING_CODES[a.padding], a.n_weights
            ),
            np.asarray(ck.weights, dtype="<f8").tobytes(),
            np.asarray(ck.hyper, dtype="<f8").tobytes(),
            struct.pack("<I", n),
            np.asarray(ck.indices, dtype="<u4").tobytes(),
            np.asarray(ck.targets, dtype="<f8").tobytes(),
        ]
    )


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _DKL_HEADER.size:
        raise FormatError("DKL1 header truncated")
    magic, version, p, c1, c2, d, pad, nw = _DKL_HEADER.unpack_from(buf)
    if magic != DKL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DKL_MAGIC!r}")
    if version != DKL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    padding = {v: k for k, v in PADDING_CODES.items()}.get(pad)
    if padding is None:
        raise FormatError(f"unknown padding code {pad}")
    try:
        arch = Architecture(p, c1, c2, d, padding)
    except ValueError as exc:
        raise FormatError(f"invalid architecture: {exc}") from exc
    if arch.n_weights != nw:
        raise FormatError(f"weight count {nw} does not match the architecture ({arch.n_weights})")
    off = _DKL_HEADER.size
    need = off + 8 * (nw + 3) + 4
    if len(buf) < need:
        raise FormatError("DKL1 payload truncated")
    weights = np.frombuffer(buf, "<f8", nw, off).astype(np.float64)
    off += 8 * nw
    hyper = np.frombuffer(buf, "<f8", 3, off).astype(np.float64)
    off += 24
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) != off + 12 * n:
        raise FormatError(f"DKL1 payload is {len(buf)} bytes, expected {off + 12 * n}")
    indices = np.frombuffer(buf, "<u4", n, off).astype(np.int64)
    targets = np.frombuffer(buf, "<f8", n, off + 4 * n).astype(np.float64)
    return Checkpoint(arch, weights, hyper, indices, targets)


def write_checkpoint(path, state: SurrogateState) -> None:
    write_bytes(path, encode_checkpoint(Checkpoint.from_state(state)))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


__all__ = [
    "Checkpoint",
    "FormatError",
    "decode_checkpoint",
    "decode_dataset",
    "encode_checkpoint",
    "encode_dataset",
    "read_checkpoint",
    "read_dataset",
    "read_dataset_header",
    "write_checkpoint",
    "write_dataset",
]
