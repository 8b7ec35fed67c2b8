"""Novelty-driven target-space discovery for scanned-probe microscopy twins.

A deep-kernel Gaussian-process surrogate over image patches drives a
Thompson-sampled k-nearest-neighbour novelty acquisition (BEACON), with
expected-improvement and maximum-uncertainty baselines, a replay oracle
over ground-truth scalarizer maps, and coverage/learning-curve monitors.
"""

from novscope.dataset import (
    CandidateIndex,
    OracleUnavailable,
    Patch,
    ScanDataset,
    TwinOracle,
    candidate_set,
    extract_patch,
    measure,
    seed_sample,
)
from novscope.synthetic import generate_synthetic_domains, generate_synthetic_particles

__all__ = [
    "CandidateIndex",
    "OracleUnavailable",
    "Patch",
    "ScanDataset",
    "TwinOracle",
    "candidate_set",
    "extract_patch",
    "measure",
    "seed_sample",
    "generate_synthetic_domains",
    "generate_synthetic_particles",
]

__version__ = "0.1.0"
