"""Deep-kernel Gaussian-process surrogate over standardized image patches.

A small convolutional extractor maps each patch to a latent vector; an
isotropic RBF kernel on the latents with exact GP inference gives the
predictive mean and variance. Extractor weights and the three log kernel
hyperparameters are trained jointly by Adam on the negative log marginal
likelihood, with analytic gradients.

Targets are z-scored before fitting; predictions are returned in raw
response units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

from novscope import _kernels

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-6
JITTER_MAX = 1e-2
N_HYPER = 3


class FactorizationError(np.linalg.LinAlgError):
    """Kernel matrix stayed indefinite after the full jitter escalation."""


@dataclass(frozen=True)
class Architecture:
    """Two 3x3 conv stages (tanh, 2x2 average pool) and a dense map to the latent."""

    patch_size: int
    c1: int = 8
    c2: int = 16
    latent_dim: int = 2
    padding: str = "valid"

    def __post_init__(self):
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if min(self.c1, self.c2, self.latent_dim) < 1:
            raise ValueError("channel counts and latent_dim must be positive")
        if self.q2 < 1:
            raise ValueError(
                f"patch_size {self.patch_size} too small for two conv/pool stages "
                f"with padding={self.padding!r}"
            )

    @property
    def pad(self) -> int:
        return 1 if self.padding == "same" else 0

    @property
    def s1(self) -> int:
        return self.patch_size - 2 + 2 * self.pad

    @property
    def q1(self) -> int:
        return self.s1 // 2

    @property
    def s2(self) -> int:
        return self.q1 - 2 + 2 * self.pad

    @property
    def q2(self) -> int:
        return max(self.s2, 0) // 2

    @property
    def n_features(self) -> int:
        return self.q2 * self.q2 * self.c2

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("conv1_w", (9, self.c1)),
            ("conv1_b", (self.c1,)),
            ("conv2_w", (9 * self.c1, self.c2)),
            ("conv2_b", (self.c2,)),
            ("dense_w", (self.n_features, self.latent_dim)),
            ("dense_b", (self.latent_dim,)),
        ]

    @property
    def n_weights(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out


@dataclass(frozen=True, eq=False)
class ExtractorParams:
    arch: Architecture
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size != self.arch.n_weights:
            raise ValueError(f"expected {self.arch.n_weights} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("extractor weights must be finite")
        object.__setattr__(self, "weights", w)

    def unpack(self) -> dict[str, np.ndarray]:
        return unpack_weights(self.arch, self.weights)


def unpack_weights(arch: Architecture, w: np.ndarray) -> dict[str, np.ndarray]:
    return {
        name: w[sl].reshape(shape)
        for (name, shape), sl in zip(arch.shapes, arch.slices().values())
    }


def init_extractor(arch: Architecture, seed: int) -> ExtractorParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    fans = {
        "conv1_w": (9, 9 * arch.c1),
        "conv2_w": (9 * arch.c1, 9 * arch.c2),
        "dense_w": (arch.n_features, arch.latent_dim),
    }
    parts = []
    for name, shape in arch.shapes:
        if name in fans:
            a = math.sqrt(6.0 / sum(fans[name]))
            parts.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return ExtractorParams(arch, np.concatenate(parts))


@dataclass(frozen=True)
class KernelHyperparams:
    log_outputscale: float = 0.0
    log_lengthscale: float = 0.0
    log_noise: float = -4.0

    def as_array(self) -> np.ndarray:
        return np.array([self.log_outputscale, self.log_lengthscale, self.log_noise])

    @classmethod
    def from_array(cls, a) -> "KernelHyperparams":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @property
    def outputscale(self) -> float:
        return math.exp(self.log_outputscale)

    @property
    def amplitude(self) -> float:
        """Prior variance k(z, z) = s**2."""
        return math.exp(2.0 * self.log_outputscale)

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)


def kernel_eval(theta: KernelHyperparams, z, z_prime) -> float:
    z, z_prime = np.asarray(z, dtype=np.float64), np.asarray(z_prime, dtype=np.float64)
    if z.shape != z_prime.shape:
        raise ValueError(f"latent dims differ: {z.shape} vs {z_prime.shape}")
    d2 = float(np.sum((z - z_prime) ** 2))
    return theta.amplitude * math.exp(-d2 / (2.0 * theta.lengthscale**2))


def kernel_matrix(theta: KernelHyperparams, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    return theta.amplitude * np.exp(-_sqdist(za, zb) / (2.0 * theta.lengthscale**2))


def _sqdist(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    d = np.einsum("ik,ik->i", za, za)[:, None] + np.einsum("jk,jk->j", zb, zb)[None, :]
    d -= 2.0 * za @ zb.T
    return np.maximum(d, 0.0)


# ---------------------------------------------------------------------------
# feature extractor


class PatchBatch:
    """Standardized patches with their first-stage im2col columns precomputed.

    Training and candidate scoring reuse the columns, which depend only on
    the inputs.
    """

    def __init__(self, patches: np.ndarray, arch: Architecture):
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        if patches.shape[1:] != (arch.patch_size, arch.patch_size):
            raise ValueError(
                f"patch shape {patches.shape[1:]} does not match architecture "
                f"patch_size {arch.patch_size}"
            )
        self.arch = arch
        self.patches = patches
        self.cols = _im2col1(patches, arch)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def take(self, indices) -> "PatchBatch":
        out = PatchBatch.__new__(PatchBatch)
        out.arch = self.arch
        idx = np.asarray(indices, dtype=np.int64)
        out.patches = self.patches[idx]
        out.cols = self.cols[idx]
        return out


def _im2col1(patches: np.ndarray, arch: Architecture) -> np.ndarray:
    if arch.pad:
        patches = np.pad(patches, ((0, 0), (1, 1), (1, 1)))
    s1 = arch.s1
    cols = np.empty((patches.shape[0], s1, s1, 9))
    for di in range(3):
        for dj in range(3):
            cols[..., 3 * di + dj] = patches[:, di : di + s1, dj : dj + s1]
    return cols


def _forward(arch: Architecture, w: dict, batch: PatchBatch, keep: bool = False):
    n = len(batch)
    s1, q1, s2, q2 = arch.s1, arch.q1, arch.s2, arch.q2
    h1 = batch.cols.reshape(-1, 9) @ w["conv1_w"]
    h1 += w["conv1_b"]
    a1 = np.tanh(h1, out=h1).reshape(n, s1, s1, arch.c1)
    cols2 = _kernels.pool_im2col(a1, q1, s2, arch.pad)
    h2 = cols2.reshape(-1, 9 * arch.c1) @ w["conv2_w"]
    h2 += w["conv2_b"]
    a2 = np.tanh(h2, out=h2).reshape(n, s2, s2, arch.c2)
    e = 2 * q2
    feat = 0.25 * (
        a2[:, 0:e:2, 0:e:2] + a2[:, 1:e:2, 0:e:2] + a2[:, 0:e:2, 1:e:2] + a2[:, 1:e:2, 1:e:2]
    )
    feat = feat.reshape(n, -1)
    z = feat @ w["dense_w"] + w["dense_b"]
    if keep:
        return z, (a1, cols2, a2, feat)
    return z


def _backward(arch: Architecture, w: dict, batch: PatchBatch, cache, gz: np.ndarray) -> np.ndarray:
    a1, cols2, a2, feat = cache
    n = len(batch)
    q2 = arch.q2
    g = {}
    g["dense_w"] = feat.T @ gz
    g["dense_b"] = gz.sum(axis=0)
    gfeat = (gz @ w["dense_w"].T).reshape(n, q2, 1, q2, 1, arch.c2)
    ga2 = np.zeros_like(a2)
    e = 2 * q2
    ga2[:, :e, :e] = np.broadcast_to(0.25 * gfeat, (n, q2, 2, q2, 2, arch.c2)).reshape(
        n, e, e, arch.c2
    )
    gs2 = (ga2 * (1.0 - a2 * a2)).reshape(-1, arch.c2)
    g["conv2_w"] = cols2.reshape(-1, 9 * arch.c1).T @ gs2
    g["conv2_b"] = gs2.sum(axis=0)
    gcols2 = (gs2 @ w["conv2_w"].T).reshape(cols2.shape)
    gs1 = _kernels.col2im_unpool(gcols2, a1, arch.q1, arch.pad).reshape(-1, arch.c1)
    g["conv1_w"] = batch.cols.reshape(-1, 9).T @ gs1
    g["conv1_b"] = gs1.sum(axis=0)
    return np.concatenate([g[name].ravel() for name, _ in arch.shapes])


def embed_batch(extractor: ExtractorParams, patches) -> np.ndarray:
    """Latent vectors for a batch of standardized patches, shape ``(n, d)``."""
    batch = patches if isinstance(patches, PatchBatch) else PatchBatch(patches, extractor.arch)
    return _forward(extractor.arch, extractor.unpack(), batch)


def embed(extractor: ExtractorParams, patch) -> np.ndarray:
    values = getattr(patch, "values", patch)
    if getattr(patch, "standardized", True) is False:
        raise ValueError("embed expects a standardized patch")
    return embed_batch(extractor, np.asarray(values)[None])[0]


# ---------------------------------------------------------------------------
# exact GP


def normalize_targets(y) -> tuple[np.ndarray, float, float]:
    y = np.asarray(y, dtype=np.float64)
    mean = float(y.mean())
    std = float(y.std())
    if not std > 1e-12 * max(1.0, abs(mean)):
        std = 1.0
    return (y - mean) / std, mean, std


def denormalize(y_norm, mean: float, std: float) -> np.ndarray:
    return np.asarray(y_norm) * std + mean


def _cholesky_with_jitter(base: np.ndarray, noise: float, amplitude: float):
    n = base.shape[0]
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        K = base.copy()
        K.flat[:: n + 1] += noise + rel * amplitude
        L, info = lapack.dpotrf(K, lower=1, clean=1)
        if info == 0:
            return L, rel
        rel *= 10.0
    raise FactorizationError("kernel matrix not positive definite")


def gaussian_nll(K: np.ndarray, y: np.ndarray) -> float:
    """0.5 y^T K^-1 y + 0.5 log det K + (n/2) log 2 pi for a given covariance."""
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    L, info = lapack.dpotrf(K, lower=1, clean=1)
    if info != 0:
        raise FactorizationError("kernel matrix not positive definite")
    alpha, _ = lapack.dpotrs(L, y, lower=1)
    return float(0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * y.size * LOG_2PI)


@dataclass
class _Fit:
    L: np.ndarray
    alpha: np.ndarray
    z_train: np.ndarray
    jitter: float
    nll: float


def _gp_nll(z: np.ndarray, y: np.ndarray, hyper: np.ndarray, grad: bool):
    """NLL of normalized targets under the latent RBF GP, optionally with gradients.

    Returns ``(fit, grad_z, grad_hyper)``; gradients are ``None`` unless
    requested. The jitter is proportional to the prior variance, so it
    contributes to the outputscale gradient.
    """
    n = z.shape[0]
    amp = math.exp(2.0 * hyper[0])
    ell2 = math.exp(2.0 * hyper[1])
    noise = math.exp(hyper[2])
    D = _sqdist(z, z)
    E = amp * np.exp(-D / (2.0 * ell2))
    L, rel = _cholesky_with_jitter(E, noise, amp)
    alpha, _ = lapack.dpotrs(L, y, lower=1)
    value = float(0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * LOG_2PI)
    fit = _Fit(L=L, alpha=alpha, z_train=z, jitter=rel * amp, nll=value)
    if not grad:
        return fit, None, None
    Kinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise FactorizationError("kernel matrix not positive definite")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    G = 0.5 * (Kinv - np.outer(alpha, alpha))
    GE = G * E
    trG = float(np.trace(G))
    g_hyper = np.array(
        [
            2.0 * GE.sum() + 2.0 * rel * amp * trG,
            float((GE * D).sum()) / ell2,
            trG * noise,
        ]
    )
    A = GE / ell2
    gz = -2.0 * (A.sum(axis=1)[:, None] * z - A @ z)
    return fit, gz, g_hyper


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class SurrogateState:
    """Extractor, kernel hyperparameters and training data of one DKL model.

    ``indices`` records candidate indices of the training inputs when known
    (used by checkpoints). The factorization for the current parameters is
    cached lazily.
    """

    extractor: ExtractorParams
    kernel: KernelHyperparams
    inputs: PatchBatch
    targets: np.ndarray
    indices: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64).ravel()
        if t.size < 1 or t.size != len(self.inputs):
            raise ValueError("inputs and targets must have equal nonzero length")
        object.__setattr__(self, "targets", t)
        if self.indices is not None:
            object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    @classmethod
    def create(
        cls,
        arch: Architecture,
        patches,
        targets,
        seed: int = 0,
        kernel: Optional[KernelHyperparams] = None,
        indices=None,
    ) -> "SurrogateState":
        batch = patches if isinstance(patches, PatchBatch) else PatchBatch(patches, arch)
        return cls(
            extractor=init_extractor(arch, seed),
            kernel=kernel or KernelHyperparams(),
            inputs=batch,
            targets=targets,
            indices=indices,
        )

    @property
    def n(self) -> int:
        return self.targets.size

    @property
    def arch(self) -> Architecture:
        return self.extractor.arch

    def normalized_targets(self) -> tuple[np.ndarray, float, float]:
        if "norm" not in self._cache:
            self._cache["norm"] = normalize_targets(self.targets)
        return self._cache["norm"]

    def params(self) -> np.ndarray:
        return np.concatenate([self.extractor.weights, self.kernel.as_array()])

    def with_params(self, theta: np.ndarray) -> "SurrogateState":
        nw = self.arch.n_weights
        return replace(
            self,
            extractor=ExtractorParams(self.arch, theta[:nw].copy()),
            kernel=KernelHyperparams.from_array(theta[nw:]),
        )

    def with_data(self, patches, targets, indices=None) -> "SurrogateState":
        batch = patches if isinstance(patches, PatchBatch) else PatchBatch(patches, self.arch)
        return replace(self, inputs=batch, targets=targets, indices=indices)

    def fit(self) -> _Fit:
        if "fit" not in self._cache:
            y, _, _ = self.normalized_targets()
            z = _forward(self.arch, self.extractor.unpack(), self.inputs)
            self._cache["fit"], _, _ = _gp_nll(z, y, self.kernel.as_array(), grad=False)
        return self._cache["fit"]

    def kernel_matrix(self) -> np.ndarray:
        """Training covariance including noise and jitter."""
        fit = self.fit()
        K = kernel_matrix(self.kernel, fit.z_train, fit.z_train)
        K.flat[:: self.n + 1] += self.kernel.noise + fit.jitter
        return K


def nll(state: SurrogateState) -> float:
    return state.fit().nll


def nll_and_grad(state: SurrogateState) -> tuple[float, np.ndarray]:
    """NLL and its gradient with respect to ``state.params()``."""
    y, _, _ = state.normalized_targets()
    w = state.extractor.unpack()
    z, cache = _forward(state.arch, w, state.inputs, keep=True)
    fit, gz, gh = _gp_nll(z, y, state.kernel.as_array(), grad=True)
    gw = _backward(state.arch, w, state.inputs, cache, gz)
    return fit.nll, np.concatenate([gw, gh])


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 200
    step_size: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_extractor: bool = False


@dataclass
class TrainReport:
    trace: list = field(default_factory=list)
    best_iteration: int = 0
    initial_nll: float = float("nan")
    final_nll: float = float("nan")


def train(
    state: SurrogateState, schedule: TrainSchedule = TrainSchedule(), report: Optional[TrainReport] = None
) -> SurrogateState:
    """Joint Adam descent on the NLL over extractor weights and log hyperparameters.

    The best iterate seen (including the starting point) is returned, so the
    NLL never increases. ``report``, when given, receives the NLL trace.
    """
    if schedule.iterations <= 0:
        return state
    if state.n < 2:
        raise ValueError("training needs at least two points")
    theta = state.params()
    nw = state.arch.n_weights
    y, _, _ = state.normalized_targets()
    arch, batch, hyper_slice = state.arch, state.inputs, slice(nw, None)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = schedule.beta1, schedule.beta2
    best_val, best_theta, best_it = math.inf, theta.copy(), 0
    trace = []

    for it in range(schedule.iterations + 1):
        w = unpack_weights(arch, theta[:nw])
        if schedule.freeze_extractor:
            z = _forward(arch, w, batch)
            fit, _, gh = _gp_nll(z, y, theta[hyper_slice], grad=True)
            g = np.zeros_like(theta)
            g[hyper_slice] = gh
        else:
            z, cache = _forward(arch, w, batch, keep=True)
            fit, gz, gh = _gp_nll(z, y, theta[hyper_slice], grad=True)
            g = np.concatenate([_backward(arch, w, batch, cache, gz), gh])
        trace.append(fit.nll)
        if fit.nll < best_val:
            best_val, best_theta, best_it = fit.nll, theta.copy(), it
        if it == schedule.iterations:
            break
        t = it + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - schedule.step_size * mhat / (np.sqrt(vhat) + schedule.eps)

    if report is not None:
        report.trace = trace
        report.best_iteration = best_it
        report.initial_nll = trace[0]
        report.final_nll = best_val
    return state.with_params(best_theta)


# ---------------------------------------------------------------------------
# prediction


@dataclass(frozen=True, eq=False)
class Posterior:
    mean: np.ndarray
    variance: np.ndarray
    latents: Optional[np.ndarray] = None
    clamp_count: int = 0
    clamp_max: float = 0.0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def __len__(self) -> int:
        return self.mean.size


def posterior(state: SurrogateState, candidates) -> Posterior:
    """Predictive mean and latent-function variance at candidate patches.

    ``candidates`` may be an ``(N, p, p)`` array, a list of ``Patch`` or a
    precomputed ``PatchBatch``.
    """
    if isinstance(candidates, PatchBatch):
        batch = candidates
    else:
        if isinstance(candidates, Sequence) and len(candidates) and hasattr(candidates[0], "values"):
            candidates = np.stack([c.values for c in candidates])
        batch = PatchBatch(candidates, state.arch)
    fit = state.fit()
    _, y_mean, y_std = state.normalized_targets()
    zq = _forward(state.arch, state.extractor.unpack(), batch)
    return posterior_from_latents(state.kernel, fit, zq, y_mean, y_std)


def posterior_from_latents(kernel: KernelHyperparams, fit: _Fit, zq, y_mean=0.0, y_std=1.0) -> Posterior:
    Ks = kernel_matrix(kernel, zq, fit.z_train)
    mu = Ks @ fit.alpha
    V = solve_triangular(fit.L, Ks.T, lower=True, check_finite=False)
    var = kernel.amplitude - np.einsum("ij,ij->j", V, V)
    neg = var < 0
    clamp_count = int(neg.sum())
    clamp_max = float(-var[neg].min()) if clamp_count else 0.0
    var = np.where(neg, 0.0, var)
    return Posterior(
        mean=denormalize(mu, y_mean, y_std),
        variance=var * y_std**2,
        latents=zq,
        clamp_count=clamp_count,
        clamp_max=clamp_max,
    )
