"""Diagonal state-space models: initialization, discretization, kernel sampling.

A diagonal SSM with state matrix ``diag(a)`` and input vector ``b`` has basis
kernels ``K_n(t) = b_n exp(t a_n)``; the convolution kernel is the combination
``K(t) = Re(sum_n c_n K_n(t))``.  Only one member of each conjugate pair is
stored, and the real part of the sum is taken, so every sampled kernel is real.

Time is measured in units where ``delta`` is the time between two samples.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericalError

INIT_KINDS = ("fourier", "inverse-decay", "linear-decay", "random-linear", "random-inverse")
METHODS = ("direct-sample", "zoh", "bilinear")

# below this |delta * a| the ZOH input weight uses its Taylor series
_ZOH_SERIES_CUTOFF = 1e-6


def _frozen(x, dtype=complex):
    arr = np.array(x, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiagonalSSM:
    """Continuous-time diagonal SSM ``x' = diag(a) x + b u``, ``y = Re(c . x)``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float
    init_kind: str = "fourier"
    bidirectional: bool = True

    def __post_init__(self):
        a, b, c = _frozen(self.a), _frozen(self.b), _frozen(self.c)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "delta", float(self.delta))
        if not (a.shape == b.shape == c.shape):
            raise DomainError(f"a, b, c must share length N, got {a.shape}, {b.shape}, {c.shape}")
        if a.size == 0:
            raise DomainError("state dimension N must be >= 1")
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise DomainError(f"delta must be a positive finite number, got {self.delta}")
        if np.any(a.real > 0):
            n = int(np.argmax(a.real > 0))
            raise DomainError(f"unstable mode: Re(a[{n}]) = {a[n].real} > 0")
        if self.init_kind not in INIT_KINDS:
            raise ConfigError(f"unknown init kind {self.init_kind!r}")

    @property
    def N(self) -> int:
        return self.a.size

    def replace(self, **changes) -> "DiagonalSSM":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DiscreteRealization:
    a_bar: np.ndarray
    b_bar: np.ndarray
    method: str
    delta: float
    log_a_bar: np.ndarray  # log of a_bar, exact (delta * a) for exponential rules


@dataclass(frozen=True, eq=False)
class BandlimitPolicy:
    alpha: float
    mask: np.ndarray  # True = coefficient kept


def init_ssm(kind: str, N: int, delta: float = 1.0, seed: int = 0,
             bidirectional: bool = True) -> DiagonalSSM:
    """Build a diagonal SSM from one of the standard initialization families.

    All kinds share ``Re(a_n) = -1/2`` and differ in the imaginary parts:

    - ``fourier``: ``pi * n``, ``b = (1, sqrt 2, sqrt 2, ...)``
    - ``linear-decay``: ``pi * n``, ``b = 1``
    - ``inverse-decay``: ``(N / pi) * (N / (2n + 1) - 1)``, ``b = 1``
    - ``random-linear`` / ``random-inverse``: the two laws above evaluated at
      ``n + u_n`` with ``u_n ~ U[0, 1)``

    ``c`` is complex normal with variance ``1 / N``.
    """
    if kind not in INIT_KINDS:
        raise ConfigError(f"unsupported init kind {kind!r}; expected one of {INIT_KINDS}")
    if int(N) != N or N < 1:
        raise DomainError(f"N must be a positive integer, got {N}")
    N = int(N)
    rng = np.random.default_rng(seed)
    n = np.arange(N, dtype=float)
    if kind.startswith("random"):
        n = n + rng.uniform(0.0, 1.0, size=N)
    if kind in ("fourier", "linear-decay", "random-linear"):
        freq = np.pi * n
    else:
        freq = (N / np.pi) * (N / (2 * n + 1) - 1)
    a = -0.5 + 1j * freq
    b = np.ones(N, dtype=complex)
    if kind == "fourier":
        b[1:] = np.sqrt(2.0)
    c = (rng.standard_normal(N) + 1j * rng.standard_normal(N)) / np.sqrt(2.0 * N)
    return DiagonalSSM(a=a, b=b, c=c, delta=delta, init_kind=kind, bidirectional=bidirectional)


def discretize_arrays(a, b, delta, method: str):
    """Discretize arrays of diagonal parameters.

    ``delta`` broadcasts against the leading dimensions of ``a``.  Returns
    ``(a_bar, b_bar, log_a_bar)``.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    delta = np.asarray(delta, dtype=float)
    if delta.ndim:
        delta = delta[..., None]
    z = delta * a
    if method == "direct-sample":
        return np.exp(z), b * np.ones_like(z), z
    if method == "zoh":
        small = np.abs(z) < _ZOH_SERIES_CUTOFF
        safe_z = np.where(small, 1.0, z)
        ratio = np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(safe_z) / safe_z)
        return np.exp(z), delta * ratio * b, z
    if method == "bilinear":
        den = 1.0 - z / 2
        if np.any(np.abs(den) < 1e-300):
            n = np.argwhere(np.abs(den) < 1e-300)[0]
            raise NumericalError(f"bilinear pole: delta * a = 2 at index {tuple(int(i) for i in n)}")
        a_bar = (1.0 + z / 2) / den
        with np.errstate(divide="ignore"):
            log_a_bar = np.log(a_bar.astype(complex))
        return a_bar, delta * b / den, log_a_bar
    raise ConfigError(f"unknown discretization method {method!r}; expected one of {METHODS}")


def discretize(ssm: DiagonalSSM, method: str = "zoh") -> DiscreteRealization:
    a_bar, b_bar, log_a_bar = discretize_arrays(ssm.a, ssm.b, ssm.delta, method)
    for arr in (a_bar, b_bar, log_a_bar):
        arr.setflags(write=False)
    return DiscreteRealization(a_bar=a_bar, b_bar=b_bar, method=method, delta=ssm.delta,
                              log_a_bar=log_a_bar)


def _powers(log_a_bar, a_bar, L, method):
    k = np.arange(L, dtype=float)
    if method == "bilinear":
        # a_bar may be exactly zero (delta * a = -2); integer powers handle that
        return np.power(a_bar[..., None, :], np.arange(L)[:, None])
    return np.exp(k[:, None] * log_a_bar[..., None, :])


def basis_matrix(a, b, delta, L: int, method: str = "zoh") -> np.ndarray:
    """Discrete basis kernels ``V[..., k, n] = b_bar_n * a_bar_n ** k``, shape ``(..., L, N)``."""
    a_bar, b_bar, log_a_bar = discretize_arrays(a, b, delta, method)
    return b_bar[..., None, :] * _powers(log_a_bar, a_bar, L, method)


def basis_matrix_ddelta(a, b, delta, L: int, method: str = "zoh") -> np.ndarray:
    """Derivative of :func:`basis_matrix` with respect to ``delta``."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    d = np.asarray(delta, dtype=float)
    if d.ndim:
        d = d[..., None]
    z = d * a
    k = np.arange(L, dtype=float)[:, None]
    ez = np.exp(k * z[..., None, :])
    if method == "direct-sample":
        return (b * a)[..., None, :] * k * ez
    if method == "zoh":
        e1 = np.exp(z)[..., None, :]
        return b[..., None, :] * ez * (e1 + k * (e1 - 1.0))
    if method == "bilinear":
        den = 1.0 - z / 2
        a_bar = (1.0 + z / 2) / den
        b_bar = d * b / den
        kk = np.arange(L)
        pk = np.power(a_bar[..., None, :], kk[:, None])
        pkm1 = np.power(a_bar[..., None, :], np.maximum(kk - 1, 0)[:, None])
        da = (a / den ** 2)[..., None, :]
        db = (b / den ** 2)[..., None, :]
        return db * pk + b_bar[..., None, :] * k * pkm1 * da
    raise ConfigError(f"unknown discretization method {method!r}")


def sample_kernel(real: DiscreteRealization, c, L: int) -> np.ndarray:
    """Sample ``K[k] = Re(sum_n c_n b_bar_n a_bar_n**k)`` for ``k < L``."""
    if int(L) != L or L < 1:
        raise DomainError(f"kernel length must be >= 1, got {L}")
    c = np.asarray(c, dtype=complex).reshape(-1)
    if c.shape != real.a_bar.shape:
        raise DomainError(f"c has length {c.size}, expected {real.a_bar.size}")
    with np.errstate(over="ignore", invalid="ignore"):
        V = real.b_bar[None, :] * _powers(real.log_a_bar, real.a_bar, int(L), real.method)
        terms = V * c
    bad = ~np.isfinite(terms).all(axis=0)
    if bad.any():
        n = int(np.argmax(bad))
        raise NumericalError(f"non-finite kernel contribution from state index {n} "
                             f"(|a_bar| = {abs(real.a_bar[n]):.6g})")
    return terms.sum(axis=1).real


def apply_bandlimit(ssm: DiagonalSSM, alpha: float, reference_delta: float | None = None):
    """Zero the coefficients whose basis frequency lies above ``alpha`` times Nyquist.

    Coefficient ``n`` is kept iff ``|Im a_n| / (2 pi) * delta <= alpha / 2``.
    ``reference_delta`` overrides the step size used for the decision; after a
    zero-shot resolution change the mask stays at the step size the
    coefficients were trained with.
    """
    alpha = float(alpha)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive or inf, got {alpha}")
    delta = ssm.delta if reference_delta is None else float(reference_delta)
    mask = bandlimit_mask(ssm.a, delta, alpha)
    mask.setflags(write=False)
    masked = ssm.replace(c=np.where(mask, ssm.c, 0))
    return masked, BandlimitPolicy(alpha=alpha, mask=mask)


def bandlimit_mask(a, delta, alpha: float) -> np.ndarray:
    """Vectorized keep-mask; ``delta`` broadcasts against the leading dims of ``a``."""
    a = np.asarray(a, dtype=complex)
    delta = np.asarray(delta, dtype=float)
    if delta.ndim:
        delta = delta[..., None]
    cycles_per_sample = np.abs(a.imag) / (2 * np.pi) * delta
    if np.isinf(alpha):
        return np.ones(cycles_per_sample.shape, dtype=bool)
    return cycles_per_sample <= alpha / 2


def bidirectional_kernel(ssm: DiagonalSSM, c_forward, c_backward, L: int,
                         method: str = "zoh") -> np.ndarray:
    """Noncausal kernel of length ``2L - 1`` centered at index ``L - 1``.

    The right half (including the center) is the forward kernel, the left half
    is the mirrored backward kernel without its first sample.
    """
    real = discretize(ssm, method)
    fwd = sample_kernel(real, c_forward, L)
    bwd = sample_kernel(real, c_backward, L)
    return np.concatenate([bwd[:0:-1], fwd])
