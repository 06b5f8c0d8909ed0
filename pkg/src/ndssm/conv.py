"""FFT convolution over the trailing axes, its adjoint, and a state-space recurrence oracle.

Convolutions are linear (zero padded), never circular.  Two output alignments
exist: ``causal`` keeps ``y[i] = sum_j K[j] u[i - j]`` and ``centered`` shifts
by the kernel center ``(Lk - 1) // 2`` so odd-length kernels act symmetrically.
All spectral arithmetic runs in float64 regardless of the input dtype.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .errors import CapacityError, DomainError
from .kernel import DenseKernelSpec, KernelTensor
from .ssm import bandlimit_mask, discretize_arrays

MODES = ("causal", "centered")
ORACLE_MAX_LENGTH = 16
ORACLE_MAX_STATE = 4


def fft_workers() -> int | None:
    n = os.environ.get("NDSSM_THREADS")
    return int(n) if n else None


def _kernel_array(kernel):
    if isinstance(kernel, KernelTensor):
        return kernel.data
    return np.asarray(kernel)


def fft_shape(in_shape, k_shape, offsets=None) -> tuple:
    """Per-axis FFT sizes rounded up to a 5-smooth number.

    Without ``offsets`` each axis is padded to ``L + Lk - 1``.  With the crop
    ``offsets`` given, the smallest size whose circular wrap-around misses
    the cropped window is used instead: ``max(L + Lk - 1 - o, o + L)``.  The
    cropped output is the same linear convolution either way.
    """
    if offsets is None:
        need = [L + Lk - 1 for L, Lk in zip(in_shape, k_shape)]
    else:
        need = [max(L + Lk - 1 - o, o + L) for L, Lk, o in zip(in_shape, k_shape, offsets)]
    return tuple(sfft.next_fast_len(int(n), real=True) for n in need)


def _offsets(k_shape, mode):
    if mode == "causal":
        return (0,) * len(k_shape)
    if mode == "centered":
        return tuple((Lk - 1) // 2 for Lk in k_shape)
    raise DomainError(f"unknown convolution mode {mode!r}; expected one of {MODES}")


def _check(u_shape, k_shape, D, mode):
    if len(u_shape) < D:
        raise DomainError(f"input has {len(u_shape)} axes, kernel needs {D}")
    L, Lk = u_shape[-D:], k_shape[-D:]
    limit = [l if mode == "causal" else 2 * l - 1 for l in L]
    if any(k > m for k, m in zip(Lk, limit)):
        raise DomainError(f"kernel {tuple(Lk)} too long for input {tuple(L)} in {mode} mode")


@dataclass
class ConvCache:
    U: np.ndarray
    Kf: np.ndarray
    fshape: tuple
    offsets: tuple
    in_shape: tuple
    k_shape: tuple
    u_full_shape: tuple
    k_full_shape: tuple


def conv_forward(u, kernel, ndim: int, mode: str = "centered", minimal_pad: bool = False):
    """Convolve the trailing ``ndim`` axes; leading axes of ``u`` and ``kernel`` broadcast.

    Returns ``(y, cache)``; ``cache`` feeds :func:`conv_backward`.
    ``minimal_pad`` picks the smallest alias-free FFT size (see :func:`fft_shape`).
    """
    u = np.asarray(u, dtype=np.float64)
    k = np.asarray(_kernel_array(kernel), dtype=np.float64)
    _check(u.shape, k.shape, ndim, mode)
    axes = tuple(range(-ndim, 0))
    L, Lk = u.shape[-ndim:], k.shape[-ndim:]
    off = _offsets(Lk, mode)
    fshape = fft_shape(L, Lk, off if minimal_pad else None)
    w = fft_workers()
    U = sfft.rfftn(u, fshape, axes=axes, workers=w)
    Kf = sfft.rfftn(k, fshape, axes=axes, workers=w)
    full = sfft.irfftn(U * Kf, fshape, axes=axes, workers=w)
    crop = (Ellipsis,) + tuple(slice(o, o + l) for o, l in zip(off, L))
    y = full[crop]
    cache = ConvCache(U=U, Kf=Kf, fshape=fshape, offsets=off, in_shape=tuple(L),
                      k_shape=tuple(Lk), u_full_shape=u.shape, k_full_shape=k.shape)
    return np.ascontiguousarray(y), cache


def _sum_to_shape(x, shape):
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def conv_backward(upstream, cache: ConvCache, need_input: bool = True, need_kernel: bool = True):
    """Adjoint of :func:`conv_forward`: returns ``(grad_input, grad_kernel)``.

    Batch dimensions the kernel was broadcast over are summed in the
    frequency domain before the inverse transform.
    """
    g = np.asarray(upstream, dtype=np.float64)
    D = len(cache.fshape)
    axes = tuple(range(-D, 0))
    w = fft_workers()
    padded = np.zeros(g.shape[:-D] + cache.fshape)
    padded[(Ellipsis,) + tuple(slice(o, o + l) for o, l in zip(cache.offsets, cache.in_shape))] = g
    G = sfft.rfftn(padded, cache.fshape, axes=axes, workers=w)
    grad_u = grad_k = None
    if need_input:
        full = sfft.irfftn(G * np.conj(cache.Kf), cache.fshape, axes=axes, workers=w)
        grad_u = np.ascontiguousarray(full[(Ellipsis,) + tuple(slice(0, l) for l in cache.in_shape)])
        grad_u = _sum_to_shape(grad_u, cache.u_full_shape)
    if need_kernel:
        spec = G * np.conj(cache.U)
        spec = _sum_to_shape(spec, cache.k_full_shape[:-D] + spec.shape[-D:])
        full = sfft.irfftn(spec, cache.fshape, axes=axes, workers=w)
        grad_k = np.ascontiguousarray(full[(Ellipsis,) + tuple(slice(0, l) for l in cache.k_shape)])
    return grad_u, grad_k


def fft_conv_nd(u, kernel, mode: str = "centered") -> np.ndarray:
    """Linear convolution of ``u`` with ``kernel`` over the kernel's axes."""
    k = _kernel_array(kernel)
    u = np.asarray(u)
    if u.ndim != k.ndim:
        raise DomainError(f"input has {u.ndim} axes but kernel has {k.ndim}")
    y, _ = conv_forward(u, k, k.ndim, mode)
    return y.astype(np.result_type(u.dtype, k.dtype, np.float32), copy=False)


def fft_conv_backward(upstream, u, kernel, mode: str = "centered"):
    """``(grad_input, grad_kernel)`` of ``<upstream, fft_conv_nd(u, kernel)>``."""
    k = np.asarray(_kernel_array(kernel), dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if u.ndim != k.ndim or upstream.shape != u.shape:
        raise DomainError(f"shape mismatch: upstream {upstream.shape}, input {u.shape}, kernel {k.shape}")
    _, cache = conv_forward(u, k, k.ndim, mode)
    return conv_backward(upstream, cache)


def direct_conv_nd(u, kernel, mode: str = "centered") -> np.ndarray:
    """Nested-loop reference for :func:`fft_conv_nd` (small inputs only)."""
    u = np.asarray(u, dtype=np.float64)
    k = np.asarray(_kernel_array(kernel), dtype=np.float64)
    off = _offsets(k.shape, mode)
    y = np.zeros(u.shape)
    for i in np.ndindex(*u.shape):
        acc = 0.0
        for j in np.ndindex(*k.shape):
            src = tuple(ii + o - jj for ii, o, jj in zip(i, off, j))
            if all(0 <= s < L for s, L in zip(src, u.shape)):
                acc += k[j] * u[src]
        y[i] = acc
    return y


def recurrence_nd_oracle(u, spec: DenseKernelSpec, alpha: float = np.inf) -> np.ndarray:
    """Run the discretized multidimensional SSM as nested 1D scans.

    The scan over axis ``t`` turns a partial state of shape
    ``(L_1..L_D, N_1..N_t)`` into one with an extra state axis ``N_{t+1}``:
    ``x[i] = a_bar * x[i - 1] + b_bar (x) s[i]`` along spatial axis ``t``.
    The output is ``Re <C, x>`` at every position.  Zero initial state.
    """
    u = np.asarray(u, dtype=np.float64)
    D = spec.dims
    if D not in (2, 3):
        raise DomainError(f"the recurrence oracle supports 2 or 3 axes, got {D}")
    if u.ndim != D:
        raise DomainError(f"input has {u.ndim} axes, spec has {D}")
    if max(u.shape) > ORACLE_MAX_LENGTH or max(s.N for s in spec.bases) > ORACLE_MAX_STATE:
        raise CapacityError(f"oracle limited to lengths <= {ORACLE_MAX_LENGTH} and "
                            f"state sizes <= {ORACLE_MAX_STATE}")
    x = u.astype(complex)
    for t, base in enumerate(spec.bases):
        a_bar, b_bar, _ = discretize_arrays(base.a, base.b, base.delta, spec.method)
        drive = x[..., None] * b_bar          # (L..., N_1..N_t, N_{t+1})
        drive = np.moveaxis(drive, t, 0)
        state = np.zeros(drive.shape[1:], dtype=complex)
        out = np.empty_like(drive)
        for i in range(drive.shape[0]):
            state = a_bar * state + drive[i]
            out[i] = state
        x = np.moveaxis(out, 0, t)
    C = spec.C
    for t, base in enumerate(spec.bases):
        shape = [1] * D
        shape[t] = base.N
        C = C * bandlimit_mask(base.a, spec.mask_delta(t), alpha).reshape(shape)
    state_axes = tuple(range(D, 2 * D))
    return np.tensordot(x, C, axes=(state_axes, tuple(range(D)))).real


def _as_kernel_stack(kernels):
    if isinstance(kernels, np.ndarray):
        return kernels
    return np.stack([_kernel_array(k) for k in kernels])


def depthwise_forward(x, kernels, mode: str = "centered") -> np.ndarray:
    """Per-channel convolution of ``x`` shaped ``(C, L...)`` or ``(B, C, L...)``."""
    x = np.asarray(x)
    K = _as_kernel_stack(kernels)
    D = K.ndim - 1
    if x.ndim not in (D + 1, D + 2) or x.shape[-D - 1] != K.shape[0]:
        raise DomainError(f"{K.shape[0]} kernels for input of shape {x.shape}")
    y, _ = conv_forward(x, K, D, mode)
    return y


def depthwise_backward(upstream, x, kernels, mode: str = "centered"):
    """``(grad_x, grad_kernels)``; kernel gradients are summed over the batch."""
    K = _as_kernel_stack(kernels)
    D = K.ndim - 1
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-D - 1] != K.shape[0] or np.shape(upstream) != x.shape:
        raise DomainError("shape mismatch in depthwise backward")
    _, cache = conv_forward(x, K, D, mode)
    return conv_backward(upstream, cache)


STAGES = ("padding/crop", "forward-FFT", "pointwise", "inverse-FFT", "other")
FFT_PIPELINE = ("forward-FFT", "pointwise", "inverse-FFT")


@dataclass
class ProfileReport:
    shape: dict
    stage_times_ms: dict
    stage_fractions: dict
    repetitions: int
    output: np.ndarray = field(repr=False, default=None)

    @property
    def fft_pipeline_share(self) -> float:
        return sum(self.stage_fractions[s] for s in FFT_PIPELINE)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "stage_times_ms": self.stage_times_ms,
                "stage_fractions": self.stage_fractions, "repetitions": self.repetitions,
                "fft_pipeline_share": self.fft_pipeline_share}


def profile_conv(input_shape, kernel_shape, repetitions: int = 3, mode: str = "centered",
                 seed: int = 0) -> ProfileReport:
    """Time the stages of one FFT convolution; per-stage medians over ``repetitions``."""
    D = len(kernel_shape)
    input_shape = tuple(int(s) for s in input_shape)
    kernel_shape = tuple(int(s) for s in kernel_shape)
    _check(input_shape, kernel_shape, D, mode)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(input_shape)
    k = rng.standard_normal(kernel_shape)
    L = input_shape[-D:]
    fshape = fft_shape(L, kernel_shape)
    off = _offsets(kernel_shape, mode)
    axes = tuple(range(-D, 0))
    w = fft_workers()
    samples = {s: [] for s in STAGES}
    y = None
    for _ in range(max(1, int(repetitions))):
        t0 = time.perf_counter()
        up = np.zeros(input_shape[:-D] + fshape)
        up[(Ellipsis,) + tuple(slice(0, l) for l in L)] = u
        kp = np.zeros(fshape)
        kp[tuple(slice(0, l) for l in kernel_shape)] = k
        t1 = time.perf_counter()
        U = sfft.rfftn(up, axes=axes, workers=w)
        Kf = sfft.rfftn(kp, axes=axes, workers=w)
        t2 = time.perf_counter()
        P = U * Kf
        t3 = time.perf_counter()
        full = sfft.irfftn(P, fshape, axes=axes, workers=w)
        t4 = time.perf_counter()
        y = np.ascontiguousarray(full[(Ellipsis,) + tuple(slice(o, o + l) for o, l in zip(off, L))])
        t5 = time.perf_counter()
        del up, kp, U, Kf, P, full
        t6 = time.perf_counter()
        samples["padding/crop"].append((t1 - t0) + (t5 - t4))
        samples["forward-FFT"].append(t2 - t1)
        samples["pointwise"].append(t3 - t2)
        samples["inverse-FFT"].append(t4 - t3)
        samples["other"].append(t6 - t5)
    times = {s: float(np.median(v)) * 1e3 for s, v in samples.items()}
    total = sum(times.values())
    fractions = {s: t / total for s, t in times.items()}
    shape = {"input": list(input_shape), "kernel": list(kernel_shape), "fft": list(fshape), "mode": mode}
    return ProfileReport(shape=shape, stage_times_ms=times, stage_fractions=fractions,
                         repetitions=int(repetitions), output=y)
