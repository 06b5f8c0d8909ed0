"""Multidimensional kernels built from per-axis diagonal SSMs.

Two constructions are provided:

* the factored form, a sum of ``r`` outer products of 1D SSM kernels (one per
  axis), which is what the model uses;
* the dense form, ``K = Re <C, (x)_tau V_tau>`` for an arbitrary coefficient
  tensor ``C``, which is exponential in the number of axes and exists as a
  reference.

Because each 1D kernel takes a real part, the dense tensor equivalent to a
factored spec lives on the conjugate-completed basis ``[a, conj(a)]`` with
coefficients ``[c / 2, conj(c) / 2]`` on every axis (see
:meth:`FactoredKernelSpec.to_dense`).
"""
from __future__ import annotations

import dataclasses
import string
from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import CapacityError, DomainError, NumericalError
from .ssm import DiagonalSSM, bandlimit_mask, basis_matrix, basis_matrix_ddelta, init_ssm

DENSE_STATE_LIMIT = 2 ** 20


@dataclass(frozen=True, eq=False)
class KernelTensor:
    data: np.ndarray
    delta: tuple
    centered: bool = False

    @property
    def shape(self):
        return self.data.shape


def _as_coeffs(c, N):
    c = np.array(c, dtype=complex, copy=True)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[1] != N:
        raise DomainError(f"coefficients must have shape (rank, {N}), got {c.shape}")
    c.setflags(write=False)
    return c


@dataclass(frozen=True, eq=False)
class FactoredKernelSpec:
    """Rank-``r`` factored ND kernel.

    ``bases[t]`` supplies ``a``, ``b`` and ``delta`` for axis ``t`` (its own
    ``c`` is not used); ``coeffs[t]`` holds the ``r`` coefficient vectors of
    that axis.  When ``coeffs_backward`` is given the kernel is bidirectional
    and each axis has ``2 * lengths[t] - 1`` samples centered on the middle.
    ``mask_deltas`` fixes the step sizes used by the bandlimit decision
    (``None`` means the current ``delta``).
    """

    bases: tuple
    coeffs: tuple
    lengths: tuple
    method: str = "zoh"
    coeffs_backward: tuple | None = None
    mask_deltas: tuple | None = None

    def __post_init__(self):
        bases = tuple(self.bases)
        D = len(bases)
        if D < 1:
            raise DomainError("a kernel needs at least one axis")
        coeffs = tuple(_as_coeffs(c, s.N) for c, s in zip(self.coeffs, bases))
        if len(coeffs) != D or len(self.lengths) != D:
            raise DomainError("bases, coeffs and lengths must have one entry per axis")
        ranks = {c.shape[0] for c in coeffs}
        if len(ranks) != 1:
            raise DomainError(f"all axes must have the same rank, got {sorted(ranks)}")
        lengths = tuple(int(L) for L in self.lengths)
        if any(L < 1 for L in lengths):
            raise DomainError(f"kernel lengths must be >= 1, got {lengths}")
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "lengths", lengths)
        if self.coeffs_backward is not None:
            bwd = tuple(_as_coeffs(c, s.N) for c, s in zip(self.coeffs_backward, bases))
            if [c.shape for c in bwd] != [c.shape for c in coeffs]:
                raise DomainError("backward coefficients must match forward coefficient shapes")
            object.__setattr__(self, "coeffs_backward", bwd)
        if self.mask_deltas is not None:
            md = tuple(None if d is None else float(d) for d in self.mask_deltas)
            if len(md) != D:
                raise DomainError("mask_deltas needs one entry per axis")
            object.__setattr__(self, "mask_deltas", md)

    @property
    def dims(self) -> int:
        return len(self.bases)

    @property
    def rank(self) -> int:
        return self.coeffs[0].shape[0]

    @property
    def bidirectional(self) -> bool:
        return self.coeffs_backward is not None

    @property
    def deltas(self) -> tuple:
        return tuple(s.delta for s in self.bases)

    @property
    def output_shape(self) -> tuple:
        if self.bidirectional:
            return tuple(2 * L - 1 for L in self.lengths)
        return self.lengths

    def mask_delta(self, axis: int) -> float:
        if self.mask_deltas is None or self.mask_deltas[axis] is None:
            return self.bases[axis].delta
        return self.mask_deltas[axis]

    def replace(self, **changes) -> "FactoredKernelSpec":
        return dataclasses.replace(self, **changes)

    def to_dense(self) -> "DenseKernelSpec":
        """Equivalent dense spec on the conjugate-completed basis (causal kernels only)."""
        if self.bidirectional:
            raise DomainError("the dense form represents causal kernels only")
        bases = []
        for s in self.bases:
            bases.append(DiagonalSSM(a=np.concatenate([s.a, s.a.conj()]),
                                     b=np.concatenate([s.b, s.b.conj()]),
                                     c=np.zeros(2 * s.N), delta=s.delta,
                                     init_kind=s.init_kind, bidirectional=False))
        C = 0
        for i in range(self.rank):
            term = np.ones(())
            for c in self.coeffs:
                full = np.concatenate([c[i], c[i].conj()]) / 2
                term = np.multiply.outer(term, full)
            C = C + term
        return DenseKernelSpec(bases=tuple(bases), C=C, lengths=self.lengths,
                               method=self.method, mask_deltas=self.mask_deltas)


@dataclass(frozen=True, eq=False)
class DenseKernelSpec:
    bases: tuple
    C: np.ndarray
    lengths: tuple
    method: str = "zoh"
    mask_deltas: tuple | None = None

    def __post_init__(self):
        bases = tuple(self.bases)
        C = np.array(self.C, dtype=complex, copy=True)
        if C.shape != tuple(s.N for s in bases):
            raise DomainError(f"C has shape {C.shape}, expected {tuple(s.N for s in bases)}")
        if len(self.lengths) != len(bases):
            raise DomainError("lengths needs one entry per axis")
        C.setflags(write=False)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "lengths", tuple(int(L) for L in self.lengths))

    @property
    def dims(self) -> int:
        return len(self.bases)

    def mask_delta(self, axis: int) -> float:
        if self.mask_deltas is None or self.mask_deltas[axis] is None:
            return self.bases[axis].delta
        return self.mask_deltas[axis]


def make_factored_spec(dims: int, N: int, lengths, *, rank: int = 1, kind: str = "fourier",
                       deltas=1.0, seed: int = 0, bidirectional: bool = True,
                       method: str = "zoh") -> FactoredKernelSpec:
    """Fresh factored spec with every axis initialized by :func:`init_ssm`."""
    if np.ndim(deltas) == 0:
        deltas = (float(deltas),) * dims
    if np.ndim(lengths) == 0:
        lengths = (int(lengths),) * dims
    ss = np.random.SeedSequence(seed)
    bases, fwd, bwd = [], [], []
    for t, child in enumerate(ss.spawn(dims)):
        seeds = child.generate_state(2 * rank + 1)
        base = init_ssm(kind, N, deltas[t], seed=int(seeds[0]), bidirectional=bidirectional)
        bases.append(base)
        fwd.append(np.stack([init_ssm(kind, N, deltas[t], seed=int(s)).c for s in seeds[1:rank + 1]]))
        bwd.append(np.stack([init_ssm(kind, N, deltas[t], seed=int(s)).c for s in seeds[rank + 1:]]))
    return FactoredKernelSpec(bases=tuple(bases), coeffs=tuple(fwd), lengths=tuple(lengths),
                              method=method, coeffs_backward=tuple(bwd) if bidirectional else None)


def _axis_parts(spec: FactoredKernelSpec, axis: int, alpha: float):
    base = spec.bases[axis]
    L = spec.lengths[axis]
    V = basis_matrix(base.a, base.b, base.delta, L, spec.method)
    mask = bandlimit_mask(base.a, spec.mask_delta(axis), alpha)
    return V, mask


def axis_kernels(spec: FactoredKernelSpec, alpha: float = np.inf) -> list:
    """Per-axis 1D kernels, one array of shape ``(rank, output_length)`` per axis."""
    out = []
    for t in range(spec.dims):
        V, mask = _axis_parts(spec, t, alpha)
        fwd = (spec.coeffs[t] * mask) @ V.T
        if spec.bidirectional:
            bwd = (spec.coeffs_backward[t] * mask) @ V.T
            k = np.concatenate([bwd[:, :0:-1], fwd], axis=1)
        else:
            k = fwd
        out.append(k.real)
    return out


def combine_axis_kernels(kernels) -> np.ndarray:
    """``sum_i outer(k_i^(1), ..., k_i^(D))`` for per-axis arrays of shape ``(rank, L_t)``."""
    K = np.asarray(kernels[0], dtype=float)
    for k in kernels[1:]:
        k = np.asarray(k, dtype=float)
        K = K[..., None] * k.reshape((k.shape[0],) + (1,) * (K.ndim - 1) + (k.shape[1],))
    return K.sum(axis=0)


def assemble_factored(spec: FactoredKernelSpec, alpha: float = np.inf,
                      counter: dict | None = None) -> KernelTensor:
    kernels = axis_kernels(spec, alpha)
    K = combine_axis_kernels(kernels)
    if not np.all(np.isfinite(K)):
        raise NumericalError("assembled kernel has non-finite entries")
    if counter is not None:
        r = spec.rank
        per_axis = sum(L * s.N for L, s in zip(spec.lengths, spec.bases))
        counter["madds"] = counter.get("madds", 0) + r * per_axis + r * prod(K.shape)
    return KernelTensor(data=K, delta=spec.deltas, centered=spec.bidirectional)


def assemble_dense(spec: DenseKernelSpec, alpha: float = np.inf,
                   counter: dict | None = None) -> KernelTensor:
    """``K[k] = Re sum_n C[n] prod_t b_bar_t[n_t] a_bar_t[n_t] ** k_t`` (causal)."""
    states = prod(s.N for s in spec.bases)
    if states > DENSE_STATE_LIMIT:
        raise CapacityError(f"dense coefficient tensor has {states} entries, limit {DENSE_STATE_LIMIT}")
    C = spec.C
    for t, s in enumerate(spec.bases):
        mask = bandlimit_mask(s.a, spec.mask_delta(t), alpha)
        shape = [1] * spec.dims
        shape[t] = s.N
        C = C * mask.reshape(shape)
    Vs = [basis_matrix(s.a, s.b, s.delta, L, spec.method) for s, L in zip(spec.bases, spec.lengths)]
    letters = string.ascii_lowercase
    n_idx = letters[:spec.dims]
    k_idx = letters[spec.dims:2 * spec.dims]
    expr = n_idx + "," + ",".join(k + n for k, n in zip(k_idx, n_idx)) + "->" + k_idx
    K = np.einsum(expr, C, *Vs, optimize=True)
    if counter is not None:
        counter["madds"] = counter.get("madds", 0) + states * prod(spec.lengths)
    return KernelTensor(data=K.real, delta=tuple(s.delta for s in spec.bases), centered=False)


def inflate_2d_to_3d(spec2d: FactoredKernelSpec, temporal_init: str, temporal_delta: float,
                     seed: int, temporal_N: int | None = None,
                     temporal_length: int | None = None) -> FactoredKernelSpec:
    """Append a freshly initialized third (temporal) axis to a 2D factored spec.

    The spatial axes are carried over unchanged.  The temporal axis defaults
    to the state size of the first axis and to ``ceil(1 / temporal_delta)``
    samples.
    """
    if spec2d.dims != 2:
        raise DomainError(f"expected a 2D spec, got {spec2d.dims} axes")
    N = spec2d.bases[0].N if temporal_N is None else temporal_N
    L = int(np.ceil(1.0 / temporal_delta - 1e-9)) if temporal_length is None else temporal_length
    L = max(L, 1)
    r = spec2d.rank
    seeds = np.random.SeedSequence(seed).generate_state(2 * r + 1)
    base = init_ssm(temporal_init, N, temporal_delta, seed=int(seeds[0]),
                    bidirectional=spec2d.bidirectional)
    fwd = np.stack([init_ssm(temporal_init, N, temporal_delta, seed=int(s)).c for s in seeds[1:r + 1]])
    bwd = None
    if spec2d.bidirectional:
        bwd = spec2d.coeffs_backward + (
            np.stack([init_ssm(temporal_init, N, temporal_delta, seed=int(s)).c for s in seeds[r + 1:]]),)
    mask_deltas = None
    if spec2d.mask_deltas is not None:
        mask_deltas = spec2d.mask_deltas + (None,)
    return FactoredKernelSpec(bases=spec2d.bases + (base,), coeffs=spec2d.coeffs + (fwd,),
                              lengths=spec2d.lengths + (L,), method=spec2d.method,
                              coeffs_backward=bwd, mask_deltas=mask_deltas)


@dataclass
class KernelGrads:
    c: list                  # per axis, (rank, N) complex: dL/dRe + i dL/dIm
    c_backward: list | None
    log_delta: list | None   # per axis float


def _contract_others(upstream, kernels, axis, i):
    D = upstream.ndim
    letters = string.ascii_lowercase[:D]
    operands = [upstream]
    subs = [letters]
    for t in range(D):
        if t != axis:
            operands.append(kernels[t][i])
            subs.append(letters[t])
    return np.einsum(",".join(subs) + "->" + letters[axis], *operands)


def kernel_grad_wrt_c(spec: FactoredKernelSpec, upstream, alpha: float = np.inf,
                      wrt_log_delta: bool = False) -> KernelGrads:
    """Gradients of ``<upstream, K>`` with respect to the coefficient vectors.

    Complex gradients are returned as ``dL/dRe(c) + 1j * dL/dIm(c)``.  With
    ``wrt_log_delta`` the derivative with respect to ``log(delta)`` of each
    axis is included (the bandlimit mask is held fixed).
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != spec.output_shape:
        raise DomainError(f"upstream shape {upstream.shape} != kernel shape {spec.output_shape}")
    kernels = axis_kernels(spec, alpha)
    gc, gb, gd = [], [] if spec.bidirectional else None, [] if wrt_log_delta else None
    for t in range(spec.dims):
        V, mask = _axis_parts(spec, t, alpha)
        L = spec.lengths[t]
        g = np.stack([_contract_others(upstream, kernels, t, i) for i in range(spec.rank)])
        if spec.bidirectional:
            g_fwd = g[:, L - 1:]
            g_bwd = np.zeros_like(g_fwd)
            g_bwd[:, 1:] = g[:, :L - 1][:, ::-1]
        else:
            g_fwd = g
        gc.append((g_fwd @ V.conj()) * mask)
        if spec.bidirectional:
            gb.append((g_bwd @ V.conj()) * mask)
        if wrt_log_delta:
            base = spec.bases[t]
            dV = basis_matrix_ddelta(base.a, base.b, base.delta, L, spec.method)
            total = np.sum(g_fwd * ((spec.coeffs[t] * mask) @ dV.T).real)
            if spec.bidirectional:
                total += np.sum(g_bwd * ((spec.coeffs_backward[t] * mask) @ dV.T).real)
            gd.append(float(total * base.delta))
    return KernelGrads(c=gc, c_backward=gb, log_delta=gd)
