"""Isotropic classifier built from depthwise N-D SSM convolutions, plus training.

Layout: patch stem -> ``depth`` x [instance norm -> depthwise centered
convolution -> GELU -> pointwise channel mix -> residual] -> mean pool ->
linear head.  Forward and backward passes are written out by hand in float64.

Feature maps are ``(batch, channels, *spatial)``.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .conv import conv_backward, conv_forward
from .errors import ConfigError, DomainError, NumericalError, UsageError
from .resolution import ResizeSchedule, ResolutionPlan, run_schedule
from .ssm import INIT_KINDS, METHODS, basis_matrix, basis_matrix_ddelta, bandlimit_mask, init_ssm

log = logging.getLogger(__name__)

NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ssm"            # "ssm" or "conv"
    depth: int = 4
    width: int = 64
    n_classes: int = 4
    in_channels: int = 1
    patch: int = 1
    dims: int = 2
    state_size: int = 16
    rank: int = 1
    init: str = "fourier"
    method: str = "zoh"
    bidirectional: bool = True
    dt_min: float = 0.125         # per-axis step size range at ``resolution``
    dt_max: float = 1.0
    train_delta: bool = False
    conv_kernel: int = 3
    resolution: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if self.kind not in ("ssm", "conv"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.init not in INIT_KINDS:
            raise ConfigError(f"unknown init kind {self.init!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown discretization {self.method!r}")
        if self.depth < 0 or self.width < 1 or self.state_size < 1 or self.rank < 1 or self.patch < 1:
            raise ConfigError("depth must be >= 0; width, state size, rank and patch >= 1")
        if len(self.resolution) != self.dims:
            raise ConfigError(f"resolution {self.resolution} does not have {self.dims} axes")
        if any(r % self.patch for r in self.resolution):
            raise ConfigError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError("need 0 < dt_min <= dt_max")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd integer")


def _gelu_tanh(x):
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x, t=None):
    """Tanh approximation of GELU; ``t`` is a precomputed :func:`_gelu_tanh`."""
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * x * (1.0 + t)


def gelu_grad(x, t=None):
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _patchify(x, p):
    if p == 1:
        return x
    B, C = x.shape[:2]
    sp = x.shape[2:]
    D = len(sp)
    shape = (B, C) + sum(((s // p, p) for s in sp), ())
    x = x.reshape(shape)
    order = (0, 1) + tuple(3 + 2 * t for t in range(D)) + tuple(2 + 2 * t for t in range(D))
    return x.transpose(order).reshape((B, C * p ** D) + tuple(s // p for s in sp))


def _unpatchify(g, p, C, sp):
    if p == 1:
        return g
    B = g.shape[0]
    D = len(sp)
    g = g.reshape((B, C) + (p,) * D + tuple(s // p for s in sp))
    order = [0, 1]
    for t in range(D):
        order += [2 + D + t, 2 + t]
    return g.transpose(order).reshape((B, C) + tuple(sp))


def _outer_sum(factors):
    """``sum_r prod_t factors[t][:, r, i_t]`` for factors of shape ``(H, r, L_t)``."""
    letters = "ijklmn"[: len(factors)]
    spec = ",".join(f"hr{c}" for c in letters) + "->h" + letters
    return np.einsum(spec, *factors, optimize=True)


def _outer_grad(g, factors, t):
    letters = "ijklmn"[: len(factors)]
    ops = [f"hr{c}" for i, c in enumerate(letters) if i != t]
    spec = "h" + letters + "," + ",".join(ops) + f"->hr{letters[t]}"
    return np.einsum(spec, g, *[f for i, f in enumerate(factors) if i != t], optimize=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


class IsotropicModel:
    """Residual stack of depthwise convolution blocks at constant width.

    With ``config.kind == "ssm"`` every block's kernel is generated from a
    factored diagonal SSM (frozen ``a``, ``b`` shared across channels;
    per-channel ``c`` and step sizes).  With ``"conv"`` it is a learned
    ``k x k`` kernel that does not adapt to resolution.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.resolution = config.resolution
        self.alpha = np.inf
        self.params: dict = {}
        self.buffers: dict = {}
        self.mask_log_dt: dict | None = None  # per-block step sizes the mask is evaluated at
        self._cache = None
        self._init_params()

    # ------------------------------------------------------------------ setup
    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        H, D, N, r = cfg.width, cfg.dims, cfg.state_size, cfg.rank
        fan_in = cfg.in_channels * cfg.patch ** D
        P = self.params
        P["stem.w"] = rng.standard_normal((H, fan_in)) / math.sqrt(fan_in)
        P["stem.b"] = np.zeros(H)
        for l in range(cfg.depth):
            pre = f"blocks.{l}."
            P[pre + "norm.g"] = np.ones(H)
            P[pre + "norm.b"] = np.zeros(H)
            if cfg.kind == "ssm":
                ssm = init_ssm(cfg.init, N, seed=int(rng.integers(2 ** 31)))
                a = np.broadcast_to(ssm.a, (D, N)).copy()
                b = np.broadcast_to(ssm.b, (D, N)).copy()
                self.buffers[pre + "a"] = a
                self.buffers[pre + "b"] = b
                scale = 1.0 / math.sqrt(N)
                ndir = 2 if cfg.bidirectional else 1
                for d in ("fwd", "bwd")[:ndir]:
                    P[pre + f"c_{d}"] = (rng.standard_normal((H, D, r, N))
                                         + 1j * rng.standard_normal((H, D, r, N))) * scale / math.sqrt(2)
                P[pre + "log_dt"] = rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=(H, D))
            else:
                k = cfg.conv_kernel
                P[pre + "conv.k"] = rng.standard_normal((H,) + (k,) * D) / k ** (D / 2)
            P[pre + "mix.w"] = rng.standard_normal((H, H)) / math.sqrt(H)
            P[pre + "mix.b"] = np.zeros(H)
        P["head.w"] = rng.standard_normal((cfg.n_classes, H)) / math.sqrt(H)
        P["head.b"] = np.zeros(cfg.n_classes)

    @property
    def trainable(self) -> list:
        names = list(self.params)
        if not self.config.train_delta:
            names = [n for n in names if not n.endswith("log_dt")]
        return names

    @property
    def decayed(self) -> set:
        return {n for n in self.params if n.startswith(("stem.w", "head.w")) or n.endswith("mix.w")}

    def n_params(self) -> int:
        return int(sum(self.params[n].size * (2 if np.iscomplexobj(self.params[n]) else 1)
                       for n in self.trainable))

    # ------------------------------------------------------------ resolution
    def rescaled(self, plan: ResolutionPlan) -> "IsotropicModel":
        """A view of this model at ``plan.test_resolution``; ``self`` is not modified."""
        if plan.is_identity:
            return self
        other = copy.copy(self)
        other.params = dict(self.params)
        other.mask_log_dt = dict(self.mask_log_dt) if self.mask_log_dt else None
        other._cache = None
        other._rescale(plan, rebase_mask=False)
        return other

    def rescale_(self, plan: ResolutionPlan, rebase_mask: bool = True):
        """In-place resolution change, e.g. between progressive-resizing stages."""
        if not plan.is_identity:
            self._rescale(plan, rebase_mask)
        if rebase_mask:
            self.mask_log_dt = None
        return self

    def _rescale(self, plan, rebase_mask):
        cfg = self.config
        if len(plan.test_resolution) != cfg.dims:
            raise DomainError(f"plan has {len(plan.test_resolution)} axes, model has {cfg.dims}")
        if plan.train_resolution != self.resolution:
            raise DomainError(f"plan starts at {plan.train_resolution}, model is at {self.resolution}")
        if any(r % cfg.patch for r in plan.test_resolution):
            raise DomainError(f"resolution {plan.test_resolution} not divisible by patch {cfg.patch}")
        shift = np.log(np.asarray(plan.delta_scale))
        if cfg.kind == "ssm":
            if not rebase_mask and self.mask_log_dt is None:
                self.mask_log_dt = {l: self.params[f"blocks.{l}.log_dt"].copy() for l in range(cfg.depth)}
            for l in range(cfg.depth):
                name = f"blocks.{l}.log_dt"
                self.params[name] = self.params[name] + shift
        self.resolution = tuple(plan.test_resolution)

    def zero_masked_(self):
        """Zero the coefficients of bandlimited modes so that unmasking them later starts from zero."""
        cfg = self.config
        if cfg.kind != "ssm" or np.isinf(self.alpha):
            return self
        for l in range(cfg.depth):
            pre = f"blocks.{l}."
            log_dt = self.mask_log_dt[l] if self.mask_log_dt else self.params[pre + "log_dt"]
            for t in range(cfg.dims):
                mask = bandlimit_mask(self.buffers[pre + "a"][t], np.exp(log_dt[:, t]), self.alpha)
                for d in ("fwd", "bwd") if cfg.bidirectional else ("fwd",):
                    self.params[pre + f"c_{d}"][:, t] *= mask[:, None, :]
        return self

    # ---------------------------------------------------------------- kernels
    def block_kernel(self, l: int, lengths, keep: bool = False):
        """Depthwise kernel ``(H, *(2L - 1))`` of block ``l`` for spatial ``lengths``."""
        cfg = self.config
        pre = f"blocks.{l}."
        if cfg.kind == "conv":
            return self.params[pre + "conv.k"], None
        a, b = self.buffers[pre + "a"], self.buffers[pre + "b"]
        log_dt = self.params[pre + "log_dt"]
        dt = np.exp(log_dt)
        mask_dt = np.exp(self.mask_log_dt[l]) if self.mask_log_dt else dt
        dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        factors, saved = [], []
        for t, L in enumerate(lengths):
            V = basis_matrix(a[t], b[t], dt[:, t], L, cfg.method)            # (H, L, N)
            mask = bandlimit_mask(a[t], mask_dt[:, t], self.alpha)           # (H, N)
            halves = {}
            for d in dirs:
                c = self.params[pre + f"c_{d}"][:, t] * mask[:, None, :]     # (H, r, N)
                halves[d] = np.einsum("hrn,hln->hrl", c, V).real
            if cfg.bidirectional:
                k = np.concatenate([halves["bwd"][..., :0:-1], halves["fwd"]], axis=-1)
            else:
                k = halves["fwd"]
            factors.append(k)
            saved.append((V, mask, L))
        K = _outer_sum(factors)
        if not np.isfinite(K).all():
            raise NumericalError(f"non-finite kernel in block {l}")
        return K, (factors, saved) if keep else None

    def _kernel_backward(self, l, gK, kcache, grads):
        cfg = self.config
        pre = f"blocks.{l}."
        factors, saved = kcache
        a, b = self.buffers[pre + "a"], self.buffers[pre + "b"]
        dt = np.exp(self.params[pre + "log_dt"])
        dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        gc = {d: np.zeros_like(self.params[pre + f"c_{d}"]) for d in dirs}
        glog = np.zeros_like(dt)
        for t, (V, mask, L) in enumerate(saved):
            gk = _outer_grad(gK, factors, t)                                 # (H, r, Lout)
            if cfg.bidirectional:
                # center tap belongs to the forward half; backward sample 0 is unused
                bwd = np.concatenate([np.zeros_like(gk[..., :1]), gk[..., :L - 1][..., ::-1]], axis=-1)
                parts = {"fwd": gk[..., L - 1:], "bwd": bwd}
            else:
                parts = {"fwd": gk}
            dV = basis_matrix_ddelta(a[t], b[t], dt[:, t], L, cfg.method) if cfg.train_delta else None
            for d in dirs:
                g = parts[d]
                gc[d][:, t] = np.einsum("hrl,hln->hrn", g, V.conj()) * mask[:, None, :]
                if dV is not None:
                    c = self.params[pre + f"c_{d}"][:, t] * mask[:, None, :]
                    dk = np.einsum("hrn,hln->hrl", c, dV).real
                    glog[:, t] += (g * dk).sum(axis=(1, 2)) * dt[:, t]
        for d in dirs:
            grads[pre + f"c_{d}"] = gc[d]
        grads[pre + "log_dt"] = glog

    # ---------------------------------------------------------------- forward
    def block_forward(self, l: int, h, keep: bool = False):
        P, pre = self.params, f"blocks.{l}."
        D = self.config.dims
        axes = tuple(range(2, 2 + D))
        mu = h.mean(axis=axes, keepdims=True)
        var = h.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        zn = (h - mu) * inv
        bshape = (1, -1) + (1,) * D
        z = P[pre + "norm.g"].reshape(bshape) * zn + P[pre + "norm.b"].reshape(bshape)
        K, kcache = self.block_kernel(l, h.shape[2:], keep=keep)
        y, ccache = conv_forward(z, K, D, "centered", minimal_pad=True)
        t = _gelu_tanh(y)
        act = gelu(y, t)
        B, H = h.shape[:2]
        m = (P[pre + "mix.w"] @ act.reshape(B, H, -1)).reshape(h.shape) + P[pre + "mix.b"].reshape(bshape)
        out = h + m
        if not np.isfinite(out).all():
            raise NumericalError(f"non-finite activations after block {l}")
        cache = (zn, inv, y, t, act, ccache, kcache) if keep else None
        return out, cache

    def forward(self, x, keep: bool = True):
        """Logits for a batch ``(B, C, *spatial)``; ``keep`` retains activations for :meth:`backward`."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 + cfg.dims or x.shape[1] != cfg.in_channels:
            raise DomainError(f"expected input (B, {cfg.in_channels}, {cfg.dims} spatial axes), got {x.shape}")
        if any(s % cfg.patch for s in x.shape[2:]):
            raise DomainError(f"spatial shape {x.shape[2:]} not divisible by patch {cfg.patch}")
        P = self.params
        xp = _patchify(x, cfg.patch)
        B = x.shape[0]
        sp = xp.shape[2:]
        h = (P["stem.w"] @ xp.reshape(B, xp.shape[1], -1)).reshape((B, cfg.width) + sp) \
            + P["stem.b"].reshape((1, -1) + (1,) * cfg.dims)
        blocks = []
        for l in range(cfg.depth):
            h_in = h
            h, c = self.block_forward(l, h, keep=keep)
            blocks.append((h_in, c))
        pooled = h.reshape(B, cfg.width, -1).mean(axis=2)
        logits = pooled @ P["head.w"].T + P["head.b"]
        self._cache = (x, xp, blocks, pooled, sp) if keep else None
        return logits

    __call__ = forward

    def backward(self, dlogits) -> dict:
        """Gradients of all parameters given ``d loss / d logits`` from the last kept forward."""
        if self._cache is None:
            raise UsageError("backward called without a retained forward pass")
        cfg = self.config
        P = self.params
        x, xp, blocks, pooled, sp = self._cache
        self._cache = None
        B, H, D = x.shape[0], cfg.width, cfg.dims
        S = int(np.prod(sp))
        grads = {"head.w": dlogits.T @ pooled, "head.b": dlogits.sum(axis=0)}
        dh = np.broadcast_to((dlogits @ P["head.w"])[:, :, None] / S, (B, H, S)).reshape((B, H) + sp)
        axes = tuple(range(2, 2 + D))
        for l in reversed(range(cfg.depth)):
            pre = f"blocks.{l}."
            h_in, (zn, inv, y, t, act, ccache, kcache) = blocks[l]
            dm = dh.reshape(B, H, S)
            grads[pre + "mix.w"] = np.einsum("bos,bis->oi", dm, act.reshape(B, H, S), optimize=True)
            grads[pre + "mix.b"] = dm.sum(axis=(0, 2))
            dy = (P[pre + "mix.w"].T @ dm).reshape(y.shape) * gelu_grad(y, t)
            dz, dK = conv_backward(dy, ccache, need_input=True, need_kernel=True)
            if cfg.kind == "conv":
                grads[pre + "conv.k"] = dK
            else:
                self._kernel_backward(l, dK, kcache, grads)
            grads[pre + "norm.g"] = (dz * zn).sum(axis=(0,) + axes)
            grads[pre + "norm.b"] = dz.sum(axis=(0,) + axes)
            dzn = dz * P[pre + "norm.g"].reshape((1, -1) + (1,) * D)
            dnorm = inv * (dzn - dzn.mean(axis=axes, keepdims=True)
                           - zn * (dzn * zn).mean(axis=axes, keepdims=True))
            dh = dh + dnorm
        dflat = dh.reshape(B, H, S)
        grads["stem.w"] = np.einsum("bos,bis->oi", dflat, xp.reshape(B, xp.shape[1], S), optimize=True)
        grads["stem.b"] = dflat.sum(axis=(0, 2))
        return grads

    def loss_and_grads(self, x, labels):
        logits = self.forward(x, keep=True)
        loss, probs = cross_entropy(logits, labels)
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        grads = self.backward(d / len(labels))
        return loss, grads, logits

    def predict(self, x, batch_size: int = 100):
        out = [self.forward(x[i:i + batch_size], keep=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))

    # ------------------------------------------------------------ state dict
    def state_dict(self) -> dict:
        state = {f"param.{k}": v for k, v in self.params.items()}
        state.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        if self.mask_log_dt:
            state.update({f"mask_log_dt.{l}": v for l, v in self.mask_log_dt.items()})
        return state

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["resolution"] = list(cfg["resolution"])
        return {"model": cfg, "resolution": list(self.resolution),
                "alpha": None if np.isinf(self.alpha) else float(self.alpha)}

    @classmethod
    def from_state(cls, meta: dict, state: dict) -> "IsotropicModel":
        cfg = dict(meta["model"])
        cfg["resolution"] = tuple(cfg["resolution"])
        model = cls(ModelConfig(**cfg))
        model.resolution = tuple(meta["resolution"])
        model.alpha = np.inf if meta.get("alpha") is None else float(meta["alpha"])
        masks = {}
        for key, value in state.items():
            kind, _, name = key.partition(".")
            if kind == "param":
                target = model.params
            elif kind == "buffer":
                target = model.buffers
            elif kind == "mask_log_dt":
                masks[int(name)] = np.array(value, dtype=np.float64)
                continue
            else:
                raise DomainError(f"unknown state entry {key!r}")
            if name not in target:
                raise DomainError(f"state entry {key!r} does not match the model config")
            if target[name].shape != value.shape:
                raise DomainError(f"{key}: shape {value.shape}, expected {target[name].shape}")
            target[name] = np.array(value, dtype=target[name].dtype)
        model.mask_log_dt = masks or None
        return model


def Conv2dBaselineModel(config: ModelConfig | None = None, **kw) -> IsotropicModel:
    """Same backbone with fixed-size learned depthwise kernels."""
    config = config or ModelConfig()
    return IsotropicModel(replace(config, kind="conv", **kw))


# ------------------------------------------------------------------ training
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 50
    lr: float = 0.01
    weight_decay: float = 0.03
    schedule: str = "cosine"
    warmup_steps: int = 100
    seed: int = 0
    alpha: float = np.inf
    precision: str = "f64"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if not float(self.alpha) > 0:
            raise ConfigError("alpha must be positive or inf")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")


def lr_at(step: int, total: int, base: float, warmup: int, schedule: str = "cosine") -> float:
    """Linear warmup then cosine decay to zero at ``total`` steps."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant" or total <= warmup:
        return base
    frac = min(1.0, (step - warmup) / (total - warmup))
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; complex tensors are updated on their real views."""

    def __init__(self, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8, decayed=()):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.decayed = set(decayed)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}
        self.skipped = 0

    def step(self, params: dict, grads: dict, lr: float, names=None) -> bool:
        names = list(grads) if names is None else names
        bad = [n for n in names if not np.isfinite(grads[n]).all()]
        if bad:
            self.skipped += 1
            log.warning("skipping optimizer step: non-finite gradient in %s", ", ".join(bad))
            return False
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in names:
            p = params[n]
            pr = p.view(np.float64)
            g = np.ascontiguousarray(grads[n], dtype=p.dtype).view(np.float64)
            if n not in self.m:
                self.m[n] = np.zeros_like(pr)
                self.v[n] = np.zeros_like(pr)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if n in self.decayed and self.weight_decay:
                pr *= 1.0 - lr * self.weight_decay
            pr -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def optimizer_step(model: IsotropicModel, optimizer: AdamW, grads: dict, lr: float) -> bool:
    return optimizer.step(model.params, grads, lr, names=model.trainable)


def evaluate(model: IsotropicModel, x, y, batch_size: int = 100):
    """``(accuracy, loss)`` of ``model`` on arrays ``x``, ``y``."""
    if len(y) == 0:
        return float("nan"), float("nan")
    logits = model.predict(x, batch_size)
    loss, _ = cross_entropy(logits, y)
    return float((logits.argmax(axis=1) == y).mean()), loss


def evaluate_zero_shot(model: IsotropicModel, dataset, resolution, split: str = "val",
                       batch_size: int = 100):
    """Accuracy at ``resolution`` after rescaling step sizes, without retraining."""
    res = tuple(int(r) for r in np.broadcast_to(resolution, (model.config.dims,)))
    x, y = dataset.arrays(split, res)
    shifted = model.rescaled(ResolutionPlan(model.resolution, res))
    return evaluate(shifted, x, y, batch_size)


@dataclass
class TrainRecord:
    metrics: list = field(default_factory=list)
    best: dict = field(default_factory=dict)    # resolution -> {"epoch", "accuracy", "state"}
    step_times_ms: list = field(default_factory=list)
    skipped_steps: int = 0


def _cast(x, precision):
    return x.astype(np.float32).astype(np.float64) if precision == "f32" else x


def train(model: IsotropicModel, dataset, config: TrainConfig, eval_resolutions=None,
          metrics_sink=None, optimizer: AdamW | None = None, epoch_offset: int = 0,
          lr_steps: int | None = None, record: TrainRecord | None = None) -> TrainRecord:
    """Minibatch training at ``model.resolution``.

    After every epoch the validation split is evaluated at each of
    ``eval_resolutions`` (zero-shot for resolutions other than the training
    one) and the best parameters per resolution are kept in the record.
    """
    record = record or TrainRecord()
    res = model.resolution
    evals = [res] if eval_resolutions is None else [tuple(np.broadcast_to(r, (len(res),))) for r in eval_resolutions]
    evals = [tuple(int(v) for v in r) for r in evals]
    model.alpha = float(config.alpha)
    model.zero_masked_()
    x, y = dataset.arrays("train", res)
    x = _cast(x, config.precision)
    n = len(y)
    steps_per_epoch = math.ceil(n / config.batch_size) if n else 0
    total = lr_steps or config.epochs * steps_per_epoch
    if optimizer is None:
        optimizer = AdamW(config.weight_decay, config.betas, config.eps, model.decayed)
    rng = np.random.default_rng([config.seed, epoch_offset])
    step = 0

    def emit(rec):
        record.metrics.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum, correct, lr = 0.0, 0, config.lr
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size:(s + 1) * config.batch_size]
            ts = time.perf_counter()
            loss, grads, logits = model.loss_and_grads(x[idx], y[idx])
            lr = lr_at(step, total, config.lr, config.warmup_steps, config.schedule)
            optimizer_step(model, optimizer, grads, lr)
            record.step_times_ms.append((time.perf_counter() - ts) * 1e3)
            step += 1
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        ep = epoch_offset + epoch
        emit({"epoch": ep, "split": "train", "resolution": list(res),
              "accuracy": correct / max(n, 1), "loss": loss_sum / max(n, 1), "lr": lr,
              "wall_ms": (time.perf_counter() - t0) * 1e3})
        for r in evals:
            t1 = time.perf_counter()
            acc, vloss = evaluate_zero_shot(model, dataset, r, "val")
            emit({"epoch": ep, "split": "val", "resolution": list(r), "accuracy": acc,
                  "loss": vloss, "lr": lr, "wall_ms": (time.perf_counter() - t1) * 1e3})
            best = record.best.get(r)
            if best is None or acc > best["accuracy"]:
                record.best[r] = {"epoch": ep, "accuracy": acc,
                                  "state": {k: v.copy() for k, v in model.params.items()},
                                  "resolution": res}
    record.skipped_steps += optimizer.skipped
    return record


def train_progressive(model: IsotropicModel, dataset, config: TrainConfig, schedule: ResizeSchedule,
                      eval_resolutions=None, metrics_sink=None, on_event=None) -> TrainRecord:
    """Train through the stages of ``schedule``, rescaling the model between them."""
    record = TrainRecord()
    optimizer = AdamW(config.weight_decay, config.betas, config.eps, model.decayed)
    offset = [0]

    def trainer(i, stage, plan):
        model.rescale_(plan, rebase_mask=True)
        stage_cfg = replace(config, epochs=stage.epochs, alpha=stage.alpha,
                            warmup_steps=schedule.warmup_steps)
        train(model, dataset, stage_cfg, eval_resolutions, metrics_sink, optimizer,
              epoch_offset=offset[0], lr_steps=stage.lr_steps, record=record)
        offset[0] += stage.epochs
        return record.metrics[-1]

    def event(ev):
        record.metrics.append(ev)
        if metrics_sink is not None:
            metrics_sink(ev)
        if on_event is not None:
            on_event(ev)

    run_schedule(schedule, trainer, start_resolution=model.resolution, on_event=event)
    return record


def load_best(model: IsotropicModel, record: TrainRecord, resolution) -> IsotropicModel:
    """Copy of ``model`` holding the best parameters recorded for ``resolution``."""
    best = record.best[tuple(int(r) for r in resolution)]
    out = copy.copy(model)
    out.params = {k: v.copy() for k, v in best["state"].items()}
    out.resolution = best["resolution"]
    out.mask_log_dt = None
    out._cache = None
    return out
