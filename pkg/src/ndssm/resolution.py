"""Resolution changes: step-size rescaling, image resampling and multi-stage schedules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NDSSMError
from .kernel import FactoredKernelSpec
from .ssm import DiagonalSSM


def _counts(x, name):
    t = tuple(int(v) for v in np.atleast_1d(x))
    if any(v <= 0 for v in t):
        raise DomainError(f"{name} must be positive per axis, got {t}")
    return t


@dataclass(frozen=True)
class ResolutionPlan:
    train_resolution: tuple
    test_resolution: tuple

    def __post_init__(self):
        train = _counts(self.train_resolution, "train resolution")
        test = _counts(self.test_resolution, "test resolution")
        if len(train) != len(test):
            raise DomainError(f"train {train} and test {test} resolutions differ in rank")
        object.__setattr__(self, "train_resolution", train)
        object.__setattr__(self, "test_resolution", test)

    @property
    def delta_scale(self) -> tuple:
        return tuple(a / b for a, b in zip(self.train_resolution, self.test_resolution))

    @property
    def is_identity(self) -> bool:
        return self.train_resolution == self.test_resolution


def rescale_delta(spec: FactoredKernelSpec, plan: ResolutionPlan) -> FactoredKernelSpec:
    """Move a kernel to a new sampling resolution.

    Each axis step size is multiplied by ``train / test`` and the kernel
    lengths become the test resolution.  The bandlimit decision stays tied to
    the step sizes the coefficients were fitted at, so no mode that was masked
    during training is switched on by a resolution change.
    """
    if len(plan.test_resolution) != spec.dims:
        raise DomainError(f"plan has {len(plan.test_resolution)} axes, kernel has {spec.dims}")
    if plan.is_identity:
        return spec
    bases = tuple(b.replace(delta=b.delta * s) for b, s in zip(spec.bases, plan.delta_scale))
    mask_deltas = tuple(spec.mask_delta(t) for t in range(spec.dims))
    return spec.replace(bases=bases, lengths=plan.test_resolution, mask_deltas=mask_deltas)


def effective_kernel_length(ssm: DiagonalSSM) -> float:
    """Expected kernel length in samples, ``1 / delta``."""
    return 1.0 / ssm.delta


def _reflect(j, n):
    if n == 1:
        return np.zeros_like(j)
    period = 2 * (n - 1)
    j = np.mod(j, period)
    return np.where(j > n - 1, period - j, j)


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights ``(n_out, n_in)`` with half-pixel centers.

    When shrinking, the triangle filter is widened by the shrink factor
    (antialiasing).  Out-of-range taps reflect about the edge samples.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = int(np.floor(center - support - 0.5))
        hi = int(np.ceil(center + support + 0.5))
        j = np.arange(lo, hi + 1)
        w = np.maximum(0.0, 1.0 - np.abs(j + 0.5 - center) / support)
        np.add.at(W[i], _reflect(j, n_in), w)
    return W / W.sum(axis=1, keepdims=True)


def resample_image(image, target) -> np.ndarray:
    """Separable (bi/tri)linear resampling of the trailing ``len(target)`` axes."""
    image = np.asarray(image, dtype=np.float64)
    target = _counts(target, "target")
    D = len(target)
    if image.ndim < D:
        raise DomainError(f"image has {image.ndim} axes, target has {D}")
    out = image
    for t, n_out in enumerate(target):
        axis = image.ndim - D + t
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        W = resample_matrix(n_in, n_out)
        out = np.moveaxis(np.tensordot(out, W, axes=([axis], [1])), -1, axis)
    return out


@dataclass(frozen=True)
class Stage:
    resolution: tuple
    epochs: int
    alpha: float = np.inf
    lr_steps: int | None = None   # None: epochs * batches per epoch

    def __post_init__(self):
        object.__setattr__(self, "resolution", _counts(self.resolution, "stage resolution"))
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise DomainError(f"stage epochs must be a positive integer, got {self.epochs}")
        if not float(self.alpha) > 0:
            raise DomainError(f"stage alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ResizeSchedule:
    stages: tuple
    warmup_steps: int = 100

    def __post_init__(self):
        stages = tuple(s if isinstance(s, Stage) else Stage(**s) for s in self.stages)
        if not stages:
            raise DomainError("a schedule needs at least one stage")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def split(cls, resolutions, total_epochs: int, fractions, alphas, warmup_steps: int = 100):
        """Split an epoch budget, e.g. ``fractions=(0.8, 0.2)`` for an 80-20 schedule."""
        epochs = [max(1, int(round(total_epochs * f))) for f in fractions]
        return cls(tuple(Stage(r, e, a) for r, e, a in zip(resolutions, epochs, alphas)), warmup_steps)


class StageError(NDSSMError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause!r}")
        self.stage = stage


@dataclass
class ScheduleResult:
    metrics: list = field(default_factory=list)
    events: list = field(default_factory=list)


def run_schedule(schedule: ResizeSchedule, trainer, start_resolution=None, on_event=None) -> ScheduleResult:
    """Drive ``trainer(stage_index, stage, plan)`` through every stage in order.

    ``plan`` maps the previous stage's resolution (or ``start_resolution``) to
    this stage's; the trainer is expected to rescale its model with it, set
    the stage ``alpha``, restart its learning-rate schedule and train.  One
    ``schedule-reset`` event is emitted at the start of each stage.
    """
    result = ScheduleResult()
    current = schedule.stages[0].resolution if start_resolution is None else start_resolution
    for i, stage in enumerate(schedule.stages):
        event = {"event": "schedule-reset", "stage": i, "resolution": list(stage.resolution),
                 "alpha": stage.alpha, "warmup_steps": schedule.warmup_steps}
        result.events.append(event)
        if on_event is not None:
            on_event(event)
        plan = ResolutionPlan(current, stage.resolution)
        try:
            result.metrics.append(trainer(i, stage, plan))
        except Exception as exc:
            raise StageError(i, exc) from exc
        current = stage.resolution
    return result
