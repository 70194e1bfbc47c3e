"""Noise-schedule algebra for training and few-step inference.

All arithmetic is carried out on Python floats (IEEE double).  Running
products are accumulated left to right so that ``values[t] ==
values[t-1] * (1 - betas[t-1])`` holds exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigurationError, ContractError, ScheduleSamplingError

MAX_SAMPLING_ATTEMPTS = 100
DEFAULT_MANTISSAS = (1, 2, 3, 4, 5, 6, 7, 8, 9)


def _check_increasing(values: Sequence[float], what: str) -> None:
    if len(values) < 1:
        raise ContractError(f"{what} must contain at least one value")
    for i, b in enumerate(values):
        if not (isinstance(b, (int, float)) and math.isfinite(b) and 0.0 < b < 1.0):
            raise ContractError(f"{what}[{i + 1}] = {b!r} is not in (0, 1)")
    for i in range(1, len(values)):
        if not values[i] > values[i - 1]:
            raise ContractError(
                f"{what} must be strictly increasing; step {i + 1} ({values[i]!r}) "
                f"<= step {i} ({values[i - 1]!r})"
            )


@dataclass(frozen=True)
class NoiseSchedule:
    """Training schedule beta_1..beta_T."""

    betas: tuple[float, ...]
    # (beta_min, beta_max) when built by linear_schedule; only affects serialization
    linear: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        _check_increasing(self.betas, "betas")

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        if self.linear is not None:
            return {"type": "linear", "beta_min": self.linear[0], "beta_max": self.linear[1], "T": self.T}
        return {"type": "explicit", "betas": list(self.betas)}


@dataclass(frozen=True)
class InferenceSchedule:
    """Few-step reverse schedule beta_hat_1..beta_hat_N."""

    betas_hat: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "betas_hat", tuple(float(b) for b in self.betas_hat))
        _check_increasing(self.betas_hat, "betas_hat")

    @property
    def N(self) -> int:
        return len(self.betas_hat)

    def to_dict(self) -> dict:
        return {"betas_hat": list(self.betas_hat)}

    def __str__(self) -> str:
        return "[" + ", ".join(repr(b) for b in self.betas_hat) + "]"


@dataclass(frozen=True)
class AlphaBarCurve:
    """Noise levels alpha_bar_0..alpha_bar_T with alpha_bar_0 = 1."""

    values: tuple[float, ...]

    @property
    def T(self) -> int:
        return len(self.values) - 1


@dataclass(frozen=True)
class ScheduleRange:
    """Per-step half-open intervals [low_n, high_n) for drawing beta_hat."""

    per_step_ranges: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.per_step_ranges)
        object.__setattr__(self, "per_step_ranges", ranges)
        if not ranges:
            raise ConfigurationError("ScheduleRange needs at least one step")
        prev_low = 0.0
        for n, (lo, hi) in enumerate(ranges, start=1):
            if not (0.0 < lo < hi <= 1.0):
                raise ConfigurationError(f"step {n}: need 0 < low < high <= 1, got [{lo}, {hi})")
            if lo < prev_low:
                raise ConfigurationError(f"step {n}: lower bounds must be nondecreasing")
            prev_low = lo

    @property
    def N(self) -> int:
        return len(self.per_step_ranges)

    def to_dict(self) -> dict:
        return {"ranges": [list(r) for r in self.per_step_ranges]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleRange":
        return cls(tuple(tuple(r) for r in d["ranges"]))


@dataclass(frozen=True)
class ValidationPolicy:
    max_ratio: float = 1e3
    alpha_bar_N_max: float = 0.7
    # None means: alpha_bar_T of the training schedule passed to the validator
    alpha_bar_N_min: float | None = None

    def __post_init__(self):
        if not self.max_ratio > 1:
            raise ConfigurationError("max_ratio must exceed 1")
        if not 0 < self.alpha_bar_N_max < 1:
            raise ConfigurationError("alpha_bar_N_max must lie in (0, 1)")
        if self.alpha_bar_N_min is not None and not 0 < self.alpha_bar_N_min < self.alpha_bar_N_max:
            raise ConfigurationError("need 0 < alpha_bar_N_min < alpha_bar_N_max")


@dataclass(frozen=True)
class Violation:
    rule: str  # "range", "ratio" or "alpha_bar_N"
    step: int | None
    value: float
    bound: float

    def describe(self) -> str:
        where = f" at step {self.step}" if self.step is not None else ""
        return {
            "range": f"rule (a) range violated{where}: {self.value!r} vs bound {self.bound!r}",
            "ratio": f"rule (b) ratio violated{where}: {self.value:.6g} > {self.bound:.6g}",
            "alpha_bar_N": f"rule (c) final noise level {self.value:.6g} outside bound {self.bound:.6g}",
        }[self.rule]


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": [
                {"rule": v.rule, "step": v.step, "value": v.value, "bound": v.bound}
                for v in self.violations
            ],
        }


def linear_schedule(beta_min: float, beta_max: float, T: int) -> NoiseSchedule:
    """Betas interpolated affinely from ``beta_min`` to ``beta_max`` over T steps."""
    if not (isinstance(T, int) and T >= 2):
        raise ConfigurationError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ConfigurationError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    step = (beta_max - beta_min) / (T - 1)
    betas = [beta_min + t * step for t in range(T)]
    betas[-1] = beta_max
    return NoiseSchedule(tuple(betas), linear=(float(beta_min), float(beta_max)))


def paper_training_schedule() -> NoiseSchedule:
    return linear_schedule(1e-6, 1e-2, 1000)


def _running_product(betas: Iterable[float]) -> tuple[float, ...]:
    out = [1.0]
    for b in betas:
        out.append(out[-1] * (1.0 - b))
    return tuple(out)


def alpha_bar(schedule: NoiseSchedule | Sequence[float]) -> AlphaBarCurve:
    """Noise-level curve of a training schedule.

    Accepts a raw beta sequence as well, which allows degenerate test inputs
    (e.g. zeros) that a ``NoiseSchedule`` would reject.
    """
    betas = schedule.betas if isinstance(schedule, NoiseSchedule) else schedule
    return AlphaBarCurve(_running_product(betas))


def alpha_bar_infer(infer: InferenceSchedule) -> tuple[float, ...]:
    return _running_product(infer.betas_hat)


def validate_inference_schedule(
    infer: InferenceSchedule,
    train: NoiseSchedule,
    policy: ValidationPolicy | None = None,
) -> ValidationReport:
    """Check an inference schedule against the three design rules.

    Rules, checked in order and all reported:
      (a) beta_1 <= beta_hat_1, strictly increasing, beta_hat_N < 1;
      (b) beta_hat_n / beta_hat_{n-1} <= max_ratio for n >= 2;
      (c) alpha_bar_hat_N in [alpha_bar_N_min, alpha_bar_N_max].
    """
    policy = policy or ValidationPolicy()
    b = infer.betas_hat
    out: list[Violation] = []

    if b[0] < train.betas[0]:
        out.append(Violation("range", 1, b[0], train.betas[0]))
    for n in range(1, len(b)):
        if not b[n] > b[n - 1]:
            out.append(Violation("range", n + 1, b[n], b[n - 1]))
    if not b[-1] < 1.0:
        out.append(Violation("range", len(b), b[-1], 1.0))

    for n in range(1, len(b)):
        ratio = b[n] / b[n - 1]
        if ratio > policy.max_ratio:
            out.append(Violation("ratio", n + 1, ratio, policy.max_ratio))

    abar_N = alpha_bar_infer(infer)[-1]
    lower = policy.alpha_bar_N_min
    if lower is None:
        lower = alpha_bar(train).values[-1]
    if abar_N < lower:
        out.append(Violation("alpha_bar_N", None, abar_N, lower))
    if abar_N > policy.alpha_bar_N_max:
        out.append(Violation("alpha_bar_N", None, abar_N, policy.alpha_bar_N_max))
    return ValidationReport(tuple(out))


def sample_schedule_from_range(
    rng, schedule_range: ScheduleRange, max_attempts: int = MAX_SAMPLING_ATTEMPTS
) -> InferenceSchedule:
    """Draw each beta_hat_n uniformly from its interval.

    Draws that are not strictly increasing (possible only with overlapping
    intervals) are rejected and redrawn. ``rng`` needs a numpy-style
    ``uniform(low, high)`` accepting arrays.
    """
    lows = [lo for lo, _ in schedule_range.per_step_ranges]
    highs = [hi for _, hi in schedule_range.per_step_ranges]
    for _ in range(max_attempts):
        draw = [float(v) for v in rng.uniform(lows, highs)]
        if any(not (lo <= v < hi) for v, lo, hi in zip(draw, lows, highs)):
            continue
        if all(draw[i] > draw[i - 1] for i in range(1, len(draw))):
            return InferenceSchedule(tuple(draw))
    raise ScheduleSamplingError(
        f"no strictly increasing draw from {schedule_range.per_step_ranges} "
        f"after {max_attempts} attempts"
    )


def _decade_exponent(x: float) -> int | None:
    e = round(math.log10(x))
    return e if math.isclose(10.0**e, x, rel_tol=1e-12) else None


def enumerate_grid(
    schedule_range: ScheduleRange, mantissas: Iterable[float] = DEFAULT_MANTISSAS
) -> list[InferenceSchedule]:
    """All ``m * 10**d`` combinations inside the per-step ranges, kept if strictly increasing.

    Values are built from their decimal text so they serialize exactly.
    Output is in lexicographic order of the beta_hat tuples.
    """
    mantissas = sorted(set(mantissas))
    if not mantissas or any(not (1 <= m < 10) for m in mantissas):
        raise ConfigurationError("mantissas must lie in [1, 10)")
    per_step = []
    for n, (lo, hi) in enumerate(schedule_range.per_step_ranges, start=1):
        d_lo, d_hi = _decade_exponent(lo), _decade_exponent(hi)
        if d_lo is None or d_hi is None:
            raise ConfigurationError(f"step {n}: range [{lo}, {hi}) does not span whole decades")
        values = sorted(
            {float(f"{m!r}e{d}") for d in range(d_lo, d_hi) for m in mantissas}
        )
        per_step.append([v for v in values if lo <= v < hi])
    grid = [
        InferenceSchedule(combo)
        for combo in itertools.product(*per_step)
        if all(combo[i] > combo[i - 1] for i in range(1, len(combo)))
    ]
    if not grid:
        raise ConfigurationError("grid enumeration produced no strictly increasing schedule")
    return grid


def paper_range(N: int) -> ScheduleRange:
    """Fine-tuning ranges for the three reverse-step counts used in the experiments."""
    if N == 6:
        return ScheduleRange(tuple((10.0 ** (n - 7), 10.0 ** (n - 6)) for n in range(1, 7)))
    if N == 3:
        return ScheduleRange(((1e-6, 1e-4), (1e-4, 1e-2), (1e-1, 1.0)))
    if N == 2:
        return ScheduleRange(((1e-5, 1e-2), (1e-1, 1.0)))
    raise ConfigurationError(f"no preset range for N={N}")


# Best schedules found by grid search for the baseline model, and the manual
# replacement used for N=2 at test time.
PAPER_SEARCHED = {
    6: InferenceSchedule((0.000006, 0.00002, 0.0001, 0.001, 0.02, 0.3)),
    3: InferenceSchedule((0.00005, 0.005, 0.3)),
    2: InferenceSchedule((0.0001, 0.3)),
}
PAPER_CORRECTED_N2 = InferenceSchedule((0.001, 0.5))


def schedule_from_dict(d: dict) -> NoiseSchedule | InferenceSchedule:
    """Parse either serialized schedule form."""
    if "betas_hat" in d:
        return InferenceSchedule(tuple(d["betas_hat"]))
    kind = d.get("type")
    if kind == "linear":
        return linear_schedule(float(d["beta_min"]), float(d["beta_max"]), int(d["T"]))
    if kind == "explicit":
        return NoiseSchedule(tuple(d["betas"]))
    raise ConfigurationError(f"unknown schedule document: {d!r}")


def schedule_to_dict(s: NoiseSchedule | InferenceSchedule) -> dict:
    return s.to_dict()
