"""Profiled performance models for stages on heterogeneous processing units.

Holds the offline-profiled cost tables (base latency, bandwidth demand),
the per-(model, PU) contention-slowdown parameters, and quadratic
regressions that interpolate/extrapolate costs for workload shapes that
were never profiled.

All types here are immutable after construction and safe to share across
concurrently running simulations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import InsufficientSamples, InvalidParams, ParseError, UnsupportedConfig

# Relative tolerance for float comparisons inside the engine.
REL_TOL = 1e-9

# Floor applied to regression predictions so costs stay strictly positive.
_MIN_PREDICTION = 1e-9

PROFILE_COLUMNS = ("model_id", "pu_id", "shape", "latency_ms", "bandwidth_gbps", "mu", "theta", "p")


class PuClass(Enum):
    CPU = "cpu"
    GPU = "gpu"
    NPU = "npu"


@dataclass(frozen=True)
class PuSpec:
    """One processing unit on the SoC."""

    pu_id: str
    pu_class: PuClass
    notes: str = ""


@dataclass(frozen=True)
class Platform:
    """A set of PUs sharing one DRAM pool.

    ``dram_peak_bandwidth`` is the physical peak (GB/s); the soft budget is
    the admission threshold used by bandwidth-aware policies and defaults
    to the peak.
    """

    pus: tuple[PuSpec, ...]
    dram_peak_bandwidth: float
    soft_bandwidth_budget: float | None = None

    def __post_init__(self):
        if not self.pus:
            raise InvalidParams("platform needs at least one PU")
        ids = [p.pu_id for p in self.pus]
        if len(set(ids)) != len(ids):
            raise InvalidParams(f"duplicate pu_id in platform: {ids}")
        if self.dram_peak_bandwidth <= 0:
            raise InvalidParams("dram_peak_bandwidth must be > 0")
        if self.soft_bandwidth_budget is None:
            object.__setattr__(self, "soft_bandwidth_budget", self.dram_peak_bandwidth)
        if self.soft_bandwidth_budget <= 0:
            raise InvalidParams("soft_bandwidth_budget must be > 0")

    @property
    def pu_ids(self) -> tuple[str, ...]:
        return tuple(p.pu_id for p in self.pus)

    def pu(self, pu_id: str) -> PuSpec:
        for p in self.pus:
            if p.pu_id == pu_id:
                return p
        raise InvalidParams(f"unknown pu_id {pu_id!r}")

    def by_class(self, pu_class: PuClass) -> PuSpec | None:
        for p in self.pus:
            if p.pu_class == pu_class:
                return p
        return None


def _soc(name: str, bandwidth: float) -> Platform:
    return Platform(
        pus=(
            PuSpec("cpu", PuClass.CPU, notes=name),
            PuSpec("gpu", PuClass.GPU, notes=name),
            PuSpec("npu", PuClass.NPU, notes=name),
        ),
        dram_peak_bandwidth=bandwidth,
    )


# Bundled device presets. Peak DRAM bandwidth per SoC generation.
PLATFORM_PRESETS: dict[str, Platform] = {
    "8gen3": _soc("snapdragon-8gen3", 76.8),
    "8gen4": _soc("snapdragon-8gen4", 84.8),
}


def platform_preset(name: str) -> Platform:
    try:
        return PLATFORM_PRESETS[name]
    except KeyError:
        raise InvalidParams(f"unknown platform preset {name!r}; known: {sorted(PLATFORM_PRESETS)}")


@dataclass(frozen=True)
class ConfigKey:
    """One runnable configuration: a model on a PU at a workload shape.

    ``shape`` is the batch size for batchable stages and the token-group
    size for streaming stages.
    """

    model_id: str
    pu_id: str
    shape: int

    def __post_init__(self):
        if self.shape < 1:
            raise InvalidParams(f"shape must be >= 1, got {self.shape}")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.model_id, self.pu_id)


@dataclass(frozen=True)
class SlowdownParams:
    """Parameters of the contention-slowdown curve for one (model, PU).

    The curve is ``1 + sensitivity * max(0, (B - knee_fraction*B0)/B0) ** exponent``:
    flat at 1 below the knee, growing monotonically as aggregate demand
    approaches and exceeds the DRAM peak.
    """

    sensitivity: float = 1.0
    knee_fraction: float = 0.8
    exponent: float = 1.0

    def __post_init__(self):
        if self.sensitivity < 0:
            raise InvalidParams("sensitivity must be >= 0")
        if not (0 < self.knee_fraction <= 1):
            raise InvalidParams("knee_fraction must lie in (0, 1]")
        if self.exponent < 1:
            raise InvalidParams("exponent must be >= 1")


def slowdown(params: SlowdownParams, total_bandwidth: float, b0: float) -> float:
    """Contention slowdown factor at aggregate demand ``total_bandwidth``.

    Always >= 1 and non-decreasing in the aggregate; exactly 1 below the
    knee and for zero-sensitivity (compute-bound) stages.
    """
    if total_bandwidth < 0:
        raise InvalidParams("total_bandwidth must be >= 0")
    if b0 <= 0:
        raise InvalidParams("b0 must be > 0")
    excess = (total_bandwidth - params.knee_fraction * b0) / b0
    if excess <= 0:
        return 1.0
    return 1.0 + params.sensitivity * excess**params.exponent


@dataclass(frozen=True)
class PairFit:
    """Least-squares quadratic-in-shape fit for one (model, PU) target."""

    intercept: float
    coef_shape: float
    coef_shape_sq: float
    rss: float
    n_samples: int
    min_shape: int
    max_shape: int

    def predict(self, shape: float) -> float:
        value = self.intercept + self.coef_shape * shape + self.coef_shape_sq * shape * shape
        return max(value, _MIN_PREDICTION)


def _fit_quadratic(shapes: list[int], values: list[float]) -> PairFit:
    x = np.asarray(shapes, dtype=float)
    y = np.asarray(values, dtype=float)
    design = np.column_stack([np.ones_like(x), x, x * x])
    coefs, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coefs
    return PairFit(
        intercept=float(coefs[0]),
        coef_shape=float(coefs[1]),
        coef_shape_sq=float(coefs[2]),
        rss=float(resid @ resid),
        n_samples=len(shapes),
        min_shape=min(shapes),
        max_shape=max(shapes),
    )


@dataclass(frozen=True)
class CostPrediction:
    """A cost lookup result, with provenance for reporting."""

    value: float
    from_table: bool
    extrapolated: bool


@dataclass(frozen=True)
class RegressionModel:
    """Per-(model, PU) quadratic fits for latency and bandwidth."""

    latency_fits: Mapping[tuple[str, str], PairFit]
    bandwidth_fits: Mapping[tuple[str, str], PairFit]

    def _fit(self, fits: Mapping[tuple[str, str], PairFit], key: ConfigKey) -> tuple[PairFit, bool]:
        fit = fits.get(key.pair)
        if fit is None:
            raise UnsupportedConfig(key.model_id, key.pu_id, "pair not fitted")
        extrapolated = not (fit.min_shape <= key.shape <= fit.max_shape)
        return fit, extrapolated

    def predict_latency(self, key: ConfigKey) -> CostPrediction:
        fit, extra = self._fit(self.latency_fits, key)
        return CostPrediction(fit.predict(key.shape), from_table=False, extrapolated=extra)

    def predict_bandwidth(self, key: ConfigKey) -> CostPrediction:
        fit, extra = self._fit(self.bandwidth_fits, key)
        return CostPrediction(fit.predict(key.shape), from_table=False, extrapolated=extra)

    @property
    def residual_stats(self) -> dict[tuple[str, str], dict[str, float]]:
        return {
            pair: {
                "latency_rss": self.latency_fits[pair].rss,
                "bandwidth_rss": self.bandwidth_fits[pair].rss,
                "n_samples": float(self.latency_fits[pair].n_samples),
            }
            for pair in self.latency_fits
        }


def fit_regression(samples: Iterable[tuple[ConfigKey, float, float]]) -> RegressionModel:
    """Fit per-(model, PU) quadratic models from (key, latency, bandwidth) samples.

    Raises InsufficientSamples if any pair present has fewer than two
    distinct samples.
    """
    grouped: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    for key, latency, bandwidth in samples:
        grouped.setdefault(key.pair, []).append((key.shape, latency, bandwidth))
    if not grouped:
        raise InsufficientSamples("no samples given")
    latency_fits: dict[tuple[str, str], PairFit] = {}
    bandwidth_fits: dict[tuple[str, str], PairFit] = {}
    for pair, rows in grouped.items():
        if len(rows) < 2:
            raise InsufficientSamples(f"pair {pair} has {len(rows)} sample(s); need >= 2")
        shapes = [r[0] for r in rows]
        latency_fits[pair] = _fit_quadratic(shapes, [r[1] for r in rows])
        bandwidth_fits[pair] = _fit_quadratic(shapes, [r[2] for r in rows])
    return RegressionModel(latency_fits=latency_fits, bandwidth_fits=bandwidth_fits)


@dataclass(frozen=True)
class ProfileEntry:
    """One profiled measurement row."""

    model_id: str
    pu_id: str
    shape: int
    latency_ms: float
    bandwidth_gbps: float
    slowdown: SlowdownParams = field(default_factory=SlowdownParams)


class StageProfile:
    """Offline-profiled cost tables plus interpolating regressions.

    Profiled shapes are answered from the tables exactly; unprofiled
    shapes fall back to the per-pair quadratic regression (pairs with a
    single profiled shape fall back to that shape's value, flagged as
    extrapolated). Immutable after construction.
    """

    def __init__(self, entries: Iterable[ProfileEntry]):
        self._latency: dict[ConfigKey, float] = {}
        self._bandwidth: dict[ConfigKey, float] = {}
        self._shapes: dict[tuple[str, str], tuple[int, ...]] = {}
        self._slowdown: dict[tuple[str, str], SlowdownParams] = {}
        shape_sets: dict[tuple[str, str], set[int]] = {}
        for e in entries:
            if e.latency_ms <= 0 or e.bandwidth_gbps <= 0:
                raise InvalidParams(
                    f"profile entry for ({e.model_id}, {e.pu_id}, {e.shape}) must have positive costs"
                )
            key = ConfigKey(e.model_id, e.pu_id, e.shape)
            if key in self._latency:
                raise InvalidParams(f"duplicate profile entry for {key}")
            pair = key.pair
            prev = self._slowdown.get(pair)
            if prev is not None and prev != e.slowdown:
                raise InvalidParams(f"inconsistent slowdown params for pair {pair}")
            self._latency[key] = e.latency_ms
            self._bandwidth[key] = e.bandwidth_gbps
            self._slowdown[pair] = e.slowdown
            shape_sets.setdefault(pair, set()).add(e.shape)
        if not self._latency:
            raise InvalidParams("profile needs at least one entry")
        for pair, shapes in shape_sets.items():
            self._shapes[pair] = tuple(sorted(shapes))
        fittable = [
            (k, self._latency[k], self._bandwidth[k])
            for k in self._latency
            if len(self._shapes[k.pair]) >= 2
        ]
        self._regression = fit_regression(fittable) if fittable else None

    # -- key space ---------------------------------------------------------

    @property
    def key_space(self) -> frozenset[tuple[str, str]]:
        return frozenset(self._shapes)

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(sorted({m for m, _ in self._shapes}))

    def supports(self, model_id: str, pu_id: str) -> bool:
        return (model_id, pu_id) in self._shapes

    def admissible_pus(self, model_id: str, platform: Platform | None = None) -> tuple[str, ...]:
        pus = sorted(pu for m, pu in self._shapes if m == model_id)
        if platform is not None:
            allowed = set(platform.pu_ids)
            pus = [p for p in pus if p in allowed]
        return tuple(pus)

    def candidate_shapes(self, model_id: str, pu_id: str) -> tuple[int, ...]:
        try:
            return self._shapes[(model_id, pu_id)]
        except KeyError:
            raise UnsupportedConfig(model_id, pu_id)

    def slowdown_params(self, model_id: str, pu_id: str) -> SlowdownParams:
        try:
            return self._slowdown[(model_id, pu_id)]
        except KeyError:
            raise UnsupportedConfig(model_id, pu_id)

    @property
    def regression(self) -> RegressionModel | None:
        return self._regression

    # -- cost lookups --------------------------------------------------------

    def _predict(self, table: dict[ConfigKey, float], key: ConfigKey, latency: bool) -> CostPrediction:
        if key.pair not in self._shapes:
            raise UnsupportedConfig(key.model_id, key.pu_id)
        value = table.get(key)
        if value is not None:
            return CostPrediction(value, from_table=True, extrapolated=False)
        shapes = self._shapes[key.pair]
        if len(shapes) < 2:
            # Single profiled shape: no slope information, reuse its value.
            only = ConfigKey(key.model_id, key.pu_id, shapes[0])
            return CostPrediction(table[only], from_table=False, extrapolated=True)
        assert self._regression is not None
        if latency:
            return self._regression.predict_latency(key)
        return self._regression.predict_bandwidth(key)

    def predict_latency(self, key: ConfigKey) -> CostPrediction:
        return self._predict(self._latency, key, latency=True)

    def predict_bandwidth(self, key: ConfigKey) -> CostPrediction:
        return self._predict(self._bandwidth, key, latency=False)

    def base_latency(self, key: ConfigKey) -> float:
        """Interference-free latency of one sub-stage batch/group (ms)."""
        return self.predict_latency(key).value

    def bandwidth_demand(self, key: ConfigKey) -> float:
        """DRAM bandwidth demand while the configuration runs (GB/s)."""
        return self.predict_bandwidth(key).value

    def entries(self) -> list[ProfileEntry]:
        rows = []
        for key in sorted(self._latency, key=lambda k: (k.model_id, k.pu_id, k.shape)):
            rows.append(
                ProfileEntry(
                    model_id=key.model_id,
                    pu_id=key.pu_id,
                    shape=key.shape,
                    latency_ms=self._latency[key],
                    bandwidth_gbps=self._bandwidth[key],
                    slowdown=self._slowdown[key.pair],
                )
            )
        return rows


def effective_latency(profile: StageProfile, key: ConfigKey, avg_slowdown: float) -> float:
    """Base latency scaled by an average slowdown factor (must be >= 1)."""
    if avg_slowdown < 1.0:
        raise InvalidParams(f"avg_slowdown must be >= 1, got {avg_slowdown}")
    return profile.base_latency(key) * avg_slowdown


# -- profile file I/O ---------------------------------------------------------


def save_profile(profile: StageProfile, path: str | Path) -> None:
    """Write a profile as delimited text with the standard header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_COLUMNS)
        for e in profile.entries():
            writer.writerow(
                [
                    e.model_id,
                    e.pu_id,
                    e.shape,
                    repr(e.latency_ms),
                    repr(e.bandwidth_gbps),
                    repr(e.slowdown.sensitivity),
                    repr(e.slowdown.knee_fraction),
                    repr(e.slowdown.exponent),
                ]
            )


def load_profile(path: str | Path) -> StageProfile:
    """Load a profile from delimited text (header: model_id, pu_id, shape, ...)."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty profile file")
        if [h.strip() for h in header] != list(PROFILE_COLUMNS):
            raise ParseError(f"{path}: expected header {','.join(PROFILE_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(PROFILE_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(PROFILE_COLUMNS)} columns")
            try:
                entries.append(
                    ProfileEntry(
                        model_id=row[0].strip(),
                        pu_id=row[1].strip(),
                        shape=int(row[2]),
                        latency_ms=float(row[3]),
                        bandwidth_gbps=float(row[4]),
                        slowdown=SlowdownParams(
                            sensitivity=float(row[5]),
                            knee_fraction=float(row[6]),
                            exponent=float(row[7]),
                        ),
                    )
                )
            except (ValueError, InvalidParams) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    try:
        return StageProfile(entries)
    except InvalidParams as exc:
        raise ParseError(f"{path}: {exc}") from exc
