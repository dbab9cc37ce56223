"""Fitting pipeline: accumulate compensated moments, extract the null vector,
grid-search an unknown noise bound, and the ribbon-smoothed variant.

Because every compensated entry is a fixed linear functional of the extended
feature vector, an accumulator only needs the running sum of that vector;
matrix and vector sums are derived views.  This keeps accumulation linear in
the number of points and makes merging trivially associative.
"""

from __future__ import annotations

import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import basis
from .basis import BasisSpec
from .compensation import CompensationEvaluator, CompensationPlan, build_plan, instantiate
from .errors import ConfigError, DataError, NumericalError
from .noise import NoiseModel

DEFAULT_CHUNK = 65536
GAP_WARN_RATIO = 1e-8
SMOOTHED_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class AffineTransform:
    """x' = (x - shift) * scale, one isotropic scale for the whole cloud."""

    shift: tuple
    scale: float

    @classmethod
    def identity(cls, n: int) -> "AffineTransform":
        return cls(shift=(0.0,) * n, scale=1.0)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not any(self.shift)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.shift)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.scale + np.asarray(self.shift)

    def to_dict(self) -> dict:
        return {"shift": list(self.shift), "scale": self.scale}


class MomentAccumulator:
    """Running sums of compensated matrices (and feature vectors) over a dataset.

    The stored sufficient statistic is the sum of extended feature vectors;
    ``matrix_sum``/``vector_sum`` apply the evaluator's collapsed linear maps.
    Merging requires both accumulators to share the same evaluator.
    """

    def __init__(self, evaluator: CompensationEvaluator | None = None):
        self.evaluator = evaluator
        self.count = 0
        self.skipped = 0
        self.feature_sum = None

    def _bind(self, evaluator: CompensationEvaluator):
        if self.evaluator is None:
            self.evaluator = evaluator
        elif self.evaluator is not evaluator:
            raise ConfigError("accumulator is bound to a different evaluator")
        if self.feature_sum is None:
            self.feature_sum = np.zeros(evaluator.plan.n_extended)

    def add_batch(self, evaluator: CompensationEvaluator, points: np.ndarray) -> "MomentAccumulator":
        self._bind(evaluator)
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        finite = np.all(np.isfinite(pts), axis=1)
        bad = int(pts.shape[0] - finite.sum())
        if bad:
            self.skipped += bad
            warnings.warn(f"skipped {bad} non-finite point(s) during accumulation")
            pts = pts[finite]
        if pts.shape[0]:
            self.feature_sum += evaluator.extended_features(pts).sum(axis=0)
            self.count += pts.shape[0]
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0 and other.feature_sum is None:
            return self
        self._bind(other.evaluator)
        self.count += other.count
        self.skipped += other.skipped
        self.feature_sum += other.feature_sum
        return self

    @property
    def matrix_sum(self) -> np.ndarray:
        ev = self.evaluator
        entries = ev.matrix_map.dot(self.feature_sum)
        return ev.unpack(entries)

    @property
    def vector_sum(self) -> np.ndarray:
        return self.evaluator.vector_map.dot(self.feature_sum)

    def mean_matrix(self) -> np.ndarray:
        if self.count < 1:
            raise DataError("empty accumulator")
        return self.matrix_sum / self.count

    def mean_vector(self) -> np.ndarray:
        if self.count < 1:
            raise DataError("empty accumulator")
        return self.vector_sum / self.count


def accumulate(acc: MomentAccumulator, evaluator: CompensationEvaluator, y) -> MomentAccumulator:
    """Fold one noisy point into the accumulator (non-finite points are counted and skipped)."""
    return acc.add_batch(evaluator, np.asarray(y, dtype=float).reshape(1, -1))


def accumulate_all(points: np.ndarray, evaluator: CompensationEvaluator,
                   threads: int = 1, chunk: int = DEFAULT_CHUNK) -> MomentAccumulator:
    """Chunked (optionally threaded) reduction over the dataset.

    Chunk boundaries are fixed by ``chunk`` alone and partial sums are merged
    in chunk order, so the result is bit-identical for any thread count.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise DataError(f"points must be 2-D, got shape {pts.shape}")
    slices = [slice(i, min(i + chunk, pts.shape[0])) for i in range(0, pts.shape[0], chunk)]
    acc = MomentAccumulator(evaluator)
    if threads > 1 and len(slices) > 1:
        def work(sl):
            return MomentAccumulator(evaluator).add_batch(evaluator, pts[sl])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(work, slices):
                acc.merge(part)
    else:
        for sl in slices:
            acc.add_batch(evaluator, pts[sl])
    return acc


@dataclass
class FitResult:
    """Outcome of a fit: unit null vector (plain mode) or ribbon solution."""

    coefficients: np.ndarray
    sigma_min: float
    spectrum: np.ndarray
    theta_used: float
    gap: float
    mode: str
    count: int = 0
    skipped: int = 0
    transform: AffineTransform | None = None
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "sigma_min": float(self.sigma_min),
            "spectrum": [float(s) for s in self.spectrum],
            "theta_used": float(self.theta_used),
            "gap": float(self.gap),
            "mode": self.mode,
            "count": self.count,
            "skipped": self.skipped,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "warnings": list(self.warnings),
            "diagnostics": self.diagnostics,
            "timings": self.timings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def solve_null(acc: MomentAccumulator) -> FitResult:
    """Minimum-singular-value vector of the averaged compensated matrix.

    The average is re-symmetrized before the SVD to guard against floating
    asymmetry; the sign convention makes the first significant coefficient
    positive.  A near-degenerate spectral gap is flagged, not fatal.
    """
    m = acc.mean_matrix()
    if not np.all(np.isfinite(m)):
        raise NumericalError("accumulated matrix contains non-finite entries")
    m = 0.5 * (m + m.T)
    try:
        _, s, vt = np.linalg.svd(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    coeffs = vt[-1].copy()
    nz = np.nonzero(np.abs(coeffs) > 1e-12 * np.abs(coeffs).max())[0]
    if nz.size and coeffs[nz[0]] < 0:
        coeffs = -coeffs
    gap = float(s[-2] - s[-1]) if s.size > 1 else float(s[0])
    warn = []
    if s.size > 1 and gap < GAP_WARN_RATIO * s[0]:
        warn.append(f"near-degenerate minimum singular value (gap {gap:.3g}); "
                    "the null space may have multiplicity above one")
    theta = acc.evaluator.model.theta
    return FitResult(coefficients=coeffs, sigma_min=float(s[-1]), spectrum=s.copy(),
                     theta_used=theta, gap=gap, mode="plain",
                     count=acc.count, skipped=acc.skipped, warnings=warn,
                     diagnostics={"worst_block_condition": acc.evaluator.worst_condition})


@dataclass(frozen=True)
class GridSpec:
    """Noise-level grid in fractions of a reference maximum coordinate size."""

    lo: float = 0.0
    hi: float = 0.5
    step: float = 0.01
    reference: float | None = None  # absolute max |coordinate|; data max when None

    def __post_init__(self):
        if self.step <= 0 or self.hi < self.lo or self.lo < 0:
            raise ConfigError("grid requires 0 <= lo <= hi and step > 0")

    def levels(self) -> np.ndarray:
        n = int(round((self.hi - self.lo) / self.step))
        return self.lo + self.step * np.arange(n + 1)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "step": self.step, "reference": self.reference}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        try:
            return cls(lo=float(d.get("lo", 0.0)), hi=float(d.get("hi", 0.5)),
                       step=float(d.get("step", 0.01)),
                       reference=None if d.get("reference") is None else float(d["reference"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid payload: {exc}") from exc


@dataclass
class GridSearchResult:
    thetas: np.ndarray          # absolute candidate noise bounds
    levels: np.ndarray          # the same candidates as level fractions
    sigma_curve: np.ndarray
    theta_star: float
    level_star: float
    fit: FitResult

    def to_dict(self) -> dict:
        return {
            "thetas": [float(t) for t in self.thetas],
            "levels": [float(t) for t in self.levels],
            "sigma_curve": [float(s) for s in self.sigma_curve],
            "theta_star": float(self.theta_star),
            "level_star": float(self.level_star),
            "fit": self.fit.to_dict(),
        }


def grid_search_theta(points: np.ndarray, plan: CompensationPlan,
                      family: str = "uniform", candidates=None,
                      levels=None, reference: float | None = None,
                      threads: int = 1) -> GridSearchResult:
    """Scan noise-bound candidates and keep the sigma-min minimizer.

    Candidates may be given directly (absolute bounds, ascending) or as level
    fractions of ``reference`` (default: max absolute coordinate of the data).
    The extended feature sum is computed once; each candidate only pays a plan
    collapse and one eigendecomposition.  Instantiation failures score +inf
    instead of aborting; ties resolve to the smaller candidate.

    The recorded scalar is the magnitude of the algebraically smallest
    eigenvalue of the averaged matrix.  Wherever the matrix is PSD (every
    candidate up to the true bound) this *is* its minimum singular value;
    past the true bound over-compensation drives eigenvalues negative, and
    the signed reading penalizes that instead of dipping again at higher
    eigenvalue zero-crossings.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DataError("grid search requires a non-empty 2-D point array")
    if candidates is None:
        if levels is None:
            raise ConfigError("grid search needs candidates or levels")
        ref = float(np.abs(pts).max()) if reference is None else float(reference)
        levels = np.asarray(levels, dtype=float)
        candidates = levels * ref
    else:
        candidates = np.asarray(candidates, dtype=float)
        ref = float(np.abs(pts).max()) if reference is None else float(reference)
        levels = candidates / ref if ref > 0 else np.zeros_like(candidates)
    if candidates.size == 0 or np.any(np.diff(candidates) < 0):
        raise ConfigError("candidates must be non-empty and ascending")

    base = accumulate_all(pts, _null_evaluator(plan), threads=threads)
    sigmas = np.empty(candidates.size)
    evaluators: list = [None] * candidates.size
    for i, theta in enumerate(candidates):
        try:
            ev = instantiate(plan, NoiseModel(family, float(theta)))
        except NumericalError:
            sigmas[i] = np.inf
            continue
        evaluators[i] = ev
        m = ev.unpack(ev.matrix_map.dot(base.feature_sum / base.count))
        sigmas[i] = abs(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
    if not np.any(np.isfinite(sigmas)):
        raise NumericalError("every grid candidate failed instantiation")
    best = int(np.argmin(sigmas))
    acc = MomentAccumulator(evaluators[best])
    acc.count = base.count
    acc.skipped = base.skipped
    acc.feature_sum = base.feature_sum
    fit_best = solve_null(acc)
    return GridSearchResult(thetas=candidates, levels=np.asarray(levels, dtype=float),
                            sigma_curve=sigmas, theta_star=float(candidates[best]),
                            level_star=float(levels[best]), fit=fit_best)


def _null_evaluator(plan: CompensationPlan) -> CompensationEvaluator:
    """Identity compensation (theta = 0); also the naive uncompensated path."""
    return instantiate(plan, NoiseModel(theta=0.0))


@dataclass
class FitConfig:
    """End-to-end fit configuration; mirrors the CLI config JSON."""

    basis: BasisSpec
    theta: float | None = None
    grid: GridSpec | None = None
    family: str = "uniform"
    mode: str = "plain"
    smoothing_c: float = 0.05
    normalize: bool = False
    compensate: bool = True
    seed: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("plain", "smoothed"):
            raise ConfigError(f"unknown fit mode {self.mode!r}")
        if self.theta is not None and self.theta < 0:
            raise ConfigError("theta must be >= 0")
        if not (0 < self.smoothing_c < 1):
            raise ConfigError("smoothing_c must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        noise: dict = {"family": self.family}
        if self.grid is not None:
            noise["grid"] = self.grid.to_dict()
        else:
            noise["theta"] = self.theta
        return {"basis": self.basis.to_dict(), "noise": noise, "mode": self.mode,
                "smoothing_c": self.smoothing_c, "normalize": self.normalize,
                "compensate": self.compensate, "seed": self.seed, "threads": self.threads}

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        try:
            spec = BasisSpec.from_dict(d["basis"])
            noise = d.get("noise", {})
            grid = GridSpec.from_dict(noise["grid"]) if "grid" in noise else None
            theta = None if grid is not None else noise.get("theta")
            return cls(basis=spec,
                       theta=None if theta is None else float(theta),
                       grid=grid,
                       family=noise.get("family", "uniform"),
                       mode=d.get("mode", "plain"),
                       smoothing_c=float(d.get("smoothing_c", 0.05)),
                       normalize=bool(d.get("normalize", False)),
                       compensate=bool(d.get("compensate", True)),
                       seed=d.get("seed"),
                       threads=int(d.get("threads", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid fit config: {exc}") from exc


def _prepare(points: np.ndarray, config: FitConfig):
    from .shapes import normalize as normalize_cloud  # local import, no cycle at module load

    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DataError("fit requires a non-empty (L, n) point array")
    if pts.shape[1] != config.basis.n:
        raise DataError(f"points have dimension {pts.shape[1]}, basis expects {config.basis.n}")
    finite = np.all(np.isfinite(pts), axis=1)
    skipped = int(pts.shape[0] - finite.sum())
    if skipped:
        warnings.warn(f"dropping {skipped} non-finite point(s)")
        pts = pts[finite]
    if pts.shape[0] == 0:
        raise DataError("no finite points left after filtering")
    if config.normalize:
        pts, transform = normalize_cloud(pts)
    else:
        transform = AffineTransform.identity(pts.shape[1])
    return pts, transform, skipped


def _resolve_theta(pts, config: FitConfig, plan: CompensationPlan,
                   transform: AffineTransform):
    """Absolute noise bound in the fitting frame, via grid search if requested."""
    if config.grid is not None:
        grid = config.grid
        ref = grid.reference
        if ref is not None:
            ref = ref * transform.scale
        gs = grid_search_theta(pts, plan, family=config.family,
                               levels=grid.levels(), reference=ref,
                               threads=config.threads)
        return gs.theta_star, gs
    if config.theta is None:
        raise ConfigError("fit needs either a fixed theta or a grid")
    return config.theta * transform.scale, None


def fit(points: np.ndarray, config: FitConfig,
        plan: CompensationPlan | None = None) -> FitResult:
    """End-to-end fit; dispatches to the ribbon-smoothed path when configured."""
    t0 = time.perf_counter()
    pts, transform, skipped = _prepare(points, config)
    if plan is None:
        plan = build_plan(config.basis)
    if config.mode == "smoothed":
        result = _fit_smoothed_prepared(pts, config, plan, transform)
    else:
        theta, gs = _resolve_theta(pts, config, plan, transform)
        model = NoiseModel(config.family, theta if config.compensate else 0.0)
        evaluator = instantiate(plan, model)
        t1 = time.perf_counter()
        acc = accumulate_all(pts, evaluator, threads=config.threads)
        t2 = time.perf_counter()
        result = solve_null(acc)
        result.theta_used = theta
        result.timings = {"accumulate_s": t2 - t1, "solve_s": time.perf_counter() - t2}
        if gs is not None:
            result.diagnostics["grid_levels"] = [float(v) for v in gs.levels]
            result.diagnostics["grid_sigma_curve"] = [float(v) for v in gs.sigma_curve]
            result.diagnostics["grid_level_star"] = gs.level_star
        if not config.compensate:
            result.diagnostics["compensation"] = "disabled"
    result.skipped += skipped
    result.transform = transform
    result.timings["total_s"] = time.perf_counter() - t0
    return result


def fit_smoothed(points: np.ndarray, config: FitConfig,
                 plan: CompensationPlan | None = None) -> FitResult:
    """Ribbon-smoothed fit for shapes that are not exact zero sets."""
    config = replace(config, mode="smoothed")
    return fit(points, config, plan=plan)


def _fit_smoothed_prepared(pts: np.ndarray, config: FitConfig,
                           plan: CompensationPlan, transform: AffineTransform) -> FitResult:
    """Solve the ribbon quadratic: three scaled copies of the cloud, signed targets.

    Shrunk points (1-c)y carry target +c, expanded points (1+c)y target -c.
    Scaling a noisy point scales its noise bound the same way, so each ribbon
    gets its own evaluator at (1 -+ c) * theta.  The objective
    a' (Q_minus + Q_0 + Q_plus) a + c (mean b-hat_minus - mean b-hat_plus)' a
    is minimized through its stationarity system; the linear term fixes the
    scale, so the solution is not unit-normalized.
    """
    theta, gs = _resolve_theta(pts, config, plan, transform)
    c = config.smoothing_c
    theta_eff = theta if config.compensate else 0.0
    ribbons = [
        (pts, theta_eff),
        ((1.0 - c) * pts, (1.0 - c) * theta_eff),   # target +c
        ((1.0 + c) * pts, (1.0 + c) * theta_eff),   # target -c
    ]
    t1 = time.perf_counter()
    accs = []
    for ribbon_pts, bound in ribbons:
        ev = instantiate(plan, NoiseModel(config.family, bound))
        accs.append(accumulate_all(ribbon_pts, ev, threads=config.threads))
    acc0, acc_plus, acc_minus = accs
    q = acc0.mean_matrix() + acc_plus.mean_matrix() + acc_minus.mean_matrix()
    q = 0.5 * (q + q.T)
    lin = c * (acc_minus.mean_vector() - acc_plus.mean_vector())
    t2 = time.perf_counter()

    warn = []
    ridge = 0.0
    cond = float(np.linalg.cond(q))
    if not np.isfinite(cond) or cond > SMOOTHED_CONDITION_LIMIT:
        ridge = 1e-10 * float(np.trace(q)) / q.shape[0]
        q = q + ridge * np.eye(q.shape[0])
        warn.append(f"ill-conditioned ribbon system (cond {cond:.3g}); "
                    f"applied ridge {ridge:.3g}")
    try:
        coeffs = np.linalg.solve(2.0 * q, -lin)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"ribbon system solve failed: {exc}") from exc
    grad = 2.0 * q @ coeffs + lin
    spectrum = np.linalg.svd(q, compute_uv=False)
    result = FitResult(
        coefficients=coeffs, sigma_min=float(spectrum[-1]), spectrum=spectrum,
        theta_used=theta, gap=float(spectrum[-2] - spectrum[-1]) if spectrum.size > 1 else float(spectrum[0]),
        mode="smoothed-3L", count=acc0.count, skipped=acc0.skipped, warnings=warn,
        diagnostics={
            "gradient_norm": float(np.linalg.norm(grad)),
            "matrix_norm": float(np.linalg.norm(q, 2)),
            "ridge": ridge,
            "smoothing_c": c,
            "system_condition": cond,
        },
        timings={"accumulate_s": t2 - t1, "solve_s": time.perf_counter() - t2},
    )
    if gs is not None:
        result.diagnostics["grid_levels"] = [float(v) for v in gs.levels]
        result.diagnostics["grid_sigma_curve"] = [float(v) for v in gs.sigma_curve]
        result.diagnostics["grid_level_star"] = gs.level_star
    if not config.compensate:
        result.diagnostics["compensation"] = "disabled"
    return result
