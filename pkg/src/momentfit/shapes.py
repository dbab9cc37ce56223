"""Synthetic ground-truth surfaces, zero-set sampling, noise injection,
and the normalization convention used by the experiment pipelines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import basis
from .basis import BasisSpec
from .errors import ConfigError, DataError, SurfaceNotFoundError
from .fitter import AffineTransform

PROJECTION_TOL = 1e-10
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class ImplicitShape:
    """A surface given as the zero set of g(x) = coefficients . b(x)."""

    spec: BasisSpec
    coefficients: tuple
    name: str = ""

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.shape != (self.spec.feature_count,):
            raise DataError(
                f"shape {self.name!r}: expected {self.spec.feature_count} "
                f"coefficients, got {coeffs.shape}")
        if not np.any(coeffs):
            raise DataError(f"shape {self.name!r}: coefficients are all zero")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in coeffs))

    @property
    def coeff_array(self) -> np.ndarray:
        return np.asarray(self.coefficients)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return basis.evaluate_many(self.spec, points) @ self.coeff_array

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return basis.evaluate_gradient(self.spec, self.coeff_array, points)

    def to_dict(self) -> dict:
        return {"basis_spec": self.spec.to_dict(),
                "coefficients": list(self.coefficients), "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "ImplicitShape":
        try:
            return cls(spec=BasisSpec.from_dict(d["basis_spec"]),
                       coefficients=tuple(float(c) for c in d["coefficients"]),
                       name=str(d.get("name", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid shape payload: {exc}") from exc


@dataclass
class SampledCloud:
    """Point cloud tied to its generation record."""

    points: np.ndarray
    shape_name: str = ""
    noise_level: float = 0.0
    u_actual: float = 0.0
    seed: int | None = None


def _coeffs_from_terms(spec: BasisSpec, terms: dict) -> np.ndarray:
    """Coefficient vector from {exponent tuple: value} monomial terms."""
    index = basis.feature_index(spec)
    out = np.zeros(spec.feature_count)
    for exps, val in terms.items():
        f = basis.Feature(tuple(basis.FeatureAtom(e) for e in exps))
        out[index[f]] = val
    return out


def _load_bundled(name: str) -> ImplicitShape:
    payload = resources.files("momentfit.data").joinpath(name).read_text()
    return ImplicitShape.from_dict(json.loads(payload))


def builtin_shape(name: str) -> ImplicitShape:
    """Bundled test surfaces; coefficients follow the documented feature order."""
    if name == "elliptic-cone":
        spec = BasisSpec(n=3, gamma=2)
        terms = {(0, 0, 0): 0.1, (2, 0, 0): 1.0, (0, 2, 0): -1.0, (0, 0, 2): -1.0}
        return ImplicitShape(spec, tuple(_coeffs_from_terms(spec, terms)), name)
    if name == "clebsch-cubic":
        return _load_bundled("clebsch_cubic.json")
    if name == "unit-circle":
        spec = BasisSpec(n=2, gamma=2)
        terms = {(0, 0): -1.0, (2, 0): 1.0, (0, 2): 1.0}
        return ImplicitShape(spec, tuple(_coeffs_from_terms(spec, terms)), name)
    if name == "ellipse-2d":
        spec = BasisSpec(n=2, gamma=2)
        terms = {(0, 0): -1.0, (2, 0): 1.0 / 0.64, (0, 2): 1.0 / 0.25}
        return ImplicitShape(spec, tuple(_coeffs_from_terms(spec, terms)), name)
    if name == "line-2d":
        spec = BasisSpec(n=2, gamma=1)
        terms = {(0, 0): -0.1, (1, 0): -0.5, (0, 1): 1.0}
        return ImplicitShape(spec, tuple(_coeffs_from_terms(spec, terms)), name)
    if name == "quartic-blob":
        # Cassini oval (x^2+y^2)^2 - 2c^2(x^2-y^2) = a^4 - c^4 with c=0.5, a=0.55:
        # a single smooth closed loop.
        spec = BasisSpec(n=2, gamma=4)
        a4, c2 = 0.55 ** 4, 0.25
        terms = {(4, 0): 1.0, (2, 2): 2.0, (0, 4): 1.0,
                 (2, 0): -2 * c2, (0, 2): 2 * c2, (0, 0): c2 ** 2 - a4}
        return ImplicitShape(spec, tuple(_coeffs_from_terms(spec, terms)), name)
    raise DataError(f"unknown shape {name!r}")


BUILTIN_SHAPES = ("elliptic-cone", "clebsch-cubic", "unit-circle",
                  "ellipse-2d", "line-2d", "quartic-blob")


def load_shape(path) -> ImplicitShape:
    with open(path) as fh:
        return ImplicitShape.from_dict(json.load(fh))


def save_shape(shape: ImplicitShape, path) -> None:
    with open(path, "w") as fh:
        json.dump(shape.to_dict(), fh, indent=2, sort_keys=True)


def _as_bbox(bbox, n: int) -> tuple[np.ndarray, np.ndarray]:
    if bbox is None:
        bbox = (-1.0, 1.0)
    lo, hi = bbox
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(hi <= lo):
        raise ConfigError("bounding box must have hi > lo on every axis")
    return lo, hi


def _probe_for_sign_change(shape: ImplicitShape, lo, hi) -> bool:
    n = shape.spec.n
    res = 9 if n <= 3 else max(3, int(round(1e5 ** (1 / n))))
    axes = [np.linspace(lo[i], hi[i], res) for i in range(n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    vals = shape.evaluate(grid)
    return bool(vals.min() <= 0.0 <= vals.max())


def sample_zero_set(shape: ImplicitShape, count: int, seed: int | None = None,
                    bbox=None) -> SampledCloud:
    """Draw `count` points on the zero set by Newton projection of box samples.

    Candidates are uniform in the box and pulled along the gradient until
    |g| <= 1e-10 (damped steps, iteration cap 50); non-convergent candidates
    are discarded.  Deterministic for a fixed seed.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    lo, hi = _as_bbox(bbox, shape.spec.n)
    if not _probe_for_sign_change(shape, lo, hi):
        raise SurfaceNotFoundError(
            f"no sign change of {shape.name or 'shape'} detected inside the box")
    rng = np.random.default_rng(seed)
    collected = []
    total = 0
    rounds = 0
    while total < count:
        rounds += 1
        if rounds > 200:
            raise DataError("zero-set sampling stalled; enlarge the box or check the shape")
        batch = max(4 * (count - total), 256)
        x = rng.uniform(lo, hi, size=(batch, shape.spec.n))
        g = shape.evaluate(x)
        for _ in range(NEWTON_MAX_ITER):
            active = np.abs(g) > PROJECTION_TOL
            if not active.any():
                break
            xa = x[active]
            ga = g[active]
            grad = shape.gradient(xa)
            denom = np.einsum("ij,ij->i", grad, grad)
            denom[denom == 0.0] = np.inf
            step = (ga / denom)[:, None] * grad
            # halve overshooting steps a few times instead of diverging
            scale = np.ones(xa.shape[0])
            g_new = shape.evaluate(xa - step)
            for _ in range(6):
                worse = np.abs(g_new) > np.abs(ga)
                if not worse.any():
                    break
                scale[worse] *= 0.5
                g_new[worse] = shape.evaluate(xa[worse] - scale[worse, None] * step[worse])
            x[active] = xa - scale[:, None] * step
            g[active] = g_new
        ok = (np.abs(g) <= PROJECTION_TOL) & np.all(np.isfinite(x), axis=1)
        ok &= np.all((x >= lo) & (x <= hi), axis=1)
        if ok.any():
            collected.append(x[ok])
            total += int(ok.sum())
    pts = np.concatenate(collected, axis=0)[:count]
    return SampledCloud(points=pts, shape_name=shape.name, seed=seed)


def normalize(points: np.ndarray, per_axis: bool = False):
    """Center to zero mean and scale so max |coordinate| = 0.5.

    A single isotropic scale preserves the polynomial degree structure of the
    shape; ``per_axis`` switches to independent axis scales (which does not).
    Returns (normalized points, AffineTransform).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DataError("normalize requires a non-empty (L, n) array")
    mean = pts.mean(axis=0)
    centered = pts - mean
    if per_axis:
        extent = np.abs(centered).max(axis=0)
        if np.any(extent == 0.0):
            raise DataError("degenerate cloud: zero extent on some axis")
        scaled = centered * (0.5 / extent)
        # represent per-axis scaling with the mean scale for the affine record
        return scaled, AffineTransform(shift=tuple(mean), scale=float(np.mean(0.5 / extent)))
    extent = np.abs(centered).max()
    if extent == 0.0:
        raise DataError("degenerate cloud: all points identical")
    scale = 0.5 / extent
    return centered * scale, AffineTransform(shift=tuple(mean), scale=float(scale))


def add_noise(cloud, level: float, seed: int | None = None) -> SampledCloud:
    """Perturb every coordinate by IID U[-u, u] with u = level * max |coordinate|."""
    if level < 0:
        raise DataError("noise level must be >= 0")
    pts = cloud.points if isinstance(cloud, SampledCloud) else np.asarray(cloud, dtype=float)
    name = cloud.shape_name if isinstance(cloud, SampledCloud) else ""
    u = float(level * np.abs(pts).max())
    if level == 0.0:
        noisy = pts.copy()
    else:
        rng = np.random.default_rng(seed)
        noisy = pts + rng.uniform(-u, u, size=pts.shape)
    return SampledCloud(points=noisy, shape_name=name, noise_level=float(level),
                        u_actual=u, seed=seed)


def map_coefficients_to_data_frame(spec: BasisSpec, coefficients,
                                   transform: AffineTransform) -> np.ndarray:
    """Express coefficients fitted on normalized data in the original frame.

    If the fit produced g'(x') with x' = (x - shift) * scale, the original
    frame polynomial is g(x) = g'((x - shift) * scale); monomial families only.
    """
    shifted = basis.monomial_substitute(spec, coefficients, transform.scale,
                                        -transform.scale * np.asarray(transform.shift))
    return shifted


def map_coefficients_to_normalized_frame(spec: BasisSpec, coefficients,
                                         transform: AffineTransform) -> np.ndarray:
    """Inverse of `map_coefficients_to_data_frame`."""
    inv_scale = 1.0 / transform.scale
    return basis.monomial_substitute(spec, coefficients, inv_scale,
                                     np.asarray(transform.shift))


def write_points(points: np.ndarray, path) -> None:
    """CSV (comma) or XYZ (whitespace) rows, one point per line."""
    pts = np.asarray(points, dtype=float)
    delim = " " if str(path).endswith(".xyz") else ","
    np.savetxt(path, pts, fmt="%.17g", delimiter=delim)


def read_points(path) -> np.ndarray:
    delim = None if str(path).endswith(".xyz") else ","
    try:
        pts = np.loadtxt(path, delimiter=delim, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    if pts.size == 0:
        raise DataError(f"point cloud {path} is empty")
    return pts
