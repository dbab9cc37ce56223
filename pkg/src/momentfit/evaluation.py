"""Fit-quality metrics and level-set extraction/export.

2-D zero sets come out as ordered polylines (marching squares with linear
edge interpolation), 3-D ones as triangle meshes (marching cubes); both are
backed by scikit-image.  The loss metric is the mean nearest-vertex distance
from the original noiseless points to the extracted zero set, so the reported
number carries its grid resolution.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import basis
from .basis import BasisSpec
from .errors import ConfigError, DataError, NumericalError
from .fitter import FitResult
from .shapes import ImplicitShape


def cosine_similarity(a_hat, a_star) -> float:
    """|cos angle| between coefficient vectors; sign-invariant, in [0, 1]."""
    a = np.asarray(a_hat, dtype=float)
    b = np.asarray(a_star, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity of a zero vector is undefined")
    return float(min(1.0, abs(a @ b) / (na * nb)))


def coefficient_distance(a_hat, a_star) -> float:
    """min over the sign ambiguity of ||a_hat - a_star|| after unit-normalizing both."""
    a = np.asarray(a_hat, dtype=float)
    b = np.asarray(a_star, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("coefficient distance of a zero vector is undefined")
    a, b = a / na, b / nb
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


@dataclass
class LevelSet:
    """Extracted zero set: polylines for n=2, a triangle mesh for n=3."""

    dim: int
    resolution: int
    bbox: tuple
    polylines: list = field(default_factory=list)          # list of (k, 2) arrays
    vertices: np.ndarray | None = None                     # (V, 3)
    faces: np.ndarray | None = None                        # (F, 3) int
    warnings: list = field(default_factory=list)
    euler_characteristic: int | None = None

    @property
    def is_empty(self) -> bool:
        if self.dim == 2:
            return not self.polylines
        return self.vertices is None or len(self.vertices) == 0

    def all_vertices(self) -> np.ndarray:
        if self.dim == 2:
            if not self.polylines:
                return np.empty((0, 2))
            return np.concatenate(self.polylines, axis=0)
        if self.vertices is None:
            return np.empty((0, 3))
        return self.vertices

    def cell_diagonal(self) -> float:
        lo, hi = self.bbox
        spans = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
        return float(np.linalg.norm(spans / (self.resolution - 1)))


def _spec_and_coeffs(obj):
    if isinstance(obj, ImplicitShape):
        return obj.spec, obj.coeff_array
    if isinstance(obj, FitResult):
        raise ConfigError("pass (spec, coefficients) for fit results via as_shape()")
    spec, coeffs = obj
    return spec, np.asarray(coeffs, dtype=float)


def as_shape(spec: BasisSpec, result_or_coeffs, name: str = "fit") -> ImplicitShape:
    """Wrap fitted coefficients as an implicit shape for extraction/metrics."""
    coeffs = result_or_coeffs.coefficients if isinstance(result_or_coeffs, FitResult) \
        else result_or_coeffs
    return ImplicitShape(spec, tuple(np.asarray(coeffs, dtype=float)), name)


def _mesh_euler_characteristic(vertices: np.ndarray, faces: np.ndarray) -> int:
    edges = set()
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges.add((min(a, b), max(a, b)))
    return int(len(vertices) - len(edges) + len(faces))


def extract_level_set(shape, bbox=None, resolution: int = 0) -> LevelSet:
    """Zero set of g on a regular grid over bbox; empty (with a warning) when
    g has no sign change there.  Dimensions above 3 are unsupported.
    """
    if isinstance(shape, tuple):
        shape = as_shape(*shape)
    n = shape.spec.n
    if n not in (2, 3):
        raise ConfigError(f"level-set export supports n in (2, 3), got n={n}")
    if resolution == 0:
        resolution = 512 if n == 2 else 128
    if resolution < 16:
        raise ConfigError("resolution must be at least 16 per axis")
    if bbox is None:
        bbox = (-1.0, 1.0)
    lo = np.broadcast_to(np.asarray(bbox[0], dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(bbox[1], dtype=float), (n,)).copy()
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    values = shape.evaluate(grid).reshape((resolution,) * n)
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite values on the extraction grid")
    out = LevelSet(dim=n, resolution=resolution, bbox=(tuple(lo), tuple(hi)))
    if values.min() > 0.0 or values.max() < 0.0:
        out.warnings.append("no sign change inside the box; level set is empty")
        return out
    steps = (hi - lo) / (resolution - 1)
    if n == 2:
        contours = measure.find_contours(values, 0.0)
        for c in contours:
            out.polylines.append(lo[None, :] + c * steps[None, :])
        if not out.polylines:
            out.warnings.append("no contour found at level zero")
        return out
    try:
        verts, faces, _, _ = measure.marching_cubes(values, level=0.0, spacing=tuple(steps))
    except (ValueError, RuntimeError) as exc:
        out.warnings.append(f"marching cubes produced no surface: {exc}")
        return out
    out.vertices = verts + lo[None, :]
    out.faces = faces
    out.euler_characteristic = _mesh_euler_characteristic(out.vertices, faces)
    return out


def fit_loss(original_points: np.ndarray, fitted, bbox=None,
             resolution: int = 0) -> float:
    """Mean nearest-vertex distance from the noiseless points to the fitted
    zero set, at the stated extraction resolution."""
    pts = np.asarray(original_points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DataError("loss requires a non-empty (L, n) point array")
    level = fitted if isinstance(fitted, LevelSet) else \
        extract_level_set(fitted, bbox=bbox, resolution=resolution)
    verts = level.all_vertices()
    if verts.shape[0] == 0:
        raise DataError("cannot compute loss against an empty level set")
    tree = cKDTree(verts)
    dists, _ = tree.query(pts)
    return float(np.mean(dists))


@dataclass
class EvalReport:
    """Bundle of fit metrics; any field may be absent when not applicable."""

    cosine_similarity: float | None = None
    coefficient_distance: float | None = None
    loss: float | None = None
    loss_resolution: int | None = None
    sigma_min: float | None = None
    theta_used: float | None = None
    runtime_s: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate_fit(result: FitResult, spec: BasisSpec, a_star=None,
                 noiseless_points=None, bbox=None, resolution: int = 0) -> EvalReport:
    """Assemble the metric bundle for a fit result."""
    t0 = time.perf_counter()
    report = EvalReport(sigma_min=result.sigma_min, theta_used=result.theta_used)
    if a_star is not None:
        report.cosine_similarity = cosine_similarity(result.coefficients, a_star)
        report.coefficient_distance = coefficient_distance(result.coefficients, a_star)
    if noiseless_points is not None:
        shape = as_shape(spec, result)
        level = extract_level_set(shape, bbox=bbox, resolution=resolution)
        report.loss = fit_loss(noiseless_points, level)
        report.loss_resolution = level.resolution
    report.runtime_s = time.perf_counter() - t0
    return report


def export_obj(level: LevelSet, path) -> None:
    """Wavefront OBJ export of a 3-D level-set mesh (1-based face indices)."""
    if level.dim != 3 or level.vertices is None:
        raise DataError("OBJ export requires a 3-D mesh")
    with open(path, "w") as fh:
        for v in level.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in level.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def export_polylines_csv(level: LevelSet, path) -> None:
    """CSV rows (polyline_id, x1, x2) for a 2-D level set."""
    if level.dim != 2:
        raise DataError("polyline export requires a 2-D level set")
    with open(path, "w") as fh:
        fh.write("polyline,x1,x2\n")
        for i, line in enumerate(level.polylines):
            for v in line:
                fh.write(f"{i},{v[0]:.17g},{v[1]:.17g}\n")
