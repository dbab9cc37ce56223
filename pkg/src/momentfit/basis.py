"""Feature families: enumeration, ordering, evaluation, and products.

A feature is a product over coordinates of atoms ``x_i^s``,
``x_i^s * cos(q*omega*x_i)`` or ``x_i^s * sin(q*omega*x_i)``.  The order of a
feature is the sum over coordinates of ``s + q``; features are grouped into
blocks of equal order, the constant feature alone forming block 0.

Ordering contract (documented for coefficient-vector portability): blocks
appear by increasing order, and inside each block features are sorted
ascending by the tuple of per-coordinate keys ``(harmonic, trig, power)``
scanned from the *last* coordinate to the first, with trig ranked
none < cos < sin.  For monomial families this reduces to colexicographic
order on the exponent tuple, e.g. for n=2, order 2: ``x1^2, x1*x2, x2^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from itertools import product as _cartesian

import numpy as np

from .errors import ConfigError, DataError

TRIG_NONE = "none"
TRIG_COS = "cos"
TRIG_SIN = "sin"
_TRIG_RANK = {TRIG_NONE: 0, TRIG_COS: 1, TRIG_SIN: 2}

MONOMIAL = "monomial"
POLY_TRIG = "poly-trig"


@dataclass(frozen=True)
class FeatureAtom:
    """One coordinate's factor ``x^power * trig(harmonic * omega * x)``."""

    power: int
    trig: str = TRIG_NONE
    harmonic: int = 0

    def __post_init__(self):
        if self.power < 0 or self.harmonic < 0:
            raise ConfigError("atom power and harmonic must be non-negative")
        if self.trig not in _TRIG_RANK:
            raise ConfigError(f"unknown trig kind {self.trig!r}")
        if (self.harmonic == 0) != (self.trig == TRIG_NONE):
            raise ConfigError("harmonic must be zero exactly when trig is none")

    @property
    def order(self) -> int:
        return self.power + self.harmonic

    def sort_key(self):
        return (self.harmonic, _TRIG_RANK[self.trig], self.power)

    def label(self, coord: int) -> str:
        x = f"x{coord + 1}"
        s = "" if self.power == 0 else (x if self.power == 1 else f"{x}^{self.power}")
        if self.trig == TRIG_NONE:
            return s or "1"
        q = "" if self.harmonic == 1 else str(self.harmonic)
        t = f"{self.trig}({q}w*{x})"
        return f"{s}*{t}" if s else t


IDENTITY_ATOM = FeatureAtom(0, TRIG_NONE, 0)


@dataclass(frozen=True)
class Feature:
    """Product of one atom per coordinate; position in the tuple is the coordinate."""

    atoms: tuple[FeatureAtom, ...]

    @property
    def order(self) -> int:
        return sum(a.order for a in self.atoms)

    def sort_key(self):
        return tuple(a.sort_key() for a in reversed(self.atoms))

    def label(self) -> str:
        parts = [a.label(i) for i, a in enumerate(self.atoms) if a != IDENTITY_ATOM]
        return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class BasisSpec:
    """The pair (order, family kind) that fully determines the feature vector.

    Parameters
    ----------
    n : spatial dimension
    gamma : model order (maximum feature order)
    kind : "monomial" or "poly-trig"
    omega : shared angular frequency, required exactly for poly-trig
    """

    n: int
    gamma: int
    kind: str = MONOMIAL
    omega: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("spatial dimension n must be >= 1")
        if self.gamma < 0:
            raise ConfigError("model order gamma must be >= 0")
        if self.kind not in (MONOMIAL, POLY_TRIG):
            raise ConfigError(f"unknown family kind {self.kind!r}")
        if self.kind == POLY_TRIG:
            if self.omega is None or not (self.omega > 0):
                raise ConfigError("poly-trig families require omega > 0")
        elif self.omega is not None:
            raise ConfigError("omega is only meaningful for poly-trig families")

    @property
    def feature_count(self) -> int:
        return len(features(self))

    def extended(self, factor: int = 2) -> "BasisSpec":
        """Same family at order factor*gamma (hosts entry-wise feature products)."""
        return replace(self, gamma=factor * self.gamma)

    def to_dict(self) -> dict:
        return {"n": self.n, "gamma": self.gamma, "kind": self.kind, "omega": self.omega}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        try:
            return cls(n=int(d["n"]), gamma=int(d["gamma"]),
                       kind=d.get("kind", MONOMIAL),
                       omega=None if d.get("omega") is None else float(d["omega"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid basis spec payload: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "BasisSpec":
        try:
            d = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid basis spec JSON: {exc}") from exc
        return cls.from_dict(d)


def _compositions(total: int, parts: int):
    """All tuples of `parts` non-negative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def _atom_options(order: int, trig: bool) -> list[FeatureAtom]:
    """Distinct nonzero atoms of a single coordinate at the given order."""
    if order == 0:
        return [IDENTITY_ATOM]
    opts = [FeatureAtom(order, TRIG_NONE, 0)]
    if trig:
        for q in range(1, order + 1):
            opts.append(FeatureAtom(order - q, TRIG_COS, q))
            opts.append(FeatureAtom(order - q, TRIG_SIN, q))
    return opts


@lru_cache(maxsize=None)
def features(spec: BasisSpec) -> tuple[Feature, ...]:
    """The full ordered feature list for `spec` (deterministic)."""
    trig = spec.kind == POLY_TRIG
    out: list[Feature] = []
    for k in range(spec.gamma + 1):
        block = []
        for comp in _compositions(k, spec.n):
            for atoms in _cartesian(*(_atom_options(c, trig) for c in comp)):
                block.append(Feature(atoms))
        block.sort(key=Feature.sort_key)
        out.extend(block)
    return tuple(out)


def enumerate_features(spec: BasisSpec) -> list[Feature]:
    return list(features(spec))


@lru_cache(maxsize=None)
def feature_index(spec: BasisSpec) -> dict:
    return {f: i for i, f in enumerate(features(spec))}


@lru_cache(maxsize=None)
def block_ranges(spec: BasisSpec) -> tuple[tuple[int, int], ...]:
    """Index range [start, stop) of each order block C_0 ... C_gamma."""
    feats = features(spec)
    ranges = []
    start = 0
    for k in range(spec.gamma + 1):
        stop = start
        while stop < len(feats) and feats[stop].order == k:
            stop += 1
        ranges.append((start, stop))
        start = stop
    return tuple(ranges)


@lru_cache(maxsize=None)
def _eval_program(spec: BasisSpec):
    """Per-coordinate unique atoms plus per-feature gather indices."""
    feats = features(spec)
    uniq: list[list[FeatureAtom]] = []
    gather = np.empty((spec.n, len(feats)), dtype=np.intp)
    for i in range(spec.n):
        seen: dict[FeatureAtom, int] = {}
        for j, f in enumerate(feats):
            a = f.atoms[i]
            if a not in seen:
                seen[a] = len(seen)
            gather[i, j] = seen[a]
        uniq.append(list(seen))
    return uniq, gather


def _atom_values(atom: FeatureAtom, x: np.ndarray, omega: float | None) -> np.ndarray:
    v = x ** atom.power if atom.power else np.ones_like(x)
    if atom.trig == TRIG_COS:
        v = v * np.cos(atom.harmonic * omega * x)
    elif atom.trig == TRIG_SIN:
        v = v * np.sin(atom.harmonic * omega * x)
    return v


def _atom_derivatives(atom: FeatureAtom, x: np.ndarray, omega: float | None) -> np.ndarray:
    s, q = atom.power, atom.harmonic
    d = s * x ** (s - 1) if s else np.zeros_like(x)
    if atom.trig == TRIG_NONE:
        return d
    a = q * omega
    if atom.trig == TRIG_COS:
        return d * np.cos(a * x) - a * (x ** s) * np.sin(a * x)
    return d * np.sin(a * x) + a * (x ** s) * np.cos(a * x)


def _check_points(spec: BasisSpec, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != spec.n:
        raise DataError(f"points must have shape (L, {spec.n}), got {pts.shape}")
    return pts


def evaluate_many(spec: BasisSpec, points: np.ndarray) -> np.ndarray:
    """Feature matrix of shape (L, N) for an (L, n) point array."""
    pts = _check_points(spec, points)
    uniq, gather = _eval_program(spec)
    out = np.ones((pts.shape[0], len(features(spec))))
    for i in range(spec.n):
        table = np.stack([_atom_values(a, pts[:, i], spec.omega) for a in uniq[i]], axis=1)
        out *= table[:, gather[i]]
    return out


def evaluate(spec: BasisSpec, point) -> np.ndarray:
    """Feature vector at a single point; entry 0 is always 1."""
    return evaluate_many(spec, np.asarray(point, dtype=float).reshape(1, -1))[0]


def evaluate_gradient(spec: BasisSpec, coefficients, points: np.ndarray) -> np.ndarray:
    """Gradient of g(x) = coefficients . b(x), shape (L, n)."""
    pts = _check_points(spec, points)
    coeffs = np.asarray(coefficients, dtype=float)
    uniq, gather = _eval_program(spec)
    vals = []
    ders = []
    for i in range(spec.n):
        vals.append(np.stack([_atom_values(a, pts[:, i], spec.omega) for a in uniq[i]], axis=1))
        ders.append(np.stack([_atom_derivatives(a, pts[:, i], spec.omega) for a in uniq[i]], axis=1))
    grad = np.empty((pts.shape[0], spec.n))
    for i in range(spec.n):
        part = np.ones((pts.shape[0], len(features(spec))))
        for j in range(spec.n):
            table = ders[j] if j == i else vals[j]
            part *= table[:, gather[j]]
        grad[:, i] = part @ coeffs
    return grad


def _atom_product(a: FeatureAtom, b: FeatureAtom) -> list[tuple[Fraction, FeatureAtom]]:
    """Expand the product of two single-coordinate atoms into the family.

    Trig pairs expand by product-to-sum identities; zero-harmonic results
    collapse to plain monomial atoms and sin(0) terms drop.
    """
    s = a.power + b.power
    if a.trig == TRIG_NONE and b.trig == TRIG_NONE:
        return [(Fraction(1), FeatureAtom(s))]
    if a.trig == TRIG_NONE:
        return [(Fraction(1), FeatureAtom(s, b.trig, b.harmonic))]
    if b.trig == TRIG_NONE:
        return [(Fraction(1), FeatureAtom(s, a.trig, a.harmonic))]

    half = Fraction(1, 2)
    qsum, qdiff = a.harmonic + b.harmonic, abs(a.harmonic - b.harmonic)

    def cos_atom(q):
        return FeatureAtom(s) if q == 0 else FeatureAtom(s, TRIG_COS, q)

    if a.trig == TRIG_COS and b.trig == TRIG_COS:
        return [(half, cos_atom(qdiff)), (half, cos_atom(qsum))]
    if a.trig == TRIG_SIN and b.trig == TRIG_SIN:
        return [(half, cos_atom(qdiff)), (-half, cos_atom(qsum))]
    # mixed: sin(A)cos(B) = (sin(A+B) + sin(A-B)) / 2
    q_sin = a.harmonic if a.trig == TRIG_SIN else b.harmonic
    q_cos = b.harmonic if a.trig == TRIG_SIN else a.harmonic
    terms = [(half, FeatureAtom(s, TRIG_SIN, qsum))]
    if q_sin != q_cos:
        sign = half if q_sin > q_cos else -half
        terms.append((sign, FeatureAtom(s, TRIG_SIN, qdiff)))
    return terms


def feature_product(spec: BasisSpec, i: int, j: int) -> list[tuple[int, Fraction]]:
    """b_i * b_j as a sparse combination over the extended (2*gamma) family.

    Returns (index in the extended family, exact rational coefficient) pairs,
    sorted by index.  Valid for any i, j in the order-gamma family.
    """
    feats = features(spec)
    fi, fj = feats[i], feats[j]
    idx2 = feature_index(spec.extended())
    combos: list[tuple[Fraction, tuple[FeatureAtom, ...]]] = [(Fraction(1), ())]
    for c in range(spec.n):
        expanded = []
        for coef, atoms in combos:
            for c2, atom in _atom_product(fi.atoms[c], fj.atoms[c]):
                expanded.append((coef * c2, atoms + (atom,)))
        combos = expanded
    out: dict[int, Fraction] = {}
    for coef, atoms in combos:
        k = idx2[Feature(atoms)]
        out[k] = out.get(k, Fraction(0)) + coef
    return sorted((k, v) for k, v in out.items() if v != 0)


def monomial_substitute(spec: BasisSpec, coefficients, scale: float, shift) -> np.ndarray:
    """Coefficients of p(scale * x + shift) for a monomial-family polynomial p.

    Used to map fitted coefficient vectors between the data frame and a
    normalized frame; only defined for monomial families.
    """
    if spec.kind != MONOMIAL:
        raise ConfigError("coefficient substitution is only supported for monomial families")
    coeffs = np.asarray(coefficients, dtype=float)
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (spec.n,))
    feats = features(spec)
    index = feature_index(spec)
    out = np.zeros_like(coeffs)
    for f, c in zip(feats, coeffs):
        if c == 0.0:
            continue
        # expand prod_i (scale*x_i + shift_i)^{k_i} term by term
        terms = [(c, [])]
        for i, atom in enumerate(f.atoms):
            k = atom.power
            expanded = []
            for coef, exps in terms:
                for m in range(k + 1):
                    w = math.comb(k, m) * (scale ** m) * (shift[i] ** (k - m))
                    if w != 0.0:
                        expanded.append((coef * w, exps + [m]))
            terms = expanded
        for coef, exps in terms:
            g = Feature(tuple(FeatureAtom(e) for e in exps))
            out[index[g]] += coef
    return out
