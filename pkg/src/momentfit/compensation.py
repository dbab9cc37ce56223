"""Offline construction and instantiation of unbiased moment-matrix estimators.

``build_plan`` derives, once per feature family, the symbolic functional form
of an estimator M-hat(y) whose expectation over the noise equals b(x)b(x)^T
when y = x + eps.  The derivation expands every matrix entry into the
order-2*gamma family, applies the per-coordinate separation of each atom at
x + eps (binomial expansion of the power, angle addition for the trig factor)
and unrolls the resulting triangular system bottom-up by feature order.  The
same-order mixing of a cos/sin pair at harmonic q is a 2x2 rotation-scaling
block; its inverse contributes numerator moment factors and a reciprocal of
the block determinant D_q = E[cos(q w eps)]^2 + E[sin(q w eps)]^2.

Plans are theta-independent: coefficients are exact rationals times symbolic
moment factors (and D_q reciprocals), turned into floats only when
``instantiate`` binds a concrete noise model.  Instantiation collapses every
entry to a sparse linear functional over the extended feature vector, so a
compensated matrix costs one extended feature evaluation plus a sparse
mat-vec per point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import basis
from .basis import BasisSpec, Feature, FeatureAtom, IDENTITY_ATOM, TRIG_COS, TRIG_NONE, TRIG_SIN
from .errors import CapacityError, NumericalError, PlanFormatError
from .noise import MomentKey, NoiseModel, build_moment_table

PLAN_FORMAT_VERSION = 1
MAX_FEATURES = 512
MAX_ORDER = 16  # symbolic term counts grow like partition numbers of 2*gamma
CONDITION_LIMIT = 1e12

# A moment symbol (k, trig, q) stands for E[eps^k * trig(q*omega*eps)] of one
# noise coordinate; coordinates are IID so symbols carry no coordinate tag.
MomentSym = tuple[int, str, int]

# Symbolic coefficient: {(num_syms, den_factors): Fraction} where num_syms is a
# sorted tuple of MomentSym and den_factors a sorted tuple of (q, power) pairs
# meaning a division by D_q**power.
Expr = dict


def _expr_one() -> Expr:
    return {((), ()): Fraction(1)}


def _expr_iadd(dst: Expr, src: Expr, factor: Fraction = Fraction(1),
               sym: MomentSym | None = None, den_q: int | None = None) -> None:
    """dst += factor * sym * src / D_{den_q}   (sym and den_q optional)."""
    for (num, den), coeff in src.items():
        if sym is not None:
            num = tuple(sorted(num + (sym,)))
        if den_q is not None:
            d = dict(den)
            d[den_q] = d.get(den_q, 0) + 1
            den = tuple(sorted(d.items()))
        key = (num, den)
        new = dst.get(key, Fraction(0)) + factor * coeff
        if new:
            dst[key] = new
        else:
            dst.pop(key, None)


def _expr_mul(e1: Expr, e2: Expr) -> Expr:
    out: Expr = {}
    for (n1, d1), c1 in e1.items():
        for (n2, d2), c2 in e2.items():
            num = tuple(sorted(n1 + n2))
            d = dict(d1)
            for q, p in d2:
                d[q] = d.get(q, 0) + p
            key = (num, tuple(sorted(d.items())))
            new = out.get(key, Fraction(0)) + c1 * c2
            if new:
                out[key] = new
            else:
                out.pop(key, None)
    return out


# A linear form over univariate atoms of y: {FeatureAtom: Expr}.
Lin = dict


def _lin_iadd(dst: Lin, src: Lin, factor: Fraction,
              sym: MomentSym | None = None, den_q: int | None = None) -> None:
    for atom, expr in src.items():
        _expr_iadd(dst.setdefault(atom, {}), expr, factor, sym, den_q)


@lru_cache(maxsize=None)
def _univariate_estimators(max_order: int, trig: bool):
    """Unbiased estimators for every single-coordinate atom up to max_order.

    Returns {atom: {y_atom: Expr}} such that summing Expr * y_atom(y) over
    the entries has expectation atom(x) under y = x + eps.  Built bottom-up:
    order-c forms reference only strictly lower-order estimators, so the
    triangular system is fully unrolled.
    """
    est: dict[FeatureAtom, Lin] = {IDENTITY_ATOM: {IDENTITY_ATOM: _expr_one()}}
    for c in range(1, max_order + 1):
        # plain power: (x+eps)^c = sum_u C(c,u) x^(c-u) eps^u
        lin: Lin = {FeatureAtom(c): _expr_one()}
        for u in range(1, c + 1):
            w = Fraction(math.comb(c, u))
            _lin_iadd(lin, est[FeatureAtom(c - u)], -w, sym=(u, TRIG_NONE, 0))
        est[FeatureAtom(c)] = lin
        if not trig:
            continue
        for q in range(1, c + 1):
            s = c - q
            # x^s cos/sin(q w x) at x+eps: binomial on the power, angle
            # addition on the trig factor; the u=0 terms form the 2x2 block.
            tmp_cos: Lin = {FeatureAtom(s, TRIG_COS, q): _expr_one()}
            tmp_sin: Lin = {FeatureAtom(s, TRIG_SIN, q): _expr_one()}
            for u in range(1, s + 1):
                w = Fraction(math.comb(s, u))
                ec = est[FeatureAtom(s - u, TRIG_COS, q)]
                es = est[FeatureAtom(s - u, TRIG_SIN, q)]
                _lin_iadd(tmp_cos, ec, -w, sym=(u, TRIG_COS, q))
                _lin_iadd(tmp_cos, es, w, sym=(u, TRIG_SIN, q))
                _lin_iadd(tmp_sin, es, -w, sym=(u, TRIG_COS, q))
                _lin_iadd(tmp_sin, ec, -w, sym=(u, TRIG_SIN, q))
            # invert the rotation-scaling block [[mc,-ms],[ms,mc]] / D_q
            mc: MomentSym = (0, TRIG_COS, q)
            ms: MomentSym = (0, TRIG_SIN, q)
            est_cos: Lin = {}
            _lin_iadd(est_cos, tmp_cos, Fraction(1), sym=mc, den_q=q)
            _lin_iadd(est_cos, tmp_sin, Fraction(1), sym=ms, den_q=q)
            est_sin: Lin = {}
            _lin_iadd(est_sin, tmp_cos, Fraction(-1), sym=ms, den_q=q)
            _lin_iadd(est_sin, tmp_sin, Fraction(1), sym=mc, den_q=q)
            est[FeatureAtom(s, TRIG_COS, q)] = est_cos
            est[FeatureAtom(s, TRIG_SIN, q)] = est_sin
    return est


# Flattened plan term: (y_feature index in the extended family, coefficient,
# numerator moment symbols, denominator (q, power) factors).
Term = tuple[int, Fraction, tuple, tuple]


def _feature_estimator(feature: Feature, est, idx2: dict) -> list[Term]:
    """Tensor product of per-coordinate estimators, flattened over y-features.

    Valid because noise coordinates are independent: the expectation of the
    product of per-coordinate estimators factorizes.
    """
    combos: list[tuple[tuple[FeatureAtom, ...], Expr]] = [((), _expr_one())]
    for atom in feature.atoms:
        lin = est[atom]
        merged: dict[tuple[FeatureAtom, ...], Expr] = {}
        for atoms, e1 in combos:
            for y_atom, e2 in lin.items():
                key = atoms + (y_atom,)
                prod = _expr_mul(e1, e2)
                if key in merged:
                    _expr_iadd(merged[key], prod)
                else:
                    merged[key] = prod
        combos = list(merged.items())
    terms: list[Term] = []
    for atoms, expr in combos:
        y_idx = idx2[Feature(atoms)]
        for (num, den), coeff in expr.items():
            if coeff:
                terms.append((y_idx, coeff, num, den))
    return terms


def _merge_terms(parts: list[tuple[Fraction, list[Term]]]) -> tuple[Term, ...]:
    acc: dict[tuple, Fraction] = {}
    for factor, terms in parts:
        for y_idx, coeff, num, den in terms:
            key = (y_idx, num, den)
            new = acc.get(key, Fraction(0)) + factor * coeff
            if new:
                acc[key] = new
            else:
                acc.pop(key, None)
    return tuple((y_idx, coeff, num, den)
                 for (y_idx, num, den), coeff in sorted(acc.items()))


@dataclass(frozen=True)
class CompensationPlan:
    """Theta-independent symbolic estimator forms for one feature family.

    ``entry_terms[(k, l)]`` (k <= l) expresses the unbiased estimator of
    b_k(x) * b_l(x); ``vector_terms[k]`` the estimator of b_k(x) alone.  Both
    are linear forms over the extended (order 2*gamma) feature vector of y
    with symbolic moment coefficients.
    """

    spec: BasisSpec
    entry_terms: dict
    vector_terms: tuple
    moment_syms: frozenset
    det_harmonics: frozenset

    @property
    def n_features(self) -> int:
        return len(basis.features(self.spec))

    @property
    def n_extended(self) -> int:
        return len(basis.features(self.spec.extended()))

    def moment_key(self, sym: MomentSym) -> MomentKey:
        k, trig, q = sym
        freq = 0.0 if q == 0 else q * float(self.spec.omega)
        return MomentKey(k, trig, freq)

    @property
    def required_moments(self) -> set:
        keys = {self.moment_key(s) for s in self.moment_syms}
        for q in self.det_harmonics:
            keys.add(self.moment_key((0, TRIG_COS, q)))
            keys.add(self.moment_key((0, TRIG_SIN, q)))
        return keys


def build_plan(spec: BasisSpec) -> CompensationPlan:
    """Derive the symbolic compensated-matrix form for a feature family."""
    feats = basis.features(spec)
    n = len(feats)
    if n > MAX_FEATURES:
        raise CapacityError(
            f"family has {n} features; the supported maximum is {MAX_FEATURES}")
    if spec.gamma > MAX_ORDER:
        raise CapacityError(
            f"model order {spec.gamma} exceeds the supported maximum {MAX_ORDER}")
    spec2 = spec.extended()
    feats2 = basis.features(spec2)
    idx2 = basis.feature_index(spec2)
    est = _univariate_estimators(2 * spec.gamma, spec.kind == basis.POLY_TRIG)

    fe_cache: dict[Feature, list[Term]] = {}

    def estimator_of(f: Feature) -> list[Term]:
        if f not in fe_cache:
            fe_cache[f] = _feature_estimator(f, est, idx2)
        return fe_cache[f]

    vector_terms = tuple(_merge_terms([(Fraction(1), estimator_of(f))]) for f in feats)
    entry_terms: dict[tuple[int, int], tuple[Term, ...]] = {}
    for k in range(n):
        for l in range(k, n):
            parts = [(coeff, estimator_of(feats2[p]))
                     for p, coeff in basis.feature_product(spec, k, l)]
            entry_terms[(k, l)] = _merge_terms(parts)

    syms: set[MomentSym] = set()
    dets: set[int] = set()
    for terms in list(entry_terms.values()) + list(vector_terms):
        for _, _, num, den in terms:
            syms.update(num)
            dets.update(q for q, _ in den)
    return CompensationPlan(spec, entry_terms, vector_terms,
                            frozenset(syms), frozenset(dets))


@dataclass(frozen=True)
class CompensationEvaluator:
    """A plan with moments bound at a fixed noise parameter.

    ``matrix_map`` is the sparse (n_upper x n_extended) operator taking the
    extended feature vector of y to the upper triangle of M-hat(y);
    ``vector_map`` the analogue for the compensated feature vector.
    """

    plan: CompensationPlan
    model: NoiseModel
    moment_table: object
    matrix_map: sparse.csr_matrix
    vector_map: sparse.csr_matrix
    worst_condition: float
    order_conditions: tuple

    @property
    def n_features(self) -> int:
        return self.plan.n_features

    def _dense_matrix_map(self):
        # dense mat-mul beats CSR for the small operators typical here
        cached = getattr(self, "_matrix_map_dense", None)
        if cached is None and self.matrix_map.shape[0] * self.matrix_map.shape[1] <= 1_000_000:
            cached = self.matrix_map.toarray()
            object.__setattr__(self, "_matrix_map_dense", cached)
        return cached

    def _upper_indices(self):
        return np.triu_indices(self.n_features)

    def unpack(self, entries: np.ndarray) -> np.ndarray:
        """Mirror a length-n_upper entry vector into a symmetric matrix."""
        n = self.n_features
        rows, cols = self._upper_indices()
        m = np.empty((n, n))
        m[rows, cols] = entries
        m[cols, rows] = entries
        return m

    def extended_features(self, points: np.ndarray) -> np.ndarray:
        return basis.evaluate_many(self.plan.spec.extended(), points)

    def compensate_entries_many(self, points: np.ndarray) -> np.ndarray:
        """Upper-triangle rows of M-hat(y) for a batch of points, shape (L, n_upper)."""
        b2 = self.extended_features(points)
        if not np.all(np.isfinite(b2)):
            raise NumericalError("non-finite feature values in compensation input")
        dense = self._dense_matrix_map()
        if dense is not None:
            return b2 @ dense.T
        return self.matrix_map.dot(b2.T).T

    def compensate_point(self, y) -> np.ndarray:
        """Symmetric N x N estimate M-hat(y); exactly symmetric by mirroring."""
        entries = self.compensate_entries_many(np.asarray(y, dtype=float).reshape(1, -1))[0]
        return self.unpack(entries)

    def compensate_features_many(self, points: np.ndarray) -> np.ndarray:
        b2 = self.extended_features(points)
        if not np.all(np.isfinite(b2)):
            raise NumericalError("non-finite feature values in compensation input")
        return self.vector_map.dot(b2.T).T

    def compensate_feature(self, y) -> np.ndarray:
        """Compensated feature-vector estimate b-hat(x) from one noisy point."""
        return self.compensate_features_many(np.asarray(y, dtype=float).reshape(1, -1))[0]

    def bias_matrix(self, y) -> np.ndarray:
        """Diagnostic accessor: the implied bias M(y) - M-hat(y)."""
        b = basis.evaluate(self.plan.spec, y)
        return np.outer(b, b) - self.compensate_point(y)


def _collapse(plan: CompensationPlan, values: dict, dets: dict,
              term_table, n_rows: int, row_of) -> sparse.csr_matrix:
    rows, cols, data = [], [], []
    for key, terms in term_table:
        r = row_of(key)
        for y_idx, coeff, num, den in terms:
            v = float(coeff)
            for sym in num:
                v *= values[sym]
            for q, p in den:
                v /= dets[q] ** p
            if v != 0.0:
                rows.append(r)
                cols.append(y_idx)
                data.append(v)
    mat = sparse.coo_matrix((data, (rows, cols)),
                            shape=(n_rows, plan.n_extended))
    mat.sum_duplicates()
    return mat.tocsr()


def instantiate(plan: CompensationPlan, model: NoiseModel) -> CompensationEvaluator:
    """Bind a noise model: evaluate moments, check block conditioning, collapse.

    Raises NumericalError when a same-order mixing block is numerically
    singular at this theta (condition above 1e12); choosing a different
    omega moves the offending sinc zeros.
    """
    table = build_moment_table(model, plan.required_moments)
    values = {sym: table[plan.moment_key(sym)] for sym in plan.moment_syms}
    dets = {}
    for q in plan.det_harmonics:
        mc = table[plan.moment_key((0, TRIG_COS, q))]
        ms = table[plan.moment_key((0, TRIG_SIN, q))]
        dets[q] = mc * mc + ms * ms

    order_conditions = []
    worst = 1.0
    if dets:
        spec2 = plan.spec.extended()
        by_order: dict[int, list[float]] = {}
        for f in basis.features(spec2):
            v = 1.0
            for atom in f.atoms:
                if atom.trig != TRIG_NONE:
                    v *= math.sqrt(dets[atom.harmonic])
            by_order.setdefault(f.order, []).append(v)
        for j in sorted(by_order):
            lo, hi = min(by_order[j]), max(by_order[j])
            cond = math.inf if lo == 0.0 else hi / lo
            order_conditions.append((j, cond))
            if cond > worst:
                worst = cond
        if worst > CONDITION_LIMIT:
            bad = [j for j, c in order_conditions if c > CONDITION_LIMIT]
            raise NumericalError(
                f"same-order mixing block numerically singular at theta="
                f"{model.theta:g} (condition {worst:.3g} at order {bad[0]}); "
                f"adjust omega to move the degenerate frequency")

    n = plan.n_features
    upper = [((k, l), plan.entry_terms[(k, l)])
             for k in range(n) for l in range(k, n)]
    row_pos = {key: r for r, (key, _) in enumerate(upper)}
    matrix_map = _collapse(plan, values, dets, upper, len(upper),
                           lambda key: row_pos[key])
    vec_table = list(enumerate(plan.vector_terms))
    vector_map = _collapse(plan, values, dets, vec_table, n, lambda k: k)
    return CompensationEvaluator(plan, model, table, matrix_map, vector_map,
                                 worst, tuple(order_conditions))


def _term_to_payload(term: Term):
    y_idx, coeff, num, den = term
    return [y_idx, [coeff.numerator, coeff.denominator],
            [[k, t, q] for k, t, q in num], [[q, p] for q, p in den]]


def _term_from_payload(payload) -> Term:
    y_idx, (p, q), num, den = payload
    return (int(y_idx), Fraction(int(p), int(q)),
            tuple((int(k), str(t), int(h)) for k, t, h in num),
            tuple((int(h), int(pw)) for h, pw in den))


def save_plan(plan: CompensationPlan) -> bytes:
    """Serialize to a versioned JSON container; rationals round-trip exactly."""
    n = plan.n_features
    doc = {
        "format_version": PLAN_FORMAT_VERSION,
        "basis": plan.spec.to_dict(),
        "entries": [[k, l, [_term_to_payload(t) for t in plan.entry_terms[(k, l)]]]
                    for k in range(n) for l in range(k, n)],
        "vectors": [[k, [_term_to_payload(t) for t in plan.vector_terms[k]]]
                    for k in range(n)],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_plan(payload: bytes) -> CompensationPlan:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PlanFormatError(f"malformed plan payload: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise PlanFormatError("malformed plan payload: missing format_version")
    if doc["format_version"] != PLAN_FORMAT_VERSION:
        raise PlanFormatError(
            f"unsupported plan format version {doc['format_version']!r}; "
            f"this build reads version {PLAN_FORMAT_VERSION}")
    try:
        spec = BasisSpec.from_dict(doc["basis"])
        entry_terms = {}
        for k, l, terms in doc["entries"]:
            entry_terms[(int(k), int(l))] = tuple(_term_from_payload(t) for t in terms)
        vectors = {int(k): tuple(_term_from_payload(t) for t in terms)
                   for k, terms in doc["vectors"]}
        vector_terms = tuple(vectors[k] for k in range(len(vectors)))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise PlanFormatError(f"malformed plan payload: {exc}") from exc
    n = len(vector_terms)
    expected = {(k, l) for k in range(n) for l in range(k, n)}
    if set(entry_terms) != expected:
        raise PlanFormatError("malformed plan payload: incomplete entry table")
    syms: set[MomentSym] = set()
    dets: set[int] = set()
    for terms in list(entry_terms.values()) + list(vector_terms):
        for _, _, num, den in terms:
            syms.update(num)
            dets.update(q for q, _ in den)
    return CompensationPlan(spec, entry_terms, vector_terms,
                            frozenset(syms), frozenset(dets))
