"""Independent step-by-step estimator oracle.

Rebuilds the order-by-order compensation recursion from scratch: sympy
expands every extended feature at x + eps into separated (x-feature,
eps-moment) products, the mixing matrices are assembled numerically, and the
triangular system is applied step by step per point.  Shares nothing with the
package's symbolic unrolling except the closed-form scalar moments (which are
validated against quadrature separately).
"""

import numpy as np
import sympy as sp
from sympy.simplify.fu import TR8, TR10

from momentfit import basis as mb
from momentfit.noise import MomentKey, NoiseModel, moment

_W = sp.Symbol("w", positive=True)


def _sym_feature(feature, syms):
    expr = sp.Integer(1)
    for s, atom in zip(syms, feature.atoms):
        expr *= s ** atom.power
        if atom.trig == "cos":
            expr *= sp.cos(atom.harmonic * _W * s)
        elif atom.trig == "sin":
            expr *= sp.sin(atom.harmonic * _W * s)
    return expr


def _parse_product(term, xs, es):
    """Split one expanded additive term into (coeff, x-atoms, eps-factors)."""
    n = len(xs)
    coeff = sp.Integer(1)
    xpow, xtrig = [0] * n, [("none", 0)] * n
    epow, etrig = [0] * n, [("none", 0)] * n
    for factor in sp.Mul.make_args(sp.expand_power_base(term)):
        if factor.is_Number:
            coeff *= factor
            continue
        base, exp = factor.as_base_exp()
        if base in xs:
            xpow[xs.index(base)] += int(exp)
            continue
        if base in es:
            epow[es.index(base)] += int(exp)
            continue
        assert exp == 1 and isinstance(base, (sp.cos, sp.sin)), f"unparsed {factor}"
        arg = base.args[0]
        kind = "cos" if isinstance(base, sp.cos) else "sin"
        hit = None
        for i, s in enumerate(xs):
            if arg.has(s):
                hit = ("x", i, s)
        for i, s in enumerate(es):
            if arg.has(s):
                hit = ("e", i, s)
        assert hit is not None, f"trig factor without variable: {factor}"
        q = sp.simplify(arg / (_W * hit[2]))
        q = int(q)
        if q < 0:  # cos(-a) is auto-normalized; sin never reaches here negative
            raise AssertionError(f"negative harmonic in {factor}")
        if hit[0] == "x":
            assert xtrig[hit[1]] == ("none", 0)
            xtrig[hit[1]] = (kind, q)
        else:
            assert etrig[hit[1]] == ("none", 0)
            etrig[hit[1]] = (kind, q)
    x_atoms = tuple(mb.FeatureAtom(p, t, q) for p, (t, q) in zip(xpow, xtrig))
    return coeff, x_atoms, list(zip(epow, etrig))


class RecursionOracle:
    """Numeric A-matrices plus the step-by-step order recursion."""

    def __init__(self, spec: mb.BasisSpec, theta: float):
        self.spec = spec
        self.spec2 = spec.extended()
        self.model = NoiseModel(theta=theta)
        self.feats2 = mb.features(self.spec2)
        self.index2 = mb.feature_index(self.spec2)
        self.blocks = mb.block_ranges(self.spec2)
        self.omega = spec.omega or 0.0
        xs = sp.symbols(f"x0:{spec.n}")
        es = sp.symbols(f"e0:{spec.n}")
        self.xs, self.es = list(xs), list(es)
        self._build_mixing()

    def _eps_moment(self, factors) -> float:
        val = 1.0
        for k, (kind, q) in factors:
            key = MomentKey(k, kind, q * self.omega if kind != "none" else 0.0)
            val *= moment(self.model, key)
        return val

    def _block_of(self, order):
        return self.blocks[order]

    def _build_mixing(self):
        gmax = self.spec2.gamma
        n2 = len(self.feats2)
        # A[m][j] has shape (len block m, len block j)
        self.A = {}
        for j in range(gmax + 1):
            for m in range(j + 1):
                bm, bj = self._block_of(m), self._block_of(j)
                self.A[(m, j)] = np.zeros((bm[1] - bm[0], bj[1] - bj[0]))
        for j in range(gmax + 1):
            bj = self._block_of(j)
            for i_local, fi in enumerate(self.feats2[bj[0]:bj[1]]):
                # deep expand makes trig arguments explicit sums, TR10 splits
                # them by angle addition without touching multiple angles
                shifted = _sym_feature(fi, [x + e for x, e in zip(self.xs, self.es)])
                expanded = sp.expand(TR10(sp.expand(shifted)))
                for term in sp.Add.make_args(expanded):
                    coeff, x_atoms, eps_factors = _parse_product(term, self.xs, self.es)
                    g = mb.Feature(x_atoms)
                    m = g.order
                    gidx = self.index2[g]
                    bm = self._block_of(m)
                    self.A[(m, j)][gidx - bm[0], i_local] += float(coeff) * self._eps_moment(eps_factors)

    def compensated_extended(self, y: np.ndarray) -> np.ndarray:
        """Step-by-step recursion producing the extended compensated vector."""
        b2 = mb.evaluate(self.spec2, y)
        out = np.empty_like(b2)
        out[0] = 1.0
        for j in range(1, self.spec2.gamma + 1):
            bj = self._block_of(j)
            rhs = b2[bj[0]:bj[1]].copy()
            for m in range(j):
                bm = self._block_of(m)
                rhs -= self.A[(m, j)].T @ out[bm[0]:bm[1]]
            out[bj[0]:bj[1]] = np.linalg.solve(self.A[(j, j)].T, rhs)
        return out

    def entry_products(self):
        """Sympy expansion of every b_k * b_l into the extended family."""
        feats = mb.features(self.spec)
        n = len(feats)
        table = {}
        for k in range(n):
            for l in range(k, n):
                prod = sp.expand(TR8(_sym_feature(feats[k], self.xs) *
                                     _sym_feature(feats[l], self.xs)))
                terms = []
                for term in sp.Add.make_args(prod):
                    coeff, x_atoms, eps_factors = _parse_product(term, self.xs, self.es)
                    assert not any(p for p, _ in eps_factors)
                    terms.append((self.index2[mb.Feature(x_atoms)], float(coeff)))
                table[(k, l)] = terms
        return table

    def compensate_matrix(self, y: np.ndarray, entry_table=None) -> np.ndarray:
        if entry_table is None:
            entry_table = self.entry_products()
        bhat2 = self.compensated_extended(y)
        n = len(mb.features(self.spec))
        m = np.empty((n, n))
        for (k, l), terms in entry_table.items():
            v = sum(c * bhat2[idx] for idx, c in terms)
            m[k, l] = m[l, k] = v
        return m
