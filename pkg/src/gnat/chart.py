"""Tensor calculus on a coordinate chart: metric, connection, curvature,
covariant and Lie derivatives.

Index conventions used everywhere downstream:

* ``christoffel_at`` returns ``G[r, j, k]`` = Gamma^r_jk, symmetric in (j, k).
* ``riemann_at`` returns ``R[r, k, j, i]`` with curvature acting as
  R(d_i, d_j) d_k = R^r_kji d_r, i.e. the last lower slot is the *first*
  argument.  The lowered form ``R_low[a, k, j, i] = g_ar R^r_kji`` is
  antisymmetric in (a, k) and (j, i) and symmetric under pair exchange.
* covariant derivatives put the derivative index first:
  ``nabla[c, ...] = (d_c T)...``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import EvalError, ScalarExpr


class ChartError(ValueError):
    pass


class PointOutsideDomainError(ChartError):
    pass


class DegenerateMetricError(ChartError):
    pass


def expr_array(nested) -> np.ndarray:
    """Object ndarray of ScalarExpr from (nested) lists."""
    arr = np.empty(np.shape(nested), dtype=object)
    for idx in itertools.product(*(range(s) for s in arr.shape)):
        node = nested
        for i in idx:
            node = node[i]
        if not isinstance(node, ScalarExpr):
            raise TypeError(f"expected ScalarExpr at {idx}, got {node!r}")
        arr[idx] = node
    return arr


def zeros_exprs(shape) -> np.ndarray:
    arr = np.empty(shape, dtype=object)
    arr[...] = ScalarExpr.zero()
    return arr


def eval_exprs(arr: np.ndarray, values: tuple, var_order: tuple) -> np.ndarray:
    """Evaluate an object array of expressions at a point (compiled path)."""
    out = np.empty(arr.shape, dtype=float)
    flat_out = out.reshape(-1)
    for i, e in enumerate(arr.reshape(-1)):
        flat_out[i] = e.compile(var_order)(values)
    return out


def diff_exprs(arr: np.ndarray, var: str) -> np.ndarray:
    out = np.empty(arr.shape, dtype=object)
    flat_in = arr.reshape(-1)
    flat_out = out.reshape(-1)
    for i, e in enumerate(flat_in):
        flat_out[i] = e.diff(var)
    return out


def _det_expr(m: list[list[ScalarExpr]]) -> ScalarExpr:
    n = len(m)
    if n == 1:
        return m[0][0]
    total = ScalarExpr.zero()
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        term = m[0][j] * _det_expr(minor)
        total = total + term if j % 2 == 0 else total - term
    return total


def inverse_exprs(g: np.ndarray) -> np.ndarray:
    """Symbolic inverse via adjugate over determinant (small n only)."""
    n = g.shape[0]
    m = [[g[i, j] for j in range(n)] for i in range(n)]
    det = _det_expr(m)
    inv = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            minor = [
                [m[r][c] for c in range(n) if c != i]
                for r in range(n)
                if r != j
            ]
            cof = _det_expr(minor) if n > 1 else ScalarExpr.one()
            if (i + j) % 2 == 1:
                cof = -cof
            inv[i, j] = cof / det
    return inv


@dataclass(frozen=True)
class TensorValue:
    """Dense tensor components at a point; variance is 'u'/'d' per slot."""

    dim: int
    variance: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        expected = (self.dim,) * len(self.variance)
        if self.data.shape != expected:
            raise ChartError(f"data shape {self.data.shape} != {expected}")

    def raise_index(self, slot: int, g_inv: np.ndarray) -> "TensorValue":
        if self.variance[slot] != "d":
            raise ChartError(f"slot {slot} is already upper")
        data = np.tensordot(g_inv, np.moveaxis(self.data, slot, 0), axes=(1, 0))
        data = np.moveaxis(data, 0, slot)
        variance = self.variance[:slot] + ("u",) + self.variance[slot + 1 :]
        return TensorValue(self.dim, variance, data)

    def lower_index(self, slot: int, g: np.ndarray) -> "TensorValue":
        if self.variance[slot] != "u":
            raise ChartError(f"slot {slot} is already lower")
        data = np.tensordot(g, np.moveaxis(self.data, slot, 0), axes=(1, 0))
        data = np.moveaxis(data, 0, slot)
        variance = self.variance[:slot] + ("d",) + self.variance[slot + 1 :]
        return TensorValue(self.dim, variance, data)


@dataclass(frozen=True)
class VectorFieldDef:
    """Vector field on the base chart, upper components as expressions."""

    components: tuple[ScalarExpr, ...]

    @staticmethod
    def parse(texts: Sequence[str], coord_names: Sequence[str]) -> "VectorFieldDef":
        return VectorFieldDef(tuple(ScalarExpr.parse(t, coord_names) for t in texts))


class Chart:
    """Coordinate patch with symbolic metric components.

    All derived symbolic objects (inverse metric, Christoffel symbols and
    their partials) are built once and cached; numeric evaluations go
    through compiled expressions.  Instances are immutable after load.
    """

    def __init__(self, coord_names: Sequence[str], g_components, domain, name: str = "chart"):
        self.name = name
        self.coord_names = tuple(coord_names)
        self.dim = len(self.coord_names)
        if self.dim < 2:
            raise ChartError("chart dimension must be at least 2")
        self.domain = tuple((float(lo), float(hi)) for lo, hi in domain)
        if len(self.domain) != self.dim:
            raise ChartError("domain box must have one interval per coordinate")
        self.g = expr_array(g_components)
        if self.g.shape != (self.dim, self.dim):
            raise ChartError(f"metric must be {self.dim}x{self.dim}")
        for i in range(self.dim):
            for j in range(self.dim):
                bad = self.g[i, j].free_vars - set(self.coord_names)
                if bad:
                    raise ChartError(f"metric entry ({i},{j}) uses unknown variables {sorted(bad)}")
        self._cache: dict = {}

    # -- symbolic layers ------------------------------------------------

    @property
    def g_inv_exprs(self) -> np.ndarray:
        if "g_inv" not in self._cache:
            self._cache["g_inv"] = inverse_exprs(self.g)
        return self._cache["g_inv"]

    @property
    def gamma_exprs(self) -> np.ndarray:
        """Gamma^r_jk = 1/2 g^rs (d_j g_sk + d_k g_sj - d_s g_jk)."""
        if "gamma" not in self._cache:
            n = self.dim
            dg = [diff_exprs(self.g, v) for v in self.coord_names]
            ginv = self.g_inv_exprs
            gamma = np.empty((n, n, n), dtype=object)
            for r in range(n):
                for j in range(n):
                    for k in range(j, n):
                        total = ScalarExpr.zero()
                        for s in range(n):
                            total = total + ginv[r, s] * (dg[j][s, k] + dg[k][s, j] - dg[s][j, k])
                        gamma[r, j, k] = gamma[r, k, j] = total * 0.5
            self._cache["gamma"] = gamma
        return self._cache["gamma"]

    @property
    def dgamma_exprs(self) -> list[np.ndarray]:
        if "dgamma" not in self._cache:
            self._cache["dgamma"] = [diff_exprs(self.gamma_exprs, v) for v in self.coord_names]
        return self._cache["dgamma"]

    # -- point plumbing ---------------------------------------------------

    def contains(self, x) -> bool:
        return all(lo - 1e-12 <= xi <= hi + 1e-12 for xi, (lo, hi) in zip(x, self.domain))

    def require_inside(self, x):
        if len(x) != self.dim:
            raise PointOutsideDomainError(f"point {x} has wrong dimension for {self.name}")
        if not self.contains(x):
            raise PointOutsideDomainError(f"point {tuple(x)} outside domain of {self.name}")

    def point(self, x) -> tuple:
        return tuple(float(v) for v in x)

    def eval_array(self, arr: np.ndarray, x) -> np.ndarray:
        return eval_exprs(arr, self.point(x), self.coord_names)

    # -- numeric operations ------------------------------------------------

    def metric_at(self, x) -> tuple[TensorValue, TensorValue]:
        self.require_inside(x)
        g = self.eval_array(self.g, x)
        if np.max(np.abs(g - g.T)) > 1e-12:
            raise DegenerateMetricError(f"metric not symmetric at {x}")
        try:
            g_inv = np.linalg.inv(g)
        except np.linalg.LinAlgError:
            raise DegenerateMetricError(f"metric singular at {x}") from None
        return (
            TensorValue(self.dim, ("d", "d"), g),
            TensorValue(self.dim, ("u", "u"), g_inv),
        )

    def is_positive_definite_at(self, x) -> bool:
        g = self.eval_array(self.g, x)
        return all(np.linalg.det(g[: k + 1, : k + 1]) > 0 for k in range(self.dim))

    def christoffel_at(self, x) -> TensorValue:
        self.require_inside(x)
        return TensorValue(self.dim, ("u", "d", "d"), self.eval_array(self.gamma_exprs, x))

    def riemann_at(self, x) -> tuple[TensorValue, TensorValue]:
        """(R^r_kji, R_akji) with R(d_i, d_j) d_k = R^r_kji d_r."""
        self.require_inside(x)
        gamma = self.eval_array(self.gamma_exprs, x)
        dgamma = np.stack([self.eval_array(d, x) for d in self.dgamma_exprs])  # [v, r, j, k]
        n = self.dim
        R = np.zeros((n, n, n, n))
        # R^r_kji = d_i G^r_jk - d_j G^r_ik + G^r_is G^s_jk - G^r_js G^s_ik
        R += np.einsum("irjk->rkji", dgamma)
        R -= np.einsum("jrik->rkji", dgamma)
        R += np.einsum("ris,sjk->rkji", gamma, gamma)
        R -= np.einsum("rjs,sik->rkji", gamma, gamma)
        g = self.eval_array(self.g, x)
        R_low = np.einsum("ar,rkji->akji", g, R)
        return (
            TensorValue(n, ("u", "d", "d", "d"), R),
            TensorValue(n, ("d", "d", "d", "d"), R_low),
        )


class TensorField:
    """Expression-backed tensor field on a chart, with cached partials."""

    def __init__(self, chart: Chart, components, variance: tuple[str, ...]):
        self.chart = chart
        self.variance = tuple(variance)
        self.comps = components if isinstance(components, np.ndarray) else expr_array(components)
        if self.comps.shape != (chart.dim,) * len(self.variance):
            raise ChartError(f"component shape {self.comps.shape} does not match variance {self.variance}")
        self._partials: np.ndarray | None = None

    @property
    def partials(self) -> np.ndarray:
        if self._partials is None:
            stacked = np.empty((self.chart.dim,) + self.comps.shape, dtype=object)
            for c, v in enumerate(self.chart.coord_names):
                stacked[c] = diff_exprs(self.comps, v)
            self._partials = stacked
        return self._partials

    def values_at(self, x) -> np.ndarray:
        return self.chart.eval_array(self.comps, x)

    def covariant_derivative_at(self, x) -> TensorValue:
        """nabla T with the derivative index first: out[c, ...]."""
        chart = self.chart
        chart.require_inside(x)
        gamma = chart.eval_array(chart.gamma_exprs, x)
        T = self.values_at(x)
        out = chart.eval_array(self.partials, x)
        for slot, var in enumerate(self.variance):
            moved = np.moveaxis(T, slot, 0)  # slot index first
            if var == "u":
                corr = np.einsum("arc,r...->ca...", gamma, moved)
            else:
                corr = -np.einsum("rac,r...->ca...", gamma, moved)
            out += np.moveaxis(corr, 1, slot + 1)
        return TensorValue(chart.dim, ("d",) + self.variance, out)


def covariant_derivative_at(chart: Chart, x, components, variance) -> TensorValue:
    """One-shot covariant derivative of an expression-backed tensor field."""
    return TensorField(chart, components, variance).covariant_derivative_at(x)


def lower_field(chart: Chart, X: VectorFieldDef) -> np.ndarray:
    """X_k = g_kr X^r as expressions."""
    n = chart.dim
    out = np.empty(n, dtype=object)
    for k in range(n):
        total = ScalarExpr.zero()
        for r in range(n):
            total = total + chart.g[k, r] * X.components[r]
        out[k] = total
    return out


def nabla_lower_exprs(chart: Chart, X: VectorFieldDef) -> np.ndarray:
    """nabla_j X_k as expressions (derivative index first)."""
    n = chart.dim
    Xl = lower_field(chart, X)
    gamma = chart.gamma_exprs
    out = np.empty((n, n), dtype=object)
    for j in range(n):
        v = chart.coord_names[j]
        for k in range(n):
            total = Xl[k].diff(v)
            for r in range(n):
                total = total - gamma[r, k, j] * Xl[r]
            out[j, k] = total
    return out


def lie_metric_exprs(chart: Chart, X: VectorFieldDef) -> np.ndarray:
    """(L_X g)_ij as expressions via the coordinate formula
    X^r d_r g_ij + g_rj d_i X^r + g_ir d_j X^r."""
    n = chart.dim
    out = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(i, n):
            total = ScalarExpr.zero()
            for r in range(n):
                total = (
                    total
                    + X.components[r] * chart.g[i, j].diff(chart.coord_names[r])
                    + chart.g[r, j] * X.components[r].diff(chart.coord_names[i])
                    + chart.g[i, r] * X.components[r].diff(chart.coord_names[j])
                )
            out[i, j] = out[j, i] = total
    return out


def lie_metric_at(chart: Chart, x, X: VectorFieldDef) -> TensorValue:
    """(L_X g)_ij = nabla_i X_j + nabla_j X_i, evaluated at x."""
    chart.require_inside(x)
    nX = chart.eval_array(nabla_lower_exprs(chart, X), x)
    return TensorValue(chart.dim, ("d", "d"), nX + nX.T)


def lie_connection_at(chart: Chart, x, X: VectorFieldDef, route: str = "second_derivative") -> TensorValue:
    """(L_X Gamma)^h_ji by either of its two equivalent expressions.

    route="second_derivative": nabla_j nabla_i X^h + X^r R_rjis g^sh.
    route="metric":            1/2 g^hr [nabla_j (L_X g)_ir + nabla_i (L_X g)_jr
                                         - nabla_r (L_X g)_ji].
    The agreement of the two routes is itself a correctness check.
    """
    chart.require_inside(x)
    n = chart.dim
    _, g_inv_t = chart.metric_at(x)
    g_inv = g_inv_t.data
    if route == "second_derivative":
        # nabla X as expressions, then one more (numeric) covariant derivative
        nX = np.empty((n, n), dtype=object)  # nX[h, i] = nabla_i X^h
        gamma = chart.gamma_exprs
        for h in range(n):
            for i in range(n):
                total = X.components[h].diff(chart.coord_names[i])
                for r in range(n):
                    total = total + gamma[h, r, i] * X.components[r]
                nX[h, i] = total
        nnX = TensorField(chart, nX, ("u", "d")).covariant_derivative_at(x).data  # [j, h, i]
        _, R_low = chart.riemann_at(x)
        Xv = np.array([c.evaluate(dict(zip(chart.coord_names, chart.point(x)))) for c in X.components])
        curv = np.einsum("r,rjis,sh->hji", Xv, R_low.data, g_inv)
        data = np.einsum("jhi->hji", nnX) + curv
        return TensorValue(n, ("u", "d", "d"), data)
    if route == "metric":
        lg = lie_metric_exprs(chart, X)
        nlg = TensorField(chart, lg, ("d", "d")).covariant_derivative_at(x).data  # [c, i, j]
        data = 0.5 * np.einsum(
            "hr,jir->hji",
            g_inv,
            np.einsum("jir->jir", nlg) + np.einsum("ijr->jir", nlg) - np.einsum("rji->jir", nlg),
        )
        return TensorValue(n, ("u", "d", "d"), data)
    raise ChartError(f"unknown route {route!r}")


def ricci_identity_residual(chart: Chart, x, X: VectorFieldDef) -> float:
    """max | X_k,ji - X_k,ij + X^s R_skji |; engine self-test, ~0 always."""
    chart.require_inside(x)
    nX = nabla_lower_exprs(chart, X)  # [j, k]
    nnX = TensorField(chart, nX, ("d", "d")).covariant_derivative_at(x).data  # [i, j, k]
    _, R_low = chart.riemann_at(x)
    Xv = np.array([c.evaluate(dict(zip(chart.coord_names, chart.point(x)))) for c in X.components])
    # X_k,ji = nabla_i nabla_j X_k = nnX[i, j, k]
    comm = np.einsum("ijk->kji", nnX) - np.einsum("jik->kji", nnX)
    curv = np.einsum("s,skji->kji", Xv, R_low.data)
    return float(np.max(np.abs(comm + curv)))


# -- chart presets -----------------------------------------------------------


def preset_chart(name: str) -> Chart:
    if name == "flat2":
        one, zero = ScalarExpr.one(), ScalarExpr.zero()
        return Chart(
            ["x1", "x2"],
            [[one, zero], [zero, one]],
            [(-1.5, 1.5), (-1.5, 1.5)],
            name="flat2",
        )
    if name == "flat3":
        one, zero = ScalarExpr.one(), ScalarExpr.zero()
        g = [[one if i == j else zero for j in range(3)] for i in range(3)]
        return Chart(["x1", "x2", "x3"], g, [(-1.5, 1.5)] * 3, name="flat3")
    if name == "sphere2":
        # round unit sphere, polar cap excluded to stay away from sin θ = 0
        names = ["θ", "φ"]
        g = [
            [ScalarExpr.one(), ScalarExpr.zero()],
            [ScalarExpr.zero(), ScalarExpr.parse("sin(θ)^2", names)],
        ]
        return Chart(names, g, [(0.3, np.pi - 0.3), (0.1, 6.1)], name="sphere2")
    raise ChartError(f"unknown chart preset {name!r}")
