"""Fast Dirichlet solver built on Green's functions.

With G(x, xi) for the operator L available (reference-computed or learned),
the solution of L u = f, u = g on the boundary, is a pair of quadratures
per evaluation point:

    u(xi) = sum_ij w_ij f(x_ij) G(x_ij, xi)
          - sum_b  w_b  g(x_b) a(x_b) dG/dn(x_b, xi)

The provider is queried with xi as the source location and the result is
read as G(. , xi); the two roles are interchangeable because the Green's
function of this self-adjoint operator is symmetric.

Volume weights are a tensor product of 1D composite Simpson rules; node
counts with an odd interval count get a terminal 3/8 block so the rule
stays third-order exact. The normal derivative on the boundary is the
first-order one-sided difference into the domain, and corner nodes are
owned by the bottom/top edges only so no boundary segment is counted
twice.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .grid import Field, Grid, field_from_function, l2_error
from .model import GreenUNet, load_checkpoint, load_model
from .operator import (
    DENSE_SOLVE_LIMIT,
    CoefficientSpec,
    DirectFactorization,
    build_stencil,
    get_coefficients,
    jacobi_solve,
    parse_expr,
)
from .source import SourceConfig, build_input, gaussian_source

EDGES = ("left", "right", "bottom", "top")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def simpson_weights_1d(count: int, h: float) -> np.ndarray:
    """Composite Simpson weights for `count` equispaced nodes, spacing h.

    An even interval count gets the plain (h/3)[1,4,2,...,4,1] rule. An odd
    count gets composite Simpson over the first count-4 intervals plus a
    Simpson 3/8 block (3h/8)[1,3,3,1] over the last three, which keeps the
    rule exact for cubics instead of degrading an interval to something
    lower order.
    """
    if count < 3:
        raise ValueError(f"need at least 3 nodes for Simpson weights, got {count}")
    if h <= 0:
        raise ValueError(f"spacing must be positive, got {h}")
    w = np.zeros(count)
    intervals = count - 1
    q = intervals if intervals % 2 == 0 else intervals - 3
    if q > 0:
        w[0] += h / 3
        w[q] += h / 3
        w[1:q:2] += 4 * h / 3
        w[2:q:2] += 2 * h / 3
    if intervals % 2 == 1:
        w[count - 4:] += np.array([1.0, 3.0, 3.0, 1.0]) * (3 * h / 8)
    return w


@dataclass(frozen=True)
class QuadratureRule:
    """Volume and per-edge boundary weights for one grid.

    edge_weights holds the full 1D rule per edge (each sums to the edge
    length); owned_edge_weights has the corner entries of the left/right
    edges zeroed, which is what boundary integrals over the whole contour
    use (bottom and top own the corners).
    """

    grid: Grid
    wx: np.ndarray
    wy: np.ndarray

    @property
    def volume(self) -> np.ndarray:
        return np.outer(self.wx, self.wy)

    def edge_weights(self, edge: str) -> np.ndarray:
        if edge in ("bottom", "top"):
            return self.wx.copy()
        if edge in ("left", "right"):
            return self.wy.copy()
        raise ValueError(f"unknown edge {edge!r}, expected one of {EDGES}")

    def owned_edge_weights(self, edge: str) -> np.ndarray:
        w = self.edge_weights(edge)
        if edge in ("left", "right"):
            w[0] = 0.0
            w[-1] = 0.0
        return w


def build_quadrature(grid: Grid) -> QuadratureRule:
    return QuadratureRule(grid, simpson_weights_1d(grid.n, grid.h1),
                          simpson_weights_1d(grid.m, grid.h2))


def boundary_normal_flux(field: Field, coeffs: CoefficientSpec, edge: str) -> np.ndarray:
    """a(x_b) * dG/dn along one edge (outward normal, one-sided difference).

    Returns one value per edge node, corners included; who actually counts
    the corners is the quadrature's business.
    """
    g = field.grid
    v = field.values
    x1, x2 = g.x1(), g.x2()
    if edge == "left":
        a = coeffs.a(x1[0], x2)
        return np.asarray(a * (v[0, :] - v[1, :]) / g.h1, dtype=np.float64)
    if edge == "right":
        a = coeffs.a(x1[-1], x2)
        return np.asarray(a * (v[-1, :] - v[-2, :]) / g.h1, dtype=np.float64)
    if edge == "bottom":
        a = coeffs.a(x1, x2[0])
        return np.asarray(a * (v[:, 0] - v[:, 1]) / g.h2, dtype=np.float64)
    if edge == "top":
        a = coeffs.a(x1, x2[-1])
        return np.asarray(a * (v[:, -1] - v[:, -2]) / g.h2, dtype=np.float64)
    raise ValueError(f"unknown edge {edge!r}, expected one of {EDGES}")


def boundary_flux_integral(quad: QuadratureRule, coeffs: CoefficientSpec, field: Field) -> float:
    """Contour integral of a*dG/dn over the whole boundary.

    For a Green's function with a unit source inside, this is -1 up to
    discretization error (what flows in through the source must leave
    through the boundary).
    """
    total = 0.0
    for edge in EDGES:
        w = quad.owned_edge_weights(edge)
        total += float(w @ boundary_normal_flux(field, coeffs, edge))
    return total


# ---------------------------------------------------------------------------
# boundary value problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BVP:
    name: str
    coeffs: CoefficientSpec
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    exact: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None


def _poisson_sin_case(lam: int) -> BVP:
    # u = sin(2 lam pi x1) sin(2 lam pi x2); -lap u = 8 lam^2 pi^2 u; u = 0
    # on any integer-aligned boundary
    w = 2 * lam * np.pi

    def u(x1, x2):
        return np.sin(w * x1) * np.sin(w * x2)

    return BVP(
        f"poisson-sin{lam}",
        get_coefficients("laplace"),
        f=lambda x1, x2: 2 * w**2 * np.sin(w * x1) * np.sin(w * x2),
        g=lambda x1, x2: np.zeros_like(np.asarray(x1, dtype=np.float64) + x2),
        exact=u,
    )


def _poisson_cos_case() -> BVP:
    def u(x1, x2):
        return np.cos(np.pi * x1) * np.cos(np.pi * x2)

    return BVP(
        "poisson-cos",
        get_coefficients("laplace"),
        f=lambda x1, x2: 2 * np.pi**2 * np.cos(np.pi * x1) * np.cos(np.pi * x2),
        g=u,
        exact=u,
    )


def _rd1_gauss_case() -> BVP:
    # u = 10^-(x1^2 + 2 x2^2 + 1) with a = 1 + 2 x2^2, r = 1 + x1^2.
    # f = L u worked out in closed form (checked symbolically and against
    # finite differences in the tests):
    #   f = u * [ a (6c - 4 c^2 x1^2 - 16 c^2 x2^2) + 16 c x2^2 + r ],  c = ln 10
    c = math.log(10.0)

    def u(x1, x2):
        return np.power(10.0, -(x1**2 + 2 * x2**2 + 1))

    def f(x1, x2):
        a = 1 + 2 * x2**2
        r = 1 + x1**2
        return u(x1, x2) * (a * (6 * c - 4 * c**2 * x1**2 - 16 * c**2 * x2**2)
                            + 16 * c * x2**2 + r)

    return BVP("rd1-gauss", get_coefficients("rd1"), f=f, g=u, exact=u)


def get_case(name: str) -> BVP:
    m = re.fullmatch(r"poisson-sin(\d+)", name)
    if m:
        lam = int(m.group(1))
        if lam < 1:
            raise ValueError(f"poisson-sin needs a positive frequency, got {lam}")
        return _poisson_sin_case(lam)
    if name == "poisson-cos":
        return _poisson_cos_case()
    if name == "rd1-gauss":
        return _rd1_gauss_case()
    raise ValueError(
        f"unknown case {name!r}, expected poisson-sin<k>, poisson-cos or rd1-gauss"
    )


def custom_case(coeffs: CoefficientSpec, f_expr: str, g_expr: str | None = None) -> BVP:
    """A BVP from expression strings; no exact solution attached."""
    f = parse_expr(f_expr)
    g = parse_expr(g_expr) if g_expr else (lambda x1, x2: np.zeros_like(np.asarray(x1, dtype=np.float64) + x2))
    return BVP("custom", coeffs, f=f, g=g, exact=None)


# ---------------------------------------------------------------------------
# Green's function providers
# ---------------------------------------------------------------------------

class ReferenceProvider:
    """G(. , xi) from converged solves of the discrete system.

    Uses one dense factorization for all queries when the interior fits the
    dense limit, Jacobi to tolerance otherwise. sigma_factor defaults much
    tighter than the training default: the quadrature solve effectively
    convolves the true solution with the source Gaussian, so accuracy wants
    the narrowest Gaussian the mesh can still carry (~0.5 h), not the wide
    one that eases learning.
    """

    def __init__(self, grid: Grid, coeffs: CoefficientSpec, sigma_factor: float = 0.5,
                 tol: float = 1e-10, max_iter: int = 1_000_000, solver: str = "auto"):
        if solver not in ("auto", "direct", "jacobi"):
            raise ValueError(f"solver must be auto, direct or jacobi, got {solver!r}")
        self.grid = grid
        self.coeffs = coeffs
        self.sigma = sigma_factor * max(grid.h1, grid.h2)
        self.tol = tol
        self.max_iter = max_iter
        self.stencil = build_stencil(grid, coeffs)
        interior = (grid.n - 2) * (grid.m - 2)
        use_direct = solver == "direct" or (solver == "auto" and interior <= DENSE_SOLVE_LIMIT)
        self._fac = DirectFactorization(self.stencil) if use_direct else None

    def green_field(self, xi) -> Field:
        return self.green_fields([xi])[0]

    def green_fields(self, xis: Iterable) -> list[Field]:
        xis = list(xis)
        g = self.grid
        rhos = [gaussian_source(g, (float(x[0]), float(x[1])), self.sigma) for x in xis]
        if self._fac is not None:
            rhs = np.column_stack([r.values[1:-1, 1:-1].ravel(order="F") for r in rhos])
            sols = self._fac.solve_interior(rhs)
            out = []
            for b in range(sols.shape[1]):
                v = np.zeros((g.n, g.m))
                v[1:-1, 1:-1] = sols[:, b].reshape((g.n - 2, g.m - 2), order="F")
                out.append(Field(g, v))
            return out
        out = []
        for rho in rhos:
            res = jacobi_solve(self.stencil, rho, tol=self.tol, max_iter=self.max_iter)
            if not res.converged:
                raise RuntimeError(f"Jacobi stalled at residual {res.residual:.3e}")
            out.append(res.field)
        return out


class LearnedProvider:
    """G(. , xi) from a trained network checkpoint."""

    def __init__(self, model: GreenUNet, grid: Grid, coeffs: CoefficientSpec,
                 variant: int, source_cfg: SourceConfig, batch_size: int = 32):
        if (grid.n, grid.m) != (model.config.n, model.config.m):
            raise ValueError(
                f"model was built for {model.config.n}x{model.config.m} grids, "
                f"got {grid.n}x{grid.m}"
            )
        self.model = model
        self.grid = grid
        self.coeffs = coeffs
        self.variant = variant
        self.source_cfg = source_cfg
        self.batch_size = batch_size

    @property
    def sigma(self) -> float:
        return self.source_cfg.sigma(self.grid)

    @classmethod
    def from_checkpoint(cls, path, grid: Grid | None = None) -> "LearnedProvider":
        model, meta = load_model(path)
        ds = meta.get("dataset", {})
        gspec = ds.get("grid")
        if grid is None:
            if gspec is None:
                raise ValueError("checkpoint has no grid metadata; pass the grid explicitly")
            from .grid import RectDomain, build_grid
            grid = build_grid(RectDomain(gspec["x0"], gspec["y0"], gspec["L1"], gspec["L2"]),
                              model.config.n, model.config.m)
        coeffs = get_coefficients(ds.get("coeffs", "laplace"))
        cfg = SourceConfig(ds.get("sigma_factor", 2.0), ds.get("margin_cells", 2),
                           ds.get("seed", 0))
        return cls(model, grid, coeffs, int(ds.get("variant", 1)), cfg)

    def green_field(self, xi) -> Field:
        return self.green_fields([xi])[0]

    def green_fields(self, xis: Iterable) -> list[Field]:
        xis = list(xis)
        out = []
        for lo in range(0, len(xis), self.batch_size):
            chunk = xis[lo:lo + self.batch_size]
            inputs = np.stack([
                build_input(self.grid, (float(x[0]), float(x[1])), self.variant, self.source_cfg)
                for x in chunk
            ])
            vals = self.model.predict_values(inputs)
            out.extend(Field(self.grid, v) for v in vals)
        return out


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------

def solve_bvp(provider, bvp: BVP, grid: Grid, chunk: int = 128) -> Field:
    """Evaluate the Green's-function quadrature at every interior node.

    Boundary nodes are set to g exactly; each interior node costs one
    provider query plus two small dot products.
    """
    if provider.grid != grid:
        raise ValueError("provider grid does not match the requested grid")
    if provider.coeffs.name != bvp.coeffs.name:
        raise ValueError(
            f"provider was built for coefficients {provider.coeffs.name!r}, "
            f"case wants {bvp.coeffs.name!r}"
        )
    quad = build_quadrature(grid)
    x1, x2 = grid.x1(), grid.x2()
    F = field_from_function(grid, bvp.f).values
    WF = quad.volume * F

    # per-edge weight * g factor, corners owned by bottom/top
    edge_coef = {}
    for edge in EDGES:
        w = quad.owned_edge_weights(edge)
        if edge == "left":
            gv = bvp.g(x1[0], x2)
        elif edge == "right":
            gv = bvp.g(x1[-1], x2)
        elif edge == "bottom":
            gv = bvp.g(x1, x2[0])
        else:
            gv = bvp.g(x1, x2[-1])
        edge_coef[edge] = w * np.asarray(gv, dtype=np.float64)

    u = np.zeros((grid.n, grid.m))
    u[0, :] = bvp.g(x1[0], x2)
    u[-1, :] = bvp.g(x1[-1], x2)
    u[:, 0] = bvp.g(x1, x2[0])
    u[:, -1] = bvp.g(x1, x2[-1])

    targets = [(i, j) for j in range(1, grid.m - 1) for i in range(1, grid.n - 1)]
    for lo in range(0, len(targets), chunk):
        block = targets[lo:lo + chunk]
        fields = provider.green_fields([(x1[i], x2[j]) for i, j in block])
        for (i, j), Gf in zip(block, fields):
            vol = float(np.sum(WF * Gf.values))
            bnd = 0.0
            for edge in EDGES:
                bnd += float(edge_coef[edge] @ boundary_normal_flux(Gf, bvp.coeffs, edge))
            u[i, j] = vol - bnd
    return Field(grid, u)


@dataclass
class CaseResult:
    case: str
    u: Field
    exact: Field | None
    e2: float | None


def evaluate_case(provider, case: BVP | str, grid: Grid) -> CaseResult:
    bvp = get_case(case) if isinstance(case, str) else case
    u = solve_bvp(provider, bvp, grid)
    if bvp.exact is None:
        return CaseResult(bvp.name, u, None, None)
    exact = field_from_function(grid, bvp.exact)
    return CaseResult(bvp.name, u, exact, l2_error(u, exact))
