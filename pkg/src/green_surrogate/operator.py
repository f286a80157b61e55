"""Discrete reaction-diffusion operator L u = -div(a grad u) + r u on a grid.

The five-point stencil uses edge-midpoint diffusion samples, so for an
interior node (i, j):

    cE = a(x_{i+1/2, j}) / h1^2      cW = a(x_{i-1/2, j}) / h1^2
    cN = a(x_{i, j+1/2}) / h2^2      cS = a(x_{i, j-1/2}) / h2^2
    cC = cE + cW + cN + cS           rC = r(x_{i, j})

    (L_h u)_ij = (cC + rC) u_ij - cE u_{i+1,j} - cW u_{i-1,j}
                                - cN u_{i,j+1} - cS u_{i,j-1}

Boundary rows act as identity (Dirichlet). The interior matrix is
symmetric positive definite for a > 0, r >= 0, which is what makes the
Jacobi sweep below converge and the Green's matrix symmetric.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .grid import Field, Grid, zeros_field

DENSE_SOLVE_LIMIT = 20000  # max interior unknowns for dense factorization


# ---------------------------------------------------------------------------
# coefficient expressions
# ---------------------------------------------------------------------------

class ExpressionError(ValueError):
    pass


_EXPR_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_EXPR_NAMES = {"x1", "x2", "pi"}
_EXPR_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_EXPR_UNARYOPS = (ast.USub, ast.UAdd)


def _check_expr_node(node: ast.AST, text: str) -> None:
    if isinstance(node, ast.Expression):
        _check_expr_node(node.body, text)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _EXPR_BINOPS):
        _check_expr_node(node.left, text)
        _check_expr_node(node.right, text)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _EXPR_UNARYOPS):
        _check_expr_node(node.operand, text)
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _EXPR_FUNCS):
            raise ExpressionError(f"unknown function in coefficient expression {text!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"functions take exactly one argument: {text!r}")
        _check_expr_node(node.args[0], text)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"only numeric constants allowed: {text!r}")
    elif isinstance(node, ast.Name):
        if node.id not in _EXPR_NAMES:
            raise ExpressionError(f"unknown name {node.id!r} in coefficient expression {text!r}")
    else:
        raise ExpressionError(f"unsupported syntax {type(node).__name__} in {text!r}")


def parse_expr(text: str) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Compile an expression over x1, x2 into a vectorized callable.

    The grammar is +, -, *, /, ^ (power), sin, cos, exp, numeric
    constants, pi, and the coordinates x1, x2. Anything else is rejected.
    """
    src = text.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse coefficient expression {text!r}: {exc.msg}") from None
    _check_expr_node(tree, text)
    code = compile(tree, "<coefficient>", "eval")

    def fn(x1, x2):
        env = {"x1": x1, "x2": x2, "pi": np.pi, **_EXPR_FUNCS}
        return eval(code, {"__builtins__": {}}, env)

    fn.expression = text
    return fn


# ---------------------------------------------------------------------------
# coefficient registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSpec:
    """Diffusion a(x) > 0 and reaction r(x) >= 0, both vectorized callables."""

    name: str
    a: Callable[[np.ndarray, np.ndarray], np.ndarray]
    r: Callable[[np.ndarray, np.ndarray], np.ndarray]


COEFFICIENTS = {
    "laplace": CoefficientSpec("laplace", lambda x1, x2: np.ones_like(x1 + x2),
                               lambda x1, x2: np.zeros_like(x1 + x2)),
    "rd1": CoefficientSpec("rd1", lambda x1, x2: 1.0 + 2.0 * x2 ** 2,
                           lambda x1, x2: 1.0 + x1 ** 2),
}


def get_coefficients(name: str) -> CoefficientSpec:
    try:
        return COEFFICIENTS[name]
    except KeyError:
        known = ", ".join(sorted(COEFFICIENTS))
        raise ValueError(f"unknown coefficient set {name!r} (known: {known})") from None


def custom_coefficients(a_expr: str, r_expr: str, name: str = "custom") -> CoefficientSpec:
    return CoefficientSpec(name, parse_expr(a_expr), parse_expr(r_expr))


def _eval_coeff(fn, X1, X2) -> np.ndarray:
    out = np.asarray(fn(X1, X2), dtype=np.float64)
    if out.shape != X1.shape:
        out = np.broadcast_to(out, X1.shape).copy()
    return out


# ---------------------------------------------------------------------------
# stencil
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StencilCoeffs:
    """Precomputed stencil arrays over the (n-2) x (m-2) interior nodes."""

    grid: Grid
    coeffs: CoefficientSpec
    cE: np.ndarray
    cW: np.ndarray
    cN: np.ndarray
    cS: np.ndarray
    cC: np.ndarray
    rC: np.ndarray

    @property
    def diag(self) -> np.ndarray:
        return self.cC + self.rC


def build_stencil(grid: Grid, coeffs: CoefficientSpec) -> StencilCoeffs:
    """Sample a at edge midpoints and r at interior nodes, validate signs.

    Each edge midpoint is evaluated once and shared by its two incident
    nodes, so the assembled interior matrix is symmetric bit for bit (the
    alternative x_i + h/2 vs x_{i+1} - h/2 differs in the last ulp).
    """
    h1, h2 = grid.h1, grid.h2
    xi = grid.x1()[1:-1]
    yj = grid.x2()[1:-1]
    # midpoints of the n-1 vertical-edge columns / m-1 horizontal-edge rows
    xm = grid.domain.x0 + (np.arange(grid.n - 1) + 0.5) * h1
    ym = grid.domain.y0 + (np.arange(grid.m - 1) + 0.5) * h2
    Yc = np.broadcast_to(yj[None, :], (grid.n - 2, grid.m - 2))
    Xc = np.broadcast_to(xi[:, None], (grid.n - 2, grid.m - 2))

    aV = _eval_coeff(coeffs.a, *np.meshgrid(xm, yj, indexing="ij"))
    aH = _eval_coeff(coeffs.a, *np.meshgrid(xi, ym, indexing="ij"))
    aE, aW = aV[1:, :], aV[:-1, :]
    aN, aS = aH[:, 1:], aH[:, :-1]
    rC = _eval_coeff(coeffs.r, Xc, Yc)

    for name, arr in (("a", aE), ("a", aW), ("a", aN), ("a", aS), ("r", rC)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"coefficient {name} is not finite everywhere on the grid")
    if min(aE.min(), aW.min(), aN.min(), aS.min()) <= 0:
        raise ValueError("diffusion coefficient a must be strictly positive on the domain")
    if rC.min() < 0:
        raise ValueError("reaction coefficient r must be nonnegative on the domain")

    cE = aE / h1 ** 2
    cW = aW / h1 ** 2
    cN = aN / h2 ** 2
    cS = aS / h2 ** 2
    return StencilCoeffs(grid, coeffs, cE, cW, cN, cS, cE + cW + cN + cS, rC)


def apply_Lh(stencil: StencilCoeffs, u: Field) -> Field:
    """Apply the discrete operator; boundary rows pass u through unchanged."""
    if u.grid != stencil.grid:
        raise ValueError("field grid does not match stencil grid")
    v = u.values
    out = v.copy()
    out[1:-1, 1:-1] = (
        stencil.diag * v[1:-1, 1:-1]
        - stencil.cE * v[2:, 1:-1]
        - stencil.cW * v[:-2, 1:-1]
        - stencil.cN * v[1:-1, 2:]
        - stencil.cS * v[1:-1, :-2]
    )
    return Field(u.grid, out)


def residual_norm(stencil: StencilCoeffs, u: Field, rho: Field) -> float:
    """Mesh-weighted l2 norm of (L_h u - rho) over interior nodes only."""
    v = u.values
    res = (
        stencil.diag * v[1:-1, 1:-1]
        - stencil.cE * v[2:, 1:-1]
        - stencil.cW * v[:-2, 1:-1]
        - stencil.cN * v[1:-1, 2:]
        - stencil.cS * v[1:-1, :-2]
        - rho.values[1:-1, 1:-1]
    )
    g = stencil.grid
    return float(np.sqrt(g.h1 * g.h2 * np.sum(res * res)))


def _require_zero_boundary(v: np.ndarray) -> None:
    if (v[0, :].any() or v[-1, :].any() or v[:, 0].any() or v[:, -1].any()):
        raise ValueError("Jacobi iterate must be zero on the boundary ring")


def jacobi_step(stencil: StencilCoeffs, u: Field, rho: Field) -> Field:
    """One damped-free Jacobi sweep for L_h G = rho with a zero boundary ring."""
    if u.grid != stencil.grid or rho.grid != stencil.grid:
        raise ValueError("field grid does not match stencil grid")
    v = u.values
    _require_zero_boundary(v)
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = (
        rho.values[1:-1, 1:-1]
        + stencil.cE * v[2:, 1:-1]
        + stencil.cW * v[:-2, 1:-1]
        + stencil.cN * v[1:-1, 2:]
        + stencil.cS * v[1:-1, :-2]
    ) / stencil.diag
    return Field(u.grid, out)


@dataclass
class JacobiResult:
    field: Field
    iterations: int
    residual: float
    converged: bool


def jacobi_solve(
    stencil: StencilCoeffs,
    rho: Field,
    G0: Field | None = None,
    *,
    k: int | None = None,
    tol: float | None = None,
    max_iter: int = 1_000_000,
) -> JacobiResult:
    """Run Jacobi sweeps, either a fixed count k or until the interior
    residual norm drops below tol (capped at max_iter, returning the best
    iterate seen with converged=False if the cap is hit)."""
    if (k is None) == (tol is None):
        raise ValueError("pass exactly one of k= or tol=")
    u = zeros_field(stencil.grid) if G0 is None else G0.copy()
    _require_zero_boundary(u.values)

    if k is not None:
        if k < 0:
            raise ValueError(f"sweep count must be nonnegative, got {k}")
        for _ in range(k):
            u = jacobi_step(stencil, u, rho)
        return JacobiResult(u, k, residual_norm(stencil, u, rho), True)

    best = u
    best_res = residual_norm(stencil, u, rho)
    it = 0
    while best_res > tol and it < max_iter:
        u = jacobi_step(stencil, u, rho)
        it += 1
        res = residual_norm(stencil, u, rho)
        if res < best_res:
            best, best_res = u, res
    return JacobiResult(best, it, best_res, best_res <= tol)


# ---------------------------------------------------------------------------
# dense direct solve (the slow, trustworthy route)
# ---------------------------------------------------------------------------

def interior_index(grid: Grid, i: int, j: int) -> int:
    """Flatten interior node (i, j), 1-based-interior excluded, i fastest."""
    return (i - 1) + (grid.n - 2) * (j - 1)


def dense_interior_matrix(stencil: StencilCoeffs) -> np.ndarray:
    """Assemble the interior operator as a dense matrix, row by row."""
    g = stencil.grid
    ni, mi = g.n - 2, g.m - 2
    N = ni * mi
    if N > DENSE_SOLVE_LIMIT:
        raise ValueError(f"{N} interior unknowns exceed the dense limit {DENSE_SOLVE_LIMIT}")
    A = np.zeros((N, N))
    for j in range(1, g.m - 1):
        for i in range(1, g.n - 1):
            p = interior_index(g, i, j)
            ii, jj = i - 1, j - 1
            A[p, p] = stencil.diag[ii, jj]
            if i + 1 < g.n - 1:
                A[p, interior_index(g, i + 1, j)] = -stencil.cE[ii, jj]
            if i - 1 > 0:
                A[p, interior_index(g, i - 1, j)] = -stencil.cW[ii, jj]
            if j + 1 < g.m - 1:
                A[p, interior_index(g, i, j + 1)] = -stencil.cN[ii, jj]
            if j - 1 > 0:
                A[p, interior_index(g, i, j - 1)] = -stencil.cS[ii, jj]
    return A


class DirectFactorization:
    """Dense LU of the interior matrix, factored once, reused per right side."""

    def __init__(self, stencil: StencilCoeffs):
        self.stencil = stencil
        self.grid = stencil.grid
        self._lu = scipy.linalg.lu_factor(dense_interior_matrix(stencil))

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one or many interior right-hand sides, shape (N,) or (N, B)."""
        return scipy.linalg.lu_solve(self._lu, rhs)

    def solve(self, rho: Field) -> Field:
        g = self.grid
        rhs = rho.values[1:-1, 1:-1].ravel(order="F")
        sol = self.solve_interior(rhs)
        out = np.zeros((g.n, g.m))
        out[1:-1, 1:-1] = sol.reshape((g.n - 2, g.m - 2), order="F")
        return Field(g, out)


def direct_solve(stencil: StencilCoeffs, rho: Field) -> Field:
    """Solve L_h G = rho through a dense factorization. Small grids only.

    Used as the ground-truth route the iterative and learned solvers are
    checked against, so it verifies its own residual before returning.
    """
    if rho.grid != stencil.grid:
        raise ValueError("field grid does not match stencil grid")
    g = stencil.grid
    rhs = rho.values[1:-1, 1:-1].ravel(order="F")
    sol_int = DirectFactorization(stencil).solve_interior(rhs)
    if not np.all(np.isfinite(sol_int)):
        raise ValueError("interior matrix is singular")
    out = np.zeros((g.n, g.m))
    out[1:-1, 1:-1] = sol_int.reshape((g.n - 2, g.m - 2), order="F")
    sol = Field(g, out)
    res = residual_norm(stencil, sol, rho)
    scale = max(float(np.sqrt(g.h1 * g.h2 * np.sum(rhs * rhs))), 1e-300)
    if res / scale > 1e-10:
        raise ValueError(f"direct solve residual {res/scale:.3e} exceeds 1e-10, matrix near singular")
    return sol
