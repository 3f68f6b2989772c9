"""Rate functions, pointwise density bounds, finite-horizon large-deviation
upper bounds, and the discrete variational problems for rescaled profiles.

The rate function of an occupation measure mu is the negative infimum over
positive tilt functions g of sum_x mu_x (A g)_x / g_x; for symmetric A it
collapses to the Dirichlet form of sqrt(mu).  The bounds below combine the
rate function with combinatorial prefactors controlled by the jump-rate
bound of the range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import identity as sparse_identity
from scipy.sparse import kron as sparse_kron
from scipy.sparse import diags_array

from .chain import Generator, RangeSpec, jump_rate_bound

__all__ = [
    "TiltFunction",
    "RateFunctionResult",
    "rate_function_symmetric",
    "rate_function_general",
    "density_bound",
    "SimplexBall",
    "DeviationBoundRhs",
    "ldp_upper_bound_rhs",
    "chi_discrete",
    "ChiResult",
    "rescaled_bound_experiment",
]

SYMMETRY_ATOL = 1e-12


@dataclass(frozen=True)
class TiltFunction:
    """A strictly positive tilt, normalized to 1 at the anchor state."""

    sites: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if np.any(values <= 0):
            raise ValueError("tilt values must be strictly positive")
        object.__setattr__(self, "values", values)

    def as_dict(self) -> dict:
        return dict(zip(self.sites, self.values))


@dataclass
class RateFunctionResult:
    value: float
    tilt: TiltFunction
    restarts_agree: bool
    spread: float  # spread of optima across restarts


def _measure_on(gen: Generator, mu, sites=None):
    """Coerce mu (dict or array) onto the given site order; returns
    (sites, weights) with weights validated as a probability vector."""
    if sites is None:
        sites = gen.states if not isinstance(mu, dict) else tuple(mu)
    sites = tuple(sites)
    if isinstance(mu, dict):
        w = np.array([mu.get(s, 0.0) for s in sites], dtype=float)
    else:
        w = np.asarray(mu, dtype=float)
        if len(w) != len(sites):
            raise ValueError("measure length does not match site count")
    if np.any(w < 0):
        raise ValueError("measure has negative weights")
    if abs(w.sum() - 1.0) > 1e-12 * max(1.0, abs(w.sum())):
        raise ValueError(f"measure sums to {w.sum():.15g}, not 1")
    return sites, w


def rate_function_symmetric(gen: Generator, mu, sites=None) -> float:
    """Dirichlet-form value <sqrt(mu), (-A) sqrt(mu)> for symmetric A."""
    sites, w = _measure_on(gen, mu, sites)
    A = gen.submatrix(sites)
    if not np.allclose(A, A.T, atol=SYMMETRY_ATOL, rtol=0):
        raise ValueError("generator is not symmetric; use rate_function_general")
    root = np.sqrt(w)
    return float(root @ (-A) @ root)


def rate_function_general(
    gen: Generator,
    mu,
    sites=None,
    tol: float = 1e-10,
    n_restarts: int = 4,
    seed: int = 0,
) -> RateFunctionResult:
    """Rate function by minimizing sum_x mu_x (A e^u)_x e^{-u_x} over log
    tilts u with the anchor entry pinned at 0.

    Sites with zero weight are dropped: their tilt entries enter the
    objective linearly with nonnegative coefficients, so the infimum sends
    them to zero and the problem restricts exactly to the support.
    """
    sites, w = _measure_on(gen, mu, sites)
    support = [s for s, wx in zip(sites, w) if wx > 0]
    w_s = np.array([wx for wx in w if wx > 0])
    M = gen.submatrix(support)
    n = len(support)
    if n == 1:
        val = float(-w_s[0] * M[0, 0])
        return RateFunctionResult(val, TiltFunction((support[0],), np.ones(1)), True, 0.0)

    def objective(u_free):
        u = np.concatenate([[0.0], u_free])
        eu = np.exp(u)
        flow = M @ eu
        f = float(np.sum(w_s * np.exp(-u) * flow))
        grad_full = -w_s * np.exp(-u) * flow + eu * ((w_s * np.exp(-u)) @ M)
        return f, grad_full[1:]

    rng = np.random.default_rng(seed)
    best = None
    optima = []
    for k in range(n_restarts):
        u0 = np.zeros(n - 1) if k == 0 else rng.normal(scale=0.5, size=n - 1)
        res = minimize(objective, u0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 10_000, "ftol": 1e-15, "gtol": tol})
        optima.append(res.fun)
        if best is None or res.fun < best.fun:
            best = res
    spread = float(max(optima) - min(optima))
    g = np.exp(np.concatenate([[0.0], best.x]))
    return RateFunctionResult(
        value=float(-best.fun),
        tilt=TiltFunction(tuple(support), g),
        restarts_agree=spread <= max(tol * 100, 1e-8),
        spread=spread,
    )


def _is_symmetric(A: np.ndarray) -> bool:
    return bool(np.allclose(A, A.T, atol=SYMMETRY_ATOL, rtol=0))


def density_bound(gen: Generator, spec: RangeSpec, l, tilt: TiltFunction | None = None) -> float:
    """Pointwise upper bound on the local-time density at l.

    Symmetric generators get the simplified constant exp(|R| (1 + 1/(4 eta T)));
    otherwise the bound uses the conjugated jump matrix built from the
    rate-function minimizer (or a supplied tilt).
    """
    sites = spec.range
    l = np.asarray([l[s] for s in sites] if isinstance(l, dict) else l, dtype=float)
    if np.any(l <= 0):
        raise ValueError("local times must be strictly positive on the range")
    T = float(l.sum())
    eta = jump_rate_bound(gen, sites)
    A = gen.submatrix(sites)
    mu = l / T
    free = [i for i, s in enumerate(sites) if s not in (spec.start, spec.end)]
    prefactor = float(np.prod(np.sqrt(T / l[free]))) * eta ** (len(sites) - 1)
    if _is_symmetric(A):
        rate = rate_function_symmetric(gen, mu, sites)
        const = np.exp(len(sites) * (1.0 + 1.0 / (4.0 * eta * T)))
        return float(np.exp(-T * rate) * prefactor * const)
    if tilt is None:
        result = rate_function_general(gen, mu, sites)
        rate = result.value
        gmap = result.tilt.as_dict()
        g = np.array([gmap.get(s, 1.0) for s in sites])
    else:
        rate = rate_function_general(gen, mu, sites).value
        gmap = tilt.as_dict()
        g = np.array([gmap[s] for s in sites])
    B = A - np.diag(np.diag(A))
    r = np.sqrt(l) / g
    conjugated_sum = float(np.sum(r[:, None] * B / r[None, :]))
    const = np.exp((1.0 / eta + 1.0 / (4.0 * eta ** 2 * T)) * conjugated_sum)
    return float(np.exp(-T * rate) * prefactor * const)


# ---------------------------------------------------------------------------
# constraint sets on the probability simplex


@dataclass(frozen=True)
class SimplexBall:
    """Intersection of the probability simplex with a Euclidean ball."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def contains(self, mu: np.ndarray, tol: float = 1e-9) -> bool:
        mu = np.asarray(mu, dtype=float)
        return bool(
            np.all(mu >= -tol)
            and abs(mu.sum() - 1.0) <= tol
            and np.linalg.norm(mu - self.center) <= self.radius + tol
        )

    def project(self, mu: np.ndarray, iterations: int = 200) -> np.ndarray:
        """Approximate projection by alternating projections onto the
        simplex and the ball; the fixed point lies in the intersection
        whenever it is nonempty."""
        x = np.asarray(mu, dtype=float)
        for _ in range(iterations):
            x = _project_simplex(x)
            d = x - self.center
            norm = np.linalg.norm(d)
            if norm <= self.radius:
                break
            x = self.center + d * (self.radius / norm)
        return _project_simplex(x)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, len(v) + 1) > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class DeviationBoundRhs:
    total: float
    inner_value: float  # inf of the rate function over the constraint set
    error_terms: float
    n_sites: int
    eta: float
    n_restarts: int
    minimizer: np.ndarray


def ldp_upper_bound_rhs(
    gen: Generator,
    S: Sequence[Hashable],
    T: float,
    constraint: SimplexBall | None = None,
    functional: Callable[[np.ndarray], float] | None = None,
    n_restarts: int = 8,
    seed: int = 0,
) -> DeviationBoundRhs:
    """Right-hand side of the finite-horizon upper bound for symmetric
    generators: -T inf I + |S| log(eta sqrt(8e) T) + log|S| + |S|/(4T).

    ``constraint`` restricts the infimum of the rate function to a simplex
    ball (None means the whole simplex, infimum 0 at the invariant
    measure); ``functional`` switches to the expectation form, where the
    inner value is inf [I - F] (so the bound is T sup[F - I] + errors).
    """
    S = tuple(S)
    if T < 1:
        raise ValueError("the bound requires T >= 1")
    A = gen.submatrix(S)
    if not _is_symmetric(A):
        raise ValueError("the upper bound is stated for symmetric generators")
    eta = jump_rate_bound(gen, S)
    n = len(S)
    errors = n * np.log(eta * np.sqrt(8 * np.e) * T) + np.log(n) + n / (4.0 * T)

    L = -A

    def inner_obj(mu):
        root = np.sqrt(np.maximum(mu, 0.0))
        val = float(root @ L @ root)
        if functional is not None:
            val -= functional(mu)
        return val

    rng = np.random.default_rng(seed)
    best_val, best_mu = np.inf, None
    for k in range(n_restarts):
        mu = np.full(n, 1.0 / n) if k == 0 else rng.dirichlet(np.ones(n))
        if constraint is not None:
            mu = constraint.project(mu)
        mu, val = _projected_descent(inner_obj, mu, constraint)
        if val < best_val:
            best_val, best_mu = val, mu
    return DeviationBoundRhs(
        total=float(-T * best_val + errors),
        inner_value=float(best_val),
        error_terms=float(errors),
        n_sites=n,
        eta=eta,
        n_restarts=n_restarts,
        minimizer=best_mu,
    )


def _projected_descent(obj, mu0, constraint, max_iter=2000, tol=1e-12):
    """Projected descent with numerical gradients and backtracking; the
    projection is onto the simplex (and ball, when given)."""

    def project(x):
        return constraint.project(x) if constraint is not None else _project_simplex(x)

    def grad(mu):
        g = np.zeros_like(mu)
        h = 1e-7
        base = obj(mu)
        for i in range(len(mu)):
            e = np.zeros_like(mu)
            e[i] = h
            g[i] = (obj(mu + e) - base) / h
        return g

    mu = project(np.asarray(mu0, dtype=float))
    val = obj(mu)
    step = 0.5
    for _ in range(max_iter):
        g = grad(mu)
        improved = False
        s = step
        for _ in range(30):
            cand = project(mu - s * g)
            cval = obj(cand)
            if cval < val - 1e-15:
                mu, val = cand, cval
                step = min(s * 2.0, 10.0)
                improved = True
                break
            s *= 0.5
        if not improved or s < tol:
            break
    return mu, val


# ---------------------------------------------------------------------------
# discrete variational problems for rescaled profiles


FUNCTIONAL_NAMES = ("zero", "entropy", "power:<gamma>", "linear:<potential file>")


def _dirichlet_laplacian(n_per_axis: int, dim: int):
    """Graph Laplacian of the box lattice with absorbing (zero) boundary:
    tridiagonal blocks 2, -1 per axis, Kronecker-summed across dimensions."""
    main = 2.0 * np.ones(n_per_axis)
    off = -np.ones(n_per_axis - 1)
    L1 = diags_array([off, main, off], offsets=[-1, 0, 1], format="csr")
    L = None
    for axis in range(dim):
        term = None
        for k in range(dim):
            factor = L1 if k == axis else sparse_identity(n_per_axis, format="csr")
            term = factor if term is None else sparse_kron(term, factor, format="csr")
        L = term if L is None else L + term
    return L


def make_box_functional(name: str, dim: int, radius: float, n_per_axis: int):
    """Resolve a catalog name into a callable on probability vectors over
    the box lattice, in continuum units.

    Catalog: ``zero``; ``entropy`` (integral of g^2 log g^2);
    ``power:<gamma>`` (minus the integral of g^{2 gamma}); ``linear:<file>``
    (integral of V g^2 with V loaded from a text file over the lattice).
    """
    alpha = (n_per_axis + 1) / (2.0 * radius)

    if name == "zero":
        F = lambda mu: 0.0
        F.gradient = lambda mu: np.zeros_like(mu)
        return F
    if name == "entropy":
        def F(mu):
            m = np.maximum(mu, 1e-300)
            return float(np.sum(m * np.log(alpha ** dim * m)))
        F.gradient = lambda mu: np.log(alpha ** dim * np.maximum(mu, 1e-300)) + 1.0
        return F
    if name.startswith("power:"):
        gamma = float(name.split(":", 1)[1])
        if not 0 < gamma < 1:
            raise ValueError("power exponent must lie in (0, 1)")
        scale = alpha ** (dim * (gamma - 1))
        F = lambda mu: float(-scale * np.sum(np.maximum(mu, 0.0) ** gamma))
        F.gradient = lambda mu: -scale * gamma * np.maximum(mu, 1e-300) ** (gamma - 1.0)
        return F
    if name.startswith("linear:"):
        V = np.loadtxt(name.split(":", 1)[1]).ravel()
        if len(V) != n_per_axis ** dim:
            raise ValueError("potential file does not match the lattice size")
        F = lambda mu: float(V @ mu)
        F.gradient = lambda mu: V
        return F
    raise ValueError(f"unknown functional {name!r}; catalog: {FUNCTIONAL_NAMES}")


@dataclass
class ChiResult:
    value: float
    minimizer: np.ndarray
    n_nodes: int
    spacing: float
    restarts_agree: bool
    spread: float


def chi_discrete(
    dim: int,
    radius: float,
    n_per_axis: int,
    functional: str | Callable[[np.ndarray], float] = "zero",
    tol: float = 1e-10,
    n_restarts: int = 8,
    seed: int = 0,
) -> ChiResult:
    """Discrete version of the box variational problem: minimize the scaled
    lattice Dirichlet energy of sqrt(mu) minus the functional, over
    probability vectors mu on the interior lattice of [-radius, radius]^dim.

    The energy is (1/spacing^2) * (1/2) sum over unordered neighbor pairs
    (including pairs into the zero boundary) of the squared difference of
    sqrt(mu); for the zero functional in one dimension this converges to
    the principal Dirichlet eigenvalue of -Laplacian/2 on the interval.
    """
    if n_per_axis < 2:
        raise ValueError("need at least 2 nodes per axis")
    spacing = 2.0 * radius / (n_per_axis + 1)
    alpha_sq = 1.0 / spacing ** 2
    L = _dirichlet_laplacian(n_per_axis, dim)
    F = make_box_functional(functional, dim, radius, n_per_axis) if isinstance(functional, str) else functional
    n = n_per_axis ** dim

    def objective(w):
        w = w - w.max()
        e = np.exp(w)
        Z = e.sum()
        mu = e / Z
        v = np.sqrt(mu)
        Lv = L @ v
        energy = 0.5 * alpha_sq * float(v @ Lv)
        fval = F(mu)
        val = energy - fval
        # gradient wrt mu of the energy term: (L v)_x / (2 v_x) * alpha^2 / 2...
        # d/dmu_x [ (1/2) v L v ] = (Lv)_x / (2 v_x); chain through softmax
        grad_mu = alpha_sq * Lv / np.maximum(2.0 * v, 1e-150)
        if hasattr(F, "gradient"):
            grad_mu = grad_mu - F.gradient(mu)
        else:
            grad_mu = grad_mu - _numerical_grad(F, mu)
        grad_w = mu * (grad_mu - float(mu @ grad_mu))
        return val, grad_w

    rng = np.random.default_rng(seed)
    best = None
    optima = []
    for k in range(n_restarts):
        w0 = np.zeros(n) if k == 0 else rng.normal(scale=1.0, size=n)
        res = minimize(objective, w0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 20_000, "ftol": 1e-16, "gtol": tol})
        optima.append(res.fun)
        if best is None or res.fun < best.fun:
            best = res
    spread = float(max(optima) - min(optima))
    w = best.x - best.x.max()
    mu = np.exp(w)
    mu /= mu.sum()
    return ChiResult(
        value=float(best.fun),
        minimizer=mu,
        n_nodes=n,
        spacing=spacing,
        restarts_agree=spread <= 1e-6 * max(1.0, abs(best.fun)),
        spread=spread,
    )


def _numerical_grad(F, mu, h=1e-7):
    g = np.zeros_like(mu)
    base = F(mu)
    for i in range(len(mu)):
        e = np.zeros_like(mu)
        e[i] = h
        g[i] = (F(mu + e) - base) / h
    return g


def rescaled_bound_experiment(
    dim: int,
    radius: float,
    T_values: Sequence[float],
    functional: str = "zero",
    alpha_exponent: float = 0.25,
    n_restarts: int = 4,
    seed: int = 0,
) -> list[dict]:
    """Tabulate the scaled finite-horizon upper bound against the discrete
    variational value across horizons, with the scale alpha = T^exponent.

    For each T the box lattice has interior radius floor(radius * alpha);
    the row reports the scaled error terms (which should shrink as T grows)
    and the scaled bound alongside the discrete variational value.
    """
    rows = []
    for T in T_values:
        alpha = float(T) ** alpha_exponent
        n_int = int(np.floor(radius * alpha))
        n_per_axis = max(2 * n_int + 1, 2)
        n_sites = n_per_axis ** dim
        # rate-1-per-neighbor walk on the box: row/column sums of the jump
        # matrix are at most 2*dim, floored at 1
        eta = max(2.0 * dim, 1.0)
        chi = chi_discrete(dim, radius, n_per_axis, functional,
                           n_restarts=n_restarts, seed=seed)
        error_terms = n_sites * np.log(eta * np.sqrt(8 * np.e) * T) + np.log(n_sites) + n_sites / (4.0 * T)
        scaled_errors = (alpha ** 2 / T) * error_terms
        rows.append(
            {
                "T": float(T),
                "alpha": alpha,
                "n_sites": n_sites,
                "eta": eta,
                "scaled_inner_inf": chi.value,
                "scaled_error_terms": float(scaled_errors),
                "scaled_rhs": float(-chi.value + scaled_errors),
            }
        )
    return rows
