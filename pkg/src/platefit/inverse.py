"""Optimization engines: trust-region Newton/BFGS and differential evolution.

The trust-region subproblem is solved exactly through an eigendecomposition
(the parameter space has at most 12 dimensions), including the hard case.
The global stage is a best/1/bin differential evolution with a guaranteed
mutant coordinate, synchronous selection and box clipping; the composed
pipeline runs several independent DE restarts and polishes the best result
with the local method.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import PlatefitError
from .forward import afc_peak_indices
from .sensitivity import (
    IsotropicParametrization,
    LossEngine,
    Parametrization,
    ReferenceData,
    ScaledGlobalParametrization,
)


@dataclass
class TrustRegionOptions:
    """Algorithm parameters; defaults follow the usual quarter/three-quarter
    radius rules with exact-Hessian model updates.

    ``scale`` (a positive vector, or "auto" for |x0| floored at 1e-8)
    runs the identical algorithm in x/scale coordinates, which turns the
    spherical trust region into an ellipsoid matched to the parameter
    magnitudes.  Material parameters span five orders of magnitude, so the
    unscaled ball makes the radius control uselessly conservative.
    """

    delta_max: float = 100.0
    delta0: float = 1.0
    eta: float = 0.15
    k_max: int = 200
    gtol: float = 1e-12
    step_tol: float = 1e-14
    update: str = "newton"  # or "bfgs"
    scale: object = None  # None | "auto" | positive array

    def validate(self):
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")
        if not (0 < self.delta0 < self.delta_max):
            raise ValueError("delta0 must lie in (0, delta_max)")
        if not (0 <= self.eta < 0.25):
            raise ValueError("eta must lie in [0, 1/4)")
        if self.update not in ("newton", "bfgs"):
            raise ValueError("update must be 'newton' or 'bfgs'")

    def resolve_scale(self, x0) -> np.ndarray | None:
        if self.scale is None:
            return None
        if isinstance(self.scale, str):
            if self.scale != "auto":
                raise ValueError("scale must be None, 'auto' or a positive vector")
            return np.maximum(np.abs(np.asarray(x0, dtype=float)), 1e-8)
        s = np.asarray(self.scale, dtype=float)
        if s.shape != np.shape(x0) or np.any(s <= 0):
            raise ValueError("scale must be a positive vector matching x0")
        return s


@dataclass
class DEOptions:
    cr: float = 0.7
    f_min: float = 0.7
    f_max: float = 1.0
    np_size: int = 30
    max_fev: int = 15000
    eps: float = 1e-2
    restarts: int = 5
    seed: int | None = None

    def validate(self):
        if not (0 < self.cr < 1):
            raise ValueError("crossover rate must lie in (0, 1)")
        if not (0 <= self.f_min < self.f_max <= 2):
            raise ValueError("mutation-factor bounds must satisfy 0 <= F_min < F_max <= 2")
        if self.np_size < 4:
            raise ValueError("population size must be at least 4")
        if self.max_fev < self.np_size:
            raise ValueError("evaluation budget smaller than one population")
        if self.restarts < 1:
            raise ValueError("at least one restart required")


@dataclass
class FitResult:
    theta: np.ndarray
    loss: float
    loss_trace: np.ndarray
    n_iter: int
    n_fev: int
    n_gev: int = 0
    n_hev: int = 0
    termination: str = ""
    relative_errors: np.ndarray | None = None
    theta_trace: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def relative_errors(theta, theta_ref) -> np.ndarray:
    """Signed per-parameter errors (theta - ref) / |ref|."""
    theta = np.asarray(theta, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    return (theta - theta_ref) / np.abs(theta_ref)


@dataclass
class ObjectiveBundle:
    """Callbacks consumed by the trust-region driver."""

    f: callable
    grad: callable
    hess: callable = None
    is_feasible: callable = None

    def feasible(self, x) -> bool:
        return True if self.is_feasible is None else bool(self.is_feasible(x))


def make_objective(param: Parametrization, ops, data: ReferenceData,
                   method: str = "banded") -> ObjectiveBundle:
    """Loss objective with a one-point cache shared by f/grad/hess.

    The trust-region loop first evaluates f at a trial point and, on
    acceptance, asks for the gradient and Hessian there; the cache avoids
    redundant sweeps within one point.
    """
    engine = LossEngine(param, ops, data, method)
    cache = {"x": None, "vals": None, "order": -1}

    def evaluate(x, order):
        xb = np.asarray(x, dtype=float).tobytes()
        if cache["x"] == xb and cache["order"] >= order:
            return cache["vals"]
        vals = engine.evaluate(x, order=order)
        vals = (vals,) if order == 0 else tuple(vals)
        cache.update(x=xb, vals=vals, order=order)
        return vals

    def f(x):
        return evaluate(x, 0)[0]

    def grad(x):
        return np.asarray(evaluate(x, 1)[1])

    def hess(x):
        return np.asarray(evaluate(x, 2)[2])

    return ObjectiveBundle(f=f, grad=grad, hess=hess, is_feasible=param.is_feasible)


# ---------------------------------------------------------------------------
# trust-region subproblem (exact, via eigendecomposition)


def _model_value(g, B, p):
    return float(g @ p + 0.5 * p @ B @ p)


def solve_tr_subproblem(g, B, delta) -> np.ndarray:
    """Global minimizer of g.p + 1/2 p.B.p subject to ||p|| <= delta.

    Eigendecomposition of B makes the secular equation one-dimensional;
    the hard case (gradient orthogonal to the bottom eigenspace) is
    resolved by moving along the bottom eigenvector to the boundary.
    """
    g = np.asarray(g, dtype=float)
    B = np.asarray(B, dtype=float)
    if delta <= 0:
        raise ValueError("trust radius must be positive")
    lam, Q = np.linalg.eigh(0.5 * (B + B.T))
    gt = Q.T @ g
    lmin = lam[0]

    if lmin > 0:
        p = -gt / lam
        if np.linalg.norm(p) <= delta:
            return Q @ p

    scale = max(1.0, np.abs(lam).max())
    mu0 = max(0.0, -lmin)
    near_min = lam - lmin <= 1e-12 * scale

    def pnorm(mu):
        return np.linalg.norm(gt / (lam + mu))

    if lmin <= 0 and np.all(np.abs(gt[near_min]) <= 1e-14 * max(1.0, np.linalg.norm(gt))):
        # hard case: pseudo-solution at mu = -lmin plus a bottom-eigenvector move
        d = lam + mu0
        p = np.where(near_min, 0.0, -gt / np.where(near_min, 1.0, d))
        nrm = np.linalg.norm(p)
        if nrm <= delta:
            tau = np.sqrt(max(delta**2 - nrm**2, 0.0))
            p = p + tau * _unit(len(lam), int(np.flatnonzero(near_min)[0]))
            return Q @ p

    # regular boundary root of ||p(mu)|| = delta on (mu0, inf)
    lo = mu0 + max(1e-300, 1e-14 * (1.0 + mu0))
    while pnorm(lo) <= delta:
        # numerical corner: push lo toward mu0 until the norm exceeds delta
        gap = lo - mu0
        if gap <= 1e-300:
            # ||p|| never exceeds delta: boundary solution at mu0 itself
            d = lam + mu0
            safe = np.where(d > 0, d, 1.0)
            p = np.where(d > 0, -gt / safe, 0.0)
            nrm = np.linalg.norm(p)
            tau = np.sqrt(max(delta**2 - nrm**2, 0.0))
            p = p + tau * _unit(len(lam), int(np.argmin(lam)))
            return Q @ p
        lo = mu0 + gap / 16.0
    hi = mu0 + np.linalg.norm(gt) / delta + scale
    while pnorm(hi) >= delta:
        hi = mu0 + 2 * (hi - mu0)

    def h(mu):
        return 1.0 / delta - 1.0 / pnorm(mu)

    mu = brentq(h, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    return Q @ (-gt / (lam + mu))


def _unit(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


# ---------------------------------------------------------------------------
# trust-region driver


def trust_region_minimize(bundle: ObjectiveBundle, x0, opts: TrustRegionOptions | None = None,
                          theta_ref=None) -> FitResult:
    """Radius-controlled Newton/BFGS minimization.

    The radius shrinks by 1/4 on poor agreement, doubles (capped) when the
    model matches well and the step is at the boundary; steps are accepted
    when the actual-vs-predicted improvement exceeds eta.  Infeasible
    trial points are rejected without evaluation and shrink the radius.
    """
    opts = opts or TrustRegionOptions()
    opts.validate()
    x0 = np.asarray(x0, dtype=float)
    s = opts.resolve_scale(x0)
    if s is not None:
        inner = ObjectiveBundle(
            f=lambda y: bundle.f(s * y),
            grad=lambda y: s * np.asarray(bundle.grad(s * y)),
            hess=lambda y: s[:, None] * np.asarray(bundle.hess(s * y)) * s[None, :],
            is_feasible=None if bundle.is_feasible is None
            else (lambda y: bundle.is_feasible(s * y)),
        )
        res = trust_region_minimize(
            inner, x0 / s,
            TrustRegionOptions(**{**opts.__dict__, "scale": None}),
            theta_ref=None,
        )
        res.theta = s * res.theta
        if res.theta_trace is not None:
            res.theta_trace = res.theta_trace * s[None, :]
        if theta_ref is not None:
            res.relative_errors = relative_errors(res.theta, theta_ref)
        return res

    x = x0.copy()
    if not bundle.feasible(x):
        raise ValueError("infeasible starting point")

    n_fev = n_gev = n_hev = 0
    # Hessian first: with the cached loss engine this also yields f and g
    B = np.asarray(bundle.hess(x))
    n_hev += 1
    f = bundle.f(x)
    n_fev += 1
    g = np.asarray(bundle.grad(x))
    n_gev += 1

    delta = opts.delta0
    trace = [f]
    xs = [x.copy()]
    deltas = [delta]
    termination = "max_iter"
    k = 0
    while k < opts.k_max:
        k += 1
        if np.linalg.norm(g) <= opts.gtol:
            termination = "gtol"
            break
        p = solve_tr_subproblem(g, B, delta)
        pnorm = np.linalg.norm(p)
        pred = -(g @ p + 0.5 * p @ B @ p)
        if pnorm <= opts.step_tol or pred <= 0:
            termination = "step_tol"
            break

        trial = x + p
        if not bundle.feasible(trial):
            delta = 0.25 * delta
            trace.append(f)
            xs.append(x.copy())
            deltas.append(delta)
            if delta < 1e-18:
                termination = "radius_collapse"
                break
            continue

        f_trial = bundle.f(trial)
        n_fev += 1
        rho = (f - f_trial) / pred
        if rho < 0.25:
            delta = 0.25 * delta
        elif rho > 0.75 and abs(pnorm - delta) <= 1e-10 * delta:
            delta = min(2.0 * delta, opts.delta_max)

        if rho > opts.eta:
            s = trial - x
            x = trial
            f = f_trial
            if opts.update == "newton":
                B = np.asarray(bundle.hess(x))  # also caches the gradient
                n_hev += 1
                g_new = np.asarray(bundle.grad(x))
                n_gev += 1
            else:
                g_new = np.asarray(bundle.grad(x))
                n_gev += 1
                y = g_new - g
                sy = float(s @ y)
                if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                    Bs = B @ s
                    B = B + np.outer(y, y) / sy - np.outer(Bs, Bs) / float(s @ Bs)
            g = g_new
            if np.linalg.norm(s) <= opts.step_tol:
                trace.append(f)
                xs.append(x.copy())
                deltas.append(delta)
                termination = "step_tol"
                break
        trace.append(f)
        xs.append(x.copy())
        deltas.append(delta)
        if delta < 1e-18:
            termination = "radius_collapse"
            break

    rel = None if theta_ref is None else relative_errors(x, theta_ref)
    return FitResult(
        theta=x,
        loss=f,
        loss_trace=np.asarray(trace),
        n_iter=k,
        n_fev=n_fev,
        n_gev=n_gev,
        n_hev=n_hev,
        termination=termination,
        relative_errors=rel,
        theta_trace=np.asarray(xs),
        diagnostics={"delta_trace": np.asarray(deltas)},
    )


# ---------------------------------------------------------------------------
# differential evolution


def differential_evolution(f, bounds, opts: DEOptions | None = None,
                           map_fn=None, on_generation=None):
    """best/1/bin differential evolution on a box.

    Mutants are built around the current-generation best member; binomial
    crossover keeps at least one mutant coordinate; candidates are clipped
    to the box and selected greedily after the full generation has been
    evaluated.  Stops when the evaluation budget is exhausted or the
    population spread falls below eps * |mean| in every coordinate.
    Returns (x_best, f_best, generations).
    """
    opts = opts or DEOptions()
    opts.validate()
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if lower.shape != upper.shape or np.any(lower >= upper):
        raise ValueError("invalid bounds box")
    dim = lower.size
    rng = np.random.default_rng(opts.seed)
    evaluate_all = map_fn if map_fn is not None else lambda fn, xs: list(map(fn, xs))

    pop = rng.uniform(lower, upper, size=(opts.np_size, dim))
    fvals = np.asarray(evaluate_all(f, list(pop)), dtype=float)
    n_fev = opts.np_size
    generations = 0

    while True:
        best_idx = int(np.argmin(fvals))
        if on_generation is not None:
            spread = np.std(pop, axis=0)
            on_generation(generations, pop[best_idx].copy(), float(fvals[best_idx]), spread)
        if n_fev + opts.np_size > opts.max_fev:
            break
        spread_ok = np.all(np.std(pop, axis=0) <= opts.eps * np.abs(np.mean(pop, axis=0)))
        if generations > 0 and spread_ok:
            break

        F = rng.uniform(opts.f_min, opts.f_max)
        candidates = np.empty_like(pop)
        for i in range(opts.np_size):
            i1 = i2 = i
            while i1 == i:
                i1 = int(rng.integers(opts.np_size))
            while i2 == i or i2 == i1:
                i2 = int(rng.integers(opts.np_size))
            mutant = pop[best_idx] + F * (pop[i1] - pop[i2])
            mask = rng.random(dim) < opts.cr
            mask[int(rng.integers(dim))] = True  # guaranteed mutant coordinate
            cand = np.where(mask, mutant, pop[i])
            candidates[i] = np.clip(cand, lower, upper)
        cand_vals = np.asarray(evaluate_all(f, list(candidates)), dtype=float)
        n_fev += opts.np_size
        improved = cand_vals < fvals
        pop[improved] = candidates[improved]
        fvals[improved] = cand_vals[improved]
        generations += 1

    best_idx = int(np.argmin(fvals))
    return pop[best_idx].copy(), float(fvals[best_idx]), generations


# ---------------------------------------------------------------------------
# composed global -> local pipeline


def fit_global(data: ReferenceData, ops, global_param: ScaledGlobalParametrization | None = None,
               de_opts: DEOptions | None = None, tr_opts: TrustRegionOptions | None = None,
               local_param: IsotropicParametrization | None = None,
               method: str = "banded", map_fn=None) -> FitResult:
    """Several DE restarts on (rigidity, scaled Poisson), then local polish.

    The loss factor stays frozen during the global stage and is released
    for the trust-region polish, starting from the frozen value.
    """
    de_opts = de_opts or DEOptions()
    de_opts.validate()
    tr_opts = tr_opts or TrustRegionOptions()
    global_param = global_param or ScaledGlobalParametrization()
    local_param = local_param or IsotropicParametrization()

    n_peaks = afc_peak_indices(np.abs(data.values)).size
    if n_peaks < 2:
        warnings.warn(
            f"reference AFC shows {n_peaks} peak(s); the global search is "
            "unreliable with fewer than two peaks",
            stacklevel=2,
        )

    engine = LossEngine(global_param, ops, data, method)

    def global_loss(theta):
        return engine.evaluate(theta, order=0)

    seeds = np.random.SeedSequence(de_opts.seed).spawn(de_opts.restarts)
    runs = []
    failures = []
    traces = []
    for r, seed in enumerate(seeds):
        ropts = DEOptions(**{**de_opts.__dict__, "seed": seed})
        trace_r = []

        def record(gen, x, fx, spread):
            trace_r.append((gen, fx, *x, float(np.max(spread))))

        try:
            x, fx, gens = differential_evolution(
                global_loss, (global_param.lower, global_param.upper), ropts,
                map_fn=map_fn, on_generation=record,
            )
            runs.append((fx, x, gens, r))
            traces.append(trace_r)
        except PlatefitError as exc:
            failures.append((r, exc))
            traces.append(trace_r)
    if not runs:
        raise PlatefitError(
            f"all {de_opts.restarts} global restarts failed; first error: {failures[0][1]}"
        )

    best_f, best_x, best_gens, best_r = min(runs, key=lambda t: t[0])
    theta0 = np.array([best_x[0], best_x[1] / 100.0, global_param.beta_fixed])

    theta_ref = None
    if data.theta_ref is not None and data.theta_ref.size == local_param.k:
        theta_ref = data.theta_ref
    bundle = make_objective(local_param, ops, data, method)
    local = trust_region_minimize(bundle, theta0, tr_opts, theta_ref=theta_ref)

    global_trace = np.asarray([row[1] for row in traces[best_r]])
    rel_global = None if theta_ref is None else relative_errors(theta0, theta_ref)
    result = FitResult(
        theta=local.theta,
        loss=local.loss,
        loss_trace=np.concatenate([global_trace, local.loss_trace]),
        n_iter=best_gens + local.n_iter,
        n_fev=local.n_fev,
        n_gev=local.n_gev,
        n_hev=local.n_hev,
        termination=local.termination,
        relative_errors=local.relative_errors,
        theta_trace=local.theta_trace,
        diagnostics={
            "global_theta": theta0,
            "global_loss": best_f,
            "global_relative_errors": rel_global,
            "global_generations": best_gens,
            "restart_losses": [t[0] for t in sorted(runs, key=lambda t: t[3])],
            "failed_restarts": [r for r, _ in failures],
            "de_trace": traces[best_r],
            "local_loss_trace": local.loss_trace,
        },
    )
    return result
