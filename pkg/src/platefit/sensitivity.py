"""Loss functional over AFC data and its exact derivatives.

The system matrix depends on the material parameters through the complex
moduli only, K~ = -w^2 A + sum_a Dhat_a(theta) K^a / (2e), so the loss

    L(theta) = 1/N * sum_k | P(u(theta, w_k)) - u_exp_k |^2

has closed-form first and second derivatives.  The gradient uses one
adjoint solve per frequency (K~ is symmetric, so the forward
factorization is reused); the Hessian adds one forward-sensitivity solve
per parameter.  Central finite differences serve as the independent
check, never as the implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleParametersError, SolverError
from .forward import (
    MaterialParams,
    _SystemFamily,
    _solve_checked,
    afc_csv_text,
    read_afc_csv,
    refine_solution,
    solve_with_factor,
)
from .plate_fem import ALPHAS, ConstantOperators


class Parametrization:
    """Map from a low-dimensional theta to the six (D_a, beta_a) pairs.

    Subclasses provide ``moduli``, ``jacobian`` and ``second_derivs`` in
    closed form, plus box bounds.  Feasibility additionally requires the
    3x3 storage matrix to be positive definite.
    """

    name: str = "base"
    k: int = 0
    lower: np.ndarray
    upper: np.ndarray

    def moduli(self, theta):
        """Return (d, beta), each length 6 in ALPHAS order."""
        raise NotImplementedError

    def jacobian(self, theta):
        """Return (dd, dbeta) with shapes (6, k)."""
        raise NotImplementedError

    def second_derivs(self, theta):
        """Return (d2d, d2beta) with shapes (6, k, k)."""
        raise NotImplementedError

    def material(self, theta, rho0, e) -> MaterialParams:
        d, beta = self.moduli(theta)
        return MaterialParams(d=d, beta=beta, rho0=rho0, e=e)

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))

    def is_feasible(self, theta) -> bool:
        if not self.in_bounds(theta):
            return False
        d, beta = self.moduli(np.asarray(theta, dtype=float))
        if min(d[0], d[3], d[5]) <= 0 or np.any(beta < 0):
            return False
        s = np.array([[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]])
        return bool(np.linalg.eigvalsh(s).min() > 0)

    def validate(self, theta):
        if not self.is_feasible(theta):
            raise InfeasibleParametersError(
                f"theta {np.asarray(theta).tolist()} infeasible for {self.name}"
            )


class IsotropicParametrization(Parametrization):
    """theta = (D, nu, beta): rigidity, Poisson ratio, common loss factor.

    Only positivity is enforced by default; the Poisson upper bound is the
    positive-definiteness limit of the storage matrix, so intermediate
    iterates may pass through physically implausible values on their way
    to the optimum.
    """

    name = "isotropic"
    k = 3

    def __init__(self, lower=(0.0, 0.0, 0.0), upper=(np.inf, 1.0, np.inf)):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    def moduli(self, theta):
        rig, nu, beta = theta
        d = rig * np.array([1.0, nu, 0.0, 1.0, 0.0, 1.0 - nu])
        return d, np.full(6, float(beta))

    def jacobian(self, theta):
        rig, nu, _ = theta
        dd = np.zeros((6, 3))
        dd[:, 0] = [1.0, nu, 0.0, 1.0, 0.0, 1.0 - nu]
        dd[:, 1] = [0.0, rig, 0.0, 0.0, 0.0, -rig]
        dbeta = np.zeros((6, 3))
        dbeta[:, 2] = 1.0
        return dd, dbeta

    def second_derivs(self, theta):
        d2d = np.zeros((6, 3, 3))
        d2d[1, 0, 1] = d2d[1, 1, 0] = 1.0
        d2d[5, 0, 1] = d2d[5, 1, 0] = -1.0
        return d2d, np.zeros((6, 3, 3))


class ScaledGlobalParametrization(Parametrization):
    """theta = (D, 100 nu) with the loss factor frozen.

    The Poisson coordinate is scaled so both coordinates carry comparable
    magnitudes in the population-spread stopping rule of the global
    search.
    """

    name = "scaled-global"
    k = 2

    def __init__(self, beta_fixed=0.01, lower=(1.0, 0.0), upper=(100.0, 50.0)):
        self.beta_fixed = float(beta_fixed)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    def moduli(self, theta):
        rig, nu100 = theta
        nu = nu100 / 100.0
        d = rig * np.array([1.0, nu, 0.0, 1.0, 0.0, 1.0 - nu])
        return d, np.full(6, self.beta_fixed)

    def jacobian(self, theta):
        rig, nu100 = theta
        nu = nu100 / 100.0
        dd = np.zeros((6, 2))
        dd[:, 0] = [1.0, nu, 0.0, 1.0, 0.0, 1.0 - nu]
        dd[:, 1] = [0.0, rig / 100.0, 0.0, 0.0, 0.0, -rig / 100.0]
        return dd, np.zeros((6, 2))

    def second_derivs(self, theta):
        d2d = np.zeros((6, 2, 2))
        d2d[1, 0, 1] = d2d[1, 1, 0] = 1.0 / 100.0
        d2d[5, 0, 1] = d2d[5, 1, 0] = -1.0 / 100.0
        return d2d, np.zeros((6, 2, 2))

    def in_bounds(self, theta) -> bool:
        # DE clips to the closed box, so boundary points stay feasible
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def is_feasible(self, theta) -> bool:
        if not self.in_bounds(theta):
            return False
        d, _ = self.moduli(np.asarray(theta, dtype=float))
        if d[0] <= 0 or d[5] <= 0:
            return False
        s = np.array([[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]])
        return bool(np.linalg.eigvalsh(s).min() > 0)


class MonoclinicParametrization(Parametrization):
    """theta = the six storage moduli followed by the six loss factors."""

    name = "monoclinic"
    k = 12

    def __init__(self, lower=None, upper=None):
        if lower is None:
            lower = np.concatenate([
                [0.0, -np.inf, -np.inf, 0.0, -np.inf, 0.0], np.zeros(6)
            ])
        if upper is None:
            upper = np.full(12, np.inf)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    def moduli(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[:6].copy(), theta[6:].copy()

    def jacobian(self, theta):
        dd = np.zeros((6, 12))
        dd[:, :6] = np.eye(6)
        dbeta = np.zeros((6, 12))
        dbeta[:, 6:] = np.eye(6)
        return dd, dbeta

    def second_derivs(self, theta):
        return np.zeros((6, 12, 12)), np.zeros((6, 12, 12))

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta < self.upper)
                    and np.all(theta[6:] >= 0))


PARAMETRIZATIONS = {
    "isotropic": IsotropicParametrization,
    "scaled-global": ScaledGlobalParametrization,
    "monoclinic": MonoclinicParametrization,
}


@dataclass
class ReferenceData:
    """Target AFC samples for the inverse problem.

    ``theta_ref`` and ``parametrization`` are carried along for synthetic
    data so fits can report per-parameter relative errors.
    """

    freqs_hz: np.ndarray
    values: np.ndarray
    noise_level: float = 0.0
    seed: int | None = None
    theta_ref: np.ndarray | None = None
    parametrization: str | None = None

    def __post_init__(self):
        self.freqs_hz = np.asarray(self.freqs_hz, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.freqs_hz.shape != self.values.shape:
            raise ValueError("frequency and value arrays must have equal length")
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(afc_csv_text(self.freqs_hz, self.values))
        meta = {
            "noise_level_percent": self.noise_level,
            "seed": self.seed,
            "theta_ref": None if self.theta_ref is None else list(map(float, self.theta_ref)),
            "parametrization": self.parametrization,
        }
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ReferenceData":
        freqs, values = read_afc_csv(path)
        meta = {}
        try:
            with open(str(path) + ".meta.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            pass
        theta_ref = meta.get("theta_ref")
        return cls(
            freqs_hz=freqs,
            values=values,
            noise_level=meta.get("noise_level_percent", 0.0),
            seed=meta.get("seed"),
            theta_ref=None if theta_ref is None else np.asarray(theta_ref, dtype=float),
            parametrization=meta.get("parametrization"),
        )


# ---------------------------------------------------------------------------
# loss and derivatives


class LossEngine:
    """Shared machinery behind loss / loss_grad / loss_hess.

    Per frequency it factors K~ once and reuses the factorization for the
    state, adjoint and the k forward-sensitivity solves.  Results are
    reduced in frequency order, so values are independent of any outer
    parallelism.
    """

    def __init__(self, param: Parametrization, ops: ConstantOperators,
                 data: ReferenceData, method: str = "banded"):
        self.param = param
        self.ops = ops
        self.data = data
        self.method = method
        self.omegas = 2.0 * np.pi * np.asarray(data.freqs_hz, dtype=float)

    def _material(self, theta):
        self.param.validate(theta)
        return self.param.material(theta, rho0=self.ops.rho0, e=self.ops.e)

    def _coeff_first(self, theta, mat):
        """c[j, a] = d(Dhat_a)/d(theta_j) / (2e), shape (k, 6) complex."""
        dd, dbeta = self.param.jacobian(theta)
        d, beta = mat.d, mat.beta
        c = (dd * (1.0 + 1j * beta)[:, None] + 1j * d[:, None] * dbeta) / (2.0 * self.ops.e)
        return c.T

    def _coeff_second(self, theta, mat):
        """C[i, j, a] = d^2(Dhat_a)/dtheta_i dtheta_j / (2e)."""
        dd, dbeta = self.param.jacobian(theta)
        d2d, d2beta = self.param.second_derivs(theta)
        d, beta = mat.d, mat.beta
        C = (
            d2d * (1.0 + 1j * beta)[:, None, None]
            + 1j * dd[:, :, None] * dbeta[:, None, :]
            + 1j * dd[:, None, :] * dbeta[:, :, None]
            + 1j * d[:, None, None] * d2beta
        ) / (2.0 * self.ops.e)
        return np.transpose(C, (1, 2, 0))

    def evaluate(self, theta, order=0):
        """Loss and, for order >= 1/2, its gradient / Hessian."""
        theta = np.asarray(theta, dtype=float)
        mat = self._material(theta)
        ops = self.ops
        fam = _SystemFamily(ops, mat)
        fstack = ops.stacked_curvature_lifts()
        Kmats = [ops.K[a] for a in ALPHAS]
        c1 = self._coeff_first(theta, mat) if order >= 1 else None
        C2 = self._coeff_second(theta, mat) if order >= 2 else None
        k = self.param.k
        n = self.omegas.size

        total = 0.0
        grad = np.zeros(k) if order >= 1 else None
        hess = np.zeros((k, k)) if order >= 2 else None

        for idx in range(n):
            w = self.omegas[idx]
            data_w = fam.data(w)
            rhs_w = fam.rhs(w)
            try:
                u, fac = solve_with_factor(ops, data_w, rhs_w, self.method,
                                           frequency_hz=w / (2 * np.pi))
            except SolverError as exc:
                raise SolverError(
                    f"forward solve failed inside loss evaluation: {exc}",
                    frequency_hz=w / (2 * np.pi),
                ) from exc
            r = ops.c @ u + ops.c0 - self.data.values[idx]
            total += abs(r) ** 2
            if order == 0:
                continue

            lam = fac.solve(ops.c.astype(complex))  # adjoint: K~ is symmetric
            lam = refine_solution(ops, data_w, lam, ops.c.astype(complex), fac)
            # t_a = f^a - K^a u ;  s_a = lam . t_a  (raw operator units)
            t = fstack.astype(complex) - np.vstack([K @ u for K in Kmats])
            s_a = t @ lam
            dr = c1 @ s_a  # dr_j = lam . (d_j f~ - d_j K~ u)
            grad += 2.0 * np.real(np.conj(r) * dr)

            if order >= 2:
                rhs_sens = (c1 @ t).T  # (n_free, k) columns d_j f~ - d_j K~ u
                du = fac.solve(rhs_sens)
                dr_direct = ops.c @ du
                # z_a = K^a lam reused for lam . (d_i K~) du_j
                z = np.vstack([K @ lam for K in Kmats])
                zdu = z @ du  # (6, k)
                cross = c1 @ zdu  # (k, k): lam . (d_i K~) du_j
                second = C2 @ s_a  # (k, k): lam . (d2_ij f~ - d2_ij K~ u)
                d2r = second - cross - cross.T
                hess += 2.0 * np.real(
                    np.outer(np.conj(dr_direct), dr_direct) + np.conj(r) * d2r
                )

        total /= n
        out = [total]
        if order >= 1:
            out.append(grad / n)
        if order >= 2:
            out.append(hess / n)
        return out[0] if order == 0 else tuple(out)


def loss(theta, param: Parametrization, ops: ConstantOperators,
         data: ReferenceData, method: str = "banded") -> float:
    """Mean squared complex misfit of the modelled AFC against the data."""
    return LossEngine(param, ops, data, method).evaluate(theta, order=0)


def loss_grad(theta, param: Parametrization, ops: ConstantOperators,
              data: ReferenceData, method: str = "banded") -> np.ndarray:
    """Exact gradient of :func:`loss` via per-frequency adjoint solves."""
    return LossEngine(param, ops, data, method).evaluate(theta, order=1)[1]


def loss_hess(theta, param: Parametrization, ops: ConstantOperators,
              data: ReferenceData, method: str = "banded") -> np.ndarray:
    """Exact Hessian of :func:`loss` via forward sensitivities."""
    return LossEngine(param, ops, data, method).evaluate(theta, order=2)[2]


def synthesize_data(theta_ref, param: Parametrization, ops: ConstantOperators,
                    freqs_hz, noise_level: float = 0.0, seed=None,
                    method: str = "banded") -> ReferenceData:
    """Forward-model data with optional complex Gaussian noise.

    The noise standard deviation is (noise_level/100) * max |AFC|, applied
    independently to the real and imaginary parts; a fixed seed makes the
    draw reproducible.
    """
    if noise_level < 0:
        raise ValueError("noise level must be nonnegative")
    theta_ref = np.asarray(theta_ref, dtype=float)
    param.validate(theta_ref)
    mat = param.material(theta_ref, rho0=ops.rho0, e=ops.e)
    fam = _SystemFamily(ops, mat)
    omegas = 2.0 * np.pi * np.asarray(freqs_hz, dtype=float)
    values = np.empty(omegas.size, dtype=complex)
    for idx, w in enumerate(omegas):
        u = _solve_checked(ops, fam.data(w), fam.rhs(w), method,
                           frequency_hz=w / (2 * np.pi))
        values[idx] = (ops.c @ u + ops.c0) / ops.g
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        sigma = (noise_level / 100.0) * np.abs(values).max()
        values = values + sigma * rng.standard_normal(values.size) \
            + 1j * sigma * rng.standard_normal(values.size)
    return ReferenceData(
        freqs_hz=np.asarray(freqs_hz, dtype=float),
        values=values,
        noise_level=noise_level,
        seed=seed,
        theta_ref=theta_ref.copy(),
        parametrization=param.name,
    )


# ---------------------------------------------------------------------------
# finite differences (independent checks, also used by the CLI gradient check)


def fd_step(x, rel=1e-6):
    return rel * np.maximum(np.abs(x), 1.0)


def central_difference_gradient(fun, x, rel=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel)
    g = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (fun(xp) - fun(xm)) / (2 * h[i])
    return g


def central_difference_jacobian(vec_fun, x, rel=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        cols.append((np.asarray(vec_fun(xp)) - np.asarray(vec_fun(xm))) / (2 * h[i]))
    return np.stack(cols, axis=1)
