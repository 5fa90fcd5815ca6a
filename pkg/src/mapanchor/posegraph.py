"""Factor-graph construction and on-manifold Levenberg-Marquardt solving.

Variables are SE(3) poses keyed by (session, index) tuples and updated by
right multiplication with exp(delta). Three factor types cover the whole
pipeline: priors, odometry/loop betweens, and the anchored between-session
factor that ties one pose of each session together through the two anchor
nodes.

Residual conventions (x (+) delta = x * exp(delta), twists ordered [rho, phi]):

    prior:    log(p^-1 * x)
    between:  log(u^-1 * x_i^-1 * x_j)
    anchored: log(c^-1 * (D_Q x_Q)^-1 * (D_R x_R))

so every residual vanishes when the measurement is consistent with the
variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MissingVariable, NotConverged, SingularNormalEquations
from .geometry import (
    Pose3,
    compose,
    exp_se3,
    log_se3,
    se3_adjoint,
    se3_right_jacobian_inv,
)
from .session import Session, Trajectory

NodeId = tuple[str, int]


@dataclass
class NoiseModel:
    """Diagonal (or isotropic) Gaussian noise with an optional Cauchy kernel."""

    sigmas: np.ndarray  # (6,) standard deviations [trans(3), rot(3)]
    cauchy_k: float | None = None

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(6)
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")

    @staticmethod
    def diagonal(sigmas, cauchy_k=None):
        return NoiseModel(np.asarray(sigmas, dtype=float), cauchy_k)

    @staticmethod
    def isotropic(sigma: float, cauchy_k=None):
        return NoiseModel(np.full(6, float(sigma)), cauchy_k)

    @staticmethod
    def from_variance(variance: float, cauchy_k=None, min_sigma: float = 1e-9):
        """Isotropic model from a variance value; sigma clamped away from zero
        so vanishing variances stay numerically usable."""
        return NoiseModel.isotropic(max(np.sqrt(variance), min_sigma), cauchy_k)

    def whiten(self, residual):
        return residual / self.sigmas

    def robust_weight(self, whitened_sq_norm: float) -> float:
        if self.cauchy_k is None:
            return 1.0
        return 1.0 / (1.0 + whitened_sq_norm / self.cauchy_k**2)

    def robust_cost(self, whitened_sq_norm: float) -> float:
        if self.cauchy_k is None:
            return whitened_sq_norm
        k2 = self.cauchy_k**2
        return k2 * np.log1p(whitened_sq_norm / k2)


class PriorFactor:
    def __init__(self, node: NodeId, pose: Pose3, noise: NoiseModel):
        self.node = node
        self.pose = pose
        self.noise = noise

    def nodes(self):
        return [self.node]

    def residual(self, values):
        return log_se3(compose(self.pose.inverse(), values[self.node]))

    def jacobians(self, values):
        r0 = self.residual(values)
        return r0, {self.node: se3_right_jacobian_inv(r0)}


class BetweenFactor:
    def __init__(self, i: NodeId, j: NodeId, measured: Pose3, noise: NoiseModel):
        self.i = i
        self.j = j
        self.measured = measured
        self.noise = noise

    def nodes(self):
        return [self.i, self.j]

    def residual(self, values):
        xi, xj = values[self.i], values[self.j]
        return log_se3(compose(self.measured.inverse(), compose(xi.inverse(), xj)))

    def jacobians(self, values):
        xi, xj = values[self.i], values[self.j]
        r0 = self.residual(values)
        Jr = se3_right_jacobian_inv(r0)
        rel = compose(xi.inverse(), xj)
        return r0, {
            self.j: Jr,
            self.i: -Jr @ se3_adjoint(rel.inverse()),
        }


class AnchoredBetweenFactor:
    """Encounter factor: c measures (D_R x_R) (-) (D_Q x_Q) in the global frame."""

    def __init__(
        self,
        ref_node: NodeId,
        query_node: NodeId,
        anchor_ref: NodeId,
        anchor_query: NodeId,
        encounter: Pose3,
        noise: NoiseModel,
    ):
        self.ref_node = ref_node
        self.query_node = query_node
        self.anchor_ref = anchor_ref
        self.anchor_query = anchor_query
        self.encounter = encounter
        self.noise = noise

    def nodes(self):
        return [self.ref_node, self.query_node, self.anchor_ref, self.anchor_query]

    def _terms(self, values):
        x_r = values[self.ref_node]
        x_q = values[self.query_node]
        d_r = values[self.anchor_ref]
        d_q = values[self.anchor_query]
        world_r = compose(d_r, x_r)
        world_q = compose(d_q, x_q)
        predicted = compose(world_q.inverse(), world_r)
        return x_r, x_q, d_r, d_q, predicted

    def residual(self, values):
        _, _, _, _, predicted = self._terms(values)
        return log_se3(compose(self.encounter.inverse(), predicted))

    def jacobians(self, values):
        x_r, x_q, d_r, d_q, predicted = self._terms(values)
        r0 = log_se3(compose(self.encounter.inverse(), predicted))
        Jr = se3_right_jacobian_inv(r0)
        inv_pred = predicted.inverse()  # x_R^-1 D_R^-1 D_Q x_Q
        return r0, {
            self.ref_node: Jr,
            self.anchor_ref: Jr @ se3_adjoint(x_r.inverse()),
            self.query_node: -Jr @ se3_adjoint(inv_pred),
            self.anchor_query: -Jr @ se3_adjoint(compose(inv_pred, x_q.inverse())),
        }


Factor = PriorFactor | BetweenFactor | AnchoredBetweenFactor


def residual(factor, values):
    """Whitened residual of a factor (robust kernel not applied)."""
    for n in factor.nodes():
        if n not in values:
            raise MissingVariable(f"factor references unknown node {n}")
    return factor.noise.whiten(factor.residual(values))


@dataclass
class GraphProblem:
    variables: dict[NodeId, Pose3]
    factors: list = field(default_factory=list)

    def add(self, factor):
        for n in factor.nodes():
            if n not in self.variables:
                raise MissingVariable(f"factor references unknown node {n}")
        self.factors.append(factor)


@dataclass
class SolveConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-6
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    relative_decrease_tol: float = 1e-12
    step_tol: float = 1e-12


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    factor_residual_norms: np.ndarray
    accepted_costs: list


def _total_cost(factors, values):
    cost = 0.0
    for f in factors:
        wr = f.noise.whiten(f.residual(values))
        cost += f.noise.robust_cost(float(wr @ wr))
    return cost


def solve(problem: GraphProblem, config: SolveConfig | None = None):
    """Batch Levenberg-Marquardt on the whitened robust least-squares objective."""
    config = config or SolveConfig()
    if not any(isinstance(f, PriorFactor) for f in problem.factors):
        raise SingularNormalEquations("graph has no prior factor; gauge is free")

    order = sorted(problem.variables)
    col = {n: 6 * k for k, n in enumerate(order)}
    n_cols = 6 * len(order)
    values = dict(problem.variables)

    cost = _total_cost(problem.factors, values)
    initial_cost = cost
    accepted = [cost]
    lam = config.lambda_init
    converged = False
    iters = 0

    for iters in range(1, config.max_iterations + 1):
        rows, cols, data = [], [], []
        rhs = np.zeros(6 * len(problem.factors))
        for fi, f in enumerate(problem.factors):
            r0, jacs = f.jacobians(values)
            wr = f.noise.whiten(r0)
            w = np.sqrt(f.noise.robust_weight(float(wr @ wr)))
            rhs[6 * fi : 6 * fi + 6] = w * wr
            inv_sig = 1.0 / f.noise.sigmas
            for node, J in jacs.items():
                Jw = w * (inv_sig[:, None] * J)
                c0 = col[node]
                for a in range(6):
                    for b in range(6):
                        rows.append(6 * fi + a)
                        cols.append(c0 + b)
                        data.append(Jw[a, b])
        J = sp.csr_matrix(
            (data, (rows, cols)), shape=(6 * len(problem.factors), n_cols)
        )
        H = (J.T @ J).tocsc()
        g = J.T @ rhs

        accepted_step = False
        for _ in range(12):
            damped = H + sp.diags(lam * H.diagonal() + 1e-300)
            try:
                delta = spla.spsolve(damped, -g)
            except Exception as e:  # singular factorization
                raise SingularNormalEquations(str(e)) from e
            if not np.all(np.isfinite(delta)):
                raise SingularNormalEquations("normal equations produced non-finite step")
            trial = {
                n: compose(values[n], exp_se3(delta[col[n] : col[n] + 6])) for n in order
            }
            trial_cost = _total_cost(problem.factors, trial)
            if trial_cost <= cost:
                values = trial
                prev_cost = cost
                cost = trial_cost
                accepted.append(cost)
                lam = max(lam * config.lambda_down, 1e-12)
                accepted_step = True
                step_norm = float(np.linalg.norm(delta))
                break
            lam *= config.lambda_up
        if not accepted_step:
            break
        if not np.isfinite(cost):
            raise NotConverged("cost diverged to non-finite value")
        if (
            prev_cost - cost <= config.relative_decrease_tol * max(prev_cost, 1e-300)
            or step_norm <= config.step_tol
        ):
            converged = True
            break

    norms = np.array(
        [float(np.linalg.norm(f.noise.whiten(f.residual(values)))) for f in problem.factors]
    )
    report = SolveReport(
        iterations=iters,
        initial_cost=initial_cost,
        final_cost=cost,
        converged=converged,
        factor_residual_norms=norms,
        accepted_costs=accepted,
    )
    return values, report


def to_world(values, anchor: Pose3, session: Session) -> Trajectory:
    """Left-compose every session pose with its solved anchor."""
    items = []
    for kf in session.keyframes:
        node = (session.frame_label, kf.index)
        pose = values.get(node, kf.odom_pose)
        items.append((kf.timestamp, compose(anchor, pose)))
    return Trajectory(items)
