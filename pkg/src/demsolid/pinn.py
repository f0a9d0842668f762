"""Strong-form solver: squared equilibrium residual plus traction and Dirichlet misfits.

The residual ``Div P + f_b`` needs second spatial derivatives of the network.
With ``G = F^-1`` and ``H[p, q, k] = d2 u_p / dX_q dX_k`` the divergence is

    (Div P)_j = mu H_jkk + (mu - lam ln J) G_kp H_pqk G_qj + lam G_qp H_pqk G_kj

which is assembled from tape operations so its parameter gradient is exact.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .dem import DemProblem, OptimizerConfig, TrainReport, predict, run_optimizer
from .errors import NonFiniteLoss
from .neural_field import DisplacementField
from .sampling import DOMAIN


@dataclass
class PinnProblem(DemProblem):
    residual_weight: float = 1.0
    traction_weight: float = 1.0

    def __post_init__(self):
        if self.boundary_weight is None:
            self.boundary_weight = 100.0
        super().__post_init__()
        if not (self.residual_weight > 0 and self.traction_weight > 0):
            raise ValueError("PINN loss weights must be positive")
        self.domain_idx = np.flatnonzero(self.cloud.labels == DOMAIN)
        normals = self.cloud.normals[self.neumann_idx]
        if len(normals) and not np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9):
            raise ValueError("Neumann particles need unit normals")


def _inverse_and_logdet(F: ad.Tensor):
    Fv = F.value
    J = np.linalg.det(Fv)
    if np.any(J <= 0) or not np.all(np.isfinite(J)):
        raise NonFiniteLoss("det F <= 0 at one or more particles")
    G = np.linalg.inv(Fv)
    GT = np.swapaxes(G, -1, -2)
    Ginv = ad.custom(G, [(F, lambda g: -np.einsum("nba,nbc,ndc->nad", G, g, G))])
    logJ = ad.custom(np.log(J), [(F, lambda g: g[:, None, None] * GT)])
    return Ginv, logJ


def stress_tensor(grad_u: ad.Tensor, material):
    """First Piola-Kirchhoff stress as a tape tensor."""
    F = grad_u + np.eye(3)
    G, logJ = _inverse_and_logdet(F)
    GT = ad.transpose(G, (0, 2, 1))
    lnJ = ad.reshape(logJ, (-1, 1, 1))
    return material.mu * (F - GT) + material.lam * lnJ * GT


def stress_divergence(grad_u: ad.Tensor, hess_u: ad.Tensor, material):
    F = grad_u + np.eye(3)
    G, logJ = _inverse_and_logdet(F)
    mu, lam = material.mu, material.lam
    trace = ad.einsum("njkl,kl->nj", hess_u, np.eye(3))
    t2 = ad.einsum("nkp,npqk,nqj->nj", G, hess_u, G)
    t3 = ad.einsum("nqp,npqk,nkj->nj", G, hess_u, G)
    coef = ad.reshape(mu - lam * logJ, (-1, 1))
    return mu * trace + coef * t2 + lam * t3


def _terms(tape, problem: PinnProblem, load_scale=1.0):
    c = problem.cloud
    parts = {}
    if len(problem.domain_idx):
        ev = tape.evaluate(c.positions[problem.domain_idx], order=2)
        r = stress_divergence(ev.grad_u, ev.hess_u, problem.material) + load_scale * problem.body_force
        parts["residual"] = ad.mean(ad.tsum(r * r, axis=1))
    else:
        parts["residual"] = ad.Tensor(0.0)
    if len(problem.neumann_idx):
        ev = tape.evaluate(c.positions[problem.neumann_idx], order=1)
        P = stress_tensor(ev.grad_u, problem.material)
        t = ad.einsum("njk,nk->nj", P, c.normals[problem.neumann_idx]) - load_scale * problem.traction[problem.neumann_idx]
        parts["traction"] = ad.mean(ad.tsum(t * t, axis=1))
    else:
        parts["traction"] = ad.Tensor(0.0)
    if len(problem.dirichlet_idx):
        ud = tape.evaluate(c.positions[problem.dirichlet_idx], order=0).u
        d = ud - problem.ubar
        parts["boundary"] = ad.mean(ad.tsum(d * d, axis=1))
    else:
        parts["boundary"] = ad.Tensor(0.0)
    total = (problem.residual_weight * parts["residual"] + problem.traction_weight * parts["traction"]
             + problem.boundary_weight * parts["boundary"])
    return total, parts


def equilibrium_loss(field: DisplacementField, problem: PinnProblem, load_scale=1.0) -> float:
    """Mean over domain particles of ``|Div P(F) + f_b|^2``."""
    c = problem.cloud
    X = c.positions[problem.domain_idx]
    ev = field._trace(X, order=2, requires_grad=False)
    r = stress_divergence(ev.grad_u, ev.hess_u, problem.material).value + load_scale * problem.body_force
    return float(np.mean(np.sum(r * r, axis=1)))


def traction_loss(field: DisplacementField, problem: PinnProblem, load_scale=1.0) -> float:
    """Mean over Neumann particles of ``|P N - tbar|^2``."""
    c = problem.cloud
    idx = problem.neumann_idx
    ev = field._trace(c.positions[idx], order=1, requires_grad=False)
    P = stress_tensor(ev.grad_u, problem.material).value
    t = np.einsum("njk,nk->nj", P, c.normals[idx]) - load_scale * problem.traction[idx]
    return float(np.mean(np.sum(t * t, axis=1)))


def pinn_train(problem: PinnProblem, field: DisplacementField, cfg: OptimizerConfig | None = None):
    """Minimize ``W_R MSE_R + W_t MSE_t + W_u MSE_u`` over the field parameters."""
    cfg = OptimizerConfig() if cfg is None else cfg
    report = TrainReport(solver="pinn", loss_history={"total": [], "residual": [], "traction": [], "boundary": []},
                         config={"optimizer": asdict(cfg), "weights": {
                             "residual": problem.residual_weight, "traction": problem.traction_weight,
                             "boundary": problem.boundary_weight}})
    t0 = time.perf_counter()
    run_optimizer(field, lambda tape, s: _terms(tape, problem, s), cfg, report)
    report.timings["training"] = time.perf_counter() - t0
    u, _ = predict(field, problem.cloud.positions, report)
    report.displacements = u
    report.counters = {k: int(field.calls.get(k, 0)) for k in ("forward", "first_order", "second_order")}
    return field, report
