"""Energy-based solver: minimize the discrete potential energy of the particle cloud.

The loss is

    sum_i psi(F_i) V_i - sum_i f_b . phi_i V_i - sum_t tbar . phi_t A_t + W_u * mean |u_d - ubar|^2

with ``phi = X + u`` and ``F = I + Grad u``. Only first spatial derivatives of
the network are needed. The strain-energy node on the tape has the exact
vector-Jacobian product ``V_i P(F_i)``.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import material as mat
from .errors import Diverged, NonFiniteGradient, NonFiniteLoss, NonPositiveJacobian
from .neural_field import DisplacementField, flatten
from .sampling import DIRICHLET, NEUMANN, ParticleCloud


@dataclass
class DemProblem:
    """Boundary-value problem on a particle cloud.

    ``tractions`` and ``dirichlet`` map region names to 3-vectors. Neumann
    regions without an entry are traction free.
    """

    cloud: ParticleCloud
    material: mat.MaterialParams
    body_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tractions: dict = field(default_factory=dict)
    dirichlet: dict = field(default_factory=dict)
    boundary_weight: float | None = None
    on_inverted: str = "raise"

    def __post_init__(self):
        self.body_force = np.asarray(self.body_force, dtype=np.float64).reshape(3)
        names = {r.name: r for r in self.cloud.regions}
        for label, table in ((NEUMANN, self.tractions), (DIRICHLET, self.dirichlet)):
            for name in table:
                if name not in names:
                    raise ValueError(f"region {name!r} is not present in the cloud")
                if names[name].kind != label or names[name].count < 1:
                    raise ValueError(f"region {name!r} has the wrong kind or no particles")
        if self.boundary_weight is None:
            lo, hi = self.cloud.bounds
            self.boundary_weight = 100.0 * self.material.mu * float(np.prod(hi - lo))
        if not self.boundary_weight > 0:
            raise ValueError("boundary weight W_u must be positive")
        self._index()

    def _index(self):
        c = self.cloud
        self.dirichlet_idx = np.flatnonzero(c.labels == DIRICHLET)
        ubar = np.zeros((len(c), 3))
        for name, value in self.dirichlet.items():
            ubar[c.region_mask(name)] = np.asarray(value, dtype=np.float64)
        self.ubar = ubar[self.dirichlet_idx]
        traction = np.zeros((len(c), 3))
        for name, value in self.tractions.items():
            traction[c.region_mask(name)] = np.asarray(value, dtype=np.float64)
        self.traction = traction
        self.neumann_idx = np.flatnonzero(c.labels == NEUMANN)

    @property
    def bbox_diagonal(self):
        lo, hi = self.cloud.bounds
        return float(np.linalg.norm(hi - lo))

    def external_load(self, scale=1.0):
        """Per-particle dead load ``f_b V + tbar A`` (force units)."""
        c = self.cloud
        return scale * (self.body_force[None, :] * c.volume_weight[:, None] + self.traction * c.area_weight[:, None])


def _strain_energy_node(grad_u, V, material, on_inverted):
    F = grad_u.value + np.eye(3)
    try:
        psi = mat.strain_energy_density(F, material, on_inverted)
        P = mat.first_pk_stress(F, material, on_inverted)
    except NonPositiveJacobian as exc:
        raise NonFiniteLoss(f"det F <= 0 at {len(exc.indices) if exc.indices is not None else 'some'} particle(s)") from None
    value = float(np.dot(psi, V))
    return ad.custom(value, [(grad_u, lambda g: g * (V[:, None, None] * P))])


def _loss_terms(tape, problem: DemProblem, load_scale=1.0):
    c = problem.cloud
    ev = tape.evaluate(c.positions, order=1)
    strain = _strain_energy_node(ev.grad_u, c.volume_weight, problem.material, problem.on_inverted)
    load = problem.external_load(load_scale)
    # work of dead loads on phi = X + u; the X part is a constant offset
    work_const = float(np.sum(load * c.positions))
    work = ad.tsum(ev.u * load) + work_const
    energy = strain - work
    if len(problem.dirichlet_idx):
        ud = tape.evaluate(c.positions[problem.dirichlet_idx], order=0).u
        diff = ud - problem.ubar
        boundary = ad.mean(ad.tsum(diff * diff, axis=1))
    else:
        boundary = ad.Tensor(0.0)
    total = energy + problem.boundary_weight * boundary
    return total, {"energy": energy, "boundary": boundary}


def potential_energy_loss(field: DisplacementField, problem: DemProblem, load_scale=1.0) -> float:
    """Discrete potential energy of the cloud under the field (no penalty term)."""
    c = problem.cloud
    u = field.forward(c.positions)
    F = field.spatial_jacobian(c.positions) + np.eye(3)
    try:
        psi = mat.strain_energy_density(F, problem.material, problem.on_inverted)
    except NonPositiveJacobian:
        raise NonFiniteLoss("det F <= 0 at one or more particles") from None
    load = problem.external_load(load_scale)
    return float(np.dot(psi, c.volume_weight) - np.sum(load * (c.positions + u)))


def boundary_loss(field: DisplacementField, problem: DemProblem) -> float:
    """Mean squared Dirichlet mismatch over Dirichlet particles."""
    if len(problem.dirichlet_idx) == 0:
        raise ValueError("problem has no Dirichlet particles")
    u = field.forward(problem.cloud.positions[problem.dirichlet_idx])
    return float(np.mean(np.sum((u - problem.ubar) ** 2, axis=1)))


def total_loss(field, problem, load_scale=1.0):
    """``potential_energy_loss + W_u * boundary_loss``, the quantity :func:`train` minimizes."""
    energy = potential_energy_loss(field, problem, load_scale)
    if len(problem.dirichlet_idx) == 0:
        return energy
    return energy + problem.boundary_weight * boundary_loss(field, problem)


# -- training ----------------------------------------------------------------
@dataclass
class OptimizerConfig:
    epochs: int = 2000
    lr: float = 1e-3
    lr_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-6
    window: int = 100
    load_steps: int = 1
    refine_iters: int = 0
    refine_history: int = 20
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.load_steps < 1:
            raise ValueError("load_steps must be >= 1")
        if self.lr_final is not None and not 0 < self.lr_final <= self.lr:
            raise ValueError("lr_final must lie in (0, lr]")

    def learning_rate(self, t):
        """Step size at epoch ``t``: geometric decay from ``lr`` to ``lr_final``."""
        if self.lr_final is None or self.epochs == 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (t / (self.epochs - 1))


@dataclass
class TrainReport:
    solver: str
    loss_history: dict = field(default_factory=lambda: {"total": [], "energy": [], "boundary": []})
    timings: dict = field(default_factory=dict)
    epochs: int = 0
    refine_iterations: int = 0
    refine_message: str = ""
    converged: bool = False
    epoch_time: float = 0.0
    counters: dict = field(default_factory=dict)
    displacements: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def record(self, parts):
        for key, value in parts.items():
            self.loss_history.setdefault(key, []).append(float(value))

    def table(self):
        """Timing rows in the order training / predict / render."""
        keys = ("sampling", "training", "prediction", "render")
        return {k: self.timings.get(k) for k in keys}

    def to_dict(self):
        d = asdict(self)
        d.pop("displacements")
        d["timing_table"] = self.table()
        if self.displacements is not None:
            u = self.displacements
            d["displacement_summary"] = {
                "count": int(len(u)),
                "max_norm": float(np.max(np.linalg.norm(u, axis=1))) if len(u) else 0.0,
                "mean": np.mean(u, axis=0).tolist() if len(u) else [0.0, 0.0, 0.0],
            }
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _moving_converged(history, window, tol):
    if len(history) <= window:
        return False
    now, then = history[-1], history[-1 - window]
    return abs(now - then) <= tol * max(abs(now), abs(then), 1e-300)


def run_optimizer(field: DisplacementField, loss_fn, cfg: OptimizerConfig, report: TrainReport):
    """Adam over all epochs (split across load steps) then optional L-BFGS.

    ``loss_fn(tape, load_scale)`` returns ``(total, parts)`` tape tensors.
    """
    theta = field.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    best = np.inf
    per_step = [cfg.epochs // cfg.load_steps + (1 if s < cfg.epochs % cfg.load_steps else 0)
                for s in range(cfg.load_steps)]
    t = 0
    t0 = time.perf_counter()
    for step, n_epochs in enumerate(per_step, 1):
        scale = step / cfg.load_steps
        best = np.inf
        stalled_at = len(report.loss_history["total"])
        for _ in range(n_epochs):
            field.set_flat(theta)
            tape = field.tape()
            try:
                total, parts = loss_fn(tape, scale)
            except NonFiniteLoss as exc:
                raise Diverged(f"epoch {t}: {exc}", epoch=t) from None
            value = float(total.value)
            if not np.isfinite(value):
                raise Diverged(f"epoch {t}: loss is not finite", epoch=t)
            # the watchdog arms after one window: Adam's first steps are sign-like and
            # may overshoot a near-zero initial loss by far more than 10x
            armed = t >= cfg.window
            if armed and np.isfinite(best) and value - best > cfg.divergence_factor * max(abs(best), 1e-12):
                raise Diverged(f"epoch {t}: loss {value:.6g} rose more than {cfg.divergence_factor}x above best {best:.6g}",
                               epoch=t)
            if armed:
                best = min(best, value)
            report.record({"total": value, **{k: float(p.value) for k, p in parts.items()}})
            grads = tape.gradients(ad.backward(total))
            g = flatten(grads)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"epoch {t}: non-finite parameter gradient")
            lr = cfg.learning_rate(t)
            t += 1
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1**t)
            vhat = v / (1.0 - cfg.beta2**t)
            theta = theta - lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if step == cfg.load_steps and _moving_converged(report.loss_history["total"][stalled_at:], cfg.window, cfg.tol):
                report.converged = True
                break
    field.set_flat(theta)
    report.epochs = t
    report.epoch_time = (time.perf_counter() - t0) / max(t, 1)
    if cfg.refine_iters > 0:
        _refine(field, loss_fn, cfg, report)
    return field


def _refine(field, loss_fn, cfg, report):
    """Quasi-Newton finish at full load (limited-memory BFGS)."""
    from scipy.optimize import minimize

    last = {}

    def evaluate(theta):
        field.set_flat(theta)
        tape = field.tape()
        total, parts = loss_fn(tape, 1.0)
        g = flatten(tape.gradients(ad.backward(total)))
        return float(total.value), g, parts

    theta0 = field.get_flat()
    f0, g0, _ = evaluate(theta0)
    # inadmissible trial points (det F <= 0) get a large finite value so the
    # line search backtracks instead of stopping on a non-finite objective
    barrier = abs(f0) * 1e6 + 1.0

    def fun(theta):
        try:
            f, g, parts = evaluate(theta)
        except NonFiniteLoss:
            return barrier, -last.get("g", g0)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return barrier, -last.get("g", g0)
        last["g"] = g
        last["parts"] = {"total": f, **{k: float(p.value) for k, p in parts.items()}}
        return f, g

    def callback(theta):
        if "parts" in last:
            report.record(last["parts"])

    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": cfg.refine_iters, "maxcor": cfg.refine_history,
                            "ftol": 1e-15, "gtol": 1e-12})
    field.set_flat(res.x)
    report.refine_iterations = int(res.nit)
    report.refine_message = str(res.message)
    hist = report.loss_history["total"]
    if not report.converged and res.status == 0 and res.nit > 1:
        report.converged = True
    elif not report.converged:
        report.converged = _moving_converged(hist, cfg.window, cfg.tol)
    if hist and not np.isfinite(hist[-1]):
        raise Diverged("quasi-Newton refinement produced a non-finite loss", epoch=report.epochs + res.nit)


def train(problem: DemProblem, field: DisplacementField, cfg: OptimizerConfig | None = None):
    """Minimize potential energy plus the Dirichlet penalty over the field parameters."""
    cfg = OptimizerConfig() if cfg is None else cfg
    report = TrainReport(solver="dem", config={"optimizer": asdict(cfg), "boundary_weight": problem.boundary_weight})
    t0 = time.perf_counter()
    run_optimizer(field, lambda tape, s: _loss_terms(tape, problem, s), cfg, report)
    report.timings["training"] = time.perf_counter() - t0
    u, _ = predict(field, problem.cloud.positions, report)
    report.displacements = u
    report.counters = {k: int(field.calls.get(k, 0)) for k in ("forward", "first_order", "second_order")}
    return field, report


def predict(field: DisplacementField, positions, report: TrainReport | None = None, batch=50_000):
    """Displacements and deformed positions ``X + u(X)``; timing goes to ``report``."""
    X = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    t0 = time.perf_counter()
    u = np.concatenate([field.forward(X[s:s + batch]) for s in range(0, len(X), batch)]) if len(X) else np.zeros((0, 3))
    if report is not None:
        report.timings["prediction"] = time.perf_counter() - t0
        report.timings["prediction_points"] = int(len(X))
    return u, X + u
