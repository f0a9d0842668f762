"""Compressible Neo-Hookean constitutive model.

Strain energy per unit reference volume::

    psi(F) = mu/2 (I1 - 3) - mu ln J + lam/2 (ln J)^2,   I1 = tr(F^T F), J = det F

All functions accept a single 3x3 matrix or a batch of shape ``(..., 3, 3)``
and evaluate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonPositiveJacobian

# det(F) below this value is treated as inverted in clamp mode
J_FLOOR = 1e-3


def lame_from_young_poisson(E: float, nu: float) -> tuple[float, float]:
    """Convert Young's modulus and Poisson ratio to the Lamé pair (mu, lam)."""
    E = float(E)
    nu = float(nu)
    if not np.isfinite(E) or E <= 0.0:
        raise DomainError(f"Young's modulus must be positive, got {E}")
    if not (-1.0 < nu < 0.5):
        raise DomainError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def young_poisson_from_lame(mu: float, lam: float) -> tuple[float, float]:
    E = mu * (3.0 * lam + 2.0 * mu) / (lam + mu)
    nu = lam / (2.0 * (lam + mu))
    return E, nu


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic Neo-Hookean material.

    Only ``young_modulus`` and ``poisson_ratio`` are stored; ``mu`` and ``lam``
    are derived on construction so the pair can never drift out of sync.
    Negative first Lamé parameters (auxetic materials) are rejected.
    """

    young_modulus: float
    poisson_ratio: float
    mu: float = field(init=False)
    lam: float = field(init=False)

    def __post_init__(self):
        mu, lam = lame_from_young_poisson(self.young_modulus, self.poisson_ratio)
        if lam < 0.0:
            raise DomainError(
                f"Poisson ratio {self.poisson_ratio} gives lambda < 0; only lambda >= 0 is supported"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_lame(cls, mu: float, lam: float) -> "MaterialParams":
        E, nu = young_poisson_from_lame(mu, lam)
        return cls(E, nu)

    def to_dict(self):
        return {
            "young_modulus": self.young_modulus,
            "poisson_ratio": self.poisson_ratio,
            "mu": self.mu,
            "lam": self.lam,
        }


def det3(F):
    F = np.asarray(F, dtype=np.float64)
    return (
        F[..., 0, 0] * (F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1])
        - F[..., 0, 1] * (F[..., 1, 0] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 0])
        + F[..., 0, 2] * (F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0])
    )


def cofactor3(F):
    """Cofactor matrix, i.e. d(det F)/dF. Equals det(F) F^{-T} when F is invertible."""
    F = np.asarray(F, dtype=np.float64)
    C = np.empty_like(F)
    C[..., 0, 0] = F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1]
    C[..., 0, 1] = F[..., 1, 2] * F[..., 2, 0] - F[..., 1, 0] * F[..., 2, 2]
    C[..., 0, 2] = F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0]
    C[..., 1, 0] = F[..., 0, 2] * F[..., 2, 1] - F[..., 0, 1] * F[..., 2, 2]
    C[..., 1, 1] = F[..., 0, 0] * F[..., 2, 2] - F[..., 0, 2] * F[..., 2, 0]
    C[..., 1, 2] = F[..., 0, 1] * F[..., 2, 0] - F[..., 0, 0] * F[..., 2, 1]
    C[..., 2, 0] = F[..., 0, 1] * F[..., 1, 2] - F[..., 0, 2] * F[..., 1, 1]
    C[..., 2, 1] = F[..., 0, 2] * F[..., 1, 0] - F[..., 0, 0] * F[..., 1, 2]
    C[..., 2, 2] = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return C


def invariants(F):
    """Return (I1, J) for a batch of deformation gradients."""
    F = np.asarray(F, dtype=np.float64)
    I1 = np.einsum("...ij,...ij->...", F, F)
    return I1, det3(F)


def _check_jacobian(J, on_inverted):
    if on_inverted not in ("raise", "clamp"):
        raise ValueError(f"on_inverted must be 'raise' or 'clamp', got {on_inverted!r}")
    bad = ~(J > 0.0)
    if on_inverted == "raise" and np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise NonPositiveJacobian(
            f"det(F) <= 0 at {idx.size} point(s); first index {idx[0]}", indices=idx
        )
    return bad


def _penalty_stiffness(m: MaterialParams):
    return 1e3 * (m.mu + m.lam)


def strain_energy_density(F, m: MaterialParams, on_inverted="raise"):
    """Neo-Hookean energy per unit reference volume.

    With ``on_inverted="clamp"`` points with ``det(F) < J_FLOOR`` get the energy at
    ``J_FLOOR`` plus a quadratic penalty in ``J_FLOOR - det(F)``, which keeps the
    value finite for degenerate states.
    """
    I1, J = invariants(F)
    _check_jacobian(J, on_inverted)
    if on_inverted == "clamp":
        Jc = np.maximum(J, J_FLOOR)
        gap = np.maximum(J_FLOOR - J, 0.0)
        lnJ = np.log(Jc)
        return 0.5 * m.mu * (I1 - 3.0) - m.mu * lnJ + 0.5 * m.lam * lnJ**2 + _penalty_stiffness(m) * gap**2
    lnJ = np.log(J)
    return 0.5 * m.mu * (I1 - 3.0) - m.mu * lnJ + 0.5 * m.lam * lnJ**2


def first_pk_stress(F, m: MaterialParams, on_inverted="raise"):
    """First Piola-Kirchhoff stress P = dpsi/dF = mu (F - F^-T) + lam ln(J) F^-T."""
    F = np.asarray(F, dtype=np.float64)
    J = det3(F)
    _check_jacobian(J, on_inverted)
    cof = cofactor3(F)
    if on_inverted == "clamp":
        Jc = np.maximum(J, J_FLOOR)
        lnJ = np.log(Jc)
        gap = np.maximum(J_FLOOR - J, 0.0)
        # d/dJ of the clamped volumetric part; zero below the floor
        dvol = np.where(J >= J_FLOOR, (-m.mu + m.lam * lnJ) / Jc, 0.0)
        dvol = dvol - 2.0 * _penalty_stiffness(m) * gap
        return m.mu * F + dvol[..., None, None] * cof
    FinvT = cof / J[..., None, None]
    lnJ = np.log(J)
    return m.mu * (F - FinvT) + (m.lam * lnJ)[..., None, None] * FinvT


def elasticity_tangent(F, m: MaterialParams):
    """Fourth-order tangent A[..., j, k, p, q] = dP_jk / dF_pq.

    A = mu I + (mu - lam ln J) Finv_qj Finv_kp + lam Finv_kj Finv_qp
    """
    F = np.asarray(F, dtype=np.float64)
    J = det3(F)
    _check_jacobian(J, "raise")
    Finv = np.linalg.inv(F)
    lnJ = np.log(J)
    eye = np.eye(3)
    A = m.mu * np.einsum("jp,kq->jkpq", eye, eye)
    A = A + np.einsum("...,...qj,...kp->...jkpq", m.mu - m.lam * lnJ, Finv, Finv)
    A = A + m.lam * np.einsum("...kj,...qp->...jkpq", Finv, Finv)
    return A
