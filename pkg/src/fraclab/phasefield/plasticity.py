"""Rate-independent J2 (von Mises) plasticity with isotropic hardening.

Radial return in plane strain: stress and plastic strain carry the
out-of-plane component, stored as 4-vectors [xx, yy, zz, xy] with tensor
(not engineering) shear. The yield function is f = sqrt(3/2 s:s) - sigma_y(alpha)
with sigma_y(alpha) = sigma_y + H_mod * alpha; flow is associative, so the
corrector scales the deviator straight back onto the yield surface and the
consistent tangent is elastic minus a rank-one deviatoric correction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import Elastoplastic, MaterialSpec, lame_parameters


@dataclass
class PlasticPoint:
    """Committed plastic state at one quadrature point."""

    eps_p: np.ndarray = field(default_factory=lambda: np.zeros(4))
    alpha: float = 0.0


def elastic_trial_stress(eps_e: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """sigma = lam tr(eps) I + 2 mu eps on 4-vectors (... , 4)."""
    tr = eps_e[..., 0] + eps_e[..., 1] + eps_e[..., 2]
    sig = 2.0 * mu * eps_e
    sig[..., :3] += lam * tr[..., None]
    return sig


def equivalent_stress(sig: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(deviator, von Mises q) of stress 4-vectors."""
    p = (sig[..., 0] + sig[..., 1] + sig[..., 2]) / 3.0
    s = sig.copy()
    s[..., :3] -= p[..., None]
    ss = (s[..., 0] ** 2 + s[..., 1] ** 2 + s[..., 2] ** 2 + 2.0 * s[..., 3] ** 2)
    return s, np.sqrt(1.5 * ss)


def radial_return_batch(
    sig_trial: np.ndarray,
    alpha: np.ndarray,
    mu: float,
    h_mod: float,
    sigma_y: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized return map: (stress, dgamma, s_trial, q_trial).

    Elastic points (f_trial <= 0) pass through with dgamma = 0. Plastic
    points take dgamma = f_trial / (3 mu + H) and the deviator is scaled by
    1 - 3 mu dgamma / q_trial, which lands exactly on the yield surface.
    """
    denom = 3.0 * mu + h_mod
    if denom <= 0.0:
        raise ValueError(f"invalid material: 3*mu + H_mod = {denom} must be positive")
    s_tr, q_tr = equivalent_stress(sig_trial)
    f_tr = q_tr - (sigma_y + h_mod * alpha)
    dgamma = np.where(f_tr > 0.0, f_tr / denom, 0.0)
    safe_q = np.where(q_tr > 0.0, q_tr, 1.0)
    scale = 1.0 - 3.0 * mu * dgamma / safe_q
    sig = sig_trial + (scale[..., None] - 1.0) * s_tr
    return sig, dgamma, s_tr, q_tr


def consistent_tangent_eng(
    lam: float,
    mu: float,
    dgamma: np.ndarray,
    s_tr: np.ndarray,
    q_tr: np.ndarray,
    h_mod: float,
) -> np.ndarray:
    """Plane-strain 3x3 algorithmic tangent d sigma / d [exx, eyy, gxy].

    Elastic points get the elastic matrix; plastic points get
    K_b I(x)I + 2 mu beta I_dev - c3 (s_tr (x) s_tr), reduced to the
    engineering-Voigt in-plane block (symmetric by construction).
    """
    k_bulk = lam + 2.0 * mu / 3.0
    shape = dgamma.shape
    out = np.zeros(shape + (3, 3))

    j3 = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    pdev = np.array(
        [
            [2.0 / 3.0, -1.0 / 3.0, 0.0],
            [-1.0 / 3.0, 2.0 / 3.0, 0.0],
            [0.0, 0.0, 0.5],
        ]
    )

    plastic = dgamma > 0.0
    safe_q = np.where(q_tr > 0.0, q_tr, 1.0)
    beta = np.where(plastic, 1.0 - 3.0 * mu * dgamma / safe_q, 1.0)
    c3 = np.where(
        plastic,
        (9.0 * mu**2 / safe_q**2) * (1.0 / (3.0 * mu + h_mod) - dgamma / safe_q),
        0.0,
    )
    out += k_bulk * j3
    out += (2.0 * mu * beta)[..., None, None] * pdev
    svec = s_tr[..., (0, 1, 3)]
    out -= c3[..., None, None] * svec[..., :, None] * svec[..., None, :]
    return out


def radial_return(
    sig_trial: np.ndarray,
    state: PlasticPoint,
    material: MaterialSpec,
) -> tuple[np.ndarray, PlasticPoint, np.ndarray]:
    """Single-point return map: (stress, updated state, consistent tangent).

    sig_trial is the elastic trial stress 4-vector [xx, yy, zz, xy].
    """
    el = material.elastic
    if not isinstance(el, Elastoplastic):
        raise ValueError(f"{material.name}: radial return needs an elastoplastic material")
    lam, mu = lame_parameters(el.E, el.nu)
    sig_trial = np.asarray(sig_trial, dtype=np.float64)
    if sig_trial.shape != (4,):
        raise ValueError(f"trial stress must be a 4-vector, got shape {sig_trial.shape}")

    sig, dgamma, s_tr, q_tr = radial_return_batch(
        sig_trial[None, :], np.array([state.alpha]), mu, el.H_mod, el.sigma_y
    )
    dg = float(dgamma[0])
    new = PlasticPoint(eps_p=state.eps_p.copy(), alpha=state.alpha)
    if dg > 0.0:
        flow = 1.5 * s_tr[0] / q_tr[0]
        new.eps_p = new.eps_p + dg * flow
        new.alpha += dg
    tangent = consistent_tangent_eng(lam, mu, dgamma, s_tr, q_tr, el.H_mod)[0]
    return sig[0], new, tangent
