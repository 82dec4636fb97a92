"""
Lifted multi-step ARX predictor.

Lifted signals are stacked oldest sample first: ``u_p = col(u(t-Lp), ..., u(t-1))``,
``u_f = col(u(t), ..., u(t+Lf-1))`` and likewise for outputs. Block indices are zero-based.
"""
import logging

import numpy as np
import scipy.linalg

from ddpc_lab.exceptions import DimensionMismatch, OrderExceedsHorizon
from ddpc_lab.models import Horizons, LiftedPredictor, PaddedTheta, PredictorTheta

logger = logging.getLogger(__name__)


def _embed_index(structure, horizons: Horizons) -> np.ndarray:
    n_y, n_u = structure.n_y, structure.n_u
    u_offset = (horizons.n_lags - 1) * n_y * n_y
    embed = []
    for coord in structure.coordinates():
        if coord.family == "y":
            embed.append((coord.lag - 1) * n_y * n_y + coord.col * n_y + coord.row)
        else:
            embed.append(u_offset + coord.lag * n_y * n_u + coord.col * n_y + coord.row)
    return np.array(embed, dtype=int)


def pad_theta(theta: PredictorTheta, h: Horizons) -> PaddedTheta:
    """Place the identified coefficients at their lags; every other lag up to ``Lp+Lf-1`` is zero."""
    s = theta.structure
    if s.na > h.Lp or s.nb > h.Lp:
        raise OrderExceedsHorizon(f"ARX orders na={s.na}, nb={s.nb} exceed the past horizon Lp={h.Lp}")

    phi_y = np.zeros((h.n_lags, s.n_y, s.n_y))
    phi_u = np.zeros((h.n_lags, s.n_y, s.n_u))
    for lag in range(1, s.na + 1):
        phi_y[lag] = theta.phi_y(lag)
    for lag in range(s.first_input_lag, s.nb + 1):
        phi_u[lag] = theta.phi_u(lag)
    return PaddedTheta(phi_y=phi_y, phi_u=phi_u, embed=_embed_index(s, h), horizons=h)


def _block_toeplitz(coeffs: np.ndarray, n_rows: int, n_cols: int, lag_of) -> np.ndarray:
    n_out, n_in = coeffs.shape[1:]
    out = np.zeros((n_rows * n_out, n_cols * n_in))
    for k in range(n_rows):
        for ell in range(n_cols):
            lag = lag_of(k, ell)
            if lag is not None:
                out[k * n_out:(k + 1) * n_out, ell * n_in:(ell + 1) * n_in] = coeffs[lag]
    return out


def assemble(padded: PaddedTheta, h: Horizons) -> LiftedPredictor:
    """Build ``Psi_u, Psi_y, Phi_u, Phi_y`` and ``A = I - Phi_y`` from padded coefficients."""
    Lp, Lf = h.Lp, h.Lf
    n_y, n_u = padded.phi_u.shape[1:]

    def past_lag(k, ell):
        return Lp - ell + k

    Psi_u = _block_toeplitz(padded.phi_u, Lf, Lp, past_lag)
    Psi_y = _block_toeplitz(padded.phi_y, Lf, Lp, past_lag)
    Phi_u = _block_toeplitz(padded.phi_u, Lf, Lf, lambda k, ell: k - ell if k >= ell else None)
    Phi_y = _block_toeplitz(padded.phi_y, Lf, Lf, lambda k, ell: k - ell if k > ell else None)
    A = np.eye(n_y * Lf) - Phi_y
    return LiftedPredictor(Psi_u=Psi_u, Psi_y=Psi_y, Phi_u=Phi_u, Phi_y=Phi_y, A=A,
                           horizons=h, n_y=n_y, n_u=n_u)


def apply_a_inverse(lp: LiftedPredictor, rhs: np.ndarray) -> np.ndarray:
    """Forward substitution with the unit lower-triangular ``A``."""
    return scipy.linalg.solve_triangular(lp.A, rhs, lower=True, unit_diagonal=True, check_finite=False)


def check_lifted_lengths(n_y: int, n_u: int, h: Horizons, u_p, y_p, u_f):
    u_p = np.asarray(u_p, dtype=float).ravel()
    y_p = np.asarray(y_p, dtype=float).ravel()
    u_f = np.asarray(u_f, dtype=float).ravel()
    expected = (n_u * h.Lp, n_y * h.Lp, n_u * h.Lf)
    if (u_p.shape[0], y_p.shape[0], u_f.shape[0]) != expected:
        raise DimensionMismatch(f"Lifted signal lengths ({u_p.shape[0]}, {y_p.shape[0]}, {u_f.shape[0]}) "
                                f"do not match (u_p, y_p, u_f) = {expected}")
    return u_p, y_p, u_f


def free_response(lp: LiftedPredictor, u_p, y_p) -> np.ndarray:
    """``b = Psi_u u_p + Psi_y y_p``."""
    return lp.Psi_u @ u_p + lp.Psi_y @ y_p


def predict(lp: LiftedPredictor, u_p, y_p, u_f) -> np.ndarray:
    """Solve ``A y_f = Psi_u u_p + Psi_y y_p + Phi_u u_f``."""
    u_p, y_p, u_f = check_lifted_lengths(lp.n_y, lp.n_u, lp.horizons, u_p, y_p, u_f)
    return apply_a_inverse(lp, free_response(lp, u_p, y_p) + lp.Phi_u @ u_f)


def rollout_oracle(theta: PredictorTheta, u_p, y_p, u_f) -> np.ndarray:
    """Step-by-step ARX recursion with predicted outputs standing in for unknown future outputs."""
    s = theta.structure
    n_y, n_u = s.n_y, s.n_u
    u_p = np.asarray(u_p, dtype=float).reshape(-1, n_u)
    y_p = np.asarray(y_p, dtype=float).reshape(-1, n_y)
    u_f = np.asarray(u_f, dtype=float).reshape(-1, n_u)
    Lp, Lf = len(u_p), len(u_f)

    u = np.vstack([u_p, u_f])
    y = np.vstack([y_p, np.zeros((Lf, n_y))])
    for k in range(Lf):
        t = Lp + k
        y_hat = np.zeros(n_y)
        for lag in range(1, s.na + 1):
            if t - lag >= 0:
                y_hat += theta.phi_y(lag) @ y[t - lag]
        for lag in range(s.first_input_lag, s.nb + 1):
            if t - lag >= 0:
                y_hat += theta.phi_u(lag) @ u[t - lag]
        y[t] = y_hat
    return y[Lp:].ravel()
