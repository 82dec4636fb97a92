"""
First-order sensitivity of the implicit lifted predictor with respect to the ARX coefficients.

The placement matrices ``E_i`` of each coordinate are never formed; ``E_i v`` is realized by
gathering entries of ``v`` at the coordinate's block positions.
"""
import functools
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ddpc_lab.exceptions import DimensionMismatch, EmptyTaskSet, ZeroTrace
from ddpc_lab.lifted import check_lifted_lengths, apply_a_inverse, assemble, free_response, pad_theta
from ddpc_lab.models import (
    ArxStructure,
    Horizons,
    PlacementEntry,
    PlacementIndex,
    PredictorTheta,
    SensitivityBundle,
    TaskPoint,
)
from ddpc_lab.numerics import is_psd, symmetrize

logger = logging.getLogger(__name__)

MATRICES = ("Psi_u", "Psi_y", "Phi_u", "Phi_y")


def _positions(lag: int, h: Horizons):
    # past block (k, l) carries lag Lp - l + k, future block (k, l) carries lag k - l
    k = np.arange(h.Lf)
    past_col = h.Lp + k - lag
    in_past = (past_col >= 0) & (past_col < h.Lp)
    future_col = k - lag
    in_future = future_col >= 0
    past = np.stack([k[in_past], past_col[in_past]], axis=1)
    future = np.stack([k[in_future], future_col[in_future]], axis=1)
    return past, future


@functools.lru_cache(maxsize=32)
def placements(structure: ArxStructure, h: Horizons) -> PlacementIndex:
    """Zero-based ``(block_row, block_col)`` positions of every identified coordinate."""
    entries = []
    for coord in structure.coordinates():
        past, future = _positions(coord.lag, h)
        empty = np.zeros((0, 2), dtype=int)
        if coord.family == "u":
            positions = {"Psi_u": past, "Psi_y": empty, "Phi_u": future, "Phi_y": empty}
        else:
            positions = {"Psi_u": empty, "Psi_y": past, "Phi_u": empty, "Phi_y": future}
        entries.append(PlacementEntry(coordinate=coord, positions=positions))
    return PlacementIndex(structure=structure, horizons=h, entries=entries)


def _gather(index: PlacementIndex, past_u: np.ndarray, past_y: np.ndarray,
            future_u: np.ndarray, future_y: np.ndarray) -> np.ndarray:
    """Stack ``E^Psi_u_i past_u + E^Psi_y_i past_y + E^Phi_u_i future_u + E^Phi_y_i future_y``.

    Signals are shaped ``(samples, channels, width)``; the result is ``(n_theta, n_y Lf, width)``.
    """
    n_y = index.structure.n_y
    width = past_u.shape[2]
    sources = {"Psi_u": past_u, "Psi_y": past_y, "Phi_u": future_u, "Phi_y": future_y}
    out = np.zeros((len(index.entries), n_y * index.horizons.Lf, width))
    for i, entry in enumerate(index.entries):
        coord = entry.coordinate
        for name in MATRICES:
            pos = entry.positions[name]
            if len(pos):
                out[i, pos[:, 0] * n_y + coord.row, :] += sources[name][pos[:, 1], coord.col, :]
    return out


def _columns(G: np.ndarray) -> np.ndarray:
    return G[:, :, 0].T


def jacobian(theta_bar: PredictorTheta, h: Horizons,
             task: TaskPoint) -> Tuple[np.ndarray, SensitivityBundle]:
    """Jacobian of ``y_f`` with respect to the identified coordinates, plus its affine split in ``u_f``."""
    s = theta_bar.structure
    n_y, n_u, Lp, Lf = s.n_y, s.n_u, h.Lp, h.Lf
    u_p, y_p, u_f = check_lifted_lengths(n_y, n_u, h, task.u_p, task.y_p, task.u_f)

    lp = assemble(pad_theta(theta_bar, h), h)
    index = placements(s, h)

    b = free_response(lp, u_p, y_p)
    y_free = apply_a_inverse(lp, b)
    M = apply_a_inverse(lp, lp.Phi_u)
    y_f = y_free + M @ u_f

    past_u = u_p.reshape(Lp, n_u, 1)
    past_y = y_p.reshape(Lp, n_y, 1)

    G = _gather(index, past_u, past_y, u_f.reshape(Lf, n_u, 1), y_f.reshape(Lf, n_y, 1))
    J = apply_a_inverse(lp, _columns(G))

    G0 = _gather(index, past_u, past_y, np.zeros((Lf, n_u, 1)), y_free.reshape(Lf, n_y, 1))
    J0 = apply_a_inverse(lp, _columns(G0))

    width = n_u * Lf
    G1 = _gather(index, np.zeros((Lp, n_u, width)), np.zeros((Lp, n_y, width)),
                 np.eye(width).reshape(Lf, n_u, width), M.reshape(Lf, n_y, width))
    n_theta = s.n_theta
    stacked = G1.transpose(1, 0, 2).reshape(n_y * Lf, n_theta * width)
    J1 = apply_a_inverse(lp, stacked).reshape(n_y * Lf, n_theta, width).transpose(1, 0, 2)

    bundle = SensitivityBundle(J0=J0, J1=J1, theta_bar=theta_bar, u_p=u_p, y_p=y_p)
    return J, bundle


def _resolve_jacobian(source: Union[np.ndarray, SensitivityBundle], u_f) -> np.ndarray:
    if isinstance(source, SensitivityBundle):
        if u_f is None:
            raise ValueError("u_f is required to evaluate a sensitivity bundle")
        return source.jacobian_at(u_f)
    return np.asarray(source, dtype=float)


def output_covariance(source: Union[np.ndarray, SensitivityBundle], Sigma_theta: np.ndarray,
                      u_f: Optional[np.ndarray] = None) -> np.ndarray:
    """Linearized predicted-output covariance ``J Sigma_theta J'``."""
    J = _resolve_jacobian(source, u_f)
    Sigma_theta = np.asarray(Sigma_theta, dtype=float)
    if Sigma_theta.shape != (J.shape[1], J.shape[1]):
        raise DimensionMismatch(f"Sigma_theta has shape {Sigma_theta.shape}, Jacobian has {J.shape[1]} columns")
    return symmetrize(J @ Sigma_theta @ J.T)


def fce_term(bundle: SensitivityBundle, Sigma_theta: np.ndarray, Q_lift: np.ndarray, u_f) -> float:
    """``tr(J' Q J Sigma_theta)`` at the given future input."""
    J = bundle.jacobian_at(u_f)
    return float(np.sum((J.T @ Q_lift @ J) * symmetrize(np.asarray(Sigma_theta, dtype=float))))


def fce_quadratic(bundle: SensitivityBundle, Sigma_theta: np.ndarray,
                  Q_lift: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Expand the uncertainty term as ``u' Hq u + 2 hlin' u + c0``."""
    Sigma = symmetrize(np.asarray(Sigma_theta, dtype=float))
    J0, J1 = bundle.J0, bundle.J1
    if Sigma.shape != (J1.shape[0], J1.shape[0]):
        raise DimensionMismatch(f"Sigma_theta has shape {Sigma.shape}, bundle has {J1.shape[0]} coordinates")

    QJ1 = np.einsum("mk,jkq->jmq", Q_lift, J1)
    weighted = np.einsum("ij,jmq->imq", Sigma, QJ1)
    Hq = symmetrize(np.einsum("imp,imq->pq", J1, weighted))
    hlin = np.einsum("imp,mj,ij->p", J1, Q_lift @ J0, Sigma)
    c0 = float(np.sum((J0.T @ Q_lift @ J0) * Sigma))

    if not is_psd(Hq):
        logger.warning("FCE quadratic term Hq failed the PSD check")
    return Hq, hlin, c0


def task_sensitivity(theta_bar: PredictorTheta, h: Horizons, tasks: Sequence[TaskPoint],
                     Q_lift: np.ndarray) -> np.ndarray:
    """Average of ``J' Q J`` over the task points."""
    if not tasks:
        raise EmptyTaskSet("Task sensitivity needs at least one task point")
    total = np.zeros((theta_bar.structure.n_theta, theta_bar.structure.n_theta))
    for task in tasks:
        J, _ = jacobian(theta_bar, h, task)
        total += J.T @ Q_lift @ J
    W_bar = symmetrize(total / len(tasks))
    logger.debug(f"Task sensitivity averaged over {len(tasks)} task points, trace {np.trace(W_bar):.4g}")
    return W_bar


def normalize_w(W_bar: np.ndarray) -> np.ndarray:
    """Rescale so that ``trace(W) == n_theta``."""
    W_bar = np.asarray(W_bar, dtype=float)
    trace = float(np.trace(W_bar))
    if not trace > 0:
        raise ZeroTrace(f"Cannot normalize a sensitivity matrix with trace {trace}")
    return W_bar * (W_bar.shape[0] / trace)
