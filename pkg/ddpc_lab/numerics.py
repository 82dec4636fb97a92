"""
Dense linear-algebra kernels shared by the whole lab.

Every inverse that appears in a closed form is realized as factor-and-solve; nothing in the
package calls an explicit matrix inverse.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from ddpc_lab.exceptions import DimensionMismatch, NotPositiveDefinite

logger = logging.getLogger(__name__)

# Escalation ladder for near-singular matrices, relative to trace(m) / dim
JITTER_START = 1e-12
JITTER_STOP = 1e-6


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``m + jitter * I``."""
    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


@dataclass
class RngState:
    """Seeded random stream addressed by ``(seed, stream)``.

    Equal fields give bit-identical sequences on every platform, independent of how many
    other streams exist or in which order they are consumed.
    """
    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def standard_normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_psd(m: np.ndarray, rel_tol: float = 1e-10) -> bool:
    """Return True when the smallest eigenvalue is above ``-rel_tol * |trace|``."""
    m = symmetrize(np.asarray(m, dtype=float))
    if m.size == 0:
        return True
    scale = max(abs(np.trace(m)), np.finfo(float).tiny)
    return bool(np.linalg.eigvalsh(m)[0] >= -rel_tol * scale)


def _try_cholesky(m: np.ndarray) -> Optional[np.ndarray]:
    try:
        lower = scipy.linalg.cholesky(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(lower)) or np.any(np.diag(lower) <= 0.0):
        return None
    return lower


def chol_factor(m: np.ndarray, jitter: float = 0.0, escalate: bool = True) -> CholFactor:
    """Factor ``m + jitter * I``.

    With ``jitter == 0`` and a failed factorization an escalating jitter is tried, from
    1e-12 up to 1e-6 times ``trace(m) / dim``; the jitter actually applied is reported in
    the returned factor. ``escalate=False`` turns the factorization into a strict rank check.

    Raises:
        NotPositiveDefinite: if no jitter on the ladder produces a factor
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"Cannot factor non-square matrix of shape {m.shape}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")

    dim = m.shape[0]
    eye = np.eye(dim)
    lower = _try_cholesky(m + jitter * eye if jitter else m)
    if lower is not None:
        return CholFactor(lower=lower, jitter=float(jitter))

    if jitter == 0.0 and escalate:
        scale = np.trace(m) / dim
        if scale > 0:
            level = JITTER_START
            while level <= JITTER_STOP * (1 + 1e-9):
                applied = level * scale
                lower = _try_cholesky(m + applied * eye)
                if lower is not None:
                    logger.debug(f"Cholesky needed jitter {applied:.3e} (dim {dim})")
                    return CholFactor(lower=lower, jitter=float(applied))
                level *= 10.0

    raise NotPositiveDefinite(f"Matrix of dimension {dim} is not positive definite (jitter {jitter})")


def chol_solve(f: CholFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) X = rhs`` by two triangular substitutions."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != f.dim:
        raise DimensionMismatch(f"Right-hand side has {rhs.shape[0]} rows, factor has dimension {f.dim}")
    return scipy.linalg.cho_solve((f.lower, True), rhs, check_finite=False)


def chol_inverse(f: CholFactor) -> np.ndarray:
    """Symmetric ``(L L^T)^-1`` obtained by solving against the identity."""
    return symmetrize(chol_solve(f, np.eye(f.dim)))


def logdet(f: CholFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))


def sample_gaussian(rng: RngState, mean: np.ndarray, cov_factor: CholFactor,
                    size: Optional[int] = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal; ``size`` stacks independent draws row-wise."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape[0] != cov_factor.dim:
        raise DimensionMismatch(f"Mean has dimension {mean.shape[0]}, factor has {cov_factor.dim}")
    if size is None:
        return mean + cov_factor.lower @ rng.standard_normal(cov_factor.dim)
    z = rng.standard_normal((size, cov_factor.dim))
    return mean + z @ cov_factor.lower.T
