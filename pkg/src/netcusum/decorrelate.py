"""Row scores: the raw CUSUM projection and its decorrelated counterpart.

The decorrelated score subtracts the best linear prediction of the current
deviation from the last ``B`` deviations (weights solved from the Toeplitz
block of normalized lag autocovariances) and rescales by the conditional
variance factor ``1 - sigma^T Gamma^{-1} sigma``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from .baseline import RowBaseline

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
SINGULAR_TOL = 1e-10

scale_clamp_count = 0


class DeviationBuffer:
    """Most recent deviation vectors of one row, oldest first."""

    def __init__(self, b_max: int):
        self.b_max = b_max
        self._items: deque = deque(maxlen=b_max)

    def push(self, dev) -> None:
        self._items.append(np.asarray(dev, dtype=np.float64))

    def latest(self, n: int) -> list[np.ndarray]:
        if n > len(self._items):
            raise ValueError(f"buffer holds {len(self._items)} deviations, {n} requested")
        return list(self._items)[len(self._items) - n:] if n else []

    def __len__(self) -> int:
        return len(self._items)

    def clear(self) -> None:
        self._items.clear()


@dataclass
class GammaBlocks:
    B: int
    Gamma: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    scale: float
    requested_B: int
    clamped: bool = False

    @property
    def reduced(self) -> bool:
        """True when a singular block forced a shorter predictor."""
        return self.B < self.requested_B

    def lag_coefficients(self, b_max: int | None = None) -> np.ndarray:
        """Weights indexed by lag (lag 1 first), zero-padded to ``b_max``."""
        out = np.zeros(self.requested_B if b_max is None else b_max)
        out[:self.B] = self.weights[::-1]
        return out


def raw_score(p_row, baseline: RowBaseline) -> float:
    """Projection of the deviation onto the shift direction, ``(x - mu0)^T Sigma^- (mu1 - mu0)``."""
    return float((np.asarray(p_row, dtype=np.float64) - baseline.mu0) @ baseline.direction)


def _normalized(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma[0] <= 0:
        raise ValueError("gamma[0] must be positive")
    return gamma / gamma[0]


def build_gamma_blocks(gamma, B: int) -> GammaBlocks:
    """Predictor blocks for spring length ``B``.

    ``Gamma[a, b] = rho(|a-b|)`` and ``sigma[b] = rho(B-b)`` so that the
    oldest buffered deviation pairs with lag ``B``.  A numerically singular
    ``Gamma`` falls back to ``B - 1`` (down to the empty predictor).
    """
    global scale_clamp_count
    rho = _normalized(gamma)
    if not 0 <= B < len(rho):
        raise ValueError(f"B={B} outside 0..{len(rho) - 1}")
    requested = B
    while B > 0:
        Gamma = toeplitz(rho[:B])
        sig = rho[B:0:-1].copy()
        eig = np.linalg.eigvalsh(Gamma)
        if np.min(np.abs(eig)) > SINGULAR_TOL * np.max(np.abs(eig)):
            w = np.linalg.solve(Gamma, sig)
            scale = 1.0 - sig @ w
            clamped = scale < SCALE_FLOOR
            if clamped:
                scale_clamp_count += 1
                log.warning("conditional variance factor %.3g clamped to %g", scale, SCALE_FLOOR)
            return GammaBlocks(B, Gamma, sig, w, float(np.clip(scale, SCALE_FLOOR, 1.0)),
                               requested, bool(clamped))
        B -= 1
    return GammaBlocks(0, np.zeros((0, 0)), np.zeros(0), np.zeros(0), 1.0, requested)


def decorrelated_score(p_row, buffer: DeviationBuffer | list, blocks: GammaBlocks,
                       baseline: RowBaseline) -> float:
    """Score of the prediction residual, scaled by the conditional variance factor.

    ``buffer`` holds past deviations (oldest first); the last ``blocks.B``
    of them enter the prediction.
    """
    if blocks.B == 0:
        return raw_score(p_row, baseline)
    past = buffer.latest(blocks.B) if isinstance(buffer, DeviationBuffer) else list(buffer)
    if len(past) < blocks.B:
        raise ValueError(f"buffer holds {len(past)} deviations but B={blocks.B}")
    past = np.asarray(past[len(past) - blocks.B:])
    dev = np.asarray(p_row, dtype=np.float64) - baseline.mu0
    adjusted = dev - blocks.weights @ past
    return float(adjusted @ baseline.direction) / blocks.scale


def predictor_table(gamma: np.ndarray, b_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Lag coefficients and variance factors for every spring length at once.

    ``gamma`` has shape ``(..., b_max + 1)``.  Returns ``coef (..., b_max + 1,
    b_max)`` where ``coef[..., B, l - 1]`` weights the deviation ``l`` steps
    back under spring length ``B``, and ``scale (..., b_max + 1)``.  Same
    semantics as :func:`build_gamma_blocks`, including the singular fallback.
    """
    global scale_clamp_count
    gamma = np.asarray(gamma, dtype=np.float64)
    lead = gamma.shape[:-1]
    coef = np.zeros(lead + (b_max + 1, b_max))
    scale = np.ones(lead + (b_max + 1,))
    g0 = gamma[..., :1]
    white = g0[..., 0] <= 0
    rho = np.where(white[..., None], 0.0, gamma / np.where(g0 > 0, g0, 1.0))
    rho[..., 0] = 1.0
    for B in range(1, b_max + 1):
        idx = np.abs(np.subtract.outer(np.arange(B), np.arange(B)))
        Gamma = rho[..., idx]
        sig = rho[..., B:0:-1]
        eig = np.linalg.eigvalsh(Gamma)
        absd = np.abs(eig)
        ok = np.min(absd, axis=-1) > SINGULAR_TOL * np.max(absd, axis=-1)
        safe = np.where(ok[..., None, None], Gamma, np.eye(B))
        w = np.linalg.solve(safe, sig[..., None])[..., 0]
        s = 1.0 - np.einsum("...i,...i->...", sig, w)
        low = ok & (s < SCALE_FLOOR)
        if np.any(low):
            scale_clamp_count += int(np.count_nonzero(low))
        s = np.clip(s, SCALE_FLOOR, 1.0)
        lagged = np.zeros(lead + (b_max,))
        lagged[..., :B] = w[..., ::-1]
        coef[..., B, :] = np.where(ok[..., None], lagged, coef[..., B - 1, :])
        scale[..., B] = np.where(ok, s, scale[..., B - 1])
    return coef, scale
