"""Phase-I estimation of per-row in-control parameters.

Every helper broadcasts over leading axes so the same code estimates one row
of one network or thousands of independent Monte Carlo replications at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BUNDLE_FORMAT = "netcusum-baseline/1"
RIDGE_FACTOR = 1e-10
COND_LIMIT = 1e12
VARIATION_FLOOR = 1e-12


class InsufficientDataError(ValueError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


def min_ic_length(b_max: int) -> int:
    return max(30, 5 * b_max)


def estimate_autocov(ic_rows: np.ndarray, mu0: np.ndarray, q: int, m: int | None = None) -> np.ndarray:
    """Inner-product autocovariance at lag ``q``.

    ``sum_t (x_t - mu0) . (x_{t+q} - mu0) / (m - q)`` over the ``m`` rows of
    ``ic_rows`` (shape ``(..., m, K)``).
    """
    ic_rows = np.asarray(ic_rows, dtype=np.float64)
    m = ic_rows.shape[-2] if m is None else m
    if not 0 <= q < m:
        raise ValueError(f"lag q={q} must satisfy 0 <= q < m={m}")
    dev = ic_rows[..., :m, :] - np.asarray(mu0)[..., None, :]
    return _autocov_dev(dev, q)


def _autocov_dev(dev: np.ndarray, q: int) -> np.ndarray:
    m = dev.shape[-2]
    return np.einsum("...tk,...tk->...", dev[..., :m - q, :], dev[..., q:, :]) / (m - q)


@dataclass
class Reduction:
    """How a covariance was made invertible: dropped coordinate and ridge added."""

    dropped: int
    ridge: float = 0.0


def reduce_covariance(sigma: np.ndarray) -> tuple[np.ndarray, Reduction | list]:
    """Invert the covariance of simplex rows on their first K-1 coordinates.

    Row-stochastic deviations sum to zero, so the full covariance is singular;
    dropping the last coordinate gives an exact parametrization of the
    tangent space.  A ridge of ``1e-10 * trace / (K-1)`` is added when the
    reduced block is ill-conditioned.  Works on stacks ``(..., K, K)``; for a
    stack the second return value is an array of ridges.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    K = sigma.shape[-1]
    red = sigma[..., :K - 1, :K - 1].copy()
    eig = np.linalg.eigvalsh(red)
    top = np.max(np.abs(eig), axis=-1)
    needs = eig[..., 0] <= top / COND_LIMIT
    ridge = np.where(needs, RIDGE_FACTOR * np.trace(sigma, axis1=-2, axis2=-1) / (K - 1), 0.0)
    red = red + ridge[..., None, None] * np.eye(K - 1)
    eig = np.linalg.eigvalsh(red)
    if np.any(~np.isfinite(eig)) or np.any(eig[..., 0] <= 0) or np.any(top <= 0):
        raise DegenerateCovarianceError("degenerate covariance: reduced block is singular")
    inv = np.linalg.inv(red)
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    if sigma.ndim == 2:
        return inv, Reduction(dropped=K - 1, ridge=float(ridge))
    return inv, ridge


def reduced_form(x: np.ndarray, inv_red: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``x^T Sigma^- y`` evaluated on the first K-1 coordinates."""
    k = inv_red.shape[-1]
    return np.einsum("...i,...ij,...j->...", x[..., :k], inv_red, y[..., :k])


def _count_pinv(sigma: np.ndarray) -> np.ndarray:
    if np.any(np.trace(sigma, axis1=-2, axis2=-1) <= 0):
        raise DegenerateCovarianceError("degenerate covariance: count rows never vary")
    return np.linalg.pinv(sigma, rcond=1e-10, hermitian=True)


@dataclass
class RowBaseline:
    i: int
    mu0: np.ndarray
    mu1: np.ndarray
    sigma: np.ndarray
    sigma_red_inv: np.ndarray
    k_ref: float
    gamma: np.ndarray
    B_max: int
    m: int
    reduction: Reduction = field(default_factory=lambda: Reduction(dropped=-1))

    kind = "prob"

    @property
    def K(self) -> int:
        return len(self.mu0)

    @property
    def direction(self) -> np.ndarray:
        """Vector ``a`` with ``raw_score = (x - mu0) . a``."""
        k = self.sigma_red_inv.shape[0]
        a = np.zeros(self.K)
        a[:k] = self.sigma_red_inv @ (self.mu1 - self.mu0)[:k]
        return a

    def to_dict(self) -> dict:
        return {
            "i": self.i, "mu0": self.mu0.tolist(), "mu1": self.mu1.tolist(),
            "sigma": self.sigma.tolist(), "sigma_red_inv": self.sigma_red_inv.tolist(),
            "k_ref": self.k_ref, "gamma": self.gamma.tolist(), "B_max": self.B_max, "m": self.m,
            "reduction": {"dropped": self.reduction.dropped, "ridge": self.reduction.ridge},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RowBaseline":
        return cls(i=d["i"], mu0=np.array(d["mu0"], float), mu1=np.array(d["mu1"], float),
                   sigma=np.array(d["sigma"], float),
                   sigma_red_inv=np.array(d["sigma_red_inv"], float).reshape(
                       len(d["sigma_red_inv"]), -1),
                   k_ref=d["k_ref"], gamma=np.array(d["gamma"], float), B_max=d["B_max"],
                   m=d["m"], reduction=Reduction(**d["reduction"]))


@dataclass
class CountRowBaseline(RowBaseline):
    """Baseline over raw count rows: no simplex constraint, pseudo-inverse metric."""

    kind = "count"

    @property
    def direction(self) -> np.ndarray:
        return self.sigma_red_inv @ (self.mu1 - self.mu0)


def _moments(rows: np.ndarray, valid: np.ndarray | None):
    """Masked mean and (m-1)-denominator covariance over the time axis ``-2``."""
    if valid is None:
        valid = np.ones(rows.shape[:-1], dtype=bool)
    w = valid.astype(np.float64)
    n = w.sum(axis=-1)
    mu0 = np.einsum("...t,...tk->...k", w, rows) / n[..., None]
    dev = (rows - mu0[..., None, :]) * w[..., None]
    sigma = np.einsum("...ti,...tj->...ij", dev, dev) / (n - 1)[..., None, None]
    sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
    return mu0, sigma, dev, n


def _check_variation(dev: np.ndarray, what: str = "IC rows") -> None:
    """Rows that never move leave only round-off in the covariance; refuse them."""
    spread = np.max(np.abs(dev), axis=(-2, -1))
    if np.any(spread <= VARIATION_FLOOR):
        raise DegenerateCovarianceError(f"degenerate covariance: {what} never vary")


def _check_length(m: int, b_max: int):
    if b_max < 0:
        raise ValueError("B_max must be >= 0")
    if m < min_ic_length(b_max):
        raise InsufficientDataError(
            f"insufficient IC data: m={m} < {min_ic_length(b_max)} required for B_max={b_max}")


def estimate_row_baseline(ic_rows: Sequence[Sequence[float]], mu1: Sequence[float], B_max: int,
                          i: int = 0, valid: Sequence[bool] | None = None) -> RowBaseline:
    """Estimate the in-control parameters of one probability row.

    ``valid`` masks out time steps where the row had no traffic; those steps
    are excluded from the moments and count as zero deviation in the lag sums.
    """
    rows = np.asarray(ic_rows, dtype=np.float64)
    _check_length(rows.shape[0], B_max)
    mask = None if valid is None else np.asarray(valid, dtype=bool)
    mu0, sigma, dev, _ = _moments(rows, mask)
    _check_variation(dev)
    inv, reduction = reduce_covariance(sigma)
    mu1 = np.asarray(mu1, dtype=np.float64)
    delta = mu1 - mu0
    k_ref = 0.5 * float(reduced_form(delta, inv, delta))
    gamma = np.array([_autocov_dev(dev, q) for q in range(B_max + 1)])
    return RowBaseline(i=i, mu0=mu0, mu1=mu1, sigma=sigma, sigma_red_inv=inv, k_ref=k_ref,
                       gamma=gamma, B_max=B_max, m=rows.shape[0], reduction=reduction)


def estimate_count_baseline(ic_rows, mu1, B_max: int, i: int = 0) -> CountRowBaseline:
    rows = np.asarray(ic_rows, dtype=np.float64)
    _check_length(rows.shape[0], B_max)
    mu0, sigma, dev, _ = _moments(rows, None)
    _check_variation(dev, "count rows")
    pinv = _count_pinv(sigma)
    mu1 = np.asarray(mu1, dtype=np.float64)
    delta = mu1 - mu0
    k_ref = 0.5 * float(delta @ pinv @ delta)
    gamma = np.array([_autocov_dev(dev, q) for q in range(B_max + 1)])
    return CountRowBaseline(i=i, mu0=mu0, mu1=mu1, sigma=sigma, sigma_red_inv=pinv, k_ref=k_ref,
                            gamma=gamma, B_max=B_max, m=rows.shape[0],
                            reduction=Reduction(dropped=-1))


def estimate_network_baselines(ic_counts: np.ndarray, mu1: np.ndarray, B_max: int,
                               kind: str = "prob") -> list[RowBaseline]:
    """Baselines for every row of a ``(m, K, K)`` stack of IC transition counts."""
    from .network import probability_rows

    ic_counts = np.asarray(ic_counts)
    mu1 = np.asarray(mu1, dtype=np.float64)
    if kind == "count":
        return [estimate_count_baseline(ic_counts[:, i, :], mu1[i], B_max, i=i)
                for i in range(ic_counts.shape[1])]
    probs, _, valid = probability_rows(ic_counts)
    return [estimate_row_baseline(probs[:, i, :], mu1[i], B_max, i=i, valid=valid[:, i])
            for i in range(ic_counts.shape[1])]


@dataclass
class BaselineSet:
    """Stacked per-row parameters used by the vectorized detectors.

    Arrays carry a leading replication axis ``R`` (``R = 1`` for a single
    stream): ``mu0 (R, K, K)``, ``direction (R, K, K)``, ``k_ref (R, K)``,
    ``gamma (R, K, B_max + 1)``.
    """

    mu0: np.ndarray
    direction: np.ndarray
    k_ref: np.ndarray
    gamma: np.ndarray
    B_max: int
    kind: str = "prob"

    @property
    def reps(self) -> int:
        return self.mu0.shape[0]

    @property
    def K(self) -> int:
        return self.mu0.shape[1]

    @classmethod
    def from_rows(cls, rows: Sequence[RowBaseline]) -> "BaselineSet":
        kinds = {r.kind for r in rows}
        if len(kinds) != 1:
            raise ValueError("cannot mix probability and count baselines")
        rows = sorted(rows, key=lambda r: r.i)
        return cls(mu0=np.stack([r.mu0 for r in rows])[None],
                   direction=np.stack([r.direction for r in rows])[None],
                   k_ref=np.array([r.k_ref for r in rows])[None],
                   gamma=np.stack([r.gamma for r in rows])[None],
                   B_max=rows[0].B_max, kind=kinds.pop())

    def take(self, idx) -> "BaselineSet":
        return BaselineSet(self.mu0[idx], self.direction[idx], self.k_ref[idx], self.gamma[idx],
                           self.B_max, self.kind)


def estimate_baseline_set(ic_counts: np.ndarray, mu1: np.ndarray, B_max: int,
                          kind: str = "prob") -> BaselineSet:
    """Vectorized Phase-I estimation for ``(R, m, K, K)`` IC count stacks.

    Mirrors :func:`estimate_row_baseline` / :func:`estimate_count_baseline`
    for every replication and row simultaneously.
    """
    from .network import probability_rows

    ic_counts = np.asarray(ic_counts, dtype=np.float64)
    R, m, K, _ = ic_counts.shape
    _check_length(m, B_max)
    mu1 = np.broadcast_to(np.asarray(mu1, dtype=np.float64), (R, K, K))
    if kind == "count":
        rows, valid = ic_counts, None
    else:
        rows, _, valid = probability_rows(ic_counts)
        valid = np.moveaxis(valid, 1, 2)  # (R, K, m)
    rows = np.moveaxis(rows, 1, 2)  # (R, K, m, K)
    mu0, sigma, dev, _ = _moments(rows, valid)
    _check_variation(dev)
    delta = mu1 - mu0
    direction = np.zeros_like(mu0)
    if kind == "count":
        metric = _count_pinv(sigma)
        direction = np.einsum("...ij,...j->...i", metric, delta)
    else:
        inv, _ = reduce_covariance(sigma)
        direction[..., :K - 1] = np.einsum("...ij,...j->...i", inv, delta[..., :K - 1])
    k_ref = 0.5 * np.einsum("...i,...i->...", delta, direction)
    gamma = np.stack([_autocov_dev(dev, q) for q in range(B_max + 1)], axis=-1)
    return BaselineSet(mu0=mu0, direction=direction, k_ref=k_ref, gamma=gamma, B_max=B_max,
                       kind=kind)


# ---------------------------------------------------------------------------
# bundle file

def bundle_to_dict(rows: Sequence[RowBaseline], count_rows: Sequence[CountRowBaseline] = (),
                   **meta) -> dict:
    return {"format": BUNDLE_FORMAT, "K": rows[0].K, "B_max": rows[0].B_max, "m": rows[0].m,
            "rows": [r.to_dict() for r in rows],
            "count_rows": [r.to_dict() for r in count_rows], "meta": meta}


def save_bundle(path: str | Path, rows: Sequence[RowBaseline],
                count_rows: Sequence[CountRowBaseline] = (), **meta) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(rows, count_rows, **meta), indent=1))


def load_bundle(path: str | Path) -> tuple[list[RowBaseline], list[CountRowBaseline], dict]:
    return bundle_from_dict(json.loads(Path(path).read_text()))


def bundle_from_dict(doc: dict):
    if doc.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a baseline bundle (format={doc.get('format')!r})")
    rows = [RowBaseline.from_dict(d) for d in doc["rows"]]
    count_rows = [CountRowBaseline.from_dict(d) for d in doc.get("count_rows", [])]
    return rows, count_rows, doc.get("meta", {})
