"""Seeded generators for the 2-node simulation scenarios.

Conditions
----------
I        transition counts follow an AR(1) recursion (floored, truncated at 0)
II       latent transition probabilities follow an AR(1) recursion; fixed totals
III      row totals follow an AR(1) recursion; probabilities fixed
Double   II probabilities combined with III totals
RowCorr  like Double, but p22 is driven by the previous p11

Noise in II/III/Double/RowCorr is centred at the previous value by default
(``noise_center="previous"``), which makes the latent path a clamped random
walk; ``noise_center="mean"`` centres it at the configured mean instead,
giving a stationary AR(1) process.

Generators run ``R`` independent replications in lockstep.  Random streams
are Philox generators keyed by ``(seed, block)``, so any partition of the
replications into fixed-size blocks reproduces bit-identical output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import TransitionSnapshot

CONDITIONS = ("I", "II", "III", "Double", "RowCorr")
SCENARIO_TOTALS = ((100, 100), (100, 500), (100, 30))
IC_MEAN = ((0.45, 0.55), (0.95, 0.05))
OC_TARGET = ((0.5, 0.5), (0.5, 0.5))

COUNT_NOISE_VAR = 16.0
PROB_NOISE_VAR = 1e-4
TOTAL_NOISE_VAR = 100.0
AR_COEF = (0.5, 0.9)


@dataclass(frozen=True)
class ScenarioConfig:
    condition: str = "I"
    initial_totals: tuple[int, int] = (100, 100)
    true_mu11: float = IC_MEAN[0][0]
    true_mu22: float = IC_MEAN[1][1]
    oc_target: tuple = OC_TARGET
    seed: int = 0
    noise_center: str = "previous"
    K: int = field(default=2, init=False)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if self.noise_center not in ("previous", "mean"):
            raise ValueError("noise_center must be 'previous' or 'mean'")
        if min(self.initial_totals) <= 0:
            raise ValueError("initial totals must be positive")
        for mu in (self.true_mu11, self.true_mu22):
            if not 0 <= mu <= 1:
                raise ValueError("true means must lie in [0, 1]")
        object.__setattr__(self, "initial_totals", tuple(int(n) for n in self.initial_totals))
        object.__setattr__(self, "oc_target", tuple(tuple(r) for r in self.oc_target))

    @property
    def mean_matrix(self) -> np.ndarray:
        return np.array([[self.true_mu11, 1 - self.true_mu11],
                         [1 - self.true_mu22, self.true_mu22]])

    def digest(self) -> str:
        n1, n2 = self.initial_totals
        return f"{self.condition}:({n1},{n2})"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("K")
        return d


def load_scenario(path: str | Path) -> tuple[ScenarioConfig, float | None]:
    """Read a scenario JSON file; returns the config and the optional ``shift`` (new mu11)."""
    doc = json.loads(Path(path).read_text())
    shift = doc.pop("shift", None)
    if "totals" in doc:
        doc["initial_totals"] = tuple(doc.pop("totals"))
    if "mu11" in doc:
        doc["true_mu11"] = doc.pop("mu11")
    if "mu22" in doc:
        doc["true_mu22"] = doc.pop("mu22")
    return ScenarioConfig(**doc), shift


def inject_shift(cfg: ScenarioConfig, mu11_new: float) -> ScenarioConfig:
    """Config whose generating mean of ``(mu11, 1 - mu11)`` is ``mu11_new``."""
    if not 0 < mu11_new < 1:
        raise ValueError(f"mu11_new={mu11_new} must lie in the open interval (0, 1)")
    return dataclasses.replace(cfg, true_mu11=float(mu11_new))


def replication_rng(seed: int, block: int) -> np.random.Generator:
    """Independent counter-based stream for replication block ``block``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def multinomial_sample(n, p, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.isclose(p.sum(axis=-1), 1.0, atol=1e-9).all():
        raise ValueError("p must be a probability vector")
    if np.any(np.asarray(n) < 0):
        raise ValueError("n must be nonnegative")
    return rng.multinomial(n, p / p.sum(axis=-1, keepdims=True))


class ScenarioGenerator:
    """``R`` replications of one scenario advanced in lockstep."""

    def __init__(self, cfg: ScenarioConfig, reps: int, rng: np.random.Generator,
                 noise_scale: float = 1.0):
        self.cfg, self.reps, self.rng = cfg, reps, rng
        self.noise_scale = noise_scale
        n1, n2 = cfg.initial_totals
        mu11, mu22 = cfg.true_mu11, cfg.true_mu22
        shape = (reps,)
        self.counts = np.broadcast_to(
            np.array([[mu11 * n1, (1 - mu11) * n1], [(1 - mu22) * n2, mu22 * n2]]),
            shape + (2, 2)).copy()
        self.p = np.broadcast_to(np.array([mu11, mu22]), shape + (2,)).copy()
        self.totals = np.broadcast_to(np.array([n1, n2], dtype=np.float64), shape + (2,)).copy()

    def apply(self, cfg: ScenarioConfig) -> None:
        """Switch the generating config (e.g. to a shifted one) from the next step on.

        With ``noise_center="previous"`` the latent probability recursion has
        no mean to move, so the latent ``p11`` level jumps by the shift.
        """
        if cfg.condition != self.cfg.condition or cfg.initial_totals != self.cfg.initial_totals:
            raise ValueError("apply() may only change the true means")
        if cfg.noise_center == "previous" and cfg.condition in ("II", "Double", "RowCorr"):
            self.p[:, 0] = np.clip(self.p[:, 0] + cfg.true_mu11 - self.cfg.true_mu11, 0, 1)
            self.p[:, 1] = np.clip(self.p[:, 1] + cfg.true_mu22 - self.cfg.true_mu22, 0, 1)
        self.cfg = cfg

    def _normal(self, mean, var):
        return mean + self.noise_scale * np.sqrt(var) * self.rng.standard_normal(np.shape(mean))

    def _step_probs(self, row_corr: bool):
        cfg, p = self.cfg, self.p
        prev = cfg.noise_center == "previous"
        c1 = p[:, 0] if prev else np.full(self.reps, cfg.true_mu11)
        eps1 = self._normal(c1, PROB_NOISE_VAR)
        if row_corr:
            driver = p[:, 0]
            c2 = p[:, 0] if prev else np.full(self.reps, cfg.true_mu11)
        else:
            driver = p[:, 1]
            c2 = p[:, 1] if prev else np.full(self.reps, cfg.true_mu22)
        eps2 = self._normal(c2, PROB_NOISE_VAR)
        p11 = np.minimum(1.0, np.maximum(AR_COEF[0] * p[:, 0] + (1 - AR_COEF[0]) * eps1, 0.0))
        p22 = np.minimum(1.0, np.maximum(AR_COEF[1] * driver + (1 - AR_COEF[1]) * eps2, 0.0))
        self.p = np.stack([p11, p22], axis=1)

    def _step_totals(self):
        prev = self.cfg.noise_center == "previous"
        n0 = np.array(self.cfg.initial_totals, dtype=np.float64)
        centre = self.totals if prev else np.broadcast_to(n0, self.totals.shape)
        eps = self._normal(centre, TOTAL_NOISE_VAR)
        a = np.array(AR_COEF)
        self.totals = np.maximum(0.0, np.floor(a * self.totals + (1 - a) * eps))

    def _allocate(self) -> np.ndarray:
        n = self.totals.astype(np.int64)
        p_first = np.stack([self.p[:, 0], 1.0 - self.p[:, 1]], axis=1)  # P(col 0) per row
        first = self.rng.binomial(n, p_first)
        return np.stack([first, n - first], axis=-1)

    def step(self) -> np.ndarray:
        """Advance one time step; returns ``(R, 2, 2)`` integer counts."""
        cond, cfg = self.cfg.condition, self.cfg
        if cond == "I":
            n1, n2 = cfg.initial_totals
            mean1 = np.array([cfg.true_mu11 * n1, n1 - cfg.true_mu11 * n1])
            mean2 = np.array([n2 - cfg.true_mu22 * n2, cfg.true_mu22 * n2])
            eps = self._normal(np.broadcast_to(np.stack([mean1, mean2]), self.counts.shape),
                               COUNT_NOISE_VAR)
            a = np.array(AR_COEF)[None, :, None]
            self.counts = np.maximum(0.0, np.floor(a * self.counts + (1 - a) * eps))
            return self.counts.astype(np.int64)
        if cond in ("II", "Double", "RowCorr"):
            self._step_probs(row_corr=cond == "RowCorr")
        else:
            self.p = np.broadcast_to(np.array([cfg.true_mu11, cfg.true_mu22]),
                                     (self.reps, 2)).copy()
        if cond in ("III", "Double", "RowCorr"):
            self._step_totals()
        self.counts = self._allocate().astype(np.float64)
        return self.counts.astype(np.int64)

    def run(self, steps: int) -> np.ndarray:
        """``(R, steps, 2, 2)`` counts."""
        out = np.empty((self.reps, steps, 2, 2), dtype=np.int64)
        for s in range(steps):
            out[:, s] = self.step()
        return out

    def take(self, keep) -> None:
        self.reps = int(np.count_nonzero(keep)) if np.asarray(keep).dtype == bool else len(keep)
        self.counts, self.p, self.totals = self.counts[keep], self.p[keep], self.totals[keep]


@dataclass
class GenState:
    """Single-stream generator state (``R = 1``) with its own time index."""

    gen: ScenarioGenerator
    t: int = 0

    @classmethod
    def start(cls, cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> "GenState":
        rng = replication_rng(cfg.seed, 0) if rng is None else rng
        return cls(ScenarioGenerator(cfg, 1, rng))


def gen_step(state: GenState, cfg: ScenarioConfig | None = None) -> TransitionSnapshot:
    if cfg is not None and cfg != state.gen.cfg:
        state.gen.apply(cfg)
    state.t += 1
    return TransitionSnapshot(t=state.t, counts=state.gen.step()[0])
