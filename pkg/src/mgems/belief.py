"""Peer-action observation machinery and Dirichlet belief updates.

Each agent observes a noisy symbol of every peer's action each slot through
a row-stochastic confusion matrix, computes the Bayes posterior over the
peer's action alphabet, and folds the posterior mass into a Dirichlet
pseudo-count vector whose normalization is the prior for the next slot.
Observations never depend on the communication layer, so beliefs keep
improving while an agent is isolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateEvidenceError(Exception):
    """Observation has zero likelihood under the prior."""


class UndefinedMetricError(Exception):
    """Metric requested over an empty sequence."""


@dataclass(frozen=True)
class ObservationModel:
    """Row-stochastic |A| x |A| matrix, entry [a, o] = P(observe o | action a)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("observation matrix must be square")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("observation probabilities must lie in [0, 1]")
        if not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("observation matrix rows must sum to 1")
        object.__setattr__(self, "matrix", m)

    @property
    def n_actions(self) -> int:
        return self.matrix.shape[0]


def symmetric_model(n_actions: int, fidelity: float) -> ObservationModel:
    """Diagonal = fidelity, off-diagonal shares (1 - fidelity) equally."""
    if not 0.0 < fidelity <= 1.0:
        raise ValueError("fidelity must be in (0, 1]")
    off = (1.0 - fidelity) / (n_actions - 1) if n_actions > 1 else 0.0
    m = np.full((n_actions, n_actions), off)
    np.fill_diagonal(m, fidelity)
    return ObservationModel(m)


def sample_observation(model: ObservationModel, true_action: int,
                       rng: np.random.Generator) -> int:
    """Draw an observation symbol from the matrix row of the true action."""
    row = model.matrix[true_action]
    return int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))


@dataclass(frozen=True)
class DirichletBelief:
    """Pseudo-counts over a peer's action alphabet; prior = normalized counts."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        if np.any(c < 0) or c.sum() <= 0:
            raise ValueError("counts must be non-negative with positive total")
        object.__setattr__(self, "counts", c)

    @property
    def prior(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def uniform_belief(n_actions: int, init_count: float = 1.0) -> DirichletBelief:
    return DirichletBelief(np.full(n_actions, init_count))


def posterior(belief: DirichletBelief, model: ObservationModel,
              obs: int) -> np.ndarray:
    """Bayes posterior over actions given one observed symbol."""
    weights = model.matrix[:, obs] * belief.prior
    norm = weights.sum()
    if norm <= 0.0:
        raise DegenerateEvidenceError(
            f"observation {obs} impossible under the current prior")
    return weights / norm


def update(belief: DirichletBelief, posterior_vec: np.ndarray) -> DirichletBelief:
    """Add one slot's posterior mass to the pseudo-counts."""
    return DirichletBelief(belief.counts + np.asarray(posterior_vec, dtype=float))


def belief_accuracy(priors, true_actions) -> float:
    """Fraction of slots where the prior's argmax matches the true action."""
    priors = list(priors)
    true_actions = list(true_actions)
    if not priors or len(priors) != len(true_actions):
        raise UndefinedMetricError("need aligned, non-empty sequences")
    hits = sum(1 for p, a in zip(priors, true_actions) if int(np.argmax(p)) == a)
    return hits / len(priors)


class BeliefStore:
    """An agent's beliefs about its peers, optionally keyed by hour of day.

    Peer policies are hour-dependent, so the default keeps one Dirichlet per
    (peer, hour); ``per_hour=False`` collapses to a single belief per peer
    for ablations.
    """

    def __init__(self, peer_alphabets: dict[str, int], per_hour: bool = True,
                 init_count: float = 1.0):
        self.per_hour = per_hour
        self.init_count = init_count
        self._alphabets = dict(peer_alphabets)
        self._beliefs: dict[tuple, DirichletBelief] = {}

    def _key(self, peer: str, hour: int) -> tuple:
        return (peer, hour) if self.per_hour else (peer,)

    def belief(self, peer: str, hour: int) -> DirichletBelief:
        key = self._key(peer, hour)
        if key not in self._beliefs:
            self._beliefs[key] = uniform_belief(self._alphabets[peer], self.init_count)
        return self._beliefs[key]

    def prior(self, peer: str, hour: int) -> np.ndarray:
        return self.belief(peer, hour).prior

    def observe(self, peer: str, hour: int, model: ObservationModel,
                true_action: int, rng: np.random.Generator) -> np.ndarray:
        """Sample an observation of the peer and fold it in; returns the posterior."""
        b = self.belief(peer, hour)
        obs = sample_observation(model, true_action, rng)
        post = posterior(b, model, obs)
        self._beliefs[self._key(peer, hour)] = update(b, post)
        return post
