"""Data-based distributed adaptive observers.

Each observer simultaneously estimates an unknown target model matrix and
the target state from neighbour exchange alone, combining a recursive
least-squares parameter matrix with consensus pulling.  The same update
serves three uses: leaders estimating the tracking state, followers
estimating the tracking state through the leader layer, and any influenced
agent estimating a leader's formation state (gated by propagated
reachability flags, so relays work across leaders).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import InfluenceError, PfccError
from .matops import is_positive_definite, spectral_radius
from .propagation import AgentKnowledge


@dataclass(frozen=True)
class ObserverConfig:
    """Gains of one observer network.

    xi >= 1 regularizes the parameter update; coupling (the model-update
    gain) and consensus_gain must be positive; the initial parameter matrix
    is init_scale * I.
    """

    xi: float
    coupling: float
    consensus_gain: float
    gain_matrix: np.ndarray
    init_scale: float = 100.0

    def __post_init__(self):
        if self.xi < 1.0:
            raise ValueError("xi must be >= 1")
        if self.coupling <= 0 or self.consensus_gain <= 0 or self.init_scale <= 0:
            raise ValueError("coupling, consensus gain and init scale must be positive")
        object.__setattr__(self, "gain_matrix",
                           np.atleast_2d(np.asarray(self.gain_matrix, dtype=float)))


@dataclass(frozen=True)
class RlsObserver:
    """State of one adaptive observer: parameter matrix L, model estimate
    A_hat, state estimate x_hat."""

    config: ObserverConfig
    L: np.ndarray
    A_hat: np.ndarray
    x_hat: np.ndarray

    @classmethod
    def create(cls, config: ObserverConfig, n: int,
               x0: np.ndarray | None = None) -> "RlsObserver":
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel()
        return cls(config=config, L=config.init_scale * np.eye(n),
                   A_hat=np.zeros((n, n)), x_hat=x)


def regressor(x_hat: np.ndarray) -> np.ndarray:
    """Stacked regressor I_n (x) x_hat used by the parameter updates."""
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    return np.kron(np.eye(x_hat.size), x_hat.reshape(-1, 1))


def rls_update_L(L: np.ndarray, x_bar: np.ndarray) -> np.ndarray:
    """Parameter-matrix downdate in rank-one (Woodbury) form.

    Equals (L^-1 + x_bar^T x_bar)^-1; keeping the update in this form avoids
    inverting L explicitly.  L must be symmetric positive definite.
    """
    L = np.asarray(L, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    if not is_positive_definite(L, atol=1e-9):
        raise PfccError("adaptive parameter matrix must be symmetric positive definite")
    big = x_bar.shape[0]
    gram = np.eye(big) + x_bar @ L @ x_bar.T
    return L - L @ x_bar.T @ np.linalg.solve(gram, x_bar @ L)


def consensus_error(own: np.ndarray,
                    neighbor_terms: Iterable[tuple[float, np.ndarray]],
                    pin_weight: float, pin_value: np.ndarray | None) -> np.ndarray:
    """Weighted disagreement sum plus direct pinning, if pinned."""
    own = np.asarray(own, dtype=float).ravel()
    eta = np.zeros_like(own)
    for w, est in neighbor_terms:
        if w > 0:
            eta += w * (own - np.asarray(est, dtype=float).ravel())
    if pin_weight > 0:
        if pin_value is None:
            raise ValueError("pinned agent needs a pin value")
        eta += pin_weight * (own - np.asarray(pin_value, dtype=float).ravel())
    return eta


def gated_terms(neighbors: Iterable[tuple[float, np.ndarray, bool]]
                ) -> list[tuple[float, np.ndarray]]:
    """Drop neighbour contributions whose reachability flag is off."""
    return [(w, est) for w, est, influenced in neighbors if influenced]


def predict_state(obs: RlsObserver, eta: np.ndarray) -> np.ndarray:
    """Next state estimate using the pre-update model: A_hat x_hat - mu F eta."""
    cfg = obs.config
    return obs.A_hat @ obs.x_hat - cfg.consensus_gain * (cfg.gain_matrix @ eta)


def observer_step_tracking_leader(obs: RlsObserver, eta: np.ndarray,
                                  eta_next: np.ndarray) -> RlsObserver:
    """Full observer update across one tick.

    The parameter matrix is downdated with the current regressor, the state
    estimate advances with the pre-update model, and the model estimate is
    corrected against the next-tick consensus error (the only causal order
    consistent with the update indices).
    """
    eta = np.asarray(eta, dtype=float).ravel()
    eta_next = np.asarray(eta_next, dtype=float).ravel()
    n = obs.x_hat.size
    if eta.size != n or eta_next.size != n:
        raise ValueError(f"consensus error dimension mismatch: expected {n}")
    cfg = obs.config
    x_bar = regressor(obs.x_hat)
    l_next = rls_update_L(obs.L, x_bar)
    x_next = predict_state(obs, eta)
    gain = np.linalg.solve(np.linalg.inv(l_next) + cfg.xi * np.eye(n), eta_next)
    # Row-major unstacking of -coupling * x_bar @ gain is the rank-one term below.
    a_next = obs.A_hat - cfg.coupling * np.outer(gain, obs.x_hat)
    return replace(obs, L=l_next, A_hat=a_next, x_hat=x_next)


def observer_step_formation(obs: RlsObserver, role: str, q: int,
                            knowledge: AgentKnowledge,
                            neighbors_now: Iterable[tuple[float, np.ndarray, bool]],
                            neighbors_next: Iterable[tuple[float, np.ndarray, bool]],
                            pin_weight: float,
                            pin_now: np.ndarray | None,
                            pin_next: np.ndarray | None) -> RlsObserver:
    """Formation-state observer step for one influenced agent.

    Neighbour tuples carry (edge weight, estimate, influenced-by-q flag);
    only flagged neighbours contribute, which restricts the exchange to the
    subgraph actually rooted at leader q.  Invoking this for a leader
    outside the agent's influential set is an error.
    """
    if role not in ("leader", "follower"):
        raise ValueError(f"unknown role {role!r}")
    if q not in knowledge.influential:
        raise InfluenceError(
            f"agent {knowledge.node} is not influenced by leader {q}; observer undefined")
    eta = consensus_error(obs.x_hat, gated_terms(neighbors_now), pin_weight, pin_now)
    x_pred = predict_state(obs, eta)
    eta_next = consensus_error(x_pred, gated_terms(neighbors_next), pin_weight, pin_next)
    return observer_step_tracking_leader(obs, eta, eta_next)


def check_schur_consensus(a_target: np.ndarray, mu: float, gain_matrix: np.ndarray,
                          graph_block: np.ndarray) -> bool:
    """Is the consensus matrix I (x) A - mu * (G (x) F) Schur stable."""
    a_target = np.atleast_2d(np.asarray(a_target, dtype=float))
    graph_block = np.atleast_2d(np.asarray(graph_block, dtype=float))
    v = graph_block.shape[0]
    s = np.kron(np.eye(v), a_target) - mu * np.kron(graph_block,
                                                    np.atleast_2d(gain_matrix))
    return spectral_radius(s) < 1.0


@dataclass(frozen=True)
class GainBound:
    """Diagnostic upper bound on the model-update coupling gain."""

    value: float
    unconstrained: bool = False
    well_posed: bool = True


def coupling_gain_bound(zeta: np.ndarray, l_bar: np.ndarray,
                        graph_block: np.ndarray, s_consensus: np.ndarray,
                        xi: float) -> GainBound:
    """Evaluate the analytical upper bound on the coupling gain.

    Uses the current regressor block to form the excitation ratio, and the
    weighting W built from the parameter matrices and the graph block.  A
    zero regressor leaves the gain unconstrained; an indefinite W - S^T W S
    is reported via the well_posed flag with a zero bound.
    """
    s_consensus = np.atleast_2d(np.asarray(s_consensus, dtype=float))
    if spectral_radius(s_consensus) >= 1.0:
        raise PfccError("consensus matrix must be Schur for the gain bound to apply")
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    sig = float(np.linalg.norm(zeta, 2)) if zeta.size else 0.0
    if sig == 0.0:
        return GainBound(value=float("inf"), unconstrained=True)
    gamma = sig**2 / (xi + sig**2)

    graph_block = np.atleast_2d(np.asarray(graph_block, dtype=float))
    n = s_consensus.shape[0] // graph_block.shape[0]
    g_kron = np.kron(graph_block, np.eye(n))
    w = 0.5 * (l_bar @ g_kron + g_kron.T @ l_bar)
    diff = 0.5 * ((w - s_consensus.T @ w @ s_consensus)
                  + (w - s_consensus.T @ w @ s_consensus).T)
    lam_min = float(np.min(np.linalg.eigvalsh(diff)))
    if lam_min <= 0:
        return GainBound(value=0.0, well_posed=False)
    sig_g = float(np.linalg.norm(graph_block, 2))
    return GainBound(value=lam_min / (sig_g**2 * gamma))
