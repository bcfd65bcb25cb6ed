"""Tick-synchronized world engine.

Every tick applies, in order: propensity-schedule updates, one influence
propagation step, all observer updates (snapshot semantics: every observer
reads the previous tick's neighbour estimates), control/learning per agent,
and finally the plant, formation, and tracking state advance.  Controls are
computed from the pre-update estimate snapshot, matching the information an
agent actually has at that tick.

Three modes share the loop: ``data_driven`` runs the online learners,
``model_based_oracle`` substitutes gains synthesized from the true models,
and ``fcc_baseline`` disables propensity weighting in favour of the
Laplacian-derived convex weights of classical two-layer designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import learning as ln
from . import model_control as mc
from . import observers as ob
from . import propagation as pr
from .errors import (AssumptionError, ConvergenceError, DataConsistencyError,
                     PfccError, SimulationAbort)
from .topology import DirectedTopology, build_laplacian, verify_assumption1

MODE_DATA = "data_driven"
MODE_ORACLE = "model_based_oracle"
MODE_BASELINE = "fcc_baseline"
MODES = (MODE_DATA, MODE_ORACLE, MODE_BASELINE)

_STATE_GUARD = 1e9


@dataclass(frozen=True)
class PropensitySchedule:
    """Activation ticks with full per-leader factor maps.

    The first entry must activate at tick 0; ticks strictly increase and all
    factors are positive.
    """

    entries: tuple[tuple[int, dict[int, float]], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("schedule needs at least one entry")
        ticks = [t for t, _ in self.entries]
        if ticks[0] != 0:
            raise ValueError("first schedule entry must activate at tick 0")
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError("schedule ticks must be strictly increasing")
        for _, factors in self.entries:
            if any(v <= 0 for v in factors.values()):
                raise ValueError("propensity factors must be positive")

    def initial(self) -> dict[int, float]:
        return dict(self.entries[0][1])

    def entry_at(self, tick: int) -> dict[int, float] | None:
        for t, factors in self.entries:
            if t == tick:
                return dict(factors)
        return None


@dataclass
class ScenarioConfig:
    """Everything needed for one deterministic run."""

    name: str
    topology: DirectedTopology
    follower_dynamics: list[mc.AgentDynamics]
    leader_dynamics: list[mc.AgentDynamics]
    formation: list[mc.FormationDynamics]
    tracking_a: np.ndarray
    tracking_x0: np.ndarray
    schedule: PropensitySchedule
    q_weights: dict[int, np.ndarray]
    leader_tracking_observer: ob.ObserverConfig
    follower_tracking_observer: ob.ObserverConfig
    formation_observers: dict[int, ob.ObserverConfig]
    learner: ln.LearnerConfig
    warmup_gains: dict[int, np.ndarray]
    learn_start_tick: int
    horizon: int
    sample_interval: int
    mode: str
    seed: int
    follower_x0: list[np.ndarray] = field(default_factory=list)
    leader_x0: list[np.ndarray] = field(default_factory=list)
    follower_names: list[str] = field(default_factory=list)
    leader_names: list[str] = field(default_factory=list)
    record_states: bool = False

    def __post_init__(self):
        topo = self.topology
        n, m = topo.n_followers, topo.n_leaders
        self.tracking_a = np.atleast_2d(np.asarray(self.tracking_a, dtype=float))
        self.tracking_x0 = np.asarray(self.tracking_x0, dtype=float).ravel()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.follower_dynamics) != n or len(self.leader_dynamics) != m:
            raise ValueError("one dynamics entry per follower and leader is required")
        if len(self.formation) != m:
            raise ValueError("one formation entry per leader is required")
        if not self.follower_x0:
            self.follower_x0 = [np.zeros(self.state_dim) for _ in range(n)]
        if not self.leader_x0:
            self.leader_x0 = [np.zeros(self.state_dim) for _ in range(m)]
        if not self.follower_names:
            self.follower_names = [f"F{i + 1}" for i in range(n)]
        if not self.leader_names:
            self.leader_names = [f"L{q + 1}" for q in range(m)]
        if self.sample_interval < 1:
            raise ValueError("sample interval must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    @property
    def state_dim(self) -> int:
        return self.tracking_a.shape[0]

    def agent_name(self, node: int) -> str:
        topo = self.topology
        if node == 0:
            return "T"
        if topo.is_follower(node):
            return self.follower_names[topo.follower_index(node)]
        return self.leader_names[topo.leader_index(node)]

    def dynamics_of(self, node: int) -> mc.AgentDynamics:
        topo = self.topology
        if topo.is_follower(node):
            return self.follower_dynamics[topo.follower_index(node)]
        return self.leader_dynamics[topo.leader_index(node)]

    def agent_learner_config(self, node: int) -> ln.LearnerConfig:
        return replace(self.learner, rng_seed=(self.seed * 100003 + node) & 0x7FFFFFFF)

    def validate(self) -> list[str]:
        """Assumption checks; returns a list of failure descriptions."""
        problems: list[str] = []
        report = verify_assumption1(self.topology)
        if not report.passed:
            problems.append(report.describe())
        for _, factors in self.schedule.entries:
            missing = [q for q in self.topology.leader_nodes if q not in factors]
            if missing:
                problems.append(f"schedule entry missing factors for leaders {missing}")
        if mc.spectral_radius(self.tracking_a) > 1.0 + mc.MARGINAL_TOL:
            problems.append("tracking dynamics must have spectral radius <= 1")
        for q, form in zip(self.topology.leader_nodes, self.formation):
            if mc.spectral_radius(form.S) > 1.0 + mc.MARGINAL_TOL:
                problems.append(f"formation dynamics of {self.agent_name(q)} expand")
        for node in self.topology.follower_nodes + self.topology.leader_nodes:
            dyn = self.dynamics_of(node)
            if not mc.is_stabilizable(dyn):
                problems.append(f"agent {self.agent_name(node)} is not stabilizable")
            targets = [self.tracking_a] + [f.S for f in self.formation]
            for target in targets:
                try:
                    mc.min_norm_regulation_solution(dyn.A, dyn.B, target)
                except PfccError:
                    problems.append(
                        f"regulation equation unsolvable for agent {self.agent_name(node)}")
                    break
        return problems


@dataclass
class TraceRecord:
    tick: int
    formation_errors: dict[int, float]
    containment_errors: dict[int, float]
    observer_errors: dict[int, float]
    states: dict[int, np.ndarray] | None = None


@dataclass
class TraceLog:
    """Append-only sampled run history with a fixed column order."""

    config: ScenarioConfig
    records: list[TraceRecord] = field(default_factory=list)

    def header(self) -> list[str]:
        topo = self.config.topology
        cols = ["tick"]
        cols += [f"e_form_{self.config.agent_name(q)}" for q in topo.leader_nodes]
        cols += [f"e_cont_{self.config.agent_name(i)}" for i in topo.follower_nodes]
        cols += [f"obs_{self.config.agent_name(a)}"
                 for a in topo.leader_nodes + topo.follower_nodes]
        if self.config.record_states:
            for a in topo.follower_nodes + topo.leader_nodes:
                cols += [f"x_{self.config.agent_name(a)}_{k}"
                         for k in range(self.config.state_dim)]
        return cols

    def rows(self) -> list[list[float]]:
        topo = self.config.topology
        out = []
        for rec in self.records:
            row: list[float] = [float(rec.tick)]
            row += [rec.formation_errors[q] for q in topo.leader_nodes]
            row += [rec.containment_errors[i] for i in topo.follower_nodes]
            row += [rec.observer_errors[a]
                    for a in topo.leader_nodes + topo.follower_nodes]
            if self.config.record_states and rec.states is not None:
                for a in topo.follower_nodes + topo.leader_nodes:
                    row += [float(v) for v in rec.states[a]]
            out.append(row)
        return out

    def column(self, name: str) -> np.ndarray:
        idx = self.header().index(name)
        return np.array([row[idx] for row in self.rows()])


def formation_error(x_q: np.ndarray, h_q: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    """Leader tracking error x - h - x_o."""
    return np.asarray(x_q, dtype=float) - np.asarray(h_q, dtype=float) - np.asarray(x_o, dtype=float)


def containment_error(x_i: np.ndarray, h_all: dict[int, np.ndarray],
                      x_o: np.ndarray, alphas: dict[int, float]) -> np.ndarray:
    """Follower error against its convex combination of leader targets."""
    e = np.asarray(x_i, dtype=float).copy()
    for q, alpha in alphas.items():
        if alpha != 0.0:
            e = e - alpha * (np.asarray(h_all[q], dtype=float) + np.asarray(x_o, dtype=float))
    return e


@dataclass
class AgentLearner:
    """Engine-side learner bookkeeping for one agent."""

    node: int
    cfg: ln.LearnerConfig
    layout: tuple[int, ...]
    controller: ln.LearnedController
    buffer: ln.DataBuffer
    warmup: np.ndarray
    behavior_full: np.ndarray | None = None
    prev_aug: np.ndarray | None = None
    prev_u: np.ndarray | None = None
    flushes: int = 0


#: How many transient-contaminated windows a learner may discard before the
#: run is aborted.
MAX_WINDOW_FLUSHES = 50

#: Value-iteration sweeps per tick once a window is full.  The sweeps are
#: offline work on a frozen window; batching them shortens the interval in
#: which the behaviour policy still carries probing noise.
LEARN_ITERATIONS_PER_TICK = 50


@dataclass
class WorldState:
    tick: int
    x_followers: list[np.ndarray]
    x_leaders: list[np.ndarray]
    h: list[np.ndarray]
    x_o: np.ndarray
    knowledge: dict[int, pr.AgentKnowledge]
    track_obs: dict[int, ob.RlsObserver]
    form_obs: dict[int, dict[int, ob.RlsObserver]]
    learners: dict[int, AgentLearner]
    oracle_gains: dict[int, mc.LeaderGains | mc.FollowerGains]
    oracle_layouts: dict[int, tuple]
    baseline_alpha: dict[int, dict[int, float]] | None
    trace: TraceLog
    propagation_changes: int = 0
    propagation_stable_for: int = 0

    def plant_state(self, topo: DirectedTopology, node: int) -> np.ndarray:
        if topo.is_follower(node):
            return self.x_followers[topo.follower_index(node)]
        return self.x_leaders[topo.leader_index(node)]


@dataclass
class RunResult:
    trace: TraceLog
    state: WorldState
    summary: dict
    error: SimulationAbort | None = None

    @property
    def completed(self) -> bool:
        return self.error is None


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _baseline_weights(topo: DirectedTopology) -> dict[int, dict[int, float]]:
    """Classical containment weights: rows of -L1^-1 L2."""
    blocks = build_laplacian(topo)
    w = -np.linalg.solve(blocks.L1, blocks.L2)
    out: dict[int, dict[int, float]] = {}
    for i in topo.follower_nodes:
        fi = topo.follower_index(i)
        row = {q: float(w[fi, topo.leader_index(q)]) for q in topo.leader_nodes
               if abs(w[fi, topo.leader_index(q)]) > 1e-12}
        out[i] = row
    return out


def init_world(cfg: ScenarioConfig) -> WorldState:
    topo = cfg.topology
    problems = cfg.validate()
    if problems:
        raise AssumptionError("; ".join(problems))
    n_dim = cfg.state_dim
    knowledge = pr.init_knowledge(topo, cfg.schedule.initial())

    track_obs = {}
    for q in topo.leader_nodes:
        track_obs[q] = ob.RlsObserver.create(cfg.leader_tracking_observer, n_dim)
    for i in topo.follower_nodes:
        track_obs[i] = ob.RlsObserver.create(cfg.follower_tracking_observer, n_dim)

    form_obs: dict[int, dict[int, ob.RlsObserver]] = {
        a: {} for a in topo.follower_nodes + topo.leader_nodes}
    state = WorldState(
        tick=0,
        x_followers=[np.asarray(x, dtype=float).ravel().copy() for x in cfg.follower_x0],
        x_leaders=[np.asarray(x, dtype=float).ravel().copy() for x in cfg.leader_x0],
        h=[form.h0.copy() for form in cfg.formation],
        x_o=cfg.tracking_x0.copy(),
        knowledge=knowledge,
        track_obs=track_obs,
        form_obs=form_obs,
        learners={},
        oracle_gains={},
        oracle_layouts={},
        baseline_alpha=_baseline_weights(topo) if cfg.mode == MODE_BASELINE else None,
        trace=TraceLog(config=cfg),
    )
    _spawn_formation_observers(state, cfg)
    if cfg.mode in (MODE_DATA, MODE_BASELINE):
        for node in topo.follower_nodes + topo.leader_nodes:
            _reset_learner(state, cfg, node)
    return state


def _alpha_of(state: WorldState, cfg: ScenarioConfig, i: int) -> dict[int, float]:
    if state.baseline_alpha is not None:
        return state.baseline_alpha[i]
    return state.knowledge[i].coefficients


def _layout_of(state: WorldState, cfg: ScenarioConfig, node: int) -> tuple[int, ...]:
    topo = cfg.topology
    if topo.is_leader(node):
        return (node,)
    if state.baseline_alpha is not None:
        return tuple(sorted(state.baseline_alpha[node]))
    return tuple(sorted(state.knowledge[node].influential))


def _spawn_formation_observers(state: WorldState, cfg: ScenarioConfig) -> None:
    n_dim = cfg.state_dim
    for a in cfg.topology.follower_nodes + cfg.topology.leader_nodes:
        for q in sorted(state.knowledge[a].influential):
            if q != a and q not in state.form_obs[a]:
                state.form_obs[a][q] = ob.RlsObserver.create(
                    cfg.formation_observers[q], n_dim)


def _augmented_dims(cfg: ScenarioConfig, node: int,
                    layout: tuple[int, ...]) -> tuple[int, int]:
    n = cfg.state_dim
    blocks = 3 if cfg.topology.is_leader(node) else 2 + len(layout)
    return blocks * n, cfg.dynamics_of(node).m


def _reset_learner(state: WorldState, cfg: ScenarioConfig, node: int,
                   keep_buffer: bool = False) -> None:
    """Fresh value iteration for one agent; optionally retain the window.

    The window survives coefficient-only changes because its rows are
    policy- and cost-independent; layout growth changes dimensions and
    forces a flush.
    """
    layout = _layout_of(state, cfg, node)
    dim, width = _augmented_dims(cfg, node, layout)
    agent_cfg = cfg.agent_learner_config(node)
    old = state.learners.get(node)
    behavior_full = None
    buffer = None
    if old is not None and old.layout == layout:
        # the previous converged gain stays the behaviour policy while the
        # next window is collected and iterated on
        if old.controller.status == ln.CONVERGED:
            behavior_full = old.controller.K_hat
        if keep_buffer:
            buffer = old.buffer
    if buffer is None:
        buffer = ln.DataBuffer(dim, width, agent_cfg.rows_for(dim, width),
                               layout_key=(node, layout))
    state.learners[node] = AgentLearner(
        node=node, cfg=agent_cfg, layout=layout,
        controller=ln.LearnedController.create(dim, width),
        buffer=buffer, warmup=np.atleast_2d(cfg.warmup_gains.get(
            node, np.zeros((width, cfg.state_dim)))),
        behavior_full=behavior_full)


def _augmented_state(state: WorldState, cfg: ScenarioConfig, node: int,
                     layout: tuple[int, ...]) -> np.ndarray:
    """Measured augmented state: plant, formation values/estimates, tracking
    estimate.  Leaders read their own formation state exactly."""
    topo = cfg.topology
    parts = [state.plant_state(topo, node)]
    if topo.is_leader(node):
        parts.append(state.h[topo.leader_index(node)])
    else:
        for q in layout:
            parts.append(state.form_obs[node][q].x_hat)
    parts.append(state.track_obs[node].x_hat)
    return np.concatenate(parts)


def _error_selector(cfg: ScenarioConfig, node: int, layout: tuple[int, ...],
                    alphas: dict[int, float]) -> np.ndarray:
    n = cfg.state_dim
    eye = np.eye(n)
    if cfg.topology.is_leader(node):
        return np.hstack([eye, -eye, -eye])
    return np.hstack([eye] + [-alphas.get(q, 0.0) * eye for q in layout] + [-eye])


# ---------------------------------------------------------------------------
# oracle-mode synthesis
# ---------------------------------------------------------------------------

def synthesize_oracle_gains(cfg: ScenarioConfig, node: int,
                            layout: tuple[int, ...],
                            alphas: dict[int, float]) -> mc.LeaderGains | mc.FollowerGains:
    """Model-based gains for one agent's current layout."""
    topo = cfg.topology
    dyn = cfg.dynamics_of(node)
    q_w = cfg.q_weights[node]
    if topo.is_leader(node):
        sys = mc.build_leader_augmented(dyn, cfg.formation[topo.leader_index(node)],
                                        cfg.tracking_a, q_w)
        sol = mc.riccati_value_iteration(sys)
        return mc.leader_gains_from(sol.K, cfg.state_dim)
    forms = [cfg.formation[topo.leader_index(q)] for q in layout]
    sys = mc.build_follower_augmented(dyn, forms, cfg.tracking_a,
                                      [alphas[q] for q in layout], q_w)
    sol = mc.riccati_value_iteration(sys)
    return mc.follower_gains_from(sol.K, cfg.state_dim, list(layout))


def _oracle_control(state: WorldState, cfg: ScenarioConfig, node: int) -> np.ndarray:
    topo = cfg.topology
    layout = _layout_of(state, cfg, node)
    alphas = {} if topo.is_leader(node) else _alpha_of(state, cfg, node)
    key = (layout, tuple(sorted(alphas.items())))
    if state.oracle_layouts.get(node) != key:
        if topo.is_follower(node) and not layout:
            return cfg.warmup_gains.get(
                node, np.zeros((cfg.dynamics_of(node).m, cfg.state_dim))
            ) @ state.plant_state(topo, node)
        state.oracle_gains[node] = synthesize_oracle_gains(cfg, node, layout, alphas)
        state.oracle_layouts[node] = key
    gains = state.oracle_gains[node]
    x = state.plant_state(topo, node)
    x_o_hat = state.track_obs[node].x_hat
    if topo.is_leader(node):
        return mc.leader_control(gains, x, state.h[topo.leader_index(node)], x_o_hat)
    h_hats = {q: state.form_obs[node][q].x_hat for q in layout}
    return mc.follower_control(gains, x, x_o_hat, h_hats, alphas)


# ---------------------------------------------------------------------------
# observer phase
# ---------------------------------------------------------------------------

def _tracking_network_step(state: WorldState, cfg: ScenarioConfig,
                           x_o_now: np.ndarray,
                           x_o_next: np.ndarray) -> dict[int, ob.RlsObserver]:
    topo = cfg.topology
    members = topo.leader_nodes + topo.follower_nodes
    est = {a: state.track_obs[a].x_hat for a in members}

    def eta_for(values: dict[int, np.ndarray], pin: np.ndarray) -> dict[int, np.ndarray]:
        etas = {}
        for q in topo.leader_nodes:
            qi = topo.leader_index(q)
            terms = [(topo.leader_adjacency[qi, topo.leader_index(j)], values[j])
                     for j in topo.leader_nodes if j != q]
            etas[q] = ob.consensus_error(values[q], terms,
                                         topo.tracking_to_leader[qi], pin)
        for i in topo.follower_nodes:
            fi = topo.follower_index(i)
            terms = [(topo.follower_adjacency[fi, topo.follower_index(j)], values[j])
                     for j in topo.follower_nodes if j != i]
            terms += [(topo.leader_to_follower[fi, topo.leader_index(q)], values[q])
                      for q in topo.leader_nodes]
            etas[i] = ob.consensus_error(values[i], terms, 0.0, None)
        return etas

    eta_now = eta_for(est, x_o_now)
    pred = {a: ob.predict_state(state.track_obs[a], eta_now[a]) for a in members}
    eta_next = eta_for(pred, x_o_next)
    return {a: ob.observer_step_tracking_leader(state.track_obs[a], eta_now[a],
                                                eta_next[a])
            for a in members}


def _formation_network_step(state: WorldState, cfg: ScenarioConfig, q: int,
                            h_now: np.ndarray,
                            h_next: np.ndarray) -> dict[int, ob.RlsObserver]:
    topo = cfg.topology
    qi = topo.leader_index(q)
    members = sorted(a for a in topo.follower_nodes + topo.leader_nodes
                     if a != q and q in state.knowledge[a].influential)
    observers = {m: state.form_obs[m][q] for m in members}
    est = {m: observers[m].x_hat for m in members}

    def eta_for(values: dict[int, np.ndarray], pin: np.ndarray) -> dict[int, np.ndarray]:
        etas = {}
        for m in members:
            terms = []
            if topo.is_leader(m):
                mi = topo.leader_index(m)
                for j in topo.leader_nodes:
                    if j in (m, q):
                        continue
                    w = topo.leader_adjacency[mi, topo.leader_index(j)]
                    if w > 0 and q in state.knowledge[j].influential:
                        terms.append((w, values[j]))
                pin_w = topo.leader_adjacency[mi, qi]
            else:
                mi = topo.follower_index(m)
                for j in topo.leader_nodes:
                    if j == q:
                        continue
                    w = topo.leader_to_follower[mi, topo.leader_index(j)]
                    if w > 0 and q in state.knowledge[j].influential:
                        terms.append((w, values[j]))
                for j in topo.follower_nodes:
                    if j == m:
                        continue
                    w = topo.follower_adjacency[mi, topo.follower_index(j)]
                    if w > 0 and q in state.knowledge[j].influential:
                        terms.append((w, values[j]))
                pin_w = topo.leader_to_follower[mi, qi]
            etas[m] = ob.consensus_error(values[m], terms, pin_w, pin)
        return etas

    eta_now = eta_for(est, h_now)
    pred = {m: ob.predict_state(observers[m], eta_now[m]) for m in members}
    eta_next = eta_for(pred, h_next)
    return {m: ob.observer_step_tracking_leader(observers[m], eta_now[m], eta_next[m])
            for m in members}


def _observer_phase(state: WorldState, cfg: ScenarioConfig
                    ) -> tuple[dict, dict]:
    """Compute all next-tick observers from the tick-k snapshot."""
    x_o_next = cfg.tracking_a @ state.x_o
    track_next = _tracking_network_step(state, cfg, state.x_o, x_o_next)
    form_next: dict[int, dict[int, ob.RlsObserver]] = {
        a: dict(state.form_obs[a]) for a in state.form_obs}
    for q in cfg.topology.leader_nodes:
        h_now = state.h[cfg.topology.leader_index(q)]
        h_next = cfg.formation[cfg.topology.leader_index(q)].S @ h_now
        for m, new_obs in _formation_network_step(state, cfg, q, h_now, h_next).items():
            form_next[m][q] = new_obs
    return track_next, form_next


# ---------------------------------------------------------------------------
# learner-driven control
# ---------------------------------------------------------------------------

def _learner_control(state: WorldState, cfg: ScenarioConfig, node: int) -> np.ndarray:
    lr = state.learners[node]
    layout = _layout_of(state, cfg, node)
    if layout != lr.layout:
        _reset_learner(state, cfg, node)  # layout grew: flush and restart
        lr = state.learners[node]
    aug = _augmented_state(state, cfg, node, lr.layout)
    if lr.controller.status == ln.CONVERGED:
        u = lr.controller.K_hat @ aug
    else:
        if lr.behavior_full is not None and lr.behavior_full.shape[1] == aug.size:
            u = lr.behavior_full @ aug
        else:
            u = lr.warmup @ state.plant_state(cfg.topology, node)
        u = u + ln.exploration_noise(lr.cfg, lr.buffer.input_dim, state.tick)
    lr.prev_aug = aug
    lr.prev_u = np.asarray(u, dtype=float).ravel()
    return lr.prev_u


def _learner_update(state: WorldState, cfg: ScenarioConfig, node: int,
                    completed_tick: int, next_state_builder) -> None:
    """Record the completed transition and run one iteration if ready."""
    lr = state.learners[node]
    if lr.prev_aug is None or completed_tick < cfg.learn_start_tick:
        return
    if lr.controller.status == ln.CONVERGED:
        return
    if not lr.buffer.is_full:
        lr.buffer.record(lr.prev_aug, lr.prev_u, next_state_builder(lr.layout))
    if lr.buffer.is_full:
        alphas = ({} if cfg.topology.is_leader(node)
                  else _alpha_of(state, cfg, node))
        c = _error_selector(cfg, node, lr.layout, alphas)
        try:
            for _ in range(LEARN_ITERATIONS_PER_TICK):
                lr.controller = ln.learning_tick(lr.controller, lr.buffer,
                                                 cfg.q_weights[node], c, lr.cfg,
                                                 allow_deficient=True)
                if lr.controller.status == ln.CONVERGED:
                    break
        except DataConsistencyError:
            # samples straddled an observer transient: discard the window
            # and collect a fresh one
            lr.flushes += 1
            if lr.flushes > MAX_WINDOW_FLUSHES:
                raise
            lr.buffer.flush()
            lr.controller = ln.LearnedController.create(
                lr.buffer.state_dim, lr.buffer.input_dim)
            return
        if (lr.controller.status != ln.CONVERGED
                and lr.controller.iterations > lr.cfg.max_iterations):
            raise ConvergenceError(
                f"learner exceeded {lr.cfg.max_iterations} iterations "
                f"(last gain delta {lr.controller.last_gain_delta:.3e})")


# ---------------------------------------------------------------------------
# the tick
# ---------------------------------------------------------------------------

def _sample_trace(state: WorldState, cfg: ScenarioConfig) -> None:
    topo = cfg.topology
    formation_errors = {}
    for q in topo.leader_nodes:
        qi = topo.leader_index(q)
        formation_errors[q] = float(np.linalg.norm(
            formation_error(state.x_leaders[qi], state.h[qi], state.x_o)))
    h_all = {q: state.h[topo.leader_index(q)] for q in topo.leader_nodes}
    containment_errors = {}
    for i in topo.follower_nodes:
        containment_errors[i] = float(np.linalg.norm(containment_error(
            state.x_followers[topo.follower_index(i)], h_all, state.x_o,
            _alpha_of(state, cfg, i))))
    observer_errors = {}
    for a in topo.leader_nodes + topo.follower_nodes:
        err = float(np.linalg.norm(state.track_obs[a].x_hat - state.x_o))
        for q in sorted(state.knowledge[a].influential):
            if q == a:
                continue
            err += float(np.linalg.norm(
                state.form_obs[a][q].x_hat - h_all[q]))
        observer_errors[a] = err
    states = None
    if cfg.record_states:
        states = {a: state.plant_state(topo, a).copy()
                  for a in topo.follower_nodes + topo.leader_nodes}
    state.trace.records.append(TraceRecord(
        tick=state.tick, formation_errors=formation_errors,
        containment_errors=containment_errors,
        observer_errors=observer_errors, states=states))


def step_world(state: WorldState, cfg: ScenarioConfig) -> WorldState:
    """Advance the world by one tick (mutates and returns ``state``)."""
    topo = cfg.topology
    tick = state.tick

    # 1. propensity schedule
    entry = cfg.schedule.entry_at(tick)
    if entry is not None and tick > 0:
        old_coeffs = {i: state.knowledge[i].coefficients
                      for i in topo.follower_nodes}
        state.knowledge = pr.apply_propensity_update(state.knowledge, entry)
        if cfg.mode in (MODE_DATA, MODE_BASELINE):
            for i in topo.follower_nodes:
                changed = state.knowledge[i].coefficients != old_coeffs[i]
                lr = state.learners.get(i)
                if changed and lr is not None and lr.cfg.relearn_on_alpha_change:
                    # fresh window: post-switch data is far cleaner than the
                    # start-up window (observers have long settled)
                    _reset_learner(state, cfg, i, keep_buffer=False)

    # 2. influence propagation (idempotent at the fixed point)
    if state.propagation_stable_for < topo.n_followers + topo.n_leaders:
        nxt = pr.step_propagation(state.knowledge, topo)
        if any(nxt[a].influential != state.knowledge[a].influential for a in nxt):
            state.propagation_changes += 1
            state.propagation_stable_for = 0
        else:
            state.propagation_stable_for += 1
        state.knowledge = nxt
        _spawn_formation_observers(state, cfg)

    # 3. trace sampling of the tick-k state
    if tick % cfg.sample_interval == 0:
        _sample_trace(state, cfg)

    # 4. observer updates from the tick-k snapshot
    try:
        track_next, form_next = _observer_phase(state, cfg)
    except PfccError as exc:
        raise SimulationAbort(tick, "observers", exc) from exc

    # 5. controls from the tick-k snapshot
    controls: dict[int, np.ndarray] = {}
    for node in topo.follower_nodes + topo.leader_nodes:
        try:
            if cfg.mode == MODE_ORACLE:
                controls[node] = np.asarray(_oracle_control(state, cfg, node)).ravel()
            else:
                controls[node] = _learner_control(state, cfg, node)
        except PfccError as exc:
            raise SimulationAbort(tick, cfg.agent_name(node), exc) from exc

    # 6. plant / formation / tracking advance
    new_followers = []
    for i in topo.follower_nodes:
        fi = topo.follower_index(i)
        dyn = cfg.follower_dynamics[fi]
        new_followers.append(dyn.A @ state.x_followers[fi] + dyn.B @ controls[i])
    new_leaders = []
    for q in topo.leader_nodes:
        qi = topo.leader_index(q)
        dyn = cfg.leader_dynamics[qi]
        new_leaders.append(dyn.A @ state.x_leaders[qi] + dyn.B @ controls[q])
    new_h = [cfg.formation[k].S @ state.h[k] for k in range(topo.n_leaders)]
    new_x_o = cfg.tracking_a @ state.x_o

    for name, xs in (("followers", new_followers), ("leaders", new_leaders)):
        for x in xs:
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > _STATE_GUARD:
                raise SimulationAbort(tick, name,
                                      ConvergenceError("plant state diverged"))

    # 7. commit next states, then let learners see the completed transition
    state.x_followers = new_followers
    state.x_leaders = new_leaders
    state.h = new_h
    state.x_o = new_x_o
    state.track_obs = track_next
    state.form_obs = form_next
    state.tick = tick + 1

    if cfg.mode in (MODE_DATA, MODE_BASELINE):
        for node in topo.follower_nodes + topo.leader_nodes:
            def builder(layout, node=node):
                return _augmented_state(state, cfg, node, layout)
            try:
                _learner_update(state, cfg, node, tick, builder)
            except PfccError as exc:
                raise SimulationAbort(tick, cfg.agent_name(node), exc) from exc
    return state


def summarize(state: WorldState, cfg: ScenarioConfig) -> dict:
    topo = cfg.topology
    learners = {}
    for node, lr in sorted(state.learners.items()):
        learners[cfg.agent_name(node)] = {
            "status": lr.controller.status,
            "iterations": lr.controller.iterations,
            "last_gain_delta": lr.controller.last_gain_delta,
            "layout": [cfg.agent_name(q) for q in lr.layout],
        }
    final_obs = {}
    if state.trace.records:
        last = state.trace.records[-1]
        final_obs = {cfg.agent_name(a): v for a, v in last.observer_errors.items()}
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "sample_interval": cfg.sample_interval,
        "propagation_change_ticks": state.propagation_changes,
        "learners": learners,
        "final_observer_errors": final_obs,
    }


def run(cfg: ScenarioConfig) -> RunResult:
    """Deterministic full-horizon run; on mid-run failure the partial trace
    is retained on the result."""
    state = init_world(cfg)
    error: SimulationAbort | None = None
    try:
        for _ in range(cfg.horizon):
            step_world(state, cfg)
    except SimulationAbort as exc:
        error = exc
    return RunResult(trace=state.trace, state=state,
                     summary=summarize(state, cfg), error=error)


def observer_gain_bound_diagnostic(state: WorldState, cfg: ScenarioConfig,
                                   q: int) -> ob.GainBound:
    """Evaluate the coupling-gain bound on leader q's formation network at
    the current tick (diagnostic only)."""
    topo = cfg.topology
    qi = topo.leader_index(q)
    members = sorted(a for a in topo.follower_nodes + topo.leader_nodes
                     if a != q and a in state.form_obs and q in state.form_obs[a])
    if not members:
        raise PfccError(f"no agents observe leader {cfg.agent_name(q)}")
    n = cfg.state_dim
    v = len(members)
    idx = {m: k for k, m in enumerate(members)}
    graph = np.zeros((v, v))
    for m in members:
        k = idx[m]
        if topo.is_leader(m):
            mi = topo.leader_index(m)
            weights = [(j, topo.leader_adjacency[mi, topo.leader_index(j)])
                       for j in topo.leader_nodes if j not in (m, q)]
            pin = topo.leader_adjacency[mi, qi]
        else:
            mi = topo.follower_index(m)
            weights = [(j, topo.leader_to_follower[mi, topo.leader_index(j)])
                       for j in topo.leader_nodes if j != q]
            weights += [(j, topo.follower_adjacency[mi, topo.follower_index(j)])
                        for j in topo.follower_nodes if j != m]
            pin = topo.leader_to_follower[mi, qi]
        for j, w in weights:
            if w > 0 and j in idx and q in state.knowledge[j].influential:
                graph[k, idx[j]] -= w
                graph[k, k] += w
        graph[k, k] += pin
    o_cfg = cfg.formation_observers[q]
    s_q = cfg.formation[qi].S
    s_consensus = (np.kron(np.eye(v), s_q)
                   - o_cfg.consensus_gain * np.kron(graph, o_cfg.gain_matrix))
    zeta = np.zeros((v * n * n, v * n))
    l_bar = np.zeros((v * n, v * n))
    for m in members:
        k = idx[m]
        obs = state.form_obs[m][q]
        zeta[k * n * n : (k + 1) * n * n, k * n : (k + 1) * n] = ob.regressor(obs.x_hat)
        l_bar[k * n : (k + 1) * n, k * n : (k + 1) * n] = np.linalg.inv(
            np.linalg.inv(obs.L) + o_cfg.xi * np.eye(n))
    return ob.coupling_gain_bound(zeta, l_bar, graph, s_consensus, o_cfg.xi)
