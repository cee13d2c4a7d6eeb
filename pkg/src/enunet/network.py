"""Networks of evolvable units: wiring, the batched step, and agent episodes.

Each neuron is one unit instance; each of its incoming synapses is another
unit instance. All synapses share one chromosome and all neurons share a
second one; only the per-instance memory states differ. One network step:

1. assemble the source table (sensory nodes, reward node, previous neuron
   outputs);
2. build every synapse input as [its source's channels, its post-neuron's
   previous channels] -- the second half is the back-propagated output;
3. step all synapses as one batch;
4. sum each neuron's synapse outputs channel-wise;
5. step all neurons as one batch on the summed input.

Sensory and reward nodes are plain signal emitters, not units: stimulus on
channel 0, positive reward magnitude on channel 1, negative on channel 2.

:func:`evaluate_tmaze_population` runs offspring x episodes agents in
lockstep with per-agent stacked weights, dropping dead agents as it goes;
:func:`run_agent_episode` is the one-agent reference path used by tests and
trace replay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tmaze
from .tmaze import Action, MazeConfig, Observation, TMazeVec, encode_observation
from .units import (
    ENUDims,
    ENUParams,
    Genome,
    ShapeError,
    StackedGates,
    enu_step_batch,
    enu_step_stacked,
    flatten,
    init_params,
    stack_chromosome,
    _norm_seed,
)


class ConfigurationError(ValueError):
    """Network layout cannot be realized (e.g. more sources requested than exist)."""


# Per-episode stream tags: wiring/permutations, environment, output noise.
_TOPO_TAG = 0x544F
_ENV_TAG = 0x454E
_NOISE_TAG = 0x4E4F

SYNAPSE_CHROMOSOME = "synapse"
NEURON_CHROMOSOME = "neuron"


@dataclass(frozen=True)
class NetworkConfig:
    n_neurons: int = 6
    n_outputs: int = 3
    n_sensory: int = 3
    channels: int = 16
    memory: int = 32
    syn_sensory: int = 2
    syn_hidden: int = 2
    syn_output: int = 2
    syn_reward: int = 1
    syn_self: int = 1
    output_noise_std: float = 0.02
    steps_per_action: int = 4
    action_threshold: float = 0.1

    def __post_init__(self):
        if not 1 <= self.n_outputs <= self.n_neurons:
            raise ConfigurationError("need 1 <= n_outputs <= n_neurons")
        if self.syn_sensory > self.n_sensory:
            raise ConfigurationError("more sensory synapses than sensory nodes")
        if self.n_hidden and self.syn_hidden > self.n_hidden - 1:
            raise ConfigurationError("more hidden synapses than distinct hidden sources")
        if self.n_hidden == 0 and self.syn_hidden > 0:
            raise ConfigurationError("hidden synapses requested but no hidden neurons")
        if self.syn_output > self.n_outputs - 1 and self.n_outputs == self.n_neurons:
            raise ConfigurationError("more output synapses than distinct output sources")
        if self.syn_output > self.n_outputs:
            raise ConfigurationError("more output synapses than output neurons")
        if self.syn_self > 1:
            raise ConfigurationError("at most one self connection per neuron")
        if self.steps_per_action < 1:
            raise ConfigurationError("steps_per_action must be >= 1")

    @property
    def n_hidden(self) -> int:
        return self.n_neurons - self.n_outputs

    @property
    def total_synapses(self) -> int:
        return (
            self.syn_sensory
            + self.syn_hidden
            + self.syn_output
            + self.syn_reward
            + self.syn_self
        )

    @property
    def n_sources(self) -> int:
        """Rows of the source table: sensory nodes, reward node, neurons."""
        return self.n_sensory + 1 + self.n_neurons

    @property
    def reward_node(self) -> int:
        return self.n_sensory

    def neuron_node(self, j: int) -> int:
        return self.n_sensory + 1 + j

    @property
    def synapse_dims(self) -> ENUDims:
        # Synapse input: source channels + back-propagated post-neuron channels.
        return ENUDims(self.memory, self.channels, 2 * self.channels)

    @property
    def neuron_dims(self) -> ENUDims:
        return ENUDims(self.memory, self.channels, self.channels)

    def genome_layout(self):
        return (
            (SYNAPSE_CHROMOSOME, self.synapse_dims),
            (NEURON_CHROMOSOME, self.neuron_dims),
        )


@dataclass
class ConnectionTopology:
    """Who feeds whom, plus the episode's sensory and action shufflings.

    ``sources[j, s]`` is the source-table row feeding synapse slot s of
    neuron j. ``sensory_perm[detector]`` is the sensory node lit by that
    detector; ``action_perm[slot]`` the action taken by output slot ``slot``.
    """

    sources: np.ndarray
    sensory_perm: np.ndarray
    action_perm: np.ndarray
    cfg: NetworkConfig

    def validate(self) -> None:
        cfg = self.cfg
        if self.sources.shape != (cfg.n_neurons, cfg.total_synapses):
            raise ConfigurationError("sources table has wrong shape")
        for j in range(cfg.n_neurons):
            row = self.sources[j]
            self_id = cfg.neuron_node(j)
            if int((row == self_id).sum()) != cfg.syn_self:
                raise ConfigurationError(f"neuron {j} must have exactly one self link")
        for perm, size in ((self.sensory_perm, cfg.n_sensory), (self.action_perm, cfg.n_outputs)):
            if sorted(perm.tolist()) != list(range(size)):
                raise ConfigurationError("permutation is not a bijection")


def build_topology(cfg: NetworkConfig, seed) -> ConnectionTopology:
    """Sample per-neuron sources without replacement within each class.

    Slot order per neuron: sensory, hidden, output, reward, self. Hidden and
    output pools exclude the post-neuron itself (it gets the dedicated self
    slot). Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    hidden_nodes = [cfg.neuron_node(j) for j in range(cfg.n_hidden)]
    output_nodes = [cfg.neuron_node(j) for j in range(cfg.n_hidden, cfg.n_neurons)]
    rows = []
    for j in range(cfg.n_neurons):
        self_id = cfg.neuron_node(j)
        hid_pool = [h for h in hidden_nodes if h != self_id]
        out_pool = [o for o in output_nodes if o != self_id]
        if len(hid_pool) < cfg.syn_hidden or len(out_pool) < cfg.syn_output:
            raise ConfigurationError(f"neuron {j}: not enough distinct sources")
        row = np.concatenate(
            [
                rng.choice(cfg.n_sensory, size=cfg.syn_sensory, replace=False),
                rng.choice(hid_pool, size=cfg.syn_hidden, replace=False),
                rng.choice(out_pool, size=cfg.syn_output, replace=False),
                np.full(cfg.syn_reward, cfg.reward_node),
                np.full(cfg.syn_self, self_id),
            ]
        )
        rows.append(row)
    topo = ConnectionTopology(
        sources=np.array(rows, dtype=np.int64),
        sensory_perm=rng.permutation(cfg.n_sensory),
        action_perm=rng.permutation(cfg.n_outputs),
        cfg=cfg,
    )
    topo.validate()
    return topo


@dataclass
class NetworkState:
    """All per-instance unit states of one agent; reset is all zeros."""

    syn_h: np.ndarray  # (n_neurons, total_synapses, k)
    syn_o: np.ndarray  # (n_neurons, total_synapses, c)
    neu_h: np.ndarray  # (n_neurons, k)
    neu_o: np.ndarray  # (n_neurons, c) -- also the outputs broadcast next step

    @classmethod
    def zeros(cls, cfg: NetworkConfig, dtype=np.float64) -> "NetworkState":
        n, s = cfg.n_neurons, cfg.total_synapses
        return cls(
            syn_h=np.zeros((n, s, cfg.memory), dtype=dtype),
            syn_o=np.zeros((n, s, cfg.channels), dtype=dtype),
            neu_h=np.zeros((n, cfg.memory), dtype=dtype),
            neu_o=np.zeros((n, cfg.channels), dtype=dtype),
        )


def network_step(
    syn_params: ENUParams,
    neu_params: ENUParams,
    state: NetworkState,
    topo: ConnectionTopology,
    sensory: np.ndarray,
    reward_sig: np.ndarray,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
):
    """One network step for a single agent. Returns (new_state, neuron_outputs).

    ``sensory`` is (n_sensory, c), ``reward_sig`` (c,). ``noise``, when given,
    is the pre-scaled (n*S + n, c) pre-clip output perturbation (synapse rows
    first); otherwise drawn from ``rng`` scaled by ``noise_std``.
    """
    cfg = topo.cfg
    n, s, c = cfg.n_neurons, cfg.total_synapses, cfg.channels
    if sensory.shape != (cfg.n_sensory, c) or reward_sig.shape != (c,):
        raise ShapeError("sensory/reward signal shapes do not match the config")
    if noise is None and noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng or explicit noise")
        noise = noise_std * rng.standard_normal((n * s + n, c))
    source_table = np.concatenate([sensory, reward_sig[None, :], state.neu_o], axis=0)
    src = source_table[topo.sources.reshape(-1)]
    post = np.repeat(state.neu_o, s, axis=0)
    x_syn = np.concatenate([src, post], axis=1)
    syn_h, syn_o = enu_step_batch(
        syn_params,
        state.syn_h.reshape(n * s, -1),
        state.syn_o.reshape(n * s, -1),
        x_syn,
        noise=None if noise is None else noise[: n * s],
    )
    integrated = syn_o.reshape(n, s, c).sum(axis=1)
    neu_h, neu_o = enu_step_batch(
        neu_params,
        state.neu_h,
        state.neu_o,
        integrated,
        noise=None if noise is None else noise[n * s :],
    )
    k = cfg.memory
    new_state = NetworkState(
        syn_h=syn_h.reshape(n, s, k),
        syn_o=syn_o.reshape(n, s, c),
        neu_h=neu_h,
        neu_o=neu_o,
    )
    return new_state, neu_o


def select_action(window_outputs, topo: ConnectionTopology, threshold: float) -> Action:
    """Pick the action of the most active output neuron over the window.

    ``window_outputs`` is (steps_per_action, n_outputs) of channel-0 values.
    Below-threshold maxima mean no neuron activated: NOOP. Ties go to the
    lowest output index, then through the episode's action permutation.
    """
    activity = np.asarray(window_outputs).sum(axis=0)
    best = int(np.argmax(activity))
    if activity[best] < threshold:
        return Action.NOOP
    return Action(int(topo.action_perm[best]))


@dataclass
class EpisodeTrace:
    """Per-sub-step network readout plus the per-step environment record."""

    network_rows: list = field(default_factory=list)
    env: tmaze.EnvTrace = field(default_factory=tmaze.EnvTrace)

    def add_network_rows(self, env_step, obs, reward_in, window, action, n_outputs):
        for sub in range(len(window)):
            self.network_rows.append(
                (env_step, sub, int(obs), float(reward_in))
                + tuple(float(v) for v in window[sub])
                + (int(action),)
            )

    def pad_dead(self, env_step, obs, steps_per_action, n_outputs, max_steps):
        for step in range(env_step, max_steps):
            window = [(0.0,) * n_outputs] * steps_per_action
            self.add_network_rows(step, obs, 0.0, window, Action.NOOP, n_outputs)

    def save_network_csv(self, path) -> None:
        n_out = len(self.network_rows[0]) - 5 if self.network_rows else 0
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["env_step", "sub_step", "obs", "reward"]
                + [f"out_{j}" for j in range(n_out)]
                + ["action"]
            )
            for row in self.network_rows:
                w.writerow(row)

    def save_env_csv(self, path) -> None:
        self.env.save_csv(path)


def _derive(episode_seed: int, tag: int) -> int:
    return int(np.random.default_rng((_norm_seed(episode_seed), tag)).integers(2**63))


def init_network_genome(cfg: NetworkConfig, seed: int, init_std: float = 0.1) -> Genome:
    """Fresh two-chromosome genome (synapse then neuron), deterministic given seed."""
    return flatten(
        [
            (SYNAPSE_CHROMOSOME, init_params(cfg.synapse_dims, _derive(seed, 0), init_std)),
            (NEURON_CHROMOSOME, init_params(cfg.neuron_dims, _derive(seed, 1), init_std)),
        ]
    )


def _check_layout(genome: Genome, cfg: NetworkConfig) -> None:
    want = cfg.genome_layout()
    if tuple(genome.layout) != want:
        raise ConfigurationError(
            f"genome layout {genome.layout} does not match the network layout {want}"
        )


def run_agent_episode(
    genome: Genome,
    maze_cfg: MazeConfig,
    net_cfg: NetworkConfig,
    episode_seed: int,
    max_env_steps: int | None = None,
    record_trace: bool = False,
    dtype=np.float64,
):
    """One full episode of one agent; returns (fitness, EpisodeTrace | None).

    Topology (wiring and both permutations), environment stream and output
    noise stream are all derived from the episode seed, so the result is a
    pure function of (genome, episode_seed). The network stops stepping once
    the agent dies; trace rows are padded to the episode length.
    """
    _check_layout(genome, net_cfg)
    cfg = net_cfg
    n, s, c = cfg.n_neurons, cfg.total_synapses, cfg.channels
    max_steps = maze_cfg.max_steps if max_env_steps is None else min(max_env_steps, maze_cfg.max_steps)
    topo = build_topology(cfg, (_norm_seed(episode_seed), _TOPO_TAG))
    env_state, obs = tmaze.env_reset(maze_cfg, _derive(episode_seed, _ENV_TAG))
    noise_rng = (
        np.random.default_rng((_norm_seed(episode_seed), _NOISE_TAG))
        if cfg.output_noise_std > 0
        else None
    )
    params = dict(
        (name, p.astype(dtype)) for name, p in
        ((nm, pr) for nm, pr in __import__("enunet.units", fromlist=["unflatten"]).unflatten(genome))
    )
    syn_params = params[SYNAPSE_CHROMOSOME]
    neu_params = params[NEURON_CHROMOSOME]
    state = NetworkState.zeros(cfg, dtype)
    trace = EpisodeTrace() if record_trace else None
    out_lo = cfg.n_hidden
    fitness = 0.0
    reward_prev = 0.0
    step = 0
    while step < max_steps:
        sensory, reward_sig = encode_observation(obs, reward_prev, topo.sensory_perm, c)
        sensory = sensory.astype(dtype)
        reward_sig = reward_sig.astype(dtype)
        window = []
        for _ in range(cfg.steps_per_action):
            noise = None
            if noise_rng is not None:
                noise = (cfg.output_noise_std * noise_rng.standard_normal((n * s + n, c))).astype(
                    dtype
                )
            state, outputs = network_step(
                syn_params, neu_params, state, topo, sensory, reward_sig, noise=noise
            )
            window.append(outputs[out_lo:, 0].copy())
        action = select_action(np.array(window), topo, cfg.action_threshold)
        env_state, obs, reward, done = tmaze.env_step(env_state, action)
        fitness += reward
        reward_prev = reward
        if trace is not None:
            trace.add_network_rows(step, obs, reward_prev, window, action, cfg.n_outputs)
            trace.env.add(step, env_state, action, obs, reward)
        step += 1
        if done:
            break
        if not env_state.alive:
            if trace is not None:
                trace.pad_dead(step, obs, cfg.steps_per_action, cfg.n_outputs, max_steps)
            break
    return fitness, trace


def evaluate_tmaze_population(
    thetas: np.ndarray,
    net_cfg: NetworkConfig,
    maze_cfg: MazeConfig,
    episode_seeds,
    dtype=np.float32,
    compact_below: float = 0.7,
):
    """Mean episode fitness per genome row, all agents stepped in lockstep.

    ``thetas`` is (P, genome_len); every row is evaluated on the same episode
    seeds (one agent per (row, seed) pair). Weights are expanded per agent so
    dead agents can be dropped from every array mid-episode -- results are
    unchanged because dead agents accrue nothing and their networks no longer
    matter. Returns a (P,) float array.
    """
    thetas = np.atleast_2d(np.asarray(thetas))
    cfg = net_cfg
    n, s, c, k = cfg.n_neurons, cfg.total_synapses, cfg.channels, cfg.memory
    n_units = n * s + n
    p = thetas.shape[0]
    m = len(episode_seeds)
    n_agents = p * m
    syn_dims, neu_dims = cfg.synapse_dims, cfg.neuron_dims
    if thetas.shape[1] != syn_dims.n_params + neu_dims.n_params:
        raise ConfigurationError("genome rows do not match the network layout length")

    syn_gates = stack_chromosome(thetas[:, : syn_dims.n_params], syn_dims, dtype).repeat(m)
    neu_gates = stack_chromosome(thetas[:, syn_dims.n_params :], neu_dims, dtype).repeat(m)

    topos = [
        build_topology(cfg, (_norm_seed(seed), _TOPO_TAG)) for seed in episode_seeds
    ]
    sources_ep = np.stack([t.sources.reshape(-1) for t in topos])  # (m, n*s)
    sens_perm_ep = np.stack([t.sensory_perm for t in topos])
    act_perm_ep = np.stack([t.action_perm for t in topos])

    noise_ep = None
    total_substeps = maze_cfg.max_steps * cfg.steps_per_action
    if cfg.output_noise_std > 0:
        noise_ep = np.empty((m, total_substeps, n_units, c), dtype=dtype)
        for e, seed in enumerate(episode_seeds):
            rng = np.random.default_rng((_norm_seed(seed), _NOISE_TAG))
            noise_ep[e] = cfg.output_noise_std * rng.standard_normal(
                (total_substeps, n_units, c)
            )

    ep_of_agent = np.tile(np.arange(m), p)
    env = TMazeVec(maze_cfg, [_derive(episode_seeds[e], _ENV_TAG) for e in ep_of_agent])

    sources_a = sources_ep[ep_of_agent]  # (A, n*s)
    sens_perm_a = sens_perm_ep[ep_of_agent]
    act_perm_a = act_perm_ep[ep_of_agent]
    ep_a = ep_of_agent.copy()

    syn_h = np.zeros((n_agents, n * s, k), dtype=dtype)
    syn_o = np.zeros((n_agents, n * s, c), dtype=dtype)
    neu_h = np.zeros((n_agents, n, k), dtype=dtype)
    neu_o = np.zeros((n_agents, n, c), dtype=dtype)

    fitness = np.zeros(n_agents)
    orig_idx = np.arange(n_agents)
    reward_prev = np.zeros(n_agents)
    det_of_obs = np.full(4, -1, dtype=np.int64)
    for obs_val, det in tmaze.DETECTOR_INDEX.items():
        det_of_obs[int(obs_val)] = det
    out_lo = cfg.n_hidden
    reward_row = cfg.reward_node
    neuron_rows = slice(cfg.n_sensory + 1, cfg.n_sources)

    for step in range(maze_cfg.max_steps):
        n_alive_agents = env.n
        obs = env.observe_codes()
        source_table = np.zeros((n_alive_agents, cfg.n_sources, c), dtype=dtype)
        det = det_of_obs[obs]
        lit = det >= 0
        source_table[
            np.flatnonzero(lit), sens_perm_a[lit, det[lit]], 0
        ] = 1.0
        pos = reward_prev > 0
        neg = reward_prev < 0
        source_table[pos, reward_row, tmaze.REWARD_POS_CHANNEL] = reward_prev[pos]
        source_table[neg, reward_row, tmaze.REWARD_NEG_CHANNEL] = -reward_prev[neg]

        activity = np.zeros((n_alive_agents, cfg.n_outputs), dtype=np.float64)
        rows = np.arange(n_alive_agents)[:, None]
        for sub in range(cfg.steps_per_action):
            source_table[:, neuron_rows, :] = neu_o
            src = source_table[rows, sources_a]
            post = np.repeat(neu_o, s, axis=1)
            noise = None
            if noise_ep is not None:
                noise = noise_ep[ep_a, step * cfg.steps_per_action + sub]
            syn_h, syn_o = enu_step_stacked(
                syn_gates,
                syn_h,
                syn_o,
                np.concatenate([src, post], axis=2),
                noise=None if noise is None else noise[:, : n * s],
            )
            neu_h, neu_o = enu_step_stacked(
                neu_gates,
                neu_h,
                neu_o,
                syn_o.reshape(n_alive_agents, n, s, c).sum(axis=2),
                noise=None if noise is None else noise[:, n * s :],
            )
            activity += neu_o[:, out_lo:, 0]

        best = np.argmax(activity, axis=1)
        fire = activity[np.arange(n_alive_agents), best] >= cfg.action_threshold
        actions = np.full(n_alive_agents, int(Action.NOOP), dtype=np.int64)
        actions[fire] = act_perm_a[np.flatnonzero(fire), best[fire]]
        rewards = env.step(actions)
        fitness[orig_idx] += rewards
        reward_prev = rewards

        alive = env.alive
        n_alive = int(alive.sum())
        if n_alive == 0:
            break
        if n_alive < compact_below * n_alive_agents:
            keep = np.flatnonzero(alive)
            env.compact(keep)
            syn_gates = syn_gates.take(keep)
            neu_gates = neu_gates.take(keep)
            syn_h, syn_o = syn_h[keep], syn_o[keep]
            neu_h, neu_o = neu_h[keep], neu_o[keep]
            sources_a = sources_a[keep]
            sens_perm_a = sens_perm_a[keep]
            act_perm_a = act_perm_a[keep]
            ep_a = ep_a[keep]
            orig_idx = orig_idx[keep]
            reward_prev = reward_prev[keep]

    return fitness.reshape(p, m).mean(axis=1)
