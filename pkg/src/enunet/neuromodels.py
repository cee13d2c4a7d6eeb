"""Reference neuron and synapse models, episode generators, fitness metrics.

These are the ground truths the evolved units must mimic: an integrate-and-
fire neuron (accumulate graded input, spike and reset at threshold) and a
neuromodulated spike-timing-dependent plasticity synapse (one pre and one
post spike per episode; the weight update fires only while a neurotransmitter
signal is active). Everything here is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .units import ShapeError, _norm_seed

# STDP episode input channel order.
CH_GRADED = 0
CH_PRE_SPIKE = 1
CH_NEUROMOD = 2
CH_POST_SPIKE = 3

DEFAULT_SPIKE_THRESHOLD = 0.5
DEFAULT_COUNT_PENALTY = 50.0


@dataclass(frozen=True)
class IAFConfig:
    threshold: float = 1.0
    input_low: float = 0.0
    input_high: float = 0.25
    episode_len: int = 100

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if not (self.input_high > self.input_low >= 0):
            raise ValueError("need input_high > input_low >= 0")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")


@dataclass(frozen=True)
class STDPConfig:
    amplitude: float = 1.0
    tau: float = 10.0
    w0: float = 1.0
    episode_len: int = 100
    spike_margin: int = 10  # spikes placed uniformly in [margin, T - margin]
    nt_window_len: int = 40
    graded_low: float = 0.0
    graded_high: float = 0.25

    def __post_init__(self):
        if self.amplitude <= 0 or self.tau <= 0:
            raise ValueError("amplitude and tau must be positive")
        if not 0 <= self.spike_margin <= self.episode_len - self.spike_margin:
            raise ValueError("spike_margin leaves no room for spikes")
        if self.nt_window_len < 1:
            raise ValueError("nt_window_len must be >= 1")


@dataclass
class EpisodeSignals:
    """Time-indexed inputs (T, d), oracle target (T,), and provenance metadata."""

    inputs: np.ndarray
    targets: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


def iaf_step(h: float, x: float, threshold: float):
    """One integrate-and-fire update: accumulate, then spike-and-reset at threshold."""
    h_acc = h + x
    if h_acc < threshold:
        return h_acc, 0
    return 0.0, 1


def iaf_episode(cfg: IAFConfig, seed: int) -> EpisodeSignals:
    """Uniform graded input and the spike train the IAF model emits on it."""
    rng = np.random.default_rng(_norm_seed(seed))
    xs = rng.uniform(cfg.input_low, cfg.input_high, cfg.episode_len)
    spikes = np.zeros(cfg.episode_len)
    h = 0.0
    for t in range(cfg.episode_len):
        h, s = iaf_step(h, xs[t], cfg.threshold)
        spikes[t] = s
    return EpisodeSignals(
        inputs=xs[:, None],
        targets=spikes,
        metadata={"seed": int(seed), "spike_times": np.flatnonzero(spikes).tolist()},
    )


def stdp_weight_delta(dt: float, amplitude: float = 1.0, tau: float = 10.0) -> float:
    """Weight change for post-minus-pre spike lag dt; zero at dt == 0."""
    if dt > 0:
        return amplitude * np.exp(-dt / tau)
    if dt < 0:
        return -amplitude * np.exp(dt / tau)
    return 0.0


def stdp_oracle_episode(cfg: STDPConfig, seed: int) -> EpisodeSignals:
    """One synapse episode: 4 input channels and the weighted graded target.

    Channels: graded potential, pre-synaptic spike, neuromodulator window,
    back-propagating post-synaptic spike. The synaptic weight starts at w0 and
    is updated once, at step max(t_pre, t_post), by the timing rule -- but only
    if the neuromodulator is active at that step. The target output is
    w(t) * graded(t).
    """
    t_len = cfg.episode_len
    rng = np.random.default_rng(_norm_seed(seed))
    graded = rng.uniform(cfg.graded_low, cfg.graded_high, t_len)
    lo, hi = cfg.spike_margin, t_len - cfg.spike_margin
    t_pre = int(rng.integers(lo, hi + 1))
    t_post = int(rng.integers(lo, hi + 1))
    nt_center = int(rng.integers(0, t_len))
    nt_start = max(0, nt_center - cfg.nt_window_len // 2)
    nt_end = min(t_len, nt_center - cfg.nt_window_len // 2 + cfg.nt_window_len)

    inputs = np.zeros((t_len, 4))
    inputs[:, CH_GRADED] = graded
    inputs[t_pre, CH_PRE_SPIKE] = 1.0
    inputs[nt_start:nt_end, CH_NEUROMOD] = 1.0
    inputs[t_post, CH_POST_SPIKE] = 1.0

    update_step = max(t_pre, t_post)
    nt_active = nt_start <= update_step < nt_end
    w = np.full(t_len, cfg.w0)
    if nt_active:
        w[update_step:] = cfg.w0 + stdp_weight_delta(t_post - t_pre, cfg.amplitude, cfg.tau)
    return EpisodeSignals(
        inputs=inputs,
        targets=w * graded,
        metadata={
            "seed": int(seed),
            "t_pre": t_pre,
            "t_post": t_post,
            "nt_window": [int(nt_start), int(nt_end)],
            "nt_active_at_update": bool(nt_active),
            "w_final": float(w[-1]),
        },
    )


def detect_spikes(outputs, threshold: float = DEFAULT_SPIKE_THRESHOLD) -> np.ndarray:
    """Rising-edge spike times: outputs[t] >= threshold and previous below."""
    outputs = np.asarray(outputs)
    above = outputs >= threshold
    rising = above.copy()
    rising[1:] &= ~above[:-1]
    return np.flatnonzero(rising)


def iaf_fitness(
    enu_outputs,
    target_spikes,
    spike_threshold: float = DEFAULT_SPIKE_THRESHOLD,
    count_penalty: float = DEFAULT_COUNT_PENALTY,
) -> float:
    """Negative inter-spike-interval mismatch; 0 only at exact, full-strength mimicry.

    Three penalty terms: index-aligned absolute timing error over the shared
    spike count, a flat penalty per missing/extra spike, and (1 - output) at
    each target spike time so spikes are pushed toward full amplitude.
    """
    enu_outputs = np.asarray(enu_outputs, dtype=np.float64)
    target_spikes = np.asarray(target_spikes, dtype=np.int64)
    model_spikes = detect_spikes(enu_outputs, spike_threshold)
    k = min(model_spikes.size, target_spikes.size)
    timing = float(np.abs(model_spikes[:k] - target_spikes[:k]).sum())
    count = count_penalty * abs(model_spikes.size - target_spikes.size)
    amplitude = float((1.0 - enu_outputs[target_spikes]).sum()) if target_spikes.size else 0.0
    return -(timing + count + amplitude)


def stdp_fitness(enu_outputs, targets) -> float:
    """Negative mean squared error against the oracle output trace."""
    enu_outputs = np.asarray(enu_outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if enu_outputs.shape != targets.shape:
        raise ShapeError(
            f"outputs {enu_outputs.shape} and targets {targets.shape} differ"
        )
    diff = enu_outputs - targets
    return -float(np.mean(diff * diff))


def export_episode(ep: EpisodeSignals, csv_path, meta_path=None) -> None:
    """Write t, in_0..in_{d-1}, target rows plus a JSON metadata sidecar."""
    d = ep.inputs.shape[1]
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"in_{i}" for i in range(d)] + ["target"])
        for t in range(ep.length):
            writer.writerow(
                [t] + [repr(float(v)) for v in ep.inputs[t]] + [repr(float(ep.targets[t]))]
            )
    if meta_path is not None:
        tmp = f"{meta_path}.tmp"
        with open(tmp, "w") as f:
            json.dump(ep.metadata, f, indent=2)
        os.replace(tmp, meta_path)
