"""Evolution strategies: Gaussian perturbations, rank shaping, momentum ascent.

Per generation: draw n standard-Gaussian perturbations, evaluate each
offspring theta + sigma*eps_i as the mean fitness over m shared episode
seeds, replace raw fitnesses by normalized fifth-power linear ranks, form
the weighted perturbation sum as an ascent direction, and take a classical
momentum step. Fitness is maximized throughout.

Random streams are derived counter-style from (seed, generation), so any
generation's perturbations and episode seeds can be regenerated without
mutable generator state; resume is exact.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .units import Genome, genome_from_dict, genome_to_dict, _norm_seed

log = logging.getLogger(__name__)

HISTORY_HEADER = "generation,mean_fitness,max_fitness,base_fitness,grad_norm"

CHECKPOINT_SCHEMA_VERSION = 1

# Stream tags keep perturbation and episode-seed draws independent.
_PERTURB_TAG = 0x5045
_EPISODE_TAG = 0x4550


class EvolutionError(RuntimeError):
    """The update step cannot proceed (e.g. non-finite gradient)."""


@dataclass
class ESConfig:
    n_offspring: int = 1024
    sigma: float = 0.01
    learning_rate: float = 1.0
    momentum: float = 0.9
    minibatch: int = 1
    generations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_offspring < 1 or self.minibatch < 1 or self.generations < 0:
            raise ValueError("n_offspring, minibatch must be >= 1; generations >= 0")
        if self.sigma <= 0 or self.learning_rate <= 0:
            raise ValueError("sigma and learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class GenerationRecord:
    generation: int
    mean_fitness: float
    max_fitness: float
    base_fitness: float
    grad_norm: float

    def csv_line(self) -> str:
        return ",".join(
            [
                str(self.generation),
                repr(float(self.mean_fitness)),
                repr(float(self.max_fitness)),
                repr(float(self.base_fitness)),
                repr(float(self.grad_norm)),
            ]
        )


@dataclass
class ESHistory:
    records: list[GenerationRecord] = field(default_factory=list)

    def append(self, rec: GenerationRecord) -> None:
        if self.records and rec.generation != self.records[-1].generation + 1:
            raise ValueError("history generations must be consecutive")
        self.records.append(rec)

    def save_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(HISTORY_HEADER + "\n")
            for rec in self.records:
                f.write(rec.csv_line() + "\n")


def sample_perturbations(dim: int, n: int, seed: int, generation: int) -> np.ndarray:
    """The (n, dim) standard-Gaussian table for one generation, reproducible."""
    rng = np.random.default_rng((_norm_seed(seed), _norm_seed(generation), _PERTURB_TAG))
    return rng.standard_normal((n, dim))


def episode_seeds(seed: int, generation: int, m: int) -> tuple[int, ...]:
    """m fresh episode seeds for one generation, shared by every offspring."""
    rng = np.random.default_rng((_norm_seed(seed), _norm_seed(generation), _EPISODE_TAG))
    return tuple(int(s) for s in rng.integers(0, 2**63, size=m))


def rank_transform(fitnesses) -> np.ndarray:
    """Normalized fifth-power linear ranks; depends on fitness order only.

    Offspring sorted descending get linear ranks 1.0 down to 0.0; the returned
    weight_i = rank_i^5 / sum(rank^5), mapped back to input order. Ties break
    toward the lower original index; NaN fitnesses rank worst.
    """
    f = np.asarray(fitnesses, dtype=np.float64)
    n = f.size
    if n < 2:
        raise ValueError("rank_transform needs at least 2 fitnesses")
    keyed = np.where(np.isnan(f), -np.inf, f)
    order = np.argsort(-keyed, kind="stable")  # stable: ties keep index order
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = (n - 1 - np.arange(n)) / (n - 1)
    powered = ranks**5
    return powered / powered.sum()


def estimate_gradient(perturbations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Fitness-weighted perturbation sum: the ascent direction estimate."""
    perturbations = np.asarray(perturbations)
    weights = np.asarray(weights, dtype=np.float64)
    if perturbations.shape[0] != weights.shape[0]:
        raise ValueError("one weight per perturbation required")
    return weights @ perturbations


def update_base(theta: np.ndarray, grad: np.ndarray, velocity: np.ndarray, config: ESConfig):
    """Classical momentum ascent; returns (theta', velocity')."""
    if not np.all(np.isfinite(grad)):
        raise EvolutionError("non-finite gradient estimate; aborting generation")
    velocity = config.momentum * velocity + grad
    theta = theta + config.learning_rate * velocity
    return theta, velocity


def _evaluate_rows(thetas, seeds, fitness_fn, batch_fitness_fn):
    """(B, dim) rows -> (B,) fitnesses; failures become NaN (worst rank)."""
    if batch_fitness_fn is not None:
        return np.asarray(batch_fitness_fn(thetas, seeds), dtype=np.float64)
    out = np.empty(thetas.shape[0], dtype=np.float64)
    for i in range(thetas.shape[0]):
        try:
            out[i] = float(fitness_fn(thetas[i], seeds))
        except Exception:
            log.warning("fitness evaluation failed for offspring %d", i, exc_info=True)
            out[i] = np.nan
    return out


def evolve(
    config: ESConfig,
    genome0: Genome,
    fitness_fn=None,
    batch_fitness_fn=None,
    callback=None,
    start_generation: int = 0,
    velocity: np.ndarray | None = None,
    history: ESHistory | None = None,
):
    """Run generations [start_generation, config.generations).

    ``fitness_fn(values, seeds) -> float`` scores one genome vector on the
    given episode seeds; ``batch_fitness_fn(matrix, seeds) -> vector``, when
    provided, scores many rows at once (results must match the row-wise
    function). Offspring results are independent of evaluation order, so the
    loop is deterministic for any chunking of the population.

    ``callback(generation, theta, velocity, record)``, when given, runs after
    each update (checkpointing, history flushing).

    Returns ``(final_genome, history)``.
    """
    if fitness_fn is None and batch_fitness_fn is None:
        raise ValueError("need fitness_fn or batch_fitness_fn")
    theta = np.array(genome0.values, dtype=np.float64)
    dim = theta.size
    velocity = np.zeros(dim) if velocity is None else np.array(velocity, dtype=np.float64)
    if velocity.shape != theta.shape:
        raise ValueError("velocity shape must match genome")
    history = ESHistory() if history is None else history

    for gen in range(start_generation, config.generations):
        seeds = episode_seeds(config.seed, gen, config.minibatch)
        eps = sample_perturbations(dim, config.n_offspring, config.seed, gen)
        offspring = theta[None, :] + config.sigma * eps
        fits = _evaluate_rows(offspring, seeds, fitness_fn, batch_fitness_fn)
        base_fit = float(
            _evaluate_rows(theta[None, :], seeds, fitness_fn, batch_fitness_fn)[0]
        )
        weights = rank_transform(fits)
        grad = estimate_gradient(eps, weights)
        theta, velocity = update_base(theta, grad, velocity, config)
        rec = GenerationRecord(
            generation=gen,
            mean_fitness=float(np.nanmean(fits)),
            max_fitness=float(np.nanmax(fits)),
            base_fitness=base_fit,
            grad_norm=float(np.linalg.norm(grad)),
        )
        history.append(rec)
        if callback is not None:
            callback(gen, theta, velocity, rec)
    return Genome(theta, genome0.layout), history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, *, generation, genome: Genome, velocity, config: ESConfig) -> None:
    """Atomic JSON checkpoint; ``generation`` is the next generation to run."""
    obj = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "generation": int(generation),
        "genome": genome_to_dict(genome),
        "velocity": [float(v) for v in np.asarray(velocity)],
        "rng_state": {"scheme": "per_generation", "seed": int(config.seed)},
        "config": {
            "n_offspring": config.n_offspring,
            "sigma": config.sigma,
            "learning_rate": config.learning_rate,
            "momentum": config.momentum,
            "minibatch": config.minibatch,
            "generations": config.generations,
            "seed": config.seed,
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (generation, genome, velocity, ESConfig)."""
    with open(path) as f:
        obj = json.load(f)
    if obj.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {obj.get('schema_version')!r}")
    genome = genome_from_dict(obj["genome"])
    velocity = np.array(obj["velocity"], dtype=np.float64)
    cfg = ESConfig(**obj["config"])
    return int(obj["generation"]), genome, velocity, cfg
