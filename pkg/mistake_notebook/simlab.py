"""
Monte Carlo lab for the batch-averaging argument behind accept-if-improves.

Each member of a cluster changes reward by mu + noise. The gate sees the
cluster mean, whose variance is sigma^2 / size, so the probability that a
helpful update (mu > 0) looks harmful (mean <= 0) shrinks with cluster size.

Randomness is counter-based. Each cluster size has a Philox key derived from
(seed, size_index); trial t owns a fixed block of counters starting at
t * ceil(size / 4), so any range of trials can be drawn on its own and the
concatenation equals the full draw. Noise comes from uniforms (one 64-bit
word each) through the inverse normal CDF, which keeps consumption per trial
fixed.
"""
import csv
import math
from typing import IO, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.stats import norm

from mistake_notebook.logger_config import get_logger
from mistake_notebook.schemas import AdditiveRewardModel, SimConfig

logger = get_logger(__name__)

SWEEP_COLUMNS = ("size", "flip_rate", "empirical_var", "theoretical_var", "theoretical_flip_rate")

# Philox4x64 emits four 64-bit words per counter step
WORDS_PER_COUNTER = 4
CHUNK_TRIALS = 65_536


class VarianceCheck(NamedTuple):
    empirical_var: float
    theoretical_var: float


class SweepRow(BaseModel):
    size: int
    flip_rate: float
    empirical_var: float
    theoretical_var: float
    theoretical_flip_rate: Optional[float] = None


def counters_per_trial(size: int) -> int:
    return -(-size // WORDS_PER_COUNTER)


def substream(seed: int, size_index: int, trial_index: int = 0, size: int = 1) -> np.random.Generator:
    """
    Philox stream keyed by (seed, size_index), positioned at the first
    counter of trial_index for clusters of the given size.
    """
    bit_generator = np.random.Philox(np.random.SeedSequence(seed, spawn_key=(size_index,)))
    if trial_index:
        bit_generator.advance(trial_index * counters_per_trial(size))
    return np.random.Generator(bit_generator)


def draw_noise(model: AdditiveRewardModel, trials: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    (trials, size) zero-mean noise with standard deviation sigma.

    Every trial consumes whole counter blocks; surplus words are discarded.
    """
    width = counters_per_trial(size) * WORDS_PER_COUNTER
    uniform = rng.random((trials, width))[:, :size]
    if model.noise_kind == "gaussian":
        return model.sigma * norm.ppf(np.maximum(uniform, 2.0 ** -54))
    half_width = model.sigma * math.sqrt(3.0)
    return (2.0 * uniform - 1.0) * half_width


def cluster_means(model: AdditiveRewardModel, size: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """trials independent cluster-average reward changes, read sequentially from rng."""
    if size < 1 or trials < 1:
        raise ValueError("size and trials must be positive")
    changes = model.mu + draw_noise(model, trials, size, rng)
    return changes.mean(axis=1)


def trial_range_means(
    model: AdditiveRewardModel,
    size: int,
    seed: int,
    size_index: int,
    start: int,
    stop: int,
) -> np.ndarray:
    """Cluster means of trials [start, stop) of one size's stream."""
    return cluster_means(model, size, stop - start, substream(seed, size_index, start, size))


def sweep_means(model: AdditiveRewardModel, size: int, trials: int, seed: int, size_index: int) -> np.ndarray:
    """All trials of one size, drawn chunk by chunk and concatenated in trial order."""
    chunks = [
        trial_range_means(model, size, seed, size_index, start, min(start + CHUNK_TRIALS, trials))
        for start in range(0, trials, CHUNK_TRIALS)
    ]
    return np.concatenate(chunks)


def sample_cluster_mean(model: AdditiveRewardModel, size: int, rng: np.random.Generator) -> float:
    """Mean of `size` i.i.d. draws of mu + noise."""
    return float(cluster_means(model, size, 1, rng)[0])


def spurious_flip_rate(model: AdditiveRewardModel, size: int, trials: int, rng: np.random.Generator) -> float:
    """Fraction of trials whose cluster mean is <= 0."""
    return float(np.mean(cluster_means(model, size, trials, rng) <= 0.0))


def theoretical_variance(model: AdditiveRewardModel, size: int) -> float:
    return model.sigma ** 2 / size


def theoretical_flip_rate(model: AdditiveRewardModel, size: int) -> Optional[float]:
    """Phi(-mu * sqrt(size) / sigma) for gaussian noise; no closed form otherwise."""
    if model.noise_kind != "gaussian":
        return None
    return float(norm.cdf(-model.mu * math.sqrt(size) / model.sigma))


def _variance(means: np.ndarray) -> float:
    return float(np.var(means, ddof=1 if means.size > 1 else 0))


def variance_check(model: AdditiveRewardModel, size: int, trials: int, rng: np.random.Generator) -> VarianceCheck:
    """Empirical variance of cluster means against sigma^2 / size."""
    return VarianceCheck(_variance(cluster_means(model, size, trials, rng)), theoretical_variance(model, size))


def batch_ablation_sweep(
    model: AdditiveRewardModel,
    cluster_sizes: Sequence[int],
    trials: int,
    seed: int = 42,
) -> list[SweepRow]:
    """
    Flip rate and variance per cluster size.

    Args:
        model: Reward-change model
        cluster_sizes: Strictly increasing positive sizes
        trials: Monte Carlo trials per size
        seed: Root of the per-size substreams

    Returns:
        One row per size, in the given order
    """
    if any(later <= earlier for earlier, later in zip(cluster_sizes, cluster_sizes[1:])):
        raise ValueError("cluster sizes must be strictly increasing")

    rows = []
    for size_index, size in enumerate(cluster_sizes):
        means = sweep_means(model, size, trials, seed, size_index)
        row = SweepRow(
            size=size,
            flip_rate=float(np.mean(means <= 0.0)),
            empirical_var=_variance(means),
            theoretical_var=theoretical_variance(model, size),
            theoretical_flip_rate=theoretical_flip_rate(model, size),
        )
        logger.debug(f"size={size} flip_rate={row.flip_rate:.4f} var={row.empirical_var:.5f}")
        rows.append(row)
    return rows


def one_by_one_vs_cluster(
    model: AdditiveRewardModel,
    size: int,
    trials: int,
    seed: int = 42,
) -> tuple[float, float]:
    """
    Flip rate when each instance is judged alone versus judged by its cluster average.

    Returns:
        (single-instance flip rate, cluster-average flip rate)
    """
    single = spurious_flip_rate(model, 1, trials, substream(seed, 0))
    clustered = spurious_flip_rate(model, size, trials, substream(seed, 1))
    return single, clustered


def monotone_non_increasing(rows: Sequence[SweepRow], trials: int) -> bool:
    """Flip rates never rise by more than three binomial standard errors."""
    for earlier, later in zip(rows, rows[1:]):
        p = earlier.flip_rate
        tolerance = 3.0 * math.sqrt(max(p * (1.0 - p), 0.0) / trials)
        if later.flip_rate > earlier.flip_rate + tolerance:
            return False
    return True


def log_rate_slope(rows: Sequence[SweepRow]) -> Optional[float]:
    """Least-squares slope of log(flip_rate) against size over non-zero rates."""
    points = [(row.size, math.log(row.flip_rate)) for row in rows if row.flip_rate > 0.0]
    if len(points) < 2:
        return None
    sizes, logs = zip(*points)
    slope, _ = np.polyfit(np.asarray(sizes, dtype=float), np.asarray(logs), 1)
    return float(slope)


def run_simulation(config: SimConfig) -> list[SweepRow]:
    logger.info(
        f"Simulating mu={config.model.mu} sigma={config.model.sigma} noise={config.model.noise_kind} "
        f"sizes={config.cluster_sizes} trials={config.trials} seed={config.seed}"
    )
    return batch_ablation_sweep(config.model, config.cluster_sizes, config.trials, config.seed)


def summarize(config: SimConfig, rows: Sequence[SweepRow]) -> dict:
    """JSON-ready summary of a sweep."""
    return {
        "seed": config.seed,
        "trials": config.trials,
        "model": config.model.model_dump(),
        "rows": [row.model_dump() for row in rows],
        "monotone_non_increasing": monotone_non_increasing(rows, config.trials),
        "log_flip_rate_slope": log_rate_slope(rows),
    }


def write_sweep_csv(rows: Sequence[SweepRow], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([
            row.size,
            f"{row.flip_rate:.6f}",
            f"{row.empirical_var:.6f}",
            f"{row.theoretical_var:.6f}",
            "" if row.theoretical_flip_rate is None else f"{row.theoretical_flip_rate:.6f}",
        ])
