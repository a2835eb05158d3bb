"""Seeded Monte-Carlo estimation of acceptance lengths and block efficiency.

Trials are split into a fixed number of shards, each with a seed derived
from (seed, shard index), and merged in shard order. The shard layout never
depends on how many workers execute them, so estimates are bit-identical
for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import acceptance_length_upper_bound, expected_tau_block, expected_tau_token
from .decode import block_efficiency, spec_decode
from .models import ArModel, rooted
from .verify import block_verify, draft_and_score, token_verify

N_SHARDS = 64

_VERIFY = {"token": token_verify, "block": block_verify}


@dataclass
class AcceptanceReport:
    """Exact and empirical acceptance-length statistics for one (M_s, M_b, L)."""

    L: int
    exact_token: float
    exact_block: float
    upper_bound: float
    mc_token: float
    mc_token_se: float
    mc_block: float
    mc_block_se: float
    n_trials: int


def _shard_sizes(trials: int, n_shards: int = N_SHARDS) -> list[int]:
    n_shards = min(trials, n_shards)
    base, extra = divmod(trials, n_shards)
    return [base + (1 if i < extra else 0) for i in range(n_shards)]


def _shard_seeds(seed: int, n_shards: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_shards)


def _tau_shard(args) -> np.ndarray:
    small, big, L, verifier, trials, ss, prefix = args
    verify_fn = _VERIFY[verifier]
    rng = np.random.default_rng(ss)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    taus = np.empty(trials, dtype=np.int64)
    for k in range(trials):
        block = draft_and_score(small, big, L, (), rng)
        taus[k] = verify_fn(block, rng).tau
    return taus


def _run_shards(fn, arg_rows, workers: int) -> list:
    if workers <= 1:
        return [fn(row) for row in arg_rows]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, arg_rows))


def simulate_tau(small: ArModel, big: ArModel, L: int, verifier: str, trials: int,
                 seed: int, prefix=(), workers: int = 1) -> np.ndarray:
    """Accepted lengths from ``trials`` independent draft-and-verify rounds."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = _shard_sizes(trials)
    seeds = _shard_seeds(seed, len(sizes))
    rows = [(small, big, L, verifier, n, ss, tuple(prefix)) for n, ss in zip(sizes, seeds)]
    return np.concatenate(_run_shards(_tau_shard, rows, workers))


def mean_and_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return mean, float("inf")
    return mean, float(values.std(ddof=1) / np.sqrt(n))


def acceptance_report(small: ArModel, big: ArModel, L: int, trials: int, seed: int,
                      prefix=(), workers: int = 1) -> AcceptanceReport:
    """Exact expectations, the coupling bound, and seeded MC means for both verifiers."""
    mc_tok, se_tok = mean_and_se(simulate_tau(small, big, L, "token", trials, seed, prefix, workers))
    mc_blk, se_blk = mean_and_se(simulate_tau(small, big, L, "block", trials, seed + 1, prefix, workers))
    return AcceptanceReport(
        L=L,
        exact_token=expected_tau_token(small, big, L, prefix),
        exact_block=expected_tau_block(small, big, L, prefix),
        upper_bound=acceptance_length_upper_bound(small, big, L, prefix),
        mc_token=mc_tok,
        mc_token_se=se_tok,
        mc_block=mc_blk,
        mc_block_se=se_blk,
        n_trials=trials,
    )


def _efficiency_shard(args) -> np.ndarray:
    big, small, prompt, L, verifier, horizon, trials, ss, include_free, exclude_partial = args
    rng = np.random.default_rng(ss)
    vals = np.empty(trials, dtype=float)
    for k in range(trials):
        trace = spec_decode(big, small, prompt, L, verifier, horizon, rng)
        vals[k] = block_efficiency(trace, include_free_token=include_free,
                                   exclude_partial_final=exclude_partial)
    return vals


def simulate_block_efficiency(big: ArModel, small: ArModel, L: int, verifier: str,
                              horizon: int, trials: int, seed: int, prompt=(),
                              include_free_token: bool = True,
                              exclude_partial_final: bool = False,
                              workers: int = 1) -> np.ndarray:
    """Per-run block efficiencies over ``trials`` seeded decodes."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = _shard_sizes(trials)
    seeds = _shard_seeds(seed, len(sizes))
    rows = [(big, small, tuple(prompt), L, verifier, horizon, n, ss,
             include_free_token, exclude_partial_final) for n, ss in zip(sizes, seeds)]
    return np.concatenate(_run_shards(_efficiency_shard, rows, workers))
