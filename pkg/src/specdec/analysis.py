"""Exact and analytic companions to the sampled verifiers.

Closed-form expected acceptance lengths for both verifiers, the coupling
upper bound, two-symbol memoryless closed forms, and exhaustive enumeration
oracles that integrate out all randomness on small instances. The oracles
walk the models directly with linear-space joints; they deliberately avoid
the verifier module's cached-score arithmetic so the two routes stay
independent checks of each other.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np
from scipy.stats import binom

from .models import ArModel, TokenSeq, rooted
from .verify import (
    block_correction,
    block_tau_probs,
    score_block,
    token_correction,
    token_tau_probs,
)

ENUMERATION_BUDGET = 10 ** 6
ORACLE_MAX_VOCAB = 3
ORACLE_MAX_LEN = 3


class EnumerationBudgetError(Exception):
    """The requested exact computation exceeds the enumeration budget."""


def _guard_paths(vocab_size: int, L: int):
    if vocab_size ** L > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"{vocab_size}^{L} sequences exceed the enumeration budget of {ENUMERATION_BUDGET}")


def _guard_oracle(vocab_size: int, L: int):
    if vocab_size > ORACLE_MAX_VOCAB or L > ORACLE_MAX_LEN:
        raise EnumerationBudgetError(
            f"enumeration oracle supports vocab <= {ORACLE_MAX_VOCAB} and "
            f"block length <= {ORACLE_MAX_LEN}, got vocab={vocab_size}, L={L}")


def tv_distance(a, b) -> float:
    """Total variation distance between two distributions on the same support."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"support size mismatch: {a.shape} vs {b.shape}")
    return 0.5 * float(np.abs(a - b).sum())


def expected_tau_token(small: ArModel, big: ArModel, L: int, prefix=()) -> float:
    """Exact expected accepted length of the per-token verifier.

    Depth-first sum over sequences of the running product of per-step minima
    of the two conditionals, accumulated at every depth up to L.
    """
    _guard_paths(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    total = 0.0

    def walk(rel: TokenSeq, prod: float):
        nonlocal total
        mins = np.minimum(small.conditional(rel), big.conditional(rel))
        depth = len(rel) + 1
        for t in range(size):
            m = prod * mins[t]
            if m <= 0.0:
                continue
            total += m
            if depth < L:
                walk(rel + (t,), m)

    walk((), 1.0)
    return total


def expected_tau_block(small: ArModel, big: ArModel, L: int, prefix=()) -> float:
    """Exact expected accepted length of the block verifier.

    Depth-first sum of min{M_small(x^l), M_big(x^l)} over all sequences of
    length up to L, carrying both joint log-probabilities.
    """
    _guard_paths(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    total = 0.0

    def walk(rel: TokenSeq, ls: float, lb: float):
        nonlocal total
        rs = small.conditional(rel)
        rb = big.conditional(rel)
        depth = len(rel) + 1
        for t in range(size):
            if rs[t] <= 0.0 or rb[t] <= 0.0:
                continue  # the min-joint is zero here and on every extension
            nls = ls + math.log(rs[t])
            nlb = lb + math.log(rb[t])
            total += math.exp(min(nls, nlb))
            if depth < L:
                walk(rel + (t,), nls, nlb)

    walk((), 0.0, 0.0)
    return total


def acceptance_length_upper_bound(small: ArModel, big: ArModel, L: int, prefix=()) -> float:
    """Coupling upper bound on the expected accepted length.

    Computed by the survival decomposition: the bound is the sum over block
    lengths l of the overlap 1 - d_TV between the two l-token joint
    distributions, materialized level by level. Distinct code path from
    ``expected_tau_block`` on purpose; the two agree to rounding.
    """
    _guard_paths(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    level_s: dict[TokenSeq, float] = {(): 1.0}
    level_b: dict[TokenSeq, float] = {(): 1.0}
    total = 0.0
    for _ in range(L):
        next_s: dict[TokenSeq, float] = {}
        next_b: dict[TokenSeq, float] = {}
        for level, nxt, model in ((level_s, next_s, small), (level_b, next_b, big)):
            for seq, w in level.items():
                row = model.conditional(seq)
                for t in range(size):
                    if row[t] > 0.0:
                        nxt[seq + (t,)] = w * row[t]
        total += sum(min(w, next_b.get(seq, 0.0)) for seq, w in next_s.items())
        level_s, level_b = next_s, next_b
    return total


def exact_token_tau_distribution(small: ArModel, big: ArModel, L: int, prefix=()) -> np.ndarray:
    """Exact marginal distribution of the per-token verifier's accepted length.

    Sums, over draft prefixes, the probability that the first l tokens are
    accepted and the next one rejected. Independent of the closed-form
    expectation; its mean reproduces it.
    """
    _guard_paths(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    dist = np.zeros(L + 1)

    def walk(rel: TokenSeq, w: float):
        # w = P(draft starts with rel and its tokens were all accepted)
        depth = len(rel)
        rs = small.conditional(rel)
        rb = big.conditional(rel)
        for t in range(size):
            if rs[t] <= 0.0:
                continue
            accept = min(1.0, rb[t] / rs[t])
            dist[depth] += w * rs[t] * (1.0 - accept)
            child = w * rs[t] * accept
            if child <= 0.0:
                continue
            if depth + 1 == L:
                dist[L] += child
            else:
                walk(rel + (t,), child)

    walk((), 1.0)
    return dist


def bernoulli_curves(p: float, q: float, L_max: int,
                     include_free_token: bool = False) -> tuple[list[float], list[float]]:
    """Expected accepted lengths for two-symbol memoryless sources, both verifiers.

    Token curve: partial sums of powers of the one-step overlap 1 - |p - q|.
    Block curve: partial sums of binomial-distribution overlaps at each length.
    Sums run from length 1; ``include_free_token`` adds the constant 1 that
    counts the free token each iteration contributes.
    """
    for name, value in (("p", p), ("q", q)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    if not 1 <= L_max <= 64:
        raise ValueError(f"L_max must be in [1, 64], got {L_max}")
    overlap = 1.0 - abs(p - q)
    extra = 1.0 if include_free_token else 0.0
    token, block = [], []
    tok_acc = 0.0
    blk_acc = 0.0
    power = 1.0
    for i in range(1, L_max + 1):
        power *= overlap
        tok_acc += power
        ks = np.arange(i + 1)
        blk_acc += 1.0 - tv_distance(binom.pmf(ks, i, p), binom.pmf(ks, i, q))
        token.append(tok_acc + extra)
        block.append(blk_acc + extra)
    return token, block


def _linear_joint(model: ArModel, seq: TokenSeq) -> float:
    prob = 1.0
    for i, t in enumerate(seq):
        prob *= model.conditional(seq[:i])[t]
        if prob <= 0.0:
            return 0.0
    return prob


def _direct_masses(small: ArModel, big: ArModel, seq: TokenSeq) -> tuple[float, float]:
    """(leftover, rejected) one-token-extension masses straight from the models."""
    diff = _linear_joint(big, seq) * big.conditional(seq) \
        - _linear_joint(small, seq) * small.conditional(seq)
    pos = np.clip(diff, 0.0, None)
    neg = np.clip(-diff, 0.0, None)
    return float(pos.sum()), float(neg.sum())


def _direct_residual_row(small: ArModel, big: ArModel, seq: TokenSeq) -> np.ndarray:
    diff = _linear_joint(big, seq) * big.conditional(seq) \
        - _linear_joint(small, seq) * small.conditional(seq)
    pos = np.clip(diff, 0.0, None)
    total = pos.sum()
    if total <= 0.0:
        raise ValueError(f"empty residual at prefix {seq}")
    return pos / total


def _block_tau_probs_direct(small: ArModel, big: ArModel, draft: TokenSeq) -> np.ndarray:
    """Accepted-length distribution of the block verifier, from raw joints."""
    L = len(draft)
    js = _linear_joint(small, draft)
    jb = _linear_joint(big, draft)
    probs = np.zeros(L + 1)
    probs[L] = 1.0 if js <= 0.0 else min(1.0, jb / js)
    rem = 1.0 - probs[L]
    for i in range(1, L + 1):
        m = L - i
        pr, pj = _direct_masses(small, big, draft[:m])
        accept = 1.0 if (i == L or pj <= 0.0) else min(1.0, pr / pj)
        probs[m] = rem * accept
        rem *= 1.0 - accept
    return probs


def enumerate_output_distribution(small: ArModel, big: ArModel, L: int,
                                  verifier: str, prefix=()) -> dict[TokenSeq, float]:
    """Exact distribution of the L tokens a verifier emits (accepted + corrected).

    Integrates over every draft, every acceptance outcome, and every
    correction continuation with no sampling. For a correct verifier this
    equals the target model's L-token joint distribution.
    """
    if verifier not in ("token", "block"):
        raise ValueError(f"unknown verifier {verifier!r}")
    _guard_oracle(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    dist: dict[TokenSeq, float] = defaultdict(float)

    def big_continuations(base: TokenSeq, need: int, w: float):
        # extend `base` by `need` tokens drawn from the target model
        if need == 0:
            dist[base] += w
            return
        row = big.conditional(base)
        for t in range(size):
            if row[t] > 0.0:
                big_continuations(base + (t,), need - 1, w * row[t])

    def residual_continuations(base: TokenSeq, need: int, w: float):
        # extend `base` by `need` tokens drawn from successive residual rows
        if need == 0:
            dist[base] += w
            return
        row = _direct_residual_row(small, big, base)
        for t in range(size):
            if row[t] > 0.0:
                residual_continuations(base + (t,), need - 1, w * row[t])

    if verifier == "token":

        def walk(rel: TokenSeq, w: float):
            # w = P(draft starts with rel, all rel tokens accepted)
            depth = len(rel)
            rs = small.conditional(rel)
            rb = big.conditional(rel)
            reject_mass = 0.0
            for t in range(size):
                if rs[t] <= 0.0:
                    continue
                accept = min(1.0, rb[t] / rs[t])
                reject_mass += rs[t] * (1.0 - accept)
                child = w * rs[t] * accept
                if child <= 0.0:
                    continue
                if depth + 1 == L:
                    dist[rel + (t,)] += child
                else:
                    walk(rel + (t,), child)
            rejected = w * reject_mass
            if rejected > 0.0:
                res = np.clip(rb - rs, 0.0, None)
                res = res / res.sum()
                for t in range(size):
                    if res[t] > 0.0:
                        big_continuations(rel + (t,), L - depth - 1, rejected * res[t])

        walk((), 1.0)
    else:
        for draft in itertools.product(range(size), repeat=L):
            ws = _linear_joint(small, draft)
            if ws <= 0.0:
                continue
            probs = _block_tau_probs_direct(small, big, draft)
            if probs[L] > 0.0:
                dist[draft] += ws * probs[L]
            for tau in range(L):
                if probs[tau] > 0.0:
                    residual_continuations(draft[:tau], L - tau, ws * probs[tau])

    return dict(dist)


def enumerate_block_accept_joint(small: ArModel, big: ArModel, L: int) -> dict[tuple[int, TokenSeq], float]:
    """Exact P(draft prefix = x^l and accepted length >= l) under the block verifier.

    Keyed by (l, x^l) for l = 1..L; each value should equal the smaller of
    the two joint probabilities of x^l.
    """
    _guard_oracle(small.vocab.size, L)
    size = small.vocab.size
    joint: dict[tuple[int, TokenSeq], float] = defaultdict(float)
    for draft in itertools.product(range(size), repeat=L):
        ws = _linear_joint(small, draft)
        if ws <= 0.0:
            continue
        probs = _block_tau_probs_direct(small, big, draft)
        survival = np.cumsum(probs[::-1])[::-1]  # survival[l] = P(tau >= l | draft)
        for ell in range(1, L + 1):
            joint[(ell, draft[:ell])] += ws * float(survival[ell])
    return dict(joint)


def min_joint(small: ArModel, big: ArModel, seq: TokenSeq, prefix=()) -> float:
    """min of the two joint probabilities of ``seq`` after ``prefix``."""
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    return min(_linear_joint(small, seq), _linear_joint(big, seq))


def dominance_summary(small: ArModel, big: ArModel, L: int, prefix=()) -> dict:
    """Per-sequence comparison of the block and token acceptance terms.

    For every sequence up to length L the block term min{M_s(x^l), M_b(x^l)}
    is at least the token term, the product of per-step minima. Returns the
    two totals, the worst pointwise violation (should be <= rounding), and
    whether any sequence strictly separates them.
    """
    _guard_paths(small.vocab.size, L)
    small = rooted(small, prefix)
    big = rooted(big, prefix)
    size = small.vocab.size
    out = {"block": 0.0, "token": 0.0, "worst_violation": 0.0, "strict": False}

    def walk(rel: TokenSeq, js: float, jb: float, prod_min: float):
        rs = small.conditional(rel)
        rb = big.conditional(rel)
        depth = len(rel) + 1
        for t in range(size):
            njs = js * rs[t]
            njb = jb * rb[t]
            npm = prod_min * min(rs[t], rb[t])
            block_term = min(njs, njb)
            if block_term <= 0.0 and npm <= 0.0:
                continue
            out["block"] += block_term
            out["token"] += npm
            out["worst_violation"] = max(out["worst_violation"], npm - block_term)
            if block_term > npm + 1e-15:
                out["strict"] = True
            if depth < L:
                walk(rel + (t,), njs, njb, npm)

    walk((), 1.0, 1.0, 1.0)
    return out


def enumerate_decode_distribution(big: ArModel, small: ArModel, prompt, L: int,
                                  verifier: str, horizon: int,
                                  max_nodes: int = 5_000_000) -> dict[TokenSeq, float]:
    """Exact distribution of the first ``horizon`` decoded tokens.

    Mirrors the decoding loop branch by branch: drafts, acceptance outcomes,
    free tokens, and every later iteration running against the actual
    correction-model wrappers, with all randomness integrated out. Outputs
    shorter than the horizon (EOS stop) are padded with EOS, matching the
    absorbing convention of the target joint distribution.
    """
    if verifier not in ("token", "block"):
        raise ValueError(f"unknown verifier {verifier!r}")
    tau_fn = token_tau_probs if verifier == "token" else block_tau_probs
    corr_fn = token_correction if verifier == "token" else block_correction
    size = small.vocab.size
    eos = small.vocab.eos
    prompt = tuple(prompt)
    dist: dict[TokenSeq, float] = defaultdict(float)
    budget = {"nodes": 0}

    def settle(tokens: TokenSeq, w: float):
        tokens = tokens[:horizon]
        dist[tokens + (eos,) * (horizon - len(tokens))] += w

    def run(eff_big: ArModel, abs_prefix: TokenSeq, emitted: TokenSeq, w: float):
        budget["nodes"] += 1
        if budget["nodes"] > max_nodes:
            raise EnumerationBudgetError(
                f"decode enumeration exceeded {max_nodes} states")
        small_view = rooted(small, abs_prefix)
        for draft in itertools.product(range(size), repeat=L):
            block = score_block(small_view, eff_big, draft)
            ws = math.exp(block.small_log_joints[L]) if np.isfinite(block.small_log_joints[L]) else 0.0
            if ws <= 0.0:
                continue
            for tau, pt in enumerate(tau_fn(block)):
                if pt <= 0.0:
                    continue
                accepted = draft[:tau]
                w2 = w * ws * pt
                if eos in accepted:
                    settle(emitted + accepted[: accepted.index(eos) + 1], w2)
                    continue
                corr = corr_fn(block, tau)
                row = corr.first_row()
                for z in range(size):
                    if row[z] <= 0.0:
                        continue
                    w3 = w2 * row[z]
                    grown = emitted + accepted + (z,)
                    if len(grown) >= horizon or z == eos:
                        settle(grown, w3)
                    else:
                        run(rooted(corr, (z,)), abs_prefix + accepted + (z,), grown, w3)

    run(rooted(big, prompt), prompt, (), 1.0)
    return dict(dist)


def model_joint_distribution(model: ArModel, L: int, prefix=()) -> dict[TokenSeq, float]:
    """All L-token sequence probabilities under ``model`` after ``prefix``."""
    _guard_paths(model.vocab.size, L)
    model = rooted(model, prefix)
    size = model.vocab.size
    dist: dict[TokenSeq, float] = {}

    def walk(rel: TokenSeq, w: float):
        if len(rel) == L:
            dist[rel] = w
            return
        row = model.conditional(rel)
        for t in range(size):
            if row[t] > 0.0:
                walk(rel + (t,), w * row[t])

    walk((), 1.0)
    return dist
