"""Speculative decoding loop and the plain autoregressive baseline.

The loop drafts a block from the small model, scores it under the current
effective target model, verifies, emits the accepted prefix plus one free
token from the correction row, and continues with the correction model as the
next iteration's target. One parallel scoring pass per iteration is the only
serial target-model cost; sampling the free token reads a row cached at
verify time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .models import ArModel, TokenSeq, rooted, sample_token
from .verify import block_verify, draft_and_score, token_verify

VERIFIERS = {"token": token_verify, "block": block_verify}


@dataclass
class IterationRecord:
    draft: TokenSeq
    tau: int
    free_token: int | None
    emitted: TokenSeq
    serial_calls: int = 1


@dataclass
class DecodeTrace:
    prompt: TokenSeq
    output: TokenSeq
    iterations: list[IterationRecord] = field(default_factory=list)
    tokens_emitted: int = 0
    serial_big_calls: int = 0
    accepted_lengths: list[int] = field(default_factory=list)
    length_limited: bool = False
    eos_terminated: bool = False
    final_partial: bool = False
    verifier: str = "baseline"
    elapsed_seconds: float = 0.0


def _check_prompt(vocab, prompt) -> TokenSeq:
    prompt = tuple(int(t) for t in prompt)
    for t in prompt:
        if not 0 <= t < vocab.size:
            raise ValueError(f"prompt token {t} outside vocabulary of size {vocab.size}")
    return prompt


def spec_decode(big: ArModel, small: ArModel, prompt, L: int, verifier: str,
                max_tokens: int, rng: np.random.Generator) -> DecodeTrace:
    """Decode up to ``max_tokens`` tokens after ``prompt`` with draft blocks of length L.

    Returns a trace whose output follows the big model's distribution exactly
    (for either verifier); output is truncated at the first EOS, dropping any
    absorbed EOS repeats, and flagged length-limited when the cap bites first.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if big.vocab.size != small.vocab.size or big.vocab.eos != small.vocab.eos:
        raise ValueError("draft and target models must share a vocabulary")
    verify_fn = VERIFIERS[verifier]
    prompt = _check_prompt(big.vocab, prompt)
    eos = big.vocab.eos
    started = time.perf_counter()

    eff_big = rooted(big, prompt)
    abs_prefix = prompt
    out: list[int] = []
    trace = DecodeTrace(prompt=prompt, output=(), verifier=verifier)

    while len(out) < max_tokens:
        block = draft_and_score(rooted(small, abs_prefix), eff_big, L, (), rng)
        outcome = verify_fn(block, rng)
        draft = block.draft
        accepted = outcome.accepted
        trace.accepted_lengths.append(outcome.tau)
        room = max_tokens - len(out)

        if eos in accepted:
            emitted = accepted[: accepted.index(eos) + 1]
            capped = emitted[:room]
            out.extend(capped)
            trace.iterations.append(IterationRecord(draft, outcome.tau, None, capped))
            if len(capped) < len(emitted):
                trace.final_partial = True
            else:
                trace.eos_terminated = True
            break

        free = sample_token(outcome.correction.first_row(), rng)
        emitted = accepted + (free,)
        capped = emitted[:room]
        out.extend(capped)
        trace.iterations.append(IterationRecord(draft, outcome.tau, free, capped))
        if len(capped) < len(emitted):
            trace.final_partial = True
            break
        if free == eos:
            trace.eos_terminated = True
            break
        abs_prefix = abs_prefix + emitted
        eff_big = rooted(outcome.correction, (free,))

    if not trace.eos_terminated:
        trace.length_limited = True
    trace.output = tuple(out)
    trace.tokens_emitted = len(out)
    trace.serial_big_calls = len(trace.iterations)
    trace.elapsed_seconds = time.perf_counter() - started
    return trace


def baseline_decode(big: ArModel, prompt, max_tokens: int, rng: np.random.Generator) -> DecodeTrace:
    """Plain autoregressive sampling: one target-model call per token."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    prompt = _check_prompt(big.vocab, prompt)
    eos = big.vocab.eos
    started = time.perf_counter()
    out: list[int] = []
    trace = DecodeTrace(prompt=prompt, output=())
    while len(out) < max_tokens:
        row = big.conditional(prompt + tuple(out))
        t = sample_token(row, rng)
        out.append(t)
        trace.iterations.append(IterationRecord((), 0, t, (t,)))
        trace.accepted_lengths.append(0)
        if t == eos:
            trace.eos_terminated = True
            break
    if not trace.eos_terminated:
        trace.length_limited = True
    trace.output = tuple(out)
    trace.tokens_emitted = len(out)
    trace.serial_big_calls = len(trace.iterations)
    trace.elapsed_seconds = time.perf_counter() - started
    return trace


def block_efficiency(trace: DecodeTrace, include_free_token: bool = True,
                     exclude_partial_final: bool = False) -> float:
    """Decoded tokens per serial target-model call.

    ``include_free_token=False`` counts only accepted draft tokens;
    ``exclude_partial_final=True`` drops a final iteration that was cut short
    by the token cap from both numerator and denominator.
    """
    iterations = trace.iterations
    if exclude_partial_final and trace.final_partial:
        iterations = iterations[:-1]
    if not iterations:
        raise ValueError("trace has no complete iterations to measure")
    tokens = 0
    for rec in iterations:
        n = len(rec.emitted)
        if not include_free_token and rec.free_token is not None and n == rec.tau + 1:
            n -= 1
        tokens += n
    return tokens / len(iterations)
