"""Command-line harness: exact comparisons, sweeps, oracle batches, decoding.

Subcommands: ``compare``, ``bernoulli-sweep``, ``oracle-check``, ``decode``,
``exact``. CSV output is deterministic for a given configuration and seed:
fixed column order, ``.`` decimals, ``\\n`` line endings, and a leading
comment recording the config hash and seed.

Exit codes: 0 success, 2 configuration error, 3 theory violation or oracle
failure, 4 enumeration budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import sys
import time

import numpy as np

from .analysis import (
    EnumerationBudgetError,
    acceptance_length_upper_bound,
    bernoulli_curves,
    dominance_summary,
    enumerate_block_accept_joint,
    enumerate_output_distribution,
    expected_tau_block,
    expected_tau_token,
    min_joint,
    model_joint_distribution,
)
from .decode import block_efficiency, spec_decode
from .models import random_model_pair
from .montecarlo import acceptance_report, mean_and_se, simulate_block_efficiency
from .spec_io import ModelSpecError, load_model_spec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_THEORY = 3
EXIT_BUDGET = 4

DOMINANCE_TOL = 1e-12
ORACLE_TOL = 1e-10


class ConfigError(Exception):
    pass


class TheoryViolation(Exception):
    pass


def _parse_length_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if lo < 1 or hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        value = int(text)
        if value < 1:
            raise ValueError
        return [value]
    except ValueError:
        raise ConfigError(f"invalid block length {text!r}; expected an integer or LO..HI") from None


def _parse_tokens(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"invalid token list {text!r}; expected comma-joined integers") from None


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _config_comment(config: dict, seed: int) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(blob).hexdigest()[:12]
    return f"# config={digest} seed={seed}"


def _write_csv(out_path: str | None, comment: str, header: list[str], rows: list[list]):
    lines = [comment, ",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def _load_models(args) -> tuple:
    try:
        return load_model_spec(args.ms), load_model_spec(args.mb)
    except ModelSpecError as exc:
        raise ConfigError(str(exc)) from None


def cmd_compare(args) -> int:
    small, big = _load_models(args)
    lengths = _parse_length_range(args.L)
    config = {
        "cmd": "compare", "ms": args.ms, "mb": args.mb, "L": args.L,
        "trials": args.trials, "eff_trials": args.eff_trials, "horizon": args.horizon,
        "include_free_token": args.include_free_token,
        "exclude_partial_final_block": args.exclude_partial_final_block,
        "workers": args.workers,
    }
    header = ["L", "exact_token", "exact_block", "upper_bound",
              "mc_token_mean", "mc_token_se", "mc_block_mean", "mc_block_se",
              "eff_token_mean", "eff_token_se", "eff_block_mean", "eff_block_se",
              "wall_clock_informational_s"]
    rows = []
    for i, L in enumerate(lengths):
        started = time.perf_counter()
        rep = acceptance_report(small, big, L, args.trials, _derived_seed(args.seed, i),
                                workers=args.workers)
        if rep.exact_block < rep.exact_token - DOMINANCE_TOL:
            raise TheoryViolation(
                f"L={L}: exact block expectation {rep.exact_block!r} fell below "
                f"the token expectation {rep.exact_token!r}")
        effs = {}
        for j, verifier in enumerate(("token", "block")):
            vals = simulate_block_efficiency(
                big, small, L, verifier, args.horizon, args.eff_trials,
                _derived_seed(args.seed, 100 + 2 * i + j),
                include_free_token=args.include_free_token,
                exclude_partial_final=args.exclude_partial_final_block,
                workers=args.workers)
            effs[verifier] = mean_and_se(vals)
        rows.append([L, rep.exact_token, rep.exact_block, rep.upper_bound,
                     rep.mc_token, rep.mc_token_se, rep.mc_block, rep.mc_block_se,
                     effs["token"][0], effs["token"][1], effs["block"][0], effs["block"][1],
                     time.perf_counter() - started])
    _write_csv(args.out, _config_comment(config, args.seed), header, rows)
    return EXIT_OK


def cmd_exact(args) -> int:
    small, big = _load_models(args)
    lengths = _parse_length_range(args.L)
    prefix = _parse_tokens(args.prefix)
    config = {"cmd": "exact", "ms": args.ms, "mb": args.mb, "L": args.L, "prefix": args.prefix}
    header = ["L", "exact_token", "exact_block", "upper_bound"]
    rows = []
    for L in lengths:
        tok = expected_tau_token(small, big, L, prefix)
        blk = expected_tau_block(small, big, L, prefix)
        bound = acceptance_length_upper_bound(small, big, L, prefix)
        if blk < tok - DOMINANCE_TOL:
            raise TheoryViolation(
                f"L={L}: exact block expectation {blk!r} fell below the token expectation {tok!r}")
        rows.append([L, tok, blk, bound])
    _write_csv(args.out, _config_comment(config, args.seed), header, rows)
    return EXIT_OK


def cmd_bernoulli_sweep(args) -> int:
    token, block = bernoulli_curves(args.p, args.q, args.L_max,
                                    include_free_token=args.include_free_token)
    config = {"cmd": "bernoulli-sweep", "p": args.p, "q": args.q, "L_max": args.L_max,
              "include_free_token": args.include_free_token}
    header = ["L", "token_curve", "block_curve", "gap"]
    rows = []
    previous_gap = 0.0
    for i, (tok, blk) in enumerate(zip(token, block)):
        gap = blk - tok
        if gap < -DOMINANCE_TOL or gap < previous_gap - DOMINANCE_TOL:
            raise TheoryViolation(
                f"L={i + 1}: curve gap {gap!r} is negative or shrank from {previous_gap!r}")
        previous_gap = gap
        rows.append([i + 1, tok, blk, gap])
    _write_csv(args.out, _config_comment(config, args.seed), header, rows)
    return EXIT_OK


def _check_pair(small, big, L: int) -> dict:
    """Worst-case deviations of the enumeration oracles for one model pair."""
    target = model_joint_distribution(big, L)
    deviations = {}
    for verifier in ("token", "block"):
        produced = enumerate_output_distribution(small, big, L, verifier)
        keys = set(target) | set(produced)
        deviations[f"output_{verifier}"] = max(
            abs(produced.get(k, 0.0) - target.get(k, 0.0)) for k in keys)
    joint = enumerate_block_accept_joint(small, big, L)
    worst = 0.0
    size = small.vocab.size
    for ell in range(1, L + 1):
        for seq in itertools.product(range(size), repeat=ell):
            expected = min_joint(small, big, seq)
            worst = max(worst, abs(joint.get((ell, seq), 0.0) - expected))
    deviations["accept_joint"] = worst
    dom = dominance_summary(small, big, L)
    deviations["dominance_violation"] = max(dom["worst_violation"],
                                            dom["token"] - dom["block"])
    return deviations


def cmd_oracle_check(args) -> int:
    if args.pairs < 1:
        raise ConfigError("no checks executed: --pairs must be >= 1")
    worst: dict[str, float] = {}
    for i in range(args.pairs):
        small, big = random_model_pair(args.vocab, args.context_len,
                                       _derived_seed(args.seed, i), args.concentration)
        deviations = _check_pair(small, big, args.L)
        for key, value in deviations.items():
            worst[key] = max(worst.get(key, 0.0), value)
    print(f"oracle-check: {args.pairs} pairs, vocab={args.vocab}, L={args.L}, seed={args.seed}")
    failed = False
    for key in sorted(worst):
        status = "ok" if worst[key] <= ORACLE_TOL else "FAIL"
        failed = failed or status == "FAIL"
        print(f"  {key}: worst deviation {worst[key]:.3e} [{status}]")
    if failed:
        raise TheoryViolation(f"oracle deviations exceed {ORACLE_TOL}")
    return EXIT_OK


def cmd_decode(args) -> int:
    small, big = _load_models(args)
    prompt = _parse_tokens(args.prompt)
    for t in prompt:
        if not 0 <= t < big.vocab.size:
            raise ConfigError(f"prompt token {t} outside vocabulary of size {big.vocab.size}")
    rng = np.random.default_rng(args.seed)
    trace = spec_decode(big, small, prompt, args.L, args.verifier, args.max_tokens, rng)
    if args.json:
        print(json.dumps(dataclasses.asdict(trace), indent=2))
        return EXIT_OK
    print(f"output: {','.join(str(t) for t in trace.output)}")
    print(f"tokens emitted: {trace.tokens_emitted}")
    print(f"serial target-model calls: {trace.serial_big_calls}")
    print(f"accepted lengths per iteration: {trace.accepted_lengths}")
    print(f"block efficiency: {block_efficiency(trace)!r}")
    flags = []
    if trace.eos_terminated:
        flags.append("eos-terminated")
    if trace.length_limited:
        flags.append("length-limited")
    if trace.final_partial:
        flags.append("partial-final-block")
    if flags:
        print(f"flags: {', '.join(flags)}")
    print(f"wall clock (informational): {trace.elapsed_seconds:.6f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdec",
        description="Draft-verification laboratory for speculative decoding on explicit models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_models(p):
        p.add_argument("--ms", required=True, help="draft model spec (path or inline JSON)")
        p.add_argument("--mb", required=True, help="target model spec (path or inline JSON)")

    p = sub.add_parser("compare", help="exact + Monte-Carlo comparison of both verifiers")
    add_models(p)
    p.add_argument("--L", default="4", help="block length or range LO..HI")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--eff-trials", type=int, default=500, help="decode runs per efficiency estimate")
    p.add_argument("--horizon", type=int, default=32, help="tokens per efficiency decode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--include-free-token", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--exclude-partial-final-block", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("exact", help="exact expectations and the coupling bound only")
    add_models(p)
    p.add_argument("--L", default="4", help="block length or range LO..HI")
    p.add_argument("--prefix", default="", help="conditioning prefix, comma-joined tokens")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("bernoulli-sweep", help="two-symbol closed-form curves for both verifiers")
    p.add_argument("--p", type=float, required=True, help="draft-model probability of symbol 1")
    p.add_argument("--q", type=float, required=True, help="target-model probability of symbol 1")
    p.add_argument("--L-max", type=int, default=16)
    p.add_argument("--include-free-token", action="store_true",
                   help="add the constant 1 that counts the free token")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bernoulli_sweep)

    p = sub.add_parser("oracle-check", help="batch enumeration-oracle checks on random model pairs")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--vocab", type=int, default=2)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--context-len", type=int, default=2)
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("decode", help="run the speculative decoding loop once")
    add_models(p)
    p.add_argument("--prompt", default="", help="prompt tokens, comma-joined")
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--verifier", choices=("token", "block"), default="block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="dump the full trace as JSON")
    p.set_defaults(func=cmd_decode)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TheoryViolation as exc:
        print(f"theory violation: {exc}", file=sys.stderr)
        return EXIT_THEORY
    except EnumerationBudgetError as exc:
        print(f"warning: budget exceeded, checks skipped: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
