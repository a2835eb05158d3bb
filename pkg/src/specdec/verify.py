"""Draft verifiers: per-token rejection sampling and backward block coupling.

Both verifiers are pure procedures from a scored draft block plus a seeded
uniform stream to an accepted length ``tau`` and a correction model for the
tokens that follow. They touch only the cached rows and joints inside the
block, never the models, so verification itself costs no scoring calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ArModel, TokenSeq, _frozen_row, rooted, sample_token

RATIO_TIE_TOL = 1e-9


@dataclass
class VerifyDiagnostics:
    """Counters for numerically clamped branches; all zero on honest inputs."""

    zero_draft_prob: int = 0   # drafted token had zero draft-model probability
    zero_reject_mass: int = 0  # backward step with no rejected mass, ratio clamped to 1


@dataclass
class DraftBlock:
    """A drafted token block with cached scores from both models.

    ``small_rows[i]`` / ``big_rows[i]`` are the next-token rows after the
    first ``i`` draft tokens (i = 0..L); the log joints are cumulative block
    probabilities relative to the iteration root, so index 0 is always 0.0.
    """

    draft: TokenSeq
    small_rows: list[np.ndarray]
    big_rows: list[np.ndarray]
    small_log_joints: np.ndarray
    big_log_joints: np.ndarray
    small_model: ArModel | None = None
    big_model: ArModel | None = None

    def __len__(self):
        return len(self.draft)

    def validate(self, tol: float = 1e-9):
        L = len(self.draft)
        assert len(self.small_rows) == len(self.big_rows) == L + 1
        assert len(self.small_log_joints) == len(self.big_log_joints) == L + 1
        assert self.small_log_joints[0] == 0.0 and self.big_log_joints[0] == 0.0
        for rows, joints in ((self.small_rows, self.small_log_joints),
                             (self.big_rows, self.big_log_joints)):
            for i, t in enumerate(self.draft):
                p = rows[i][t]
                expected = joints[i] + (math.log(p) if p > 0 else -math.inf)
                if math.isinf(expected):
                    assert math.isinf(joints[i + 1])
                else:
                    assert abs(joints[i + 1] - expected) <= tol


def _log_inc(log_joint: float, p: float) -> float:
    if p <= 0.0 or math.isinf(log_joint):
        return -math.inf
    return log_joint + math.log(p)


def score_block(small: ArModel, big: ArModel, draft) -> DraftBlock:
    """Score a draft under both models: L+1 rows each plus running log joints."""
    draft = tuple(draft)
    L = len(draft)
    small_rows, big_rows = [], []
    sj = np.zeros(L + 1)
    bj = np.zeros(L + 1)
    for i in range(L + 1):
        prefix = draft[:i]
        rs = small.conditional(prefix)
        rb = big.conditional(prefix)
        small_rows.append(rs)
        big_rows.append(rb)
        if i < L:
            sj[i + 1] = _log_inc(sj[i], rs[draft[i]])
            bj[i + 1] = _log_inc(bj[i], rb[draft[i]])
    return DraftBlock(draft, small_rows, big_rows, sj, bj, small, big)


def draft_and_score(small: ArModel, big: ArModel, L: int, prefix, rng: np.random.Generator) -> DraftBlock:
    """Sample an L-token draft from ``small`` after ``prefix`` and score it.

    Single walk: each row is fetched once and reused for both the draw and
    the cached scores. Consumes L uniform variates, like ``sample_block``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    small = rooted(small, tuple(prefix))
    big = rooted(big, tuple(prefix))
    draft: TokenSeq = ()
    small_rows, big_rows = [], []
    sj = np.zeros(L + 1)
    bj = np.zeros(L + 1)
    for i in range(L):
        rs = small.conditional(draft)
        rb = big.conditional(draft)
        small_rows.append(rs)
        big_rows.append(rb)
        t = sample_token(rs, rng)
        draft = draft + (t,)
        sj[i + 1] = _log_inc(sj[i], rs[t])
        bj[i + 1] = _log_inc(bj[i], rb[t])
    small_rows.append(small.conditional(draft))
    big_rows.append(big.conditional(draft))
    return DraftBlock(draft, small_rows, big_rows, sj, bj, small, big)


def scaled_masses(log_joint_small: float, log_joint_big: float,
                  small_row: np.ndarray, big_row: np.ndarray) -> tuple[float, float]:
    """Leftover target mass and rejected draft mass over one-token extensions.

    Both joint probabilities are rescaled by the larger of the two before the
    clamped sums, so the pair stays well-scaled for long prefixes; the
    acceptance ratio is invariant under this common rescaling.
    """
    m = max(log_joint_small, log_joint_big)
    if math.isinf(m):
        return 0.0, 0.0
    a_small = math.exp(log_joint_small - m)
    a_big = math.exp(log_joint_big - m)
    diff = a_big * big_row - a_small * small_row
    p_remain = float(np.clip(diff, 0.0, None).sum())
    p_rej = float(np.clip(-diff, 0.0, None).sum())
    return p_remain, p_rej


def p_remain(log_joint_small: float, log_joint_big: float,
             small_row: np.ndarray, big_row: np.ndarray) -> float:
    """Absolute leftover target mass sum_x (M_big(x^i, x) - M_small(x^i, x))_+."""
    pr, _ = scaled_masses(log_joint_small, log_joint_big, small_row, big_row)
    return pr * math.exp(max(log_joint_small, log_joint_big))


def p_rej(log_joint_small: float, log_joint_big: float,
          small_row: np.ndarray, big_row: np.ndarray) -> float:
    """Absolute rejected draft mass sum_x (M_small(x^i, x) - M_big(x^i, x))_+."""
    _, pj = scaled_masses(log_joint_small, log_joint_big, small_row, big_row)
    return pj * math.exp(max(log_joint_small, log_joint_big))


def residual_row(log_joint_small: float, log_joint_big: float,
                 small_row: np.ndarray, big_row: np.ndarray) -> np.ndarray:
    """Normalized positive part of the one-token-extension mass difference.

    Raises if the leftover mass is zero; callers reach this only at prefixes
    whose acceptance implies leftover mass remains.
    """
    m = max(log_joint_small, log_joint_big)
    if math.isinf(m):
        raise ValueError("empty residual: both joint probabilities are zero")
    diff = math.exp(log_joint_big - m) * big_row - math.exp(log_joint_small - m) * small_row
    pos = np.clip(diff, 0.0, None)
    total = pos.sum()
    if total <= 0.0:
        raise ValueError("empty residual: no leftover target mass at this prefix")
    return pos / total


def token_residual_row(small_row: np.ndarray, big_row: np.ndarray) -> np.ndarray:
    """Residual over next tokens only: normalized (big_row - small_row)_+."""
    return residual_row(0.0, 0.0, small_row, big_row)


class CorrectionModel(ArModel):
    """Continuation model returned by a verifier (the residual-wrapper kind).

    Rooted at the accepted prefix. Depending on ``mode`` it serves:

    - ``plain``: the target model's own rows (full block accepted);
    - ``token-residual``: one residual row, then target rows;
    - ``block-residual``: residual rows for every depth below ``depth_limit``,
      then target rows.

    Residual rows at fresh continuations need both underlying models' joint
    probabilities along the path; these are maintained incrementally from the
    verify-time joints, so each new row costs one row fetch per model.
    """

    kind = "residual-wrapper"

    def __init__(self, mode: str, big: ArModel, small: ArModel, accepted,
                 depth_limit: int, base_log_joint_small: float,
                 base_log_joint_big: float, first_row: np.ndarray):
        super().__init__(big.vocab)
        if mode not in ("plain", "token-residual", "block-residual"):
            raise ValueError(f"unknown correction mode {mode!r}")
        self.mode = mode
        self.big = big
        self.small = small
        self.accepted = tuple(accepted)
        self.depth_limit = depth_limit
        self._first_row = _frozen_row(first_row)
        self._joints = {(): (base_log_joint_small, base_log_joint_big)}
        self._row_cache: dict[TokenSeq, tuple[np.ndarray, np.ndarray]] = {}

    def first_row(self) -> np.ndarray:
        """Next-token row at the correction root; cached, costs no model calls."""
        return self._first_row

    def _underlying_rows(self, rel: TokenSeq) -> tuple[np.ndarray, np.ndarray]:
        hit = self._row_cache.get(rel)
        if hit is None:
            path = self.accepted + rel
            hit = (self.small.conditional(path), self.big.conditional(path))
            self._row_cache[rel] = hit
        return hit

    def _path_joints(self, rel: TokenSeq) -> tuple[float, float]:
        hit = self._joints.get(rel)
        if hit is not None:
            return hit
        start = len(rel) - 1
        while start > 0 and rel[:start] not in self._joints:
            start -= 1
        ls, lb = self._joints[rel[:start]]
        for j in range(start, len(rel)):
            rs, rb = self._underlying_rows(rel[:j])
            t = rel[j]
            ls = _log_inc(ls, rs[t])
            lb = _log_inc(lb, rb[t])
            self._joints[rel[: j + 1]] = (ls, lb)
        return ls, lb

    def conditional(self, prefix) -> np.ndarray:
        rel = tuple(prefix)
        depth = len(rel)
        if depth == 0:
            return self._first_row
        if self.mode == "block-residual" and depth < self.depth_limit:
            ls, lb = self._path_joints(rel)
            rs, rb = self._underlying_rows(rel)
            return residual_row(ls, lb, rs, rb)
        return self.big.conditional(self.accepted + rel)

    def _row(self, prefix):  # pragma: no cover - conditional is overridden
        raise AssertionError("unreachable")


@dataclass
class VerifyOutcome:
    """Accepted length plus the model to continue sampling from."""

    tau: int
    accepted: TokenSeq
    correction: CorrectionModel
    diagnostics: VerifyDiagnostics = field(default_factory=VerifyDiagnostics)


def plain_correction(block: DraftBlock) -> CorrectionModel:
    L = len(block)
    return CorrectionModel(
        "plain", block.big_model, block.small_model, block.draft,
        depth_limit=0,
        base_log_joint_small=float(block.small_log_joints[L]),
        base_log_joint_big=float(block.big_log_joints[L]),
        first_row=block.big_rows[L],
    )


def token_correction(block: DraftBlock, tau: int) -> CorrectionModel:
    if tau == len(block):
        return plain_correction(block)
    return CorrectionModel(
        "token-residual", block.big_model, block.small_model, block.draft[:tau],
        depth_limit=1,
        base_log_joint_small=float(block.small_log_joints[tau]),
        base_log_joint_big=float(block.big_log_joints[tau]),
        first_row=token_residual_row(block.small_rows[tau], block.big_rows[tau]),
    )


def block_correction(block: DraftBlock, tau: int) -> CorrectionModel:
    if tau == len(block):
        return plain_correction(block)
    ls = float(block.small_log_joints[tau])
    lb = float(block.big_log_joints[tau])
    return CorrectionModel(
        "block-residual", block.big_model, block.small_model, block.draft[:tau],
        depth_limit=len(block) - tau,
        base_log_joint_small=ls,
        base_log_joint_big=lb,
        first_row=residual_row(ls, lb, block.small_rows[tau], block.big_rows[tau]),
    )


def token_accept_prob(small_row: np.ndarray, big_row: np.ndarray, token: int,
                      diagnostics: VerifyDiagnostics | None = None) -> float:
    """min{big/small, 1} for one drafted token; 0/0 counts as accept."""
    ps = small_row[token]
    pb = big_row[token]
    if ps <= 0.0:
        # unreachable for drafts actually sampled from the draft model
        if diagnostics is not None:
            diagnostics.zero_draft_prob += 1
        return 1.0
    return min(1.0, pb / ps)


def token_tau_probs(block: DraftBlock) -> np.ndarray:
    """Exact distribution of the per-token verifier's accepted length given a draft."""
    L = len(block)
    probs = np.zeros(L + 1)
    survival = 1.0
    for i in range(L):
        a = token_accept_prob(block.small_rows[i], block.big_rows[i], block.draft[i])
        probs[i] = survival * (1.0 - a)
        survival *= a
    probs[L] = survival
    return probs


def block_tau_probs(block: DraftBlock) -> np.ndarray:
    """Exact distribution of the block verifier's accepted length given a draft."""
    L = len(block)
    probs = np.zeros(L + 1)
    probs[L] = whole_block_accept_prob(block)
    rem = 1.0 - probs[L]
    for i in range(1, L + 1):
        m = L - i
        pr, pj = scaled_masses(block.small_log_joints[m], block.big_log_joints[m],
                               block.small_rows[m], block.big_rows[m])
        if i == L or pj <= 0.0:
            accept = 1.0
        else:
            accept = min(1.0, pr / pj)
        probs[m] = rem * accept
        rem *= 1.0 - accept
    return probs


def token_verify(block: DraftBlock, rng: np.random.Generator) -> VerifyOutcome:
    """Per-token rejection sampling; stops at the first rejected draft token.

    Consumes one uniform variate per examined token. On rejection at position
    tau+1 the correction serves the row-space residual first and the target
    model afterwards.
    """
    diags = VerifyDiagnostics()
    L = len(block)
    tau = L
    for i in range(L):
        accept = token_accept_prob(block.small_rows[i], block.big_rows[i], block.draft[i], diags)
        if rng.random() > accept:
            tau = i
            break
    return VerifyOutcome(tau, block.draft[:tau], token_correction(block, tau), diags)


def whole_block_accept_prob(block: DraftBlock) -> float:
    """min{M_big(X^L) / M_small(X^L), 1} from the cached log joints."""
    L = len(block)
    ls = block.small_log_joints[L]
    lb = block.big_log_joints[L]
    if math.isinf(ls):
        # zero-probability draft: unreachable for honest drafts, accept
        return 1.0
    if math.isinf(lb):
        return 0.0
    return math.exp(min(0.0, lb - ls))


def block_verify(block: DraftBlock, rng: np.random.Generator) -> VerifyOutcome:
    """Backward block coupling: whole-block accept test, then shrinking prefixes.

    Consumes uniform variates in a fixed order: one for the whole block, then
    one per backward step until a prefix is accepted. The final step (empty
    prefix) always terminates because leftover and rejected masses coincide
    there; that identity is asserted rather than trusted to rounding.
    """
    diags = VerifyDiagnostics()
    L = len(block)
    if rng.random() <= whole_block_accept_prob(block):
        return VerifyOutcome(L, block.draft, _plain_correction(block), diags)

    for i in range(1, L + 1):
        m = L - i
        pr, pj = scaled_masses(block.small_log_joints[m], block.big_log_joints[m],
                               block.small_rows[m], block.big_rows[m])
        if i == L:
            # empty prefix: leftover mass equals rejected mass, so this step
            # must accept; enforce it and check the identity held numerically
            assert abs(pr - pj) <= RATIO_TIE_TOL * max(1.0, pr, pj), \
                f"termination identity violated: p_remain={pr}, p_rej={pj}"
            accept = 1.0
        elif pj <= 0.0:
            diags.zero_reject_mass += 1
            accept = 1.0
        else:
            accept = min(1.0, pr / pj)
        if rng.random() <= accept:
            assert pr > 0.0, (
                "accepted a prefix with no leftover target mass; "
                "this contradicts rejection of the longer prefix"
            )
            return VerifyOutcome(m, block.draft[:m], block_correction(block, m), diags)
    raise AssertionError("backward acceptance loop failed to terminate")
