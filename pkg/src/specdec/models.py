"""Explicit finite-vocabulary autoregressive models with exact scoring.

Every model exposes ``conditional(prefix) -> row``, a length-``vocab.size``
probability vector over the next token given the prefix. Models are immutable
after construction and deterministic: the same prefix always yields the same
row. The end-of-sequence token is absorbing for every model kind: once it
appears anywhere in the prefix, the conditional puts mass 1 on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-9

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Token alphabet: ``size`` tokens indexed 0..size-1, one of them EOS."""

    size: int
    eos: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if not 0 <= self.eos < self.size:
            raise ValueError(f"eos index {self.eos} outside [0, {self.size})")


def validate_prob_vector(row: np.ndarray, size: int, tol: float = PROB_TOL) -> np.ndarray:
    """Check a next-token distribution: length, non-negativity, sum within tol."""
    row = np.asarray(row, dtype=float)
    if row.shape != (size,):
        raise ValueError(f"expected {size} probabilities, got shape {row.shape}")
    if np.any(row < 0):
        raise ValueError(f"negative probability in row: {row}")
    total = float(row.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"row sums to {total!r}, off by more than {tol}")
    return row


def _frozen_row(row: np.ndarray) -> np.ndarray:
    out = np.array(row, dtype=float)
    out.setflags(write=False)
    return out


class ArModel:
    """Base autoregressive model; subclasses provide rows via ``_row``.

    ``conditional`` applies the EOS-absorption rule before consulting the
    subclass, so absorption is a model invariant rather than caller logic.
    """

    kind = "abstract"

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        eos_row = np.zeros(vocab.size)
        eos_row[vocab.eos] = 1.0
        self._eos_row = _frozen_row(eos_row)

    def conditional(self, prefix) -> np.ndarray:
        prefix = tuple(prefix)
        if self.vocab.eos in prefix:
            return self._eos_row
        return self._row(prefix)

    def _row(self, prefix: TokenSeq) -> np.ndarray:
        raise NotImplementedError


class MemorylessModel(ArModel):
    """Same next-token distribution at every (EOS-free) prefix."""

    kind = "memoryless"

    def __init__(self, vocab: Vocab, probs):
        super().__init__(vocab)
        self.probs = _frozen_row(validate_prob_vector(probs, vocab.size))

    def _row(self, prefix):
        return self.probs


class MarkovModel(ArModel):
    """First-order chain: row indexed by the last token, ``initial`` at the root."""

    kind = "markov"

    def __init__(self, vocab: Vocab, matrix, initial):
        super().__init__(vocab)
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (vocab.size, vocab.size):
            raise ValueError(f"transition matrix must be {vocab.size}x{vocab.size}, got {matrix.shape}")
        self.matrix = tuple(_frozen_row(validate_prob_vector(matrix[i], vocab.size)) for i in range(vocab.size))
        self.initial = _frozen_row(validate_prob_vector(initial, vocab.size))

    def _row(self, prefix):
        if not prefix:
            return self.initial
        return self.matrix[prefix[-1]]


class TableModel(ArModel):
    """Explicit map from the last ``context_len`` tokens to a row.

    Unseen contexts fall back to ``default``, so the model is total on all
    prefixes. ``context_len = 0`` makes the model memoryless.
    """

    kind = "table"

    def __init__(self, vocab: Vocab, rows: dict, default, context_len: int):
        super().__init__(vocab)
        if context_len < 0:
            raise ValueError("context_len must be >= 0")
        self.context_len = context_len
        self.default = _frozen_row(validate_prob_vector(default, vocab.size))
        self.rows = {
            tuple(key): _frozen_row(validate_prob_vector(row, vocab.size))
            for key, row in rows.items()
        }
        for key in self.rows:
            if len(key) > context_len:
                raise ValueError(f"table key {key} longer than context_len {context_len}")

    def _row(self, prefix):
        key = prefix[-self.context_len:] if self.context_len else ()
        return self.rows.get(key, self.default)


class RootedView(ArModel):
    """A model conditioned on a fixed root prefix; prefixes are relative to it."""

    def __init__(self, base: ArModel, root):
        super().__init__(base.vocab)
        self.base = base
        self.root = tuple(root)

    @property
    def kind(self):
        return self.base.kind

    def conditional(self, prefix) -> np.ndarray:
        # absorption is checked by the base model on the full absolute prefix
        return self.base.conditional(self.root + tuple(prefix))

    def _row(self, prefix):  # pragma: no cover - conditional is overridden
        raise AssertionError("unreachable")


def rooted(model: ArModel, prefix) -> ArModel:
    """View of ``model`` conditioned on ``prefix``; identity for empty prefixes."""
    prefix = tuple(prefix)
    if not prefix:
        return model
    if isinstance(model, RootedView):
        return RootedView(model.base, model.root + prefix)
    return RootedView(model, prefix)


def make_random_model(vocab: Vocab, context_len: int, seed: int, concentration: float = 1.0) -> TableModel:
    """Seeded random table model with Dirichlet(concentration) rows.

    Rows are drawn by Gamma normalization for every EOS-free context of length
    up to ``context_len``, in a fixed enumeration order, so one 64-bit seed
    reproduces the model exactly. Large concentrations give near-uniform rows.
    """
    if context_len < 0:
        raise ValueError("context_len must be >= 0")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    non_eos = [t for t in range(vocab.size) if t != vocab.eos]
    rows = {}
    contexts: list[TokenSeq] = [()]
    for _ in range(context_len):
        contexts = [ctx + (t,) for ctx in contexts for t in non_eos]
        rows.update((ctx, None) for ctx in contexts)
    rows[()] = None
    for ctx in sorted(rows):
        draws = rng.gamma(concentration, 1.0, size=vocab.size)
        total = draws.sum()
        if total <= 0:  # gamma draws can underflow for tiny concentrations
            draws = np.full(vocab.size, 1.0)
            total = float(vocab.size)
        rows[ctx] = draws / total
    return TableModel(vocab, rows, rows[()], context_len)


def random_model_pair(vocab_size: int, context_len: int, seed: int, concentration: float = 1.0,
                      eos: int | None = None) -> tuple[TableModel, TableModel]:
    """Deterministic (draft, target) model pair for a given seed."""
    vocab = Vocab(vocab_size, vocab_size - 1 if eos is None else eos)
    child_a, child_b = np.random.SeedSequence(seed).spawn(2)
    small = make_random_model(vocab, context_len, child_a.generate_state(1)[0], concentration)
    big = make_random_model(vocab, context_len, child_b.generate_state(1)[0], concentration)
    return small, big


def bernoulli_model(p: float) -> MemorylessModel:
    """Memoryless two-symbol source: P(token 1) = p.

    The EOS token is a third symbol with zero mass, so absorption never fires
    on reachable prefixes and the model behaves as a true memoryless source
    over {0, 1}.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return MemorylessModel(Vocab(3, eos=2), np.array([1.0 - p, p, 0.0]))


def bernoulli_pair(p: float, q: float) -> tuple[MemorylessModel, MemorylessModel]:
    """(draft, target) pair of two-symbol memoryless sources."""
    return bernoulli_model(p), bernoulli_model(q)


def joint_log_prob(model: ArModel, seq) -> float:
    """Natural-log joint probability of ``seq`` under ``model``.

    Empty sequences give 0.0; any zero-probability factor gives -inf.
    """
    seq = tuple(seq)
    total = 0.0
    for i, token in enumerate(seq):
        p = model.conditional(seq[:i])[token]
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
    return total


def sample_token(row: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a next-token row, consuming one uniform variate."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(row), u, side="right"))
    return min(idx, len(row) - 1)


def sample_block(model: ArModel, prefix, L: int, rng: np.random.Generator) -> TokenSeq:
    """Draw ``L`` tokens autoregressively from ``model`` after ``prefix``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    prefix = tuple(prefix)
    out = []
    for _ in range(L):
        row = model.conditional(prefix + tuple(out))
        out.append(sample_token(row, rng))
    return tuple(out)
