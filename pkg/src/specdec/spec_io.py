"""Model specification files: JSON documents describing one model.

Common fields: ``vocab_size``, ``eos``, ``kind``. Kind-specific fields:

- ``memoryless``: ``probs`` (list of vocab_size probabilities)
- ``markov``: ``matrix`` (vocab_size x vocab_size), ``initial`` (list)
- ``table``: ``context_len``, ``rows`` (map from comma-joined token context,
  "" for the empty context, to a row), ``default`` (fallback row)
- ``random-seeded``: ``seed``, ``context_len``, ``concentration``

Rows off by more than 1e-6 from unit mass are rejected with a field
diagnostic; rows within that tolerance are renormalized exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .models import ArModel, MarkovModel, MemorylessModel, TableModel, Vocab, make_random_model

ROW_SUM_TOL = 1e-6

KINDS = ("memoryless", "markov", "table", "random-seeded")


class ModelSpecError(Exception):
    """A model spec file failed to parse or validate; message names the field."""


def _fail(origin: str, field: str, message: str):
    raise ModelSpecError(f"{origin}: field {field!r}: {message}")


def _require(data: dict, field: str, origin: str):
    if field not in data:
        _fail(origin, field, "missing")
    return data[field]


def _int_field(data: dict, field: str, origin: str) -> int:
    value = _require(data, field, origin)
    if not isinstance(value, int) or isinstance(value, bool):
        _fail(origin, field, f"expected an integer, got {value!r}")
    return value


def _row_field(value, size: int, origin: str, field: str) -> np.ndarray:
    try:
        row = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(origin, field, f"not a numeric list: {value!r}")
    if row.shape != (size,):
        _fail(origin, field, f"expected {size} entries, got shape {row.shape}")
    if np.any(row < 0):
        _fail(origin, field, "negative probability")
    total = float(row.sum())
    if abs(total - 1.0) > ROW_SUM_TOL:
        _fail(origin, field, f"row sums to {total!r}, off by more than {ROW_SUM_TOL}")
    return row / total


_COMMON_FIELDS = {"vocab_size", "eos", "kind"}
_KIND_FIELDS = {
    "memoryless": {"probs"},
    "markov": {"matrix", "initial"},
    "table": {"context_len", "rows", "default"},
    "random-seeded": {"seed", "context_len", "concentration"},
}


def model_from_dict(data: dict, origin: str = "<spec>") -> ArModel:
    if not isinstance(data, dict):
        raise ModelSpecError(f"{origin}: expected a JSON object, got {type(data).__name__}")
    kind = _require(data, "kind", origin)
    if kind not in KINDS:
        _fail(origin, "kind", f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    allowed = _COMMON_FIELDS | _KIND_FIELDS[kind]
    for key in data:
        if key not in allowed:
            _fail(origin, key, f"unexpected field for kind {kind!r}")
    size = _int_field(data, "vocab_size", origin)
    eos = _int_field(data, "eos", origin)
    try:
        vocab = Vocab(size, eos)
    except ValueError as exc:
        raise ModelSpecError(f"{origin}: {exc}") from None

    if kind == "memoryless":
        return MemorylessModel(vocab, _row_field(_require(data, "probs", origin), size, origin, "probs"))

    if kind == "markov":
        matrix_raw = _require(data, "matrix", origin)
        if not isinstance(matrix_raw, list) or len(matrix_raw) != size:
            _fail(origin, "matrix", f"expected {size} rows")
        matrix = [_row_field(r, size, origin, f"matrix[{i}]") for i, r in enumerate(matrix_raw)]
        initial = _row_field(_require(data, "initial", origin), size, origin, "initial")
        return MarkovModel(vocab, np.array(matrix), initial)

    if kind == "table":
        context_len = _int_field(data, "context_len", origin)
        if context_len < 0:
            _fail(origin, "context_len", "must be >= 0")
        rows_raw = _require(data, "rows", origin)
        if not isinstance(rows_raw, dict):
            _fail(origin, "rows", "expected an object mapping contexts to rows")
        rows = {}
        for key, value in rows_raw.items():
            ctx = _parse_context(key, vocab, origin)
            if len(ctx) > context_len:
                _fail(origin, f"rows[{key!r}]", f"context longer than context_len {context_len}")
            rows[ctx] = _row_field(value, size, origin, f"rows[{key!r}]")
        default = _row_field(_require(data, "default", origin), size, origin, "default")
        return TableModel(vocab, rows, default, context_len)

    # random-seeded
    seed = _int_field(data, "seed", origin)
    context_len = _int_field(data, "context_len", origin)
    concentration = _require(data, "concentration", origin)
    if not isinstance(concentration, (int, float)) or concentration <= 0:
        _fail(origin, "concentration", f"expected a positive number, got {concentration!r}")
    return make_random_model(vocab, context_len, seed, float(concentration))


def _parse_context(key: str, vocab: Vocab, origin: str) -> tuple[int, ...]:
    if key == "":
        return ()
    try:
        ctx = tuple(int(part) for part in key.split(","))
    except ValueError:
        _fail(origin, f"rows[{key!r}]", "context keys are comma-joined token indices")
    for t in ctx:
        if not 0 <= t < vocab.size:
            _fail(origin, f"rows[{key!r}]", f"token {t} outside vocabulary of size {vocab.size}")
    return ctx


def parse_model_spec(text: str, origin: str = "<inline>") -> ArModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"{origin}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return model_from_dict(data, origin)


def load_model_spec(source: str) -> ArModel:
    """Build a model from a JSON file path or an inline JSON string."""
    stripped = source.strip()
    if stripped.startswith("{"):
        return parse_model_spec(stripped)
    if not os.path.exists(source):
        raise ModelSpecError(f"{source}: no such file (inline specs must start with '{{')")
    with open(source, "r", encoding="utf-8") as handle:
        return parse_model_spec(handle.read(), origin=source)
