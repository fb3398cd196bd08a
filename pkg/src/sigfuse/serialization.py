"""Dotted key=value flattening of fused records and context-window gating."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Protocol

from .records import FusedRecord, canonical_json

DEFAULT_TOKENS_PER_CHAR = 0.25

_WS = re.compile(r"\s+")


class WindowedModel(Protocol):
    context_window: int
    tokens_per_char: float


@dataclass(frozen=True)
class FlatText:
    text: str
    token_estimate: int


def _leaf(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    return _WS.sub(" ", str(value)).strip()


def _walk(node: Any, path: str, out: list[str]) -> None:
    if isinstance(node, dict):
        if not node:
            out.append(f"{path}={{}}")
        for key, child in node.items():
            _walk(child, f"{path}.{key}" if path else str(key), out)
    elif isinstance(node, list):
        if not node:
            out.append(f"{path}=[]")
        for i, child in enumerate(node):
            _walk(child, f"{path}.{i}", out)
    else:
        out.append(f"{path}={_leaf(node)}")


def flat_tokens(record: FusedRecord) -> list[str]:
    out: list[str] = []
    _walk(canonical_json(record), "", out)
    return out


def estimate_tokens(
    text: str,
    model: WindowedModel | None = None,
    tokenizer: Callable[[str], int] | None = None,
) -> int:
    """ceil(chars * tokens_per_char), or an exact count when a tokenizer is given."""
    if tokenizer is not None:
        return tokenizer(text)
    ratio = DEFAULT_TOKENS_PER_CHAR if model is None else model.tokens_per_char
    return math.ceil(len(text) * Fraction(str(ratio)))


def flatten(record: FusedRecord) -> FlatText:
    """Single-line ``path=value`` text, e.g. ``gtp.0.operations.0.apn=internet``."""
    text = " ".join(flat_tokens(record))
    return FlatText(text, estimate_tokens(text))


def eligible(record: FusedRecord | FlatText | str, model: WindowedModel, tokenizer=None) -> bool:
    """True iff the flattened record fits the model's context window (never truncated)."""
    if isinstance(record, FusedRecord):
        text = flatten(record).text
    elif isinstance(record, FlatText):
        text = record.text
    else:
        text = record
    return estimate_tokens(text, model, tokenizer) <= model.context_window
