"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numbers


def check_text_sequence(X, name="X"):
    """Coerce to a list of non-empty strings, rejecting anything else."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"{name} must be an iterable of strings") from None
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise TypeError(f"{name}[{i}] is {type(item).__name__}, expected str")
        if not item.strip():
            raise ValueError(f"{name}[{i}] is empty")
        out.append(item)
    return out


def check_query_prefix_sequence(X, name="X"):
    """Accept queries or (query, prefix) pairs; returns list of (query, prefix)."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence, not a single string")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, str):
            out.append((item, ""))
        elif isinstance(item, (tuple, list)) and len(item) == 2 \
                and all(isinstance(p, str) for p in item):
            out.append((item[0], item[1]))
        else:
            raise TypeError(
                f"{name}[{i}] must be a query string or a (query, prefix) pair")
        if not out[-1][0].strip():
            raise ValueError(f"{name}[{i}] has an empty query")
    return out


def check_same_length(X, y, x_name="X", y_name="y"):
    if len(X) != len(y):
        raise ValueError(f"{x_name} and {y_name} lengths differ: {len(X)} != {len(y)}")


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
