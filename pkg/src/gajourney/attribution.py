"""Per-session target probabilities from a user's class history.

Both attribution rules are causal: the label for session ``n`` only looks
at sessions ``1..n``. Time decay re-anchors its weights on every prefix, so
the current session always carries weight 1 and each step back halves it.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

N_CLASSES = 6


class Attribution(str, Enum):
    LINEAR = "linear"
    TIME_DECAY = "timedecay"

    @classmethod
    def parse(cls, value) -> "Attribution":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown attribution {value!r}")


def indicator_matrix(class_ids) -> np.ndarray:
    """One-hot rows, shape ``(N, 6)``."""
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("class_ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= N_CLASSES:
        raise ValueError("class ids must lie in [0, 5]")
    v = np.zeros((ids.size, N_CLASSES))
    v[np.arange(ids.size), ids] = 1.0
    return v


def linear_attribution(v) -> np.ndarray:
    """``t(n) = sum(v[:n]) / n``, column-wise. Accepts a vector or an ``(N, C)`` matrix."""
    v = np.asarray(v, dtype=np.float64)
    n = np.arange(1, v.shape[0] + 1, dtype=np.float64)
    if v.ndim == 2:
        n = n[:, None]
    return np.cumsum(v, axis=0) / n


def time_decay_attribution(v, base: float = 2.0) -> np.ndarray:
    """Half-life weighted running share with weights re-anchored at each prefix.

    For prefix ``n`` the weight of session ``i`` is ``base ** -(n - i)``.
    The recurrences ``num(n) = num(n-1) / base + v(n)`` and
    ``den(n) = den(n-1) / base + 1`` evaluate that ratio in one pass.
    ``base=1`` reduces to :func:`linear_attribution`.
    """
    v = np.asarray(v, dtype=np.float64)
    if base <= 0:
        raise ValueError("base must be positive")
    decay = 1.0 / base
    out = np.empty_like(v)
    num = np.zeros(v.shape[1:])
    den = 0.0
    for n in range(v.shape[0]):
        num = num * decay + v[n]
        den = den * decay + 1.0
        out[n] = num / den
    return out


def build_labels(class_ids, model="linear", base: float = 2.0) -> np.ndarray:
    v = indicator_matrix(class_ids)
    if Attribution.parse(model) is Attribution.LINEAR:
        return linear_attribution(v)
    return time_decay_attribution(v, base=base)
