"""Stage-1 selection: top LPM scores plus greedy max-min diversity tokens."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ClampWarning(UserWarning):
    pass


class DegenerateVectorError(ValueError):
    pass


@dataclass
class SelectionResult:
    informative: np.ndarray
    diverse: np.ndarray

    @property
    def all(self) -> np.ndarray:
        return np.sort(np.concatenate([self.informative, self.diverse]))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_informative(scores, count: int) -> np.ndarray:
    """Indices of the ``count`` highest scores (lower index wins ties), ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count > len(scores):
        warnings.warn(f"requested {count} tokens from {len(scores)}; clamping", ClampWarning, stacklevel=2)
        count = len(scores)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def unit_rows(tokens) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"token {int(zero[0])} has zero norm")
    return x / norms[:, None]


def select_diverse(tokens, already, count: int) -> np.ndarray:
    """Greedily add the token whose max cosine similarity to the selected set is smallest."""
    already = np.asarray(already, dtype=np.int64)
    if already.size == 0:
        raise ValueError("diversity selection needs a nonempty seed set")
    if count < 0:
        raise ValueError("count must be nonnegative")
    unit = unit_rows(tokens)
    n = unit.shape[0]
    selected = np.zeros(n, dtype=bool)
    selected[already] = True
    count = min(count, n - int(selected.sum()))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(_kernels.greedy_maxmin(unit, selected, count))


def stage1_select(scores, tokens, r1: int, lambda_div: float) -> SelectionResult:
    if r1 < 1:
        raise ValueError("R1 must be at least 1")
    if not 0.0 <= lambda_div <= 1.0:
        raise ValueError("lambda_div must lie in [0, 1]")
    n = len(scores)
    if r1 >= n:
        return SelectionResult(np.arange(n), np.zeros(0, dtype=np.int64))
    n_div = round_half_up(lambda_div * r1)
    n_inf = r1 - n_div
    if n_inf == 0:
        # no informative budget: seed the diversity phase with the top token
        n_inf, n_div = 1, r1 - 1
    informative = select_informative(scores, n_inf)
    diverse = select_diverse(tokens, informative, n_div) if n_div else np.zeros(0, dtype=np.int64)
    return SelectionResult(informative, diverse)
