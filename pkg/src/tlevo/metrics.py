"""ROC-AUC and McNemar's test for comparing classifiers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


def _check_binary(values: Sequence, name: str) -> list[int]:
    out = []
    for v in values:
        if v not in (0, 1):
            raise ValueError(f"{name} must contain only 0/1 values, got {v!r}")
        out.append(int(v))
    return out


def mann_whitney_u(labels: Sequence[int], scores: Sequence[float]) -> Fraction:
    """U statistic of the positives, ties counted as one half.

    Computed from average ranks; kept exact by working with doubled ranks.
    """
    labels = _check_binary(labels, "labels")
    if len(labels) != len(scores):
        raise ValueError(f"labels ({len(labels)}) and scores ({len(scores)}) differ in length")
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")

    order = sorted(range(len(scores)), key=lambda i: scores[i])
    doubled_rank_sum = 0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # ranks i+1 .. j+1 share the average (i + j + 2) / 2
        tied_pos = sum(labels[order[k]] for k in range(i, j + 1))
        doubled_rank_sum += tied_pos * (i + j + 2)
        i = j + 1
    return Fraction(doubled_rank_sum - n_pos * (n_pos + 1), 2)


def auc(labels: Sequence[int], scores: Sequence[float], exact: bool = False):
    """Area under the ROC curve.

    Equals the probability that a random positive scores above a random
    negative, with ties worth one half. Pass ``exact=True`` for a Fraction.
    """
    u = mann_whitney_u(labels, scores)
    n_pos = sum(int(v) for v in labels)
    value = u / (n_pos * (len(labels) - n_pos))
    return value if exact else float(value)


@dataclass(frozen=True)
class ContingencyTable:
    """Paired outcomes of two classifiers.

    a: both correct, b: only model 1 correct, c: only model 2 correct,
    d: both wrong.
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for name in "abcd":
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


def build_contingency(truth: Sequence[int], pred1: Sequence[int], pred2: Sequence[int]) -> ContingencyTable:
    truth = _check_binary(truth, "truth")
    pred1 = _check_binary(pred1, "pred1")
    pred2 = _check_binary(pred2, "pred2")
    if not truth:
        raise ValueError("need at least one sample")
    if not len(truth) == len(pred1) == len(pred2):
        raise ValueError(f"length mismatch: truth={len(truth)}, pred1={len(pred1)}, pred2={len(pred2)}")
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    for t, p, q in zip(truth, pred1, pred2):
        counts[(p == t, q == t)] += 1
    return ContingencyTable(
        counts[(True, True)], counts[(True, False)], counts[(False, True)], counts[(False, False)]
    )


def chi2_1df_sf(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0:
        raise ValueError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    statistic: float | None
    p_value: float | None
    computable: bool

    def significant(self, alpha: float = 0.05) -> bool | None:
        """``None`` when the test cannot be computed."""
        if not self.computable:
            return None
        return self.p_value < alpha

    def to_dict(self) -> dict:
        if not self.computable:
            return {"computable": False}
        return {"computable": True, "statistic": self.statistic, "p_value": self.p_value}


def mcnemar(t: ContingencyTable) -> McNemarResult:
    """McNemar's chi-square test with continuity correction (R's default).

    Undefined when there are no discordant pairs (b + c == 0).
    """
    discordant = t.b + t.c
    if discordant == 0:
        return McNemarResult(None, None, False)
    base = max(abs(t.b - t.c) - 1, 0)
    statistic = base * base / discordant
    return McNemarResult(statistic, chi2_1df_sf(statistic), True)
