"""Chromosome genotype, gene domains and the mapping to a DenseNet-121 plan.

A chromosome has four genes: how many dense-block layers are kept, how many
of those are frozen from the input side, the learning rate and the dropout.
The two real-valued genes are stored as indices into their menus so that
equality and cache keys never depend on float formatting.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Iterator, Sequence

# Dense layers per block in DenseNet-121.
DENSENET121_BLOCKS: tuple[int, ...] = (6, 12, 24, 16)

DEFAULT_LEARNING_RATES: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001, 0.00001, 0.000001)
DEFAULT_DROPOUTS: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def _is_strictly_ordered(menu: Sequence[float]) -> bool:
    pairs = list(zip(menu, menu[1:]))
    return all(a < b for a, b in pairs) or all(a > b for a, b in pairs)


@dataclass(frozen=True)
class GeneDomains:
    """Legal values for each gene. Ranges are inclusive."""

    included_layers_range: tuple[int, int] = (1, sum(DENSENET121_BLOCKS))
    frozen_layers_range: tuple[int, int] = (0, DENSENET121_BLOCKS[0] + DENSENET121_BLOCKS[1])
    learning_rate_menu: tuple[float, ...] = DEFAULT_LEARNING_RATES
    dropout_menu: tuple[float, ...] = DEFAULT_DROPOUTS

    def __post_init__(self):
        # Normalise lists coming from JSON into tuples so the value stays hashable.
        for name in ("included_layers_range", "frozen_layers_range", "learning_rate_menu", "dropout_menu"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        inc_lo, inc_hi = self.included_layers_range
        frz_lo, frz_hi = self.frozen_layers_range
        if inc_lo < 1:
            raise ValueError(f"included_layers_range lower bound must be >= 1, got {inc_lo}")
        if inc_hi < inc_lo:
            raise ValueError(f"included_layers_range is empty: {self.included_layers_range}")
        if inc_hi > sum(DENSENET121_BLOCKS):
            raise ValueError(
                f"included_layers_range upper bound must be <= {sum(DENSENET121_BLOCKS)}, got {inc_hi}"
            )
        if frz_lo < 0:
            raise ValueError(f"frozen_layers_range lower bound must be >= 0, got {frz_lo}")
        if frz_hi < frz_lo:
            raise ValueError(f"frozen_layers_range is empty: {self.frozen_layers_range}")
        if frz_hi > inc_hi:
            raise ValueError("frozen_layers_range upper bound must not exceed included_layers_range upper bound")
        if frz_lo > inc_lo:
            # Otherwise a chromosome with few included layers has no legal frozen value.
            raise ValueError("frozen_layers_range lower bound must not exceed included_layers_range lower bound")
        for name in ("learning_rate_menu", "dropout_menu"):
            menu = getattr(self, name)
            if not menu:
                raise ValueError(f"{name} must not be empty")
            if len(set(menu)) != len(menu) or not _is_strictly_ordered(menu):
                raise ValueError(f"{name} must be strictly ordered and duplicate-free")
        if any(lr <= 0 for lr in self.learning_rate_menu):
            raise ValueError("learning_rate_menu entries must be positive")
        if any(not 0 < p < 1 for p in self.dropout_menu):
            raise ValueError("dropout_menu entries must lie in (0, 1)")

    @property
    def size(self) -> int:
        """Number of points in the gene space, counting infeasible frozen > included ones."""
        inc_lo, inc_hi = self.included_layers_range
        frz_lo, frz_hi = self.frozen_layers_range
        return (
            (inc_hi - inc_lo + 1)
            * (frz_hi - frz_lo + 1)
            * len(self.learning_rate_menu)
            * len(self.dropout_menu)
        )

    def learning_rate_index(self, value: float) -> int:
        return _menu_index(self.learning_rate_menu, value, "learning_rate")

    def dropout_index(self, value: float) -> int:
        return _menu_index(self.dropout_menu, value, "dropout")

    def to_dict(self) -> dict:
        return {
            "included_layers_range": list(self.included_layers_range),
            "frozen_layers_range": list(self.frozen_layers_range),
            "learning_rate_menu": list(self.learning_rate_menu),
            "dropout_menu": list(self.dropout_menu),
        }


DEFAULT_DOMAINS = GeneDomains()


def _menu_index(menu: Sequence[float], value: float, name: str) -> int:
    for i, item in enumerate(menu):
        if math.isclose(item, value, rel_tol=1e-9, abs_tol=0.0):
            return i
    raise ValueError(f"{name}={value!r} is not in menu {list(menu)}")


@dataclass(frozen=True)
class Chromosome:
    """One point in the search space.

    Build from gene values with :meth:`from_values`; the constructor takes menu
    indices for the learning rate and dropout.
    """

    included_layers: int
    frozen_layers: int
    learning_rate_index: int
    dropout_index: int
    domains: GeneDomains = field(default=DEFAULT_DOMAINS, repr=False)

    def __post_init__(self):
        d = self.domains
        inc_lo, inc_hi = d.included_layers_range
        frz_lo, frz_hi = d.frozen_layers_range
        if not inc_lo <= self.included_layers <= inc_hi:
            raise ValueError(
                f"included_layers={self.included_layers} outside [{inc_lo}, {inc_hi}]"
            )
        if not frz_lo <= self.frozen_layers <= frz_hi:
            raise ValueError(f"frozen_layers={self.frozen_layers} outside [{frz_lo}, {frz_hi}]")
        if self.frozen_layers > self.included_layers:
            raise ValueError(
                f"frozen_layers={self.frozen_layers} exceeds included_layers={self.included_layers}"
            )
        if not 0 <= self.learning_rate_index < len(d.learning_rate_menu):
            raise ValueError(f"learning_rate_index={self.learning_rate_index} out of menu range")
        if not 0 <= self.dropout_index < len(d.dropout_menu):
            raise ValueError(f"dropout_index={self.dropout_index} out of menu range")

    @classmethod
    def from_values(
        cls,
        included_layers: int,
        frozen_layers: int,
        learning_rate: float,
        dropout: float,
        domains: GeneDomains = DEFAULT_DOMAINS,
    ) -> "Chromosome":
        return cls(
            int(included_layers),
            int(frozen_layers),
            domains.learning_rate_index(learning_rate),
            domains.dropout_index(dropout),
            domains,
        )

    @property
    def learning_rate(self) -> float:
        return self.domains.learning_rate_menu[self.learning_rate_index]

    @property
    def dropout(self) -> float:
        return self.domains.dropout_menu[self.dropout_index]

    @property
    def values(self) -> tuple[int, int, float, float]:
        return (self.included_layers, self.frozen_layers, self.learning_rate, self.dropout)

    def to_dict(self) -> dict:
        return {
            "included_layers": self.included_layers,
            "frozen_layers": self.frozen_layers,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
        }

    def __repr__(self):
        return "Chromosome(included_layers={}, frozen_layers={}, learning_rate={!r}, dropout={!r})".format(
            *self.values
        )


def sample_chromosome(domains: GeneDomains, rng: random.Random) -> Chromosome:
    """Draw one chromosome uniformly, gene by gene.

    Draw order is included, frozen, learning rate, dropout. The frozen gene is
    drawn from the feasible part of its range, ``[lo, min(hi, included)]``.
    """
    inc_lo, inc_hi = domains.included_layers_range
    frz_lo, frz_hi = domains.frozen_layers_range
    included = rng.randint(inc_lo, inc_hi)
    frozen = rng.randint(frz_lo, min(frz_hi, included))
    lr_index = rng.randrange(len(domains.learning_rate_menu))
    dropout_index = rng.randrange(len(domains.dropout_menu))
    return Chromosome(included, frozen, lr_index, dropout_index, domains)


def canonical_key(c: Chromosome) -> tuple[int, int, int, int]:
    """Cache key: integer genes plus menu indices."""
    return (c.included_layers, c.frozen_layers, c.learning_rate_index, c.dropout_index)


def gene_key(
    included_layers: int,
    frozen_layers: int,
    learning_rate: float,
    dropout: float,
    domains: GeneDomains = DEFAULT_DOMAINS,
) -> tuple[int, int, int, int]:
    """Key for raw gene values, without the frozen <= included check.

    Agrees with :func:`canonical_key` on every valid chromosome.
    """
    return (
        int(included_layers),
        int(frozen_layers),
        domains.learning_rate_index(learning_rate),
        domains.dropout_index(dropout),
    )


def enumerate_chromosomes(domains: GeneDomains = DEFAULT_DOMAINS) -> Iterator[Chromosome]:
    """Yield every valid chromosome (frozen <= included) in key order."""
    inc_lo, inc_hi = domains.included_layers_range
    frz_lo, frz_hi = domains.frozen_layers_range
    for inc, frz, lr, dp in itertools.product(
        range(inc_lo, inc_hi + 1),
        range(frz_lo, frz_hi + 1),
        range(len(domains.learning_rate_menu)),
        range(len(domains.dropout_menu)),
    ):
        if frz <= inc:
            yield Chromosome(inc, frz, lr, dp, domains)


@dataclass(frozen=True)
class ArchitecturePlan:
    """Concrete transfer-learning layout handed to a trainer.

    ``block_layer_counts`` lists the dense layers kept in each retained block;
    blocks after the last kept layer are dropped together with their
    transition and SE layers.
    """

    block_layer_counts: tuple[int, ...]
    frozen_prefix: int
    se_layer_count: int
    learning_rate: float
    dropout: float

    @property
    def included_layers(self) -> int:
        return sum(self.block_layer_counts)

    def to_dict(self) -> dict:
        return {
            "block_layer_counts": list(self.block_layer_counts),
            "frozen_prefix": self.frozen_prefix,
            "se_layer_count": self.se_layer_count,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitecturePlan":
        return cls(
            tuple(int(n) for n in data["block_layer_counts"]),
            int(data["frozen_prefix"]),
            int(data["se_layer_count"]),
            float(data["learning_rate"]),
            float(data["dropout"]),
        )


def fill_blocks(included_layers: int, blocks: Sequence[int] = DENSENET121_BLOCKS) -> tuple[int, ...]:
    """Greedy prefix fill: each block is full before the next gets a layer."""
    if not 1 <= included_layers <= sum(blocks):
        raise ValueError(f"included_layers={included_layers} outside [1, {sum(blocks)}]")
    counts = []
    remaining = included_layers
    for capacity in blocks:
        if remaining == 0:
            break
        take = min(capacity, remaining)
        counts.append(take)
        remaining -= take
    return tuple(counts)


def map_to_architecture(c: Chromosome) -> ArchitecturePlan:
    counts = fill_blocks(c.included_layers)
    # A transition (and its SE layer) survives only if the next block keeps a layer.
    se_layers = len(counts) - 1
    return ArchitecturePlan(counts, c.frozen_layers, se_layers, c.learning_rate, c.dropout)


def plan_to_chromosome(plan: ArchitecturePlan, domains: GeneDomains = DEFAULT_DOMAINS) -> Chromosome:
    """Inverse of :func:`map_to_architecture` for a given set of domains."""
    return Chromosome.from_values(
        plan.included_layers, plan.frozen_prefix, plan.learning_rate, plan.dropout, domains
    )
