"""Generators (Q-matrices), ranges and restricted/killed chains.

A generator is a real square matrix with nonnegative off-diagonal rates and
zero row sums.  State labels are arbitrary hashables; internally everything
is mapped to contiguous indices, and all outputs report the original labels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

ROW_SUM_RTOL = 1e-12

__all__ = [
    "Generator",
    "RangeSpec",
    "RestrictedGenerator",
    "validate_generator",
    "restrict",
    "jump_rate_bound",
    "box_srw",
    "load_generator",
]


class GeneratorError(ValueError):
    """Raised when a rate matrix is not a valid conservative generator."""


@dataclass(frozen=True)
class Generator:
    """A conservative generator on a finite ordered state set.

    Use :func:`validate_generator` (or the ``from_*`` helpers) instead of
    constructing instances directly; construction does not re-validate.
    """

    states: tuple[Hashable, ...]
    rates: np.ndarray  # shape (n, n), read-only

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(
            self, "_index", {s: i for i, s in enumerate(self.states)}
        )

    @property
    def n_states(self) -> int:
        return len(self.states)

    def index(self, state: Hashable) -> int:
        try:
            return self._index[state]
        except KeyError:
            raise KeyError(f"unknown state {state!r}") from None

    def indices(self, states: Sequence[Hashable]) -> np.ndarray:
        return np.array([self.index(s) for s in states], dtype=int)

    def off_diagonal(self) -> np.ndarray:
        """The jump-rate part of the generator (diagonal zeroed)."""
        B = self.rates.copy()
        np.fill_diagonal(B, 0.0)
        return B

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def submatrix(self, states: Sequence[Hashable]) -> np.ndarray:
        idx = self.indices(states)
        return self.rates[np.ix_(idx, idx)]


@dataclass(frozen=True)
class RangeSpec:
    """A finite range with marked entry and exit states."""

    range: tuple[Hashable, ...]
    start: Hashable
    end: Hashable

    def __post_init__(self):
        object.__setattr__(self, "range", tuple(self.range))
        if not self.range:
            raise ValueError("range must be nonempty")
        if len(set(self.range)) != len(self.range):
            raise ValueError("range contains duplicate states")
        if self.start not in self.range:
            raise ValueError(f"start state {self.start!r} not in range")
        if self.end not in self.range:
            raise ValueError(f"end state {self.end!r} not in range")

    @property
    def size(self) -> int:
        return len(self.range)


@dataclass(frozen=True)
class RestrictedGenerator:
    """A chain confined to a sub-range plus the diagonal killing potential.

    ``inner`` is conservative on the sub-range; ``killing[x]`` collects the
    rates out of the sub-range.  ``inner.rates - diag(killing)`` reproduces
    the original rates on the sub-range exactly.
    """

    inner: Generator
    killing: np.ndarray

    def __post_init__(self):
        killing = np.array(self.killing, dtype=float)
        killing.setflags(write=False)
        object.__setattr__(self, "killing", killing)

    @property
    def states(self) -> tuple[Hashable, ...]:
        return self.inner.states


def validate_generator(rates, states: Sequence[Hashable] | None = None) -> Generator:
    """Validate a rate matrix and wrap it as a :class:`Generator`.

    Rejects non-square input, matrices smaller than 2x2, negative
    off-diagonal entries, and rows whose sum deviates from zero by more than
    ``1e-12`` relative to the largest magnitude in the row.
    """
    rates = np.array(rates, dtype=float)
    if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
        raise GeneratorError(f"rate matrix must be square, got shape {rates.shape}")
    n = rates.shape[0]
    if n < 2:
        raise GeneratorError("a generator needs at least 2 states")
    if not np.all(np.isfinite(rates)):
        raise GeneratorError("rate matrix contains non-finite entries")
    off = rates.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise GeneratorError(f"negative off-diagonal rate at ({i}, {j})")
    row_sums = rates.sum(axis=1)
    scale = np.maximum(np.abs(rates).max(axis=1), 1.0)
    bad = np.abs(row_sums) > ROW_SUM_RTOL * scale
    if np.any(bad):
        i = int(np.argmax(bad))
        raise GeneratorError(f"row {i} sums to {row_sums[i]:.3e}, not 0")
    # snap row sums to exactly zero so downstream identities are exact
    fixed = rates.copy()
    np.fill_diagonal(fixed, 0.0)
    np.fill_diagonal(fixed, -fixed.sum(axis=1))
    if states is None:
        states = range(n)
    states = tuple(states)
    if len(states) != n:
        raise GeneratorError("number of state labels does not match matrix size")
    return Generator(states=states, rates=fixed)


def restrict(gen: Generator, spec: RangeSpec | Sequence[Hashable]) -> RestrictedGenerator:
    """Split the generator on a sub-range into a conservative inner part and
    a diagonal killing potential.

    The inner chain follows the original rates within the sub-range and
    suppresses every step that would leave it; the killing entry at ``x`` is
    the total rate out of the sub-range from ``x``.
    """
    sub = spec.range if isinstance(spec, RangeSpec) else tuple(spec)
    missing = [s for s in sub if s not in gen._index]
    if missing:
        raise ValueError(f"range states not in generator: {missing}")
    idx = gen.indices(sub)
    inside = np.zeros(gen.n_states, dtype=bool)
    inside[idx] = True
    off = gen.off_diagonal()
    killing = off[idx][:, ~inside].sum(axis=1)
    inner = off[np.ix_(idx, idx)]
    np.fill_diagonal(inner, -inner.sum(axis=1) + np.diag(inner))
    return RestrictedGenerator(inner=Generator(states=sub, rates=inner), killing=killing)


def jump_rate_bound(gen: Generator, range_states: Sequence[Hashable]) -> float:
    """Largest absolute row or column sum of the jump rates within the
    range, floored at 1.

    This is the constant that controls the Hadamard bounds on the cofactor
    determinants in the density estimates.
    """
    sub = tuple(range_states)
    if not sub:
        raise ValueError("range must be nonempty")
    idx = gen.indices(sub)
    B = gen.off_diagonal()[np.ix_(idx, idx)]
    absB = np.abs(B)
    return float(max(absB.sum(axis=1).max(), absB.sum(axis=0).max(), 1.0))


def box_srw(dim: int, radius: int, rate: float = 1.0) -> Generator:
    """Simple random walk on the box ``[-radius, radius]^dim`` with the
    given rate to each lattice neighbor (jumps off the box are dropped, so
    boundary rows have smaller exit rates).

    States are integers for ``dim == 1`` and coordinate tuples otherwise.
    """
    if dim < 1 or radius < 0:
        raise ValueError("need dim >= 1 and radius >= 0")
    axis = range(-radius, radius + 1)
    if dim == 1:
        sites = [(x,) for x in axis]
        labels = [x for x in axis]
    else:
        sites = list(itertools.product(axis, repeat=dim))
        labels = sites
    pos = {s: i for i, s in enumerate(sites)}
    n = len(sites)
    A = np.zeros((n, n))
    for s, i in pos.items():
        for d in range(dim):
            for step in (-1, 1):
                t = list(s)
                t[d] += step
                j = pos.get(tuple(t))
                if j is not None:
                    A[i, j] = rate
    np.fill_diagonal(A, -A.sum(axis=1))
    return validate_generator(A, states=labels)


def load_generator(path, states: Sequence[Hashable] | None = None) -> Generator:
    """Load a generator from a plain text file of whitespace-separated rows."""
    rates = np.loadtxt(path, dtype=float, ndmin=2)
    return validate_generator(rates, states=states)
