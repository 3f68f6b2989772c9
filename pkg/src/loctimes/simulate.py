"""Exact event-driven simulation of the chain and Monte Carlo estimation.

Paths are simulated by the jump-chain construction: exponential holding at
the current state's exit rate, then a categorical jump.  The Monte Carlo
driver runs fixed-size chunks of paths in lockstep with per-chunk
counter-based random streams, so estimates are bit-identical for a fixed
seed no matter how the chunks are scheduled across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

from .chain import Generator, RangeSpec

CHUNK_SIZE = 65536

__all__ = [
    "PathRecord",
    "McEstimate",
    "sample_path",
    "sample_until_inverse_local_time",
    "mc_event_functional",
    "dump_path_line",
]


class SimulationError(RuntimeError):
    """Raised when a simulation hits its event cap."""


@dataclass
class PathRecord:
    """One simulated trajectory up to the horizon.

    The last holding interval is truncated at the horizon, so the local
    times always sum to the horizon exactly.
    """

    jump_times: np.ndarray
    states: list
    terminal_state: Hashable
    local_times: dict
    horizon: float


@dataclass
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    seed: int
    n_accepted: int = 0
    zero_accepted: bool = False


def sample_path(gen: Generator, start: Hashable, T: float, rng: np.random.Generator) -> PathRecord:
    """Simulate one path of the chain on [0, T] from ``start``.

    Absorbing states (zero exit rate) hold until the horizon.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    exit_rates = gen.exit_rates()
    off = gen.off_diagonal()
    i = gen.index(start)
    t = 0.0
    jump_times = []
    states = [start]
    local = {}
    while True:
        rate = exit_rates[i]
        hold = rng.exponential(1.0 / rate) if rate > 0 else np.inf
        state = gen.states[i]
        if t + hold >= T:
            local[state] = local.get(state, 0.0) + (T - t)
            break
        local[state] = local.get(state, 0.0) + hold
        t += hold
        jump_times.append(t)
        p = off[i] / rate
        i = rng.choice(len(p), p=p)
        states.append(gen.states[i])
    return PathRecord(
        jump_times=np.array(jump_times),
        states=states,
        terminal_state=gen.states[i],
        local_times=local,
        horizon=T,
    )


def sample_until_inverse_local_time(
    gen: Generator,
    start: Hashable,
    b: Hashable,
    h: float,
    rng: np.random.Generator,
    max_events: int = 10_000_000,
) -> PathRecord:
    """Simulate until the accumulated local time at ``b`` reaches ``h``.

    The stop is resolved analytically inside the holding interval at b, so
    the recorded local time at b equals h exactly.
    """
    if h <= 0:
        raise ValueError("level must be positive")
    exit_rates = gen.exit_rates()
    off = gen.off_diagonal()
    i = gen.index(start)
    ib = gen.index(b)
    t = 0.0
    at_b = 0.0
    jump_times = []
    states = [start]
    local = {}
    for _ in range(max_events):
        rate = exit_rates[i]
        hold = rng.exponential(1.0 / rate) if rate > 0 else np.inf
        state = gen.states[i]
        if i == ib and at_b + hold >= h:
            residual = h - at_b
            local[state] = local.get(state, 0.0) + residual
            t += residual
            return PathRecord(
                jump_times=np.array(jump_times),
                states=states,
                terminal_state=state,
                local_times=local,
                horizon=t,
            )
        if i == ib:
            at_b += hold
        local[state] = local.get(state, 0.0) + hold
        t += hold
        if rate == 0:
            raise SimulationError(f"absorbed at {state!r} before reaching level")
        jump_times.append(t)
        p = off[i] / rate
        i = rng.choice(len(p), p=p)
        states.append(gen.states[i])
    raise SimulationError(f"event cap {max_events} reached before local time {h} at {b!r}")


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, chunk_index]))


def _run_chunk(gen_arrays, start_idx, T, n, rng):
    """Lockstep simulation of n paths; returns local times (n, n_states),
    terminal state indices, and visit masks."""
    exit_rates, cum_jump = gen_arrays
    n_states = len(exit_rates)
    state = np.full(n, start_idx, dtype=np.int64)
    remaining = np.full(n, T)
    local = np.zeros((n, n_states))
    visited = np.zeros((n, n_states), dtype=bool)
    visited[:, start_idx] = True
    active = np.arange(n)
    while len(active):
        s = state[active]
        rate = exit_rates[s]
        hold = np.where(
            rate > 0, rng.exponential(1.0, size=len(active)) / np.maximum(rate, 1e-300), np.inf
        )
        stop = hold >= remaining[active]
        dt = np.where(stop, remaining[active], hold)
        np.add.at(local, (active, s), dt)
        remaining[active] -= dt
        moving = active[~stop]
        if len(moving):
            u = rng.random(len(active))[~stop]
            nxt = (u[:, None] >= cum_jump[state[moving]]).sum(axis=1)
            state[moving] = nxt
            visited[moving, nxt] = True
        active = moving
    return local, state, visited


def mc_event_functional(
    gen: Generator,
    spec: RangeSpec,
    T: float,
    F: Callable[[np.ndarray], np.ndarray],
    n_paths: int,
    seed: int,
    workers: int = 1,
) -> McEstimate:
    """Monte Carlo estimate of E_start[F(local times) on {end at spec.end,
    range exactly spec.range}].

    ``F`` receives a 2-D array of accepted local-time vectors (columns
    ordered by spec.range) and returns one value per row.  Paths outside
    the event contribute 0.  The chunked per-stream design makes the
    result independent of the worker count.
    """
    exit_rates = gen.exit_rates()
    off = gen.off_diagonal()
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = off / exit_rates[:, None]
    jump[exit_rates == 0] = 0.0
    cum_jump = np.cumsum(jump, axis=1)
    # guard the last column against rounding so searchsorted-style indexing
    # never falls off the end
    cum_jump[exit_rates > 0, -1] = 1.0
    gen_arrays = (exit_rates, cum_jump)
    start_idx = gen.index(spec.start)
    end_idx = gen.index(spec.end)
    range_idx = gen.indices(spec.range)
    range_mask = np.zeros(gen.n_states, dtype=bool)
    range_mask[range_idx] = True

    n_chunks = (n_paths + CHUNK_SIZE - 1) // CHUNK_SIZE

    def one_chunk(c):
        n = min(CHUNK_SIZE, n_paths - c * CHUNK_SIZE)
        rng = _chunk_rng(seed, c)
        local, state, visited = _run_chunk(gen_arrays, start_idx, T, n, rng)
        ok = (state == end_idx) & np.all(visited == range_mask[None, :], axis=1)
        if not np.any(ok):
            return 0.0, 0.0, 0
        vals = np.asarray(F(local[np.ix_(ok.nonzero()[0], range_idx)]), dtype=float)
        return float(vals.sum()), float((vals ** 2).sum()), int(ok.sum())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one_chunk, range(n_chunks)))
    else:
        parts = [one_chunk(c) for c in range(n_chunks)]
    total = np.sum([p[0] for p in parts])
    total_sq = np.sum([p[1] for p in parts])
    n_acc = int(np.sum([p[2] for p in parts]))
    mean = total / n_paths
    var = max(total_sq / n_paths - mean ** 2, 0.0)
    se = float(np.sqrt(var / max(n_paths - 1, 1)))
    return McEstimate(
        mean=float(mean),
        std_error=se,
        n_paths=n_paths,
        seed=seed,
        n_accepted=n_acc,
        zero_accepted=(n_acc == 0),
    )


def dump_path_line(record: PathRecord, seed: int) -> str:
    """Serialize one path as a single text line for external analysis."""
    jumps = " ".join(f"{t:.12g}" for t in record.jump_times)
    states = " ".join(str(s) for s in record.states)
    local = " ".join(f"{s}:{v:.12g}" for s, v in sorted(record.local_times.items(), key=str))
    return f"seed={seed}\tjumps={jumps}\tstates={states}\tlocal={local}"
