"""Level-stacked self-interacting chain simulator.

One run maintains a chain per level.  Each sweep advances every level by
one state, in ascending level order: level 0 moves with its homogeneous
kernel, and level ``k >= 1`` draws its next state from the kernel indexed
by the occupation measure of the states ``0 .. n`` of level ``k-1`` (the
state level ``k-1`` produced earlier in the same sweep is excluded; all
levels of sweep ``n -> n+1`` read the time-``n`` snapshot).  Running the
levels to completion one at a time would produce the same law; the sweep
is the online realization of that construction.

Randomness contract
-------------------
All randomness comes from counter-based Philox streams keyed by
``(seed, replicate, level)`` through ``numpy``'s ``SeedSequence`` spawn
keys.  Each stream is consumed in a fixed positional layout -- one
uniform for the initial state, then exactly ``3`` uniforms per sweep --
so a trajectory is bit-for-bit reproducible whether a replicate runs
alone, in a vectorized batch, or under any worker schedule, and distinct
``(replicate, level)`` pairs are independent.

Batches of replicates execute in lockstep: states are arrays indexed by
replicate and every sweep is a handful of vectorized operations.  Full
per-level histories are retained (the level-``k`` proposal resamples the
whole past of level ``k-1``); occupation counts are maintained
incrementally, and weighted redraws aggregate the counts by state, which
induces exactly the same transition law as walking the history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import annealing as ann
from . import fk
from .measures import (
    PROBABILITY,
    FiniteSpace,
    Measure,
    TestFunction,
)

#: Uniform draws consumed per level per sweep (fixed for stream stability).
DRAWS_PER_STEP = 3

#: Cap on the geometric step count when sampling a geometrically averaged kernel.
GEOMETRIC_STEP_CAP = 10_000


def stream(seed: int, replicate: int, level: int) -> np.random.Generator:
    """Philox stream for one (seed, replicate, level) triple."""
    key = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(replicate), int(level))
    )
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True, eq=False)
class EngineConfig:
    """A model, how many levels to stack, and how long to run.

    ``initial_dists`` supplies the level starting distributions
    (uniform on each level space when omitted).
    """

    model: object
    levels: int
    iterations: int
    seed: int
    initial_dists: tuple[Measure, ...] | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not isinstance(self.model, (fk.FKModel, ann.AnnealingModel)):
            raise TypeError(f"unsupported model type {type(self.model).__name__}")
        if self.initial_dists is not None:
            object.__setattr__(self, "initial_dists", tuple(self.initial_dists))
        if not 0 <= self.levels <= self.model.levels:
            raise ValueError(
                f"levels must lie in 0..{self.model.levels}, got {self.levels}"
            )
        spaces = self.level_spaces()
        if self.initial_dists is not None:
            if len(self.initial_dists) != self.levels + 1:
                raise ValueError(
                    f"expected {self.levels + 1} initial distributions, "
                    f"got {len(self.initial_dists)}"
                )
            for k, nu in enumerate(self.initial_dists):
                if nu.kind != PROBABILITY or nu.space != spaces[k]:
                    raise ValueError(
                        f"initial distribution {k} must be a probability on the "
                        f"level-{k} space"
                    )

    def level_spaces(self) -> tuple[FiniteSpace, ...]:
        if isinstance(self.model, fk.FKModel):
            return tuple(fk.path_space(self.model, k).space for k in range(self.levels + 1))
        return tuple(self.model.space for _ in range(self.levels + 1))


@dataclass(frozen=True, eq=False)
class ChainHistory:
    """One replicate's trajectories, with final occupation counts."""

    config: "EngineConfig"
    replicate: int
    spaces: tuple[FiniteSpace, ...]
    states: tuple[np.ndarray, ...]
    counts: tuple[np.ndarray, ...]

    @property
    def levels(self) -> int:
        return len(self.states) - 1

    @property
    def iterations(self) -> int:
        return self.config.iterations


@dataclass(frozen=True, eq=False)
class BatchResult:
    """Lockstep run of several replicates.

    ``states[k][i]`` is the level-`k` trajectory of ``replicates[i]``;
    ``checkpoint_counts[n][k]`` holds occupation counts of states
    ``0..n`` per replicate, for each requested checkpoint ``n``.
    """

    config: "EngineConfig"
    replicates: tuple[int, ...]
    spaces: tuple[FiniteSpace, ...]
    states: tuple[np.ndarray, ...] | None
    final_counts: tuple[np.ndarray, ...]
    checkpoint_counts: dict[int, tuple[np.ndarray, ...]] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return self.config.iterations

    def history(self, i: int) -> ChainHistory:
        if self.states is None:
            raise ValueError("histories were not retained for this batch")
        return ChainHistory(
            config=self.config,
            replicate=self.replicates[i],
            spaces=self.spaces,
            states=tuple(s[i].copy() for s in self.states),
            counts=tuple(c[i].copy() for c in self.final_counts),
        )


# ---------------------------------------------------------------------------
# Model tables (precomputed rows, CDFs, and index arithmetic)
# ---------------------------------------------------------------------------

def _row_cdf(matrix: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(matrix, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _cdf_draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


class _Tables:
    """Everything a sweep needs, laid out per level."""

    def __init__(self, config: EngineConfig):
        model = config.model
        self.levels = config.levels
        self.spaces = config.level_spaces()
        self.sizes = [sp.size for sp in self.spaces]
        self.is_fk = isinstance(model, fk.FKModel)
        dists = config.initial_dists
        self.init_cdfs = []
        for k in range(self.levels + 1):
            w = (
                dists[k].weights
                if dists is not None
                else np.full(self.sizes[k], 1.0 / self.sizes[k])
            )
            cdf = np.cumsum(w)
            cdf[-1] = 1.0
            self.init_cdfs.append(cdf)
        self.m0_cdf = _row_cdf(model.level0_kernel.matrix)
        if self.is_fk:
            self.kernel_type = model.kernel_type
            self.base_sizes = [sp.size for sp in model.base_spaces[: self.levels + 1]]
            self.step_cdfs = [None] + [
                _row_cdf(model.transitions[k - 1].matrix) for k in range(1, self.levels + 1)
            ]
            self.potentials = [model.potentials[k].values for k in range(self.levels)]
            # potential of a full level-k path state (terminal coordinate)
            self.state_weights = [
                self.potentials[k][np.arange(self.sizes[k]) % self.base_sizes[k]]
                for k in range(self.levels)
            ]
        else:
            self.epsilon = model.epsilon
            self.k_cdfs = [None] + [
                _row_cdf(model.kernels_k[k].matrix) for k in range(1, self.levels + 1)
            ]
            self.l_cdfs = [None] + [
                _row_cdf(model.kernels_l[k].matrix) for k in range(1, self.levels + 1)
            ]
            self.state_weights = [
                ann.potential_fn(model, k).values for k in range(self.levels)
            ]

    # --- level transitions, vectorized over a batch ---------------------

    def step_level0(self, cur: np.ndarray, u: np.ndarray) -> np.ndarray:
        return _cdf_draw(self.m0_cdf[cur], u[:, 0])

    def step_fk_mh(self, k: int, cur: np.ndarray, drawn_paths: np.ndarray,
                   u: np.ndarray) -> np.ndarray:
        """Proposal = drawn level-(k-1) path extended by one base move."""
        s_new = self.base_sizes[k]
        s_prev = self.base_sizes[k - 1]
        yterm = drawn_paths % s_prev
        ynew = _cdf_draw(self.step_cdfs[k][yterm], u[:, 1])
        proposal = drawn_paths * s_new + ynew
        cur_pref_term = (cur // s_new) % s_prev
        g = self.potentials[k - 1]
        ratio = g[yterm] / g[cur_pref_term]
        return np.where(u[:, 2] < ratio, proposal, cur)

    def step_fk_rank_one(self, k: int, counts_prev: np.ndarray,
                         u: np.ndarray) -> np.ndarray:
        """Redraw from the reweighted occupation measure, then extend."""
        s_new = self.base_sizes[k]
        s_prev = self.base_sizes[k - 1]
        w = counts_prev * self.state_weights[k - 1][None, :]
        cw = np.cumsum(w, axis=1)
        target = u[:, 0] * cw[:, -1]
        drawn = np.minimum((cw < target[:, None]).sum(axis=1), cw.shape[1] - 1)
        ynew = _cdf_draw(self.step_cdfs[k][drawn % s_prev], u[:, 1])
        return drawn * s_new + ynew

    def step_annealing(self, k: int, cur: np.ndarray, counts_prev: np.ndarray,
                       u: np.ndarray) -> np.ndarray:
        """One kernel move with weight eps, else reweighted redraw + move."""
        yk = _cdf_draw(self.k_cdfs[k][cur], u[:, 1])
        w = counts_prev * self.state_weights[k - 1][None, :]
        cw = np.cumsum(w, axis=1)
        target = u[:, 1] * cw[:, -1]
        drawn = np.minimum((cw < target[:, None]).sum(axis=1), cw.shape[1] - 1)
        yl = _cdf_draw(self.l_cdfs[k][drawn], u[:, 2])
        return np.where(u[:, 0] < self.epsilon, yk, yl)


def run_batch(
    config: EngineConfig,
    replicates,
    *,
    checkpoints=(),
    keep_history: bool = True,
    block: int = 2048,
) -> BatchResult:
    """Run the given replicate ids in lockstep.

    `checkpoints` is an iterable of iteration indices ``n`` at which the
    per-level occupation counts of states ``0..n`` are snapshotted.
    """
    replicates = tuple(int(r) for r in replicates)
    checkpoints = sorted(set(int(n) for n in checkpoints))
    if checkpoints and checkpoints[-1] > config.iterations:
        raise ValueError(
            f"checkpoint {checkpoints[-1]} exceeds iterations {config.iterations}"
        )
    tables = _Tables(config)
    B = len(replicates)
    n_max = config.iterations
    L = config.levels
    gens = [
        [stream(config.seed, r, k) for k in range(L + 1)] for r in replicates
    ]

    hist = [np.zeros((B, n_max + 1), dtype=np.int32) for _ in range(L + 1)]
    counts = [np.zeros((B, tables.sizes[k]), dtype=np.int64) for k in range(L + 1)]
    rows = np.arange(B)

    for k in range(L + 1):
        u0 = np.array([gens[i][k].random() for i in range(B)])
        x0 = np.minimum((tables.init_cdfs[k] < u0[:, None]).sum(axis=1), tables.sizes[k] - 1)
        hist[k][:, 0] = x0
        np.add.at(counts[k], (rows, x0), 1)

    snapshots: dict[int, tuple[np.ndarray, ...]] = {}
    if 0 in checkpoints:
        snapshots[0] = tuple(c.copy() for c in counts)

    t0 = 0
    while t0 < n_max:
        blen = min(block, n_max - t0)
        uni = [
            np.stack([gens[i][k].random((blen, DRAWS_PER_STEP)) for i in range(B)])
            for k in range(L + 1)
        ]
        for t in range(blen):
            n = t0 + t
            new_states = []
            for k in range(L + 1):
                u = uni[k][:, t, :]
                cur = hist[k][:, n]
                if k == 0:
                    nxt = tables.step_level0(cur, u)
                elif tables.is_fk and tables.kernel_type == "mh":
                    p = np.minimum((u[:, 0] * (n + 1)).astype(np.int64), n)
                    drawn = hist[k - 1][rows, p]
                    nxt = tables.step_fk_mh(k, cur, drawn, u)
                elif tables.is_fk:
                    nxt = tables.step_fk_rank_one(k, counts[k - 1], u)
                else:
                    nxt = tables.step_annealing(k, cur, counts[k - 1], u)
                new_states.append(nxt)
            for k in range(L + 1):
                hist[k][:, n + 1] = new_states[k]
                np.add.at(counts[k], (rows, new_states[k]), 1)
            if n + 1 in checkpoints:
                snapshots[n + 1] = tuple(c.copy() for c in counts)
        t0 += blen

    return BatchResult(
        config=config,
        replicates=replicates,
        spaces=tables.spaces,
        states=tuple(hist) if keep_history else None,
        final_counts=tuple(counts),
        checkpoint_counts=snapshots,
    )


def run(config: EngineConfig, replicate: int = 0) -> ChainHistory:
    """Run a single replicate (same stream layout as batched runs)."""
    return run_batch(config, [replicate]).history(0)


# ---------------------------------------------------------------------------
# Single-transition sampling against frozen histories
# ---------------------------------------------------------------------------

def transition_samples(
    config: EngineConfig,
    level: int,
    history_states: np.ndarray,
    current: int,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Draw `size` next states for one level given a frozen lower history.

    Exercises exactly the per-level transition rules of :func:`run_batch`,
    so the empirical law can be tested against the oracle kernel row for
    the occupation measure of `history_states`.
    """
    tables = _Tables(config)
    if not 1 <= level <= config.levels:
        raise ValueError(f"level must lie in 1..{config.levels}")
    history_states = np.asarray(history_states, dtype=np.int64)
    if history_states.size == 0:
        raise ValueError("history must contain at least one state")
    u = rng.random((size, DRAWS_PER_STEP))
    cur = np.full(size, int(current), dtype=np.int64)
    if tables.is_fk and tables.kernel_type == "mh":
        p = np.minimum((u[:, 0] * history_states.size).astype(np.int64),
                       history_states.size - 1)
        return tables.step_fk_mh(level, cur, history_states[p], u)
    # counts broadcast over the batch axis: the history is shared
    counts = np.bincount(history_states, minlength=tables.sizes[level - 1])[None, :]
    if tables.is_fk:
        return tables.step_fk_rank_one(level, counts, u)
    return tables.step_annealing(level, cur, counts, u)


def step_mh(history: ChainHistory, level: int, rng: np.random.Generator) -> int:
    """One Metropolis-Hastings move at `level` given the recorded history."""
    if not isinstance(history.config.model, fk.FKModel):
        raise TypeError("step_mh requires a Feynman-Kac model")
    return int(
        transition_samples(
            history.config, level, history.states[level - 1],
            int(history.states[level][-1]), rng, 1,
        )[0]
    )


def step_annealing(history: ChainHistory, level: int, rng: np.random.Generator) -> int:
    """One mixture-kernel move at `level` given the recorded history."""
    if not isinstance(history.config.model, ann.AnnealingModel):
        raise TypeError("step_annealing requires an annealing model")
    return int(
        transition_samples(
            history.config, level, history.states[level - 1],
            int(history.states[level][-1]), rng, 1,
        )[0]
    )


def sample_geometric_kernel(
    model: ann.AnnealingModel, level: int, state: int, rng: np.random.Generator
) -> int:
    """Sample the geometrically averaged kernel without materializing it.

    Performs ``N`` base-kernel moves with ``N`` geometric of success
    probability ``1 - eps``; capped (with an error) at a step count whose
    overshoot probability is negligible for any eps < 1 in practice.
    """
    eps = model.epsilon
    steps = 0
    cdf = None
    while rng.random() < eps:
        steps += 1
        if steps > GEOMETRIC_STEP_CAP:
            raise RuntimeError(f"geometric step count exceeded {GEOMETRIC_STEP_CAP}")
        if cdf is None:
            cdf = _row_cdf(model.kernels_k[level].matrix)
        state = min(int((cdf[state] < rng.random()).sum()), model.space.size - 1)
    return state


# ---------------------------------------------------------------------------
# Occupation measures and fluctuation fields
# ---------------------------------------------------------------------------

def occupation(history: ChainHistory, k: int, n: int) -> Measure:
    """Occupation measure of level `k` over states ``0..n``."""
    if not 0 <= k <= history.levels:
        raise ValueError(f"level {k} out of range 0..{history.levels}")
    if not 0 <= n <= history.iterations:
        raise ValueError(f"iteration {n} out of range 0..{history.iterations}")
    counts = np.bincount(history.states[k][: n + 1], minlength=history.spaces[k].size)
    return Measure(history.spaces[k], counts / (n + 1), kind=PROBABILITY)


def fluctuation_field(
    history: ChainHistory, k: int, n: int, f: TestFunction, pi_k: Measure
) -> float:
    """``sqrt(n+1) * (eta_n^(k)(f) - pi_k(f))``."""
    eta = occupation(history, k, n)
    if f.space != eta.space or pi_k.space != eta.space:
        raise ValueError("function and limit measure must live on the level space")
    return math.sqrt(n + 1) * float((eta.weights - pi_k.weights) @ f.values)


def export_trajectories_csv(result: BatchResult, fh) -> None:
    """Write trajectories as ``replicate,level,iteration,state_index`` rows."""
    if result.states is None:
        raise ValueError("histories were not retained for this batch")
    fh.write("replicate,level,iteration,state_index\n")
    for i, r in enumerate(result.replicates):
        for k, arr in enumerate(result.states):
            col = arr[i]
            for n in range(col.size):
                fh.write(f"{r},{k},{n},{col[n]}\n")
