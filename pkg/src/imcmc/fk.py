"""Feynman-Kac models on growing path spaces.

A model is a base Markov chain ``X'_0, X'_1, ...`` on per-level spaces
``S'_0, ..., S'_L`` together with potential functions ``G'_l`` taking
values in ``(0, 1]``.  Level ``l`` of the stack lives on the path space
``S'_0 x ... x S'_l``; its limiting law weights each path by the product
of the potentials evaluated along the way:

    pi_l(x'_0, ..., x'_l)  propto  init(x'_0) * prod_k L'_k(x'_{k-1}, x'_k)
                                   * prod_{k<l} G'_k(x'_k)

The level-to-level map extends a path law by one coordinate after
reweighting by the terminal potential; its fixed points are exactly the
``pi_l`` above.  The sampling kernel for level ``l`` is an independence
Metropolis-Hastings move whose proposal draws a whole level-(l-1) path
from a supplied measure and appends one base transition.

Path potentials depend on the terminal coordinate only; that keeps every
operator here in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import (
    PROBABILITY,
    FiniteSpace,
    IntegralOperator,
    Measure,
    TestFunction,
    integrate,
)

#: Invariance tolerance used when validating user-supplied kernels.
KERNEL_INVARIANCE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FKModel:
    """Base chain, potentials, and optional level-0 kernel.

    Parameters
    ----------
    base_spaces : tuple of FiniteSpace
        The per-coordinate spaces ``S'_0 ... S'_L``; the model has
        ``L = len(base_spaces) - 1`` levels.
    initial : Measure
        Probability measure on ``S'_0`` (the level-0 limit law).
    transitions : tuple of IntegralOperator
        ``transitions[l-1]`` is the markov kernel ``L'_l`` from
        ``S'_{l-1}`` into ``S'_l``, for ``l = 1 .. L``.
    potentials : tuple of TestFunction
        ``potentials[l]`` is ``G'_l`` on ``S'_l`` with values in
        ``(0, 1]``, for ``l = 0 .. L-1``.
    level0_kernel : IntegralOperator, optional
        Markov kernel on ``S'_0`` with invariant measure `initial`;
        defaults to the constant redraw from `initial`.
    kernel_type : str
        ``"mh"`` for the Metropolis-Hastings level kernels, or
        ``"rank_one"`` for exact redraws from the local invariant
        measure (the memoryless special case).
    """

    base_spaces: tuple[FiniteSpace, ...]
    initial: Measure
    transitions: tuple[IntegralOperator, ...]
    potentials: tuple[TestFunction, ...]
    level0_kernel: IntegralOperator | None = None
    kernel_type: str = "mh"

    def __post_init__(self):
        L = self.levels
        if L < 0:
            raise ValueError("FKModel needs at least one base space")
        if self.initial.kind != PROBABILITY or self.initial.space != self.base_spaces[0]:
            raise ValueError("initial must be a probability measure on the first base space")
        if len(self.transitions) != L:
            raise ValueError(f"expected {L} transitions, got {len(self.transitions)}")
        if len(self.potentials) != L:
            raise ValueError(f"expected {L} potentials, got {len(self.potentials)}")
        for l, T in enumerate(self.transitions, start=1):
            if not T.markov:
                raise ValueError(f"transition {l} is not markov")
            if T.src != self.base_spaces[l - 1] or T.dst != self.base_spaces[l]:
                raise ValueError(f"transition {l} does not map level {l-1} into level {l}")
        for l, G in enumerate(self.potentials):
            if G.space != self.base_spaces[l]:
                raise ValueError(f"potential {l} lives on the wrong space")
            if G.values.min() <= 0.0 or G.values.max() > 1.0:
                raise ValueError(
                    f"potential {l} must take values in (0, 1]; range is "
                    f"[{G.values.min():.3e}, {G.values.max():.3e}]"
                )
        if self.kernel_type not in ("mh", "rank_one"):
            raise ValueError(f"unknown kernel_type {self.kernel_type!r}")
        if self.level0_kernel is None:
            object.__setattr__(
                self, "level0_kernel",
                IntegralOperator.rank_one(self.base_spaces[0], self.initial),
            )
        k0 = self.level0_kernel
        if not k0.markov or k0.src != self.base_spaces[0] or k0.dst != self.base_spaces[0]:
            raise ValueError("level0_kernel must be a markov kernel on the first base space")
        resid = np.abs(self.initial.weights @ k0.matrix - self.initial.weights).max()
        if resid > KERNEL_INVARIANCE_TOL:
            raise ValueError(
                f"level0_kernel does not leave the initial measure invariant "
                f"(residual {resid:.3e})"
            )

    @property
    def levels(self) -> int:
        return len(self.base_spaces) - 1


@dataclass(frozen=True, eq=False)
class PathSpace:
    """Enumerated product space of base coordinates ``0 .. level``."""

    level: int
    space: FiniteSpace
    base_sizes: tuple[int, ...]

    def terminal(self, idx):
        """Terminal coordinate of path index `idx` (low mixed-radix digit)."""
        return idx % self.base_sizes[-1]

    def prefix(self, idx):
        """Index of the path with the terminal coordinate dropped."""
        return idx // self.base_sizes[-1]

    def append(self, prefix_idx, coord):
        """Index of ``prefix_idx`` extended by terminal coordinate `coord`."""
        return prefix_idx * self.base_sizes[-1] + coord


def path_space(model: FKModel, l: int) -> PathSpace:
    """Path space for level `l`, mixed-radix with coordinate 0 as high digit."""
    if not 0 <= l <= model.levels:
        raise ValueError(f"level {l} out of range 0..{model.levels}")
    spaces = model.base_spaces[: l + 1]
    if l == 0:
        return PathSpace(level=0, space=spaces[0], base_sizes=(spaces[0].size,))
    labels = spaces[0].labels
    for sp in spaces[1:]:
        labels = tuple(f"{a}.{b}" for a in labels for b in sp.labels)
    size = math.prod(sp.size for sp in spaces)
    ident = f"{spaces[0].id}^(0:{l})"
    return PathSpace(
        level=l,
        space=FiniteSpace(id=ident, size=size, labels=labels),
        base_sizes=tuple(sp.size for sp in spaces),
    )


def _terminal_indices(ps: PathSpace) -> np.ndarray:
    return np.arange(ps.space.size) % ps.base_sizes[-1]


def path_potential(model: FKModel, l: int) -> TestFunction:
    """Level-`l` potential lifted to the path space (terminal coordinate only)."""
    ps = path_space(model, l)
    return TestFunction(ps.space, model.potentials[l].values[_terminal_indices(ps)])


def path_extension(model: FKModel, l: int) -> IntegralOperator:
    """Markov extension from level-`l` paths to level-``l+1`` paths.

    The row of a path `x` puts mass ``L'_{l+1}(term(x), y)`` on the path
    ``(x, y)`` and zero elsewhere: the prefix is kept, one coordinate is
    appended.
    """
    ps, ps_next = path_space(model, l), path_space(model, l + 1)
    s_new = model.base_spaces[l + 1].size
    rows = model.transitions[l].matrix[_terminal_indices(ps)]
    matrix = np.zeros((ps.space.size, ps_next.space.size))
    cols = np.arange(ps.space.size)[:, None] * s_new + np.arange(s_new)[None, :]
    np.put_along_axis(matrix, cols, rows, axis=1)
    return IntegralOperator(ps.space, ps_next.space, matrix, markov=True)


def exact_path_measure(model: FKModel, l: int) -> Measure:
    """The level-`l` limit law, by direct enumeration of weighted paths."""
    if not 0 <= l <= model.levels:
        raise ValueError(f"level {l} out of range 0..{model.levels}")
    w = model.initial.weights.copy()
    for k in range(1, l + 1):
        term = np.arange(w.size) % model.base_spaces[k - 1].size
        g = model.potentials[k - 1].values[term]
        w = ((w * g)[:, None] * model.transitions[k - 1].matrix[term, :]).ravel()
    total = w.sum()
    if total <= 0.0:
        raise ValueError(f"level {l} path weights sum to {total}; cannot normalize")
    return Measure(path_space(model, l).space, w / total, kind=PROBABILITY)


def boltzmann_gibbs(mu: Measure, G: TestFunction) -> Measure:
    """Reweight `mu` by the positive potential `G` and renormalize."""
    if mu.kind != PROBABILITY:
        raise ValueError("boltzmann_gibbs expects a probability measure")
    denom = integrate(mu, G)
    if denom <= 0.0:
        raise ValueError(f"mu(G) = {denom}; the transform is undefined")
    return Measure(mu.space, mu.weights * G.values / denom, kind=PROBABILITY)


def transport_kernel(mu: Measure, G: TestFunction) -> IntegralOperator:
    """Markov transport realization of the reweighting map.

    ``S(x, y) = G(x) 1{y=x} + (1 - G(x)) * bg(mu)(y)`` with ``bg`` the
    normalized reweighting of `mu` by `G`; it satisfies ``mu S = bg(mu)``.
    Requires `G` valued in ``(0, 1]``.
    """
    if G.values.min() <= 0.0 or G.values.max() > 1.0:
        raise ValueError(
            f"transport kernel needs potential values in (0, 1]; range is "
            f"[{G.values.min():.3e}, {G.values.max():.3e}]"
        )
    psi = boltzmann_gibbs(mu, G)
    g = G.values
    matrix = np.diag(g) + np.outer(1.0 - g, psi.weights)
    return IntegralOperator(mu.space, mu.space, matrix, markov=True)


def fk_map(model: FKModel, l: int, mu: Measure) -> Measure:
    """One step of the measure-valued flow: reweight at level `l`, extend.

    Maps a probability measure on the level-`l` path space to one on the
    level-``l+1`` path space.  The exact path measures are its fixed
    points: ``fk_map(model, l, pi_l) = pi_{l+1}``.
    """
    if l >= model.levels:
        raise ValueError(f"level {l} has no successor (model has {model.levels} levels)")
    ps = path_space(model, l)
    if mu.space != ps.space:
        raise ValueError(
            f"measure lives on {mu.space.id!r}, expected level-{l} path space "
            f"{ps.space.id!r}"
        )
    psi = boltzmann_gibbs(mu, path_potential(model, l))
    term = _terminal_indices(ps)
    w = (psi.weights[:, None] * model.transitions[l].matrix[term, :]).ravel()
    return Measure(path_space(model, l + 1).space, w, kind=PROBABILITY)


def mh_kernel(model: FKModel, l: int, mu: Measure) -> IntegralOperator:
    """Independence Metropolis-Hastings kernel for level `l`, indexed by `mu`.

    The proposal draws a level-``l-1`` path from `mu` and appends one
    base transition; the move to proposal ``y`` from state ``x`` is
    accepted with probability ``min(1, G'_{l-1}(term(y_prefix)) /
    G'_{l-1}(term(x_prefix)))`` and the rejection mass sits on the
    diagonal.  Its invariant measure is ``fk_map(model, l-1, mu)``.
    """
    if l < 1:
        raise ValueError("the level-0 kernel is homogeneous; use model.level0_kernel")
    if l > model.levels:
        raise ValueError(f"level {l} out of range 1..{model.levels}")
    ps_prev, ps = path_space(model, l - 1), path_space(model, l)
    if mu.space != ps_prev.space:
        raise ValueError(
            f"measure lives on {mu.space.id!r}, expected level-{l-1} path space "
            f"{ps_prev.space.id!r}"
        )
    g_prev = model.potentials[l - 1].values
    term_prev = _terminal_indices(ps_prev)
    step = model.transitions[l - 1].matrix
    s_new = model.base_spaces[l].size

    # rows only depend on the terminal coordinate of the current prefix,
    # so build one accepted-flow row per base state and add rejection mass
    flows = {}
    for a in range(g_prev.size):
        ratio = np.minimum(1.0, g_prev[term_prev] / g_prev[a])
        flows[a] = ((mu.weights * ratio)[:, None] * step[term_prev, :]).ravel()

    matrix = np.zeros((ps.space.size, ps.space.size))
    prefix_term = (np.arange(ps.space.size) // s_new) % g_prev.size
    for x in range(ps.space.size):
        row = flows[prefix_term[x]]
        matrix[x] = row
        matrix[x, x] += 1.0 - math.fsum(row)
    return IntegralOperator(ps.space, ps.space, matrix, markov=True)


def first_order_D(model: FKModel, l: int, eta: Measure) -> IntegralOperator:
    """First-order expansion operator of the level map around `eta`.

    For measures ``mu`` near ``eta`` the flow satisfies
    ``fk_map(mu) - fk_map(eta) = (mu - eta) D + O(||mu - eta||^2)``
    with ``D`` the transport kernel at `eta` scaled by ``1/eta(G_l)``
    and composed with the path extension.  `D` maps level-`l` paths to
    level-``l+1`` paths; it is not markov (constant mass ``1/eta(G_l)``).
    """
    if l >= model.levels:
        raise ValueError(f"level {l} has no successor (model has {model.levels} levels)")
    G = path_potential(model, l)
    denom = integrate(eta, G)
    if denom <= 0.0:
        raise ValueError(f"eta(G_{l}) = {denom}; expansion undefined")
    S = transport_kernel(eta, G)
    ext = path_extension(model, l)
    ps, ps_next = path_space(model, l), path_space(model, l + 1)
    return IntegralOperator(
        ps.space, ps_next.space, (S.matrix / denom) @ ext.matrix, markov=False
    )


def rank_one_kernel(model: FKModel, l: int, mu: Measure) -> IntegralOperator:
    """Memoryless level kernel: every row redraws from ``fk_map(model, l-1, mu)``."""
    if l < 1:
        raise ValueError("the level-0 kernel is homogeneous; use model.level0_kernel")
    target = fk_map(model, l - 1, mu)
    return IntegralOperator.rank_one(path_space(model, l).space, target)


# ---------------------------------------------------------------------------
# Two-state tempered preset
# ---------------------------------------------------------------------------

def toy_model(p: float, betas, kernel_type: str = "mh") -> FKModel:
    """Two-state tempering preset.

    Base states ``{1, 2}`` with weights ``p`` and ``1-p``; the level-`l`
    marginal puts mass ``p^b_l / (p^b_l + q^b_l)`` on state 1 for the
    inverse-temperature schedule `betas`, potentials are
    ``G'_l(1) = p^(b_{l+1}-b_l)``, ``G'_l(2) = q^(b_{l+1}-b_l)``, and each
    base transition redraws from the next marginal (rank-one rows).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    betas = tuple(float(b) for b in betas)
    if len(betas) < 1:
        raise ValueError("betas must contain at least one value")
    if any(b <= 0 for b in betas) or any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError(f"betas must be strictly increasing and positive, got {betas}")
    q = 1.0 - p
    L = len(betas) - 1
    spaces = tuple(
        FiniteSpace(id=f"S'{l}", size=2, labels=("1", "2")) for l in range(L + 1)
    )

    def marginal(l: int) -> np.ndarray:
        a, b = p ** betas[l], q ** betas[l]
        return np.array([a / (a + b), b / (a + b)])

    initial = Measure.probability(spaces[0], marginal(0))
    transitions = tuple(
        IntegralOperator(
            spaces[l - 1], spaces[l], np.tile(marginal(l), (2, 1)), markov=True
        )
        for l in range(1, L + 1)
    )
    potentials = tuple(
        TestFunction(
            spaces[l],
            np.array([p ** (betas[l + 1] - betas[l]), q ** (betas[l + 1] - betas[l])]),
        )
        for l in range(L)
    )
    return FKModel(
        base_spaces=spaces,
        initial=initial,
        transitions=transitions,
        potentials=potentials,
        kernel_type=kernel_type,
    )
