"""Interacting annealing models on a fixed finite space.

The level-`l` target is the Gibbs measure ``exp(-beta_l V) * lam``
normalized, for an increasing inverse-temperature schedule ``beta_0 <
beta_1 < ...`` and a strictly positive reference measure ``lam``.  Two
families of user-supplied markov kernels ``K_l`` and ``L_l``, each
leaving the level-`l` Gibbs measure invariant, drive the dynamics:

* the level map reweights by ``G_l = exp(-(beta_{l+1}-beta_l) V)``,
  applies ``L_{l+1}``, then the geometrically-averaged kernel
  ``K_eps = (1-eps) * sum_k eps^k K^k``;
* the sampling kernel for level ``l`` mixes one ``K_l`` move (weight
  ``eps``) with a redraw from the reweighted measure pushed through
  ``L_l`` (weight ``1-eps``), so its contraction coefficient is at most
  ``eps``.

Potentials are handled with max-shifted exponentials throughout; the
reweighting potentials are normalized by ``exp(-(beta_{l+1}-beta_l)
min V)`` so they take values in ``(0, 1]``.  The normalization cancels
in every reweighting and only shifts first-order operators by constant
functions, which no variance in this package can see.
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
    compose,
    integrate,
)
from .fk import KERNEL_INVARIANCE_TOL, boltzmann_gibbs, transport_kernel


def _gibbs_weights(values: np.ndarray, beta: float, reference: np.ndarray) -> np.ndarray:
    logw = -beta * values + np.log(reference)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class AnnealingModel:
    """Energy table, temperature schedule, and per-level invariant kernels.

    Parameters
    ----------
    space : FiniteSpace
        Common state space of every level.
    potential : TestFunction
        Energy ``V`` (arbitrary real values).
    betas : tuple of float
        Strictly increasing positive inverse temperatures
        ``beta_0 .. beta_L``; the model has ``L = len(betas) - 1`` levels.
    epsilon : float
        Mixture weight in ``[0, 1)``.
    kernels_k, kernels_l : tuple of IntegralOperator
        Markov kernels ``K_l`` and ``L_l`` for ``l = 0 .. L``, each
        validated to leave the level-`l` Gibbs measure invariant.
    reference : Measure, optional
        Strictly positive reference measure, uniform when omitted.
    level0_kernel : IntegralOperator, optional
        Homogeneous kernel driving level 0; defaults to ``K_0``.
    """

    space: FiniteSpace
    potential: TestFunction
    betas: tuple[float, ...]
    epsilon: float
    kernels_k: tuple[IntegralOperator, ...]
    kernels_l: tuple[IntegralOperator, ...]
    reference: Measure | None = None
    level0_kernel: IntegralOperator | None = None

    def __post_init__(self):
        if self.potential.space != self.space:
            raise ValueError("potential must live on the model space")
        betas = tuple(float(b) for b in self.betas)
        object.__setattr__(self, "betas", betas)
        if len(betas) < 1 or any(b <= 0 for b in betas):
            raise ValueError(f"betas must be positive, got {betas}")
        if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
            raise ValueError(f"betas must be strictly increasing, got {betas}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.reference is None:
            object.__setattr__(self, "reference", Measure.uniform(self.space))
        ref = self.reference
        if ref.space != self.space or ref.weights.min() <= 0.0:
            raise ValueError("reference must be strictly positive on the model space")
        L = self.levels
        for name, kernels in (("kernels_k", self.kernels_k), ("kernels_l", self.kernels_l)):
            if len(kernels) != L + 1:
                raise ValueError(f"{name}: expected {L + 1} kernels, got {len(kernels)}")
            for l, M in enumerate(kernels):
                if not M.markov or M.src != self.space or M.dst != self.space:
                    raise ValueError(f"{name}[{l}] must be a markov kernel on the model space")
                pi = gibbs_measure(self, l).weights
                resid = np.abs(pi @ M.matrix - pi).max()
                if resid > KERNEL_INVARIANCE_TOL:
                    raise ValueError(
                        f"{name}[{l}] does not leave the level-{l} Gibbs measure "
                        f"invariant (residual {resid:.3e})"
                    )
        if self.level0_kernel is None:
            object.__setattr__(self, "level0_kernel", self.kernels_k[0])
        k0 = self.level0_kernel
        if not k0.markov or k0.src != self.space or k0.dst != self.space:
            raise ValueError("level0_kernel must be a markov kernel on the model space")
        pi0 = gibbs_measure(self, 0).weights
        resid = np.abs(pi0 @ k0.matrix - pi0).max()
        if resid > KERNEL_INVARIANCE_TOL:
            raise ValueError(
                f"level0_kernel does not leave the level-0 Gibbs measure invariant "
                f"(residual {resid:.3e})"
            )

    @property
    def levels(self) -> int:
        return len(self.betas) - 1


def gibbs_measure(model: AnnealingModel, l: int) -> Measure:
    """Level-`l` target ``exp(-beta_l V) * reference``, normalized."""
    if not 0 <= l <= model.levels:
        raise ValueError(f"level {l} out of range 0..{model.levels}")
    w = _gibbs_weights(model.potential.values, model.betas[l], model.reference.weights)
    return Measure(model.space, w, kind=PROBABILITY)


def potential_fn(model: AnnealingModel, l: int) -> TestFunction:
    """Reweighting potential between levels `l` and ``l+1``, scaled into (0, 1].

    ``G_l(x) = exp(-(beta_{l+1} - beta_l)(V(x) - min V))``; the shift by
    ``min V`` cancels in every normalized reweighting.
    """
    if not 0 <= l < model.levels:
        raise ValueError(f"level {l} out of range 0..{model.levels - 1}")
    delta = model.betas[l + 1] - model.betas[l]
    v = model.potential.values
    return TestFunction(model.space, np.exp(-delta * (v - v.min())))


def geometric_kernel(model: AnnealingModel, l: int) -> IntegralOperator:
    """Geometric average ``(1-eps) sum_k eps^k K_l^k`` in closed form.

    Materialized as ``(1-eps) (I - eps K_l)^{-1}``; markov and invariant
    for the level-`l` Gibbs measure whenever ``K_l`` is.
    """
    if not 0 <= l <= model.levels:
        raise ValueError(f"level {l} out of range 0..{model.levels}")
    eps = model.epsilon
    K = model.kernels_k[l]
    if eps == 0.0:
        return IntegralOperator.identity(model.space)
    n = model.space.size
    mat = (1.0 - eps) * np.linalg.solve(np.eye(n) - eps * K.matrix, np.eye(n))
    mat = np.maximum(mat, 0.0)
    mat /= mat.sum(axis=1, keepdims=True)
    return IntegralOperator(model.space, model.space, mat, markov=True)


def geometric_kernel_series(model: AnnealingModel, l: int, terms: int) -> np.ndarray:
    """Truncated series ``(1-eps) sum_{k<=terms} eps^k K_l^k`` (cross-check path)."""
    eps = model.epsilon
    K = model.kernels_k[l].matrix
    acc = np.eye(model.space.size)
    power = np.eye(model.space.size)
    coeff = 1.0
    for _ in range(terms):
        power = power @ K
        coeff *= eps
        acc = acc + coeff * power
    return (1.0 - eps) * acc


def annealing_map(model: AnnealingModel, l: int, mu: Measure) -> Measure:
    """Level map: reweight by ``G_l``, apply ``L_{l+1}``, then the geometric kernel.

    Sends probability measures on the common space to probability
    measures; the Gibbs measures are its fixed points.
    """
    if not 0 <= l < model.levels:
        raise ValueError(f"level {l} has no successor (model has {model.levels} levels)")
    psi = boltzmann_gibbs(mu, potential_fn(model, l))
    w = psi.weights @ model.kernels_l[l + 1].matrix @ geometric_kernel(model, l + 1).matrix
    w = np.maximum(w, 0.0)
    return Measure(model.space, w / w.sum(), kind=PROBABILITY)


def mixture_kernel(model: AnnealingModel, l: int, mu: Measure) -> IntegralOperator:
    """Sampling kernel for level `l`: one ``K_l`` move or a reweighted redraw.

    ``M(x, y) = eps K_l(x, y) + (1 - eps) (bg(mu) L_l)(y)``.  Its rows
    share the ``(1-eps)``-weighted part, so its contraction coefficient
    is at most ``eps``; its invariant measure is
    ``annealing_map(model, l-1, mu)``.
    """
    if l < 1:
        raise ValueError("the level-0 kernel is homogeneous; use model.level0_kernel")
    if l > model.levels:
        raise ValueError(f"level {l} out of range 1..{model.levels}")
    eps = model.epsilon
    psi = boltzmann_gibbs(mu, potential_fn(model, l - 1))
    rho = psi.weights @ model.kernels_l[l].matrix
    matrix = eps * model.kernels_k[l].matrix + (1.0 - eps) * np.tile(rho, (model.space.size, 1))
    return IntegralOperator(model.space, model.space, matrix, markov=True)


def mixture_invariant_measure(model: AnnealingModel, l: int, mu: Measure) -> Measure:
    """The measure actually fixed by ``mixture_kernel(model, l, mu)``.

    Solving ``nu = eps nu K_l + (1-eps) bg(mu) L_l`` gives
    ``nu = bg(mu) L_l K_{eps,l}``, which is exactly
    ``annealing_map(model, l-1, mu)``; the two construction routes agree.
    """
    if l < 1:
        raise ValueError("level must be >= 1")
    return annealing_map(model, l - 1, mu)


def first_order_D(model: AnnealingModel, l: int, eta: Measure) -> IntegralOperator:
    """First-order expansion operator of the level map around `eta`.

    The transport realization of the reweighting step at `eta`, scaled by
    ``1/eta(G_l)`` and pushed through ``L_{l+1}`` and the geometric
    kernel.  Not markov (constant mass ``1/eta(G_l)``).
    """
    if not 0 <= l < model.levels:
        raise ValueError(f"level {l} has no successor (model has {model.levels} levels)")
    G = potential_fn(model, l)
    denom = integrate(eta, G)
    S = transport_kernel(eta, G)
    step = compose(model.kernels_l[l + 1], geometric_kernel(model, l + 1))
    return IntegralOperator(
        model.space, model.space, (S.matrix / denom) @ step.matrix, markov=False
    )


def metropolis_kernel(pi: Measure, proposal: IntegralOperator) -> IntegralOperator:
    """Metropolize a symmetric proposal into a `pi`-reversible kernel.

    Off-diagonal flow ``proposal(x, y) * min(1, pi(y)/pi(x))``; the
    rejected mass is folded into the diagonal with compensated sums so
    rows are exactly stochastic.
    """
    if not proposal.markov or proposal.src != proposal.dst:
        raise ValueError("proposal must be a markov kernel on a single space")
    if proposal.src != pi.space:
        raise ValueError("proposal and target live on different spaces")
    P = proposal.matrix
    if not np.array_equal(P, P.T):
        raise ValueError("proposal matrix must be symmetric")
    if pi.weights.min() <= 0.0:
        raise ValueError("target must be strictly positive for the acceptance ratios")
    ratio = np.minimum(1.0, pi.weights[None, :] / pi.weights[:, None])
    flow = P * ratio
    n = pi.space.size
    matrix = flow.copy()
    for x in range(n):
        off = math.fsum(flow[x, y] for y in range(n) if y != x)
        matrix[x, x] = 1.0 - off
    return IntegralOperator(pi.space, pi.space, matrix, markov=True)


def default_metropolis(model: AnnealingModel, l: int, proposal: IntegralOperator) -> IntegralOperator:
    """Metropolis kernel targeting the level-`l` Gibbs measure."""
    return metropolis_kernel(gibbs_measure(model, l), proposal)


def make_metropolis_model(
    space: FiniteSpace,
    potential,
    betas,
    epsilon: float,
    proposal: IntegralOperator | None = None,
    reference: Measure | None = None,
) -> AnnealingModel:
    """Build a model whose ``K_l`` and ``L_l`` are Metropolis kernels.

    `proposal` must be symmetric; it defaults to the uniform redraw,
    which is symmetric on any space.
    """
    potential = potential if isinstance(potential, TestFunction) else TestFunction(space, potential)
    if proposal is None:
        proposal = IntegralOperator(
            space, space, np.full((space.size, space.size), 1.0 / space.size), markov=True
        )
    betas = tuple(float(b) for b in betas)
    ref = reference if reference is not None else Measure.uniform(space)
    kernels = tuple(
        metropolis_kernel(
            Measure(space, _gibbs_weights(potential.values, b, ref.weights), kind=PROBABILITY),
            proposal,
        )
        for b in betas
    )
    return AnnealingModel(
        space=space,
        potential=potential,
        betas=betas,
        epsilon=epsilon,
        kernels_k=kernels,
        kernels_l=kernels,
        reference=reference,
    )
