"""Shared builders for randomized tests."""

import numpy as np

from imcmc.measures import FiniteSpace, IntegralOperator, Measure, TestFunction


def random_stochastic(rng, n, m=None, space_src=None, space_dst=None):
    m = n if m is None else m
    mat = rng.random((n, m)) + 0.05
    mat /= mat.sum(axis=1, keepdims=True)
    src = space_src or FiniteSpace(f"rand{n}", n)
    dst = space_dst or (src if m == n else FiniteSpace(f"rand{m}", m))
    return IntegralOperator(src, dst, mat, markov=True)


def random_probability(rng, space):
    w = rng.random(space.size) + 0.05
    return Measure.probability(space, w / w.sum())


def random_function(rng, space, scale=1.0):
    return TestFunction(space, scale * rng.standard_normal(space.size))


def two_state_chain():
    space = FiniteSpace("chain2", 2)
    M = IntegralOperator(space, space, np.array([[0.9, 0.1], [0.2, 0.8]]), markov=True)
    pi = Measure.probability(space, np.array([2.0 / 3.0, 1.0 / 3.0]))
    return space, M, pi


def random_fk_model(sizes=(2, 3, 2), seed=5):
    """An arbitrary positive Feynman-Kac model with the given base sizes."""
    from imcmc import fk

    rng = np.random.default_rng(seed)
    spaces = tuple(FiniteSpace(f"S'{l}", s) for l, s in enumerate(sizes))
    init = rng.random(sizes[0]) + 0.2
    initial = Measure.probability(spaces[0], init / init.sum())
    transitions = []
    for l in range(1, len(sizes)):
        m = rng.random((sizes[l - 1], sizes[l])) + 0.2
        m /= m.sum(axis=1, keepdims=True)
        transitions.append(IntegralOperator(spaces[l - 1], spaces[l], m, markov=True))
    potentials = tuple(
        TestFunction(spaces[l], 0.2 + 0.8 * rng.random(sizes[l]))
        for l in range(len(sizes) - 1)
    )
    return fk.FKModel(
        base_spaces=spaces,
        initial=initial,
        transitions=tuple(transitions),
        potentials=potentials,
    )
