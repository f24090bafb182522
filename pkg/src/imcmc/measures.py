"""Dense measure / kernel algebra on finite state spaces.

This module is the numerical foundation for everything else: enumerated
state spaces, signed and probability measures as weight vectors, integral
operators as dense matrices, and the handful of norms and coefficients
(total variation, oscillation, Dobrushin contraction) the rest of the
package reasons with.

Conventions
-----------
* The total variation norm of a measure is the supremum of ``|mu(f)|``
  over test functions with values in ``[-1, 1]``, i.e. the *sum* of
  absolute weights.  Two distinct point masses are therefore at distance
  2, not 1; keep the factor in mind when comparing against texts that
  use the probabilists' half convention.
* Product spaces are indexed mixed-radix with the LEFT factor as the
  high digit: ``index(x_0, ..., x_l) = (...((x_0*s_1 + x_1)*s_2 + x_2)...)``.
  This order is fixed so golden files stay stable.
* Spaces are capped at ``MAX_STATES`` states; the oracle is dense by
  design and is not meant to scale past desk-size models.
* All values are immutable after construction (weight arrays are marked
  read-only) and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Hard cap on the size of any enumerated space (12 binary coordinates).
MAX_STATES = 4096

#: Default absolute tolerance for the oracle algebra.
DEFAULT_ATOL = 1e-12

SIGNED = "signed"
PROBABILITY = "probability"


class SpaceMismatchError(ValueError):
    """Raised when an operation mixes objects living on different spaces."""

    def __init__(self, expected: "FiniteSpace", got: "FiniteSpace", context: str):
        self.expected = expected
        self.got = got
        super().__init__(
            f"{context}: expected space {expected.id!r} (size {expected.size}), "
            f"got {got.id!r} (size {got.size})"
        )


def _check_space(expected: "FiniteSpace", got: "FiniteSpace", context: str) -> None:
    if expected != got:
        raise SpaceMismatchError(expected, got, context)


@dataclass(frozen=True)
class FiniteSpace:
    """An enumerated state space with human-readable labels.

    Parameters
    ----------
    id : str
        Opaque identifier, used in error messages and reports.
    size : int
        Number of states, ``1 <= size <= MAX_STATES``.
    labels : tuple of str, optional
        One label per state; generated as ``s0, s1, ...`` when omitted.
    """

    id: str
    size: int
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"space {self.id!r}: size must be >= 1, got {self.size}")
        if self.size > MAX_STATES:
            raise ValueError(
                f"space {self.id!r}: size {self.size} exceeds the hard cap of "
                f"{MAX_STATES} states"
            )
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"s{i}" for i in range(self.size)))
        if len(self.labels) != self.size:
            raise ValueError(
                f"space {self.id!r}: {len(self.labels)} labels for {self.size} states"
            )
        if len(set(self.labels)) != self.size:
            raise ValueError(f"space {self.id!r}: labels are not unique")


def product_space(a: FiniteSpace, b: FiniteSpace, id: str | None = None) -> FiniteSpace:
    """Product space of `a` and `b`, `a` indexing the high digit."""
    labels = tuple(f"{la}.{lb}" for la in a.labels for lb in b.labels)
    return FiniteSpace(id=id or f"{a.id}*{b.id}", size=a.size * b.size, labels=labels)


@dataclass(frozen=True, eq=False)
class Measure:
    """A dense signed or probability measure over a :class:`FiniteSpace`."""

    space: FiniteSpace
    weights: np.ndarray
    kind: str = SIGNED

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.space.size,):
            raise ValueError(
                f"measure on {self.space.id!r}: weight vector has shape {w.shape}, "
                f"expected ({self.space.size},)"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError(f"measure on {self.space.id!r}: non-finite weights")
        if self.kind not in (SIGNED, PROBABILITY):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == PROBABILITY:
            if w.min() < 0.0:
                raise ValueError(
                    f"probability measure on {self.space.id!r} has negative weight "
                    f"{w.min():.3e}"
                )
            if abs(w.sum() - 1.0) > DEFAULT_ATOL:
                raise ValueError(
                    f"probability measure on {self.space.id!r} sums to {w.sum()!r}"
                )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def probability(space: FiniteSpace, weights) -> "Measure":
        return Measure(space, weights, kind=PROBABILITY)

    @staticmethod
    def dirac(space: FiniteSpace, index: int) -> "Measure":
        w = np.zeros(space.size)
        w[index] = 1.0
        return Measure(space, w, kind=PROBABILITY)

    @staticmethod
    def uniform(space: FiniteSpace) -> "Measure":
        return Measure(space, np.full(space.size, 1.0 / space.size), kind=PROBABILITY)

    def mass(self) -> float:
        return float(self.weights.sum())

    def __sub__(self, other: "Measure") -> "Measure":
        _check_space(self.space, other.space, "measure subtraction")
        return Measure(self.space, self.weights - other.weights, kind=SIGNED)

    def __add__(self, other: "Measure") -> "Measure":
        _check_space(self.space, other.space, "measure addition")
        return Measure(self.space, self.weights + other.weights, kind=SIGNED)

    def __rmul__(self, scalar: float) -> "Measure":
        return Measure(self.space, float(scalar) * self.weights, kind=SIGNED)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A bounded function on a :class:`FiniteSpace`, stored as a value table."""

    __test__ = False  # keep pytest from collecting the class by its name

    space: FiniteSpace
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.space.size,):
            raise ValueError(
                f"function on {self.space.id!r}: value vector has shape {v.shape}, "
                f"expected ({self.space.size},)"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError(f"function on {self.space.id!r}: non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @staticmethod
    def indicator(space: FiniteSpace, index: int) -> "TestFunction":
        v = np.zeros(space.size)
        v[index] = 1.0
        return TestFunction(space, v)

    @staticmethod
    def constant(space: FiniteSpace, value: float) -> "TestFunction":
        return TestFunction(space, np.full(space.size, float(value)))

    def __add__(self, other: "TestFunction") -> "TestFunction":
        _check_space(self.space, other.space, "function addition")
        return TestFunction(self.space, self.values + other.values)

    def __sub__(self, other: "TestFunction") -> "TestFunction":
        _check_space(self.space, other.space, "function subtraction")
        return TestFunction(self.space, self.values - other.values)

    def __rmul__(self, scalar: float) -> "TestFunction":
        return TestFunction(self.space, float(scalar) * self.values)


@dataclass(frozen=True, eq=False)
class IntegralOperator:
    """A dense matrix ``M(x, y)`` from `src` into `dst`.

    Markov operators (`markov=True`) have nonnegative rows summing to one;
    general bounded operators carry arbitrary real entries.
    """

    src: FiniteSpace
    dst: FiniteSpace
    matrix: np.ndarray
    markov: bool = False

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (self.src.size, self.dst.size):
            raise ValueError(
                f"operator {self.src.id!r}->{self.dst.id!r}: matrix has shape "
                f"{m.shape}, expected ({self.src.size}, {self.dst.size})"
            )
        if not np.all(np.isfinite(m)):
            raise ValueError(
                f"operator {self.src.id!r}->{self.dst.id!r}: non-finite entries"
            )
        if self.markov:
            if m.min() < 0.0:
                raise ValueError(
                    f"markov operator {self.src.id!r}->{self.dst.id!r} has negative "
                    f"entry {m.min():.3e}"
                )
            err = np.abs(m.sum(axis=1) - 1.0).max()
            if err > DEFAULT_ATOL:
                raise ValueError(
                    f"markov operator {self.src.id!r}->{self.dst.id!r}: row sums "
                    f"deviate from 1 by {err:.3e}"
                )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity(space: FiniteSpace) -> "IntegralOperator":
        return IntegralOperator(space, space, np.eye(space.size), markov=True)

    @staticmethod
    def rank_one(src: FiniteSpace, mu: Measure) -> "IntegralOperator":
        """Operator with every row equal to `mu` (constant redraw from `mu`)."""
        m = np.tile(mu.weights, (src.size, 1))
        return IntegralOperator(src, mu.space, m, markov=(mu.kind == PROBABILITY))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def apply_operator(M: IntegralOperator, f: TestFunction) -> TestFunction:
    """``M(f)(x) = sum_y M(x, y) f(y)``, a function on ``M.src``."""
    _check_space(M.dst, f.space, "apply_operator")
    return TestFunction(M.src, M.matrix @ f.values)


def act_measure(mu: Measure, M: IntegralOperator) -> Measure:
    """Dual action ``(mu M)(y) = sum_x mu(x) M(x, y)`` on ``M.dst``."""
    _check_space(M.src, mu.space, "act_measure")
    kind = PROBABILITY if (mu.kind == PROBABILITY and M.markov) else SIGNED
    w = mu.weights @ M.matrix
    if kind == PROBABILITY:
        # guard against -1e-17 style round-off on otherwise exact rows
        w = np.maximum(w, 0.0)
        w = w / w.sum()
    return Measure(M.dst, w, kind=kind)


def integrate(mu: Measure, f: TestFunction) -> float:
    """``mu(f) = sum_x mu(x) f(x)``."""
    _check_space(mu.space, f.space, "integrate")
    return float(mu.weights @ f.values)


def tv_norm(mu: Measure) -> float:
    """Total variation norm: sum of absolute weights (unit-ball convention)."""
    return float(np.abs(mu.weights).sum())


def oscillation(f: TestFunction) -> float:
    """``osc(f) = max f - min f``."""
    return float(f.values.max() - f.values.min())


def dobrushin(M: IntegralOperator) -> float:
    """Dobrushin contraction coefficient of a markov operator.

    ``beta(M) = max_{x, x'} (1/2) sum_y |M(x, y) - M(x', y)|``, the
    worst-case half total variation distance between rows; it equals the
    supremum of ``osc(M f)`` over functions with ``osc(f) <= 1``.
    """
    if not M.markov:
        raise ValueError(
            "dobrushin coefficient is only computed for markov (constant mass) "
            f"operators; {M.src.id!r}->{M.dst.id!r} is not flagged markov"
        )
    m = M.matrix
    best = 0.0
    for i in range(m.shape[0] - 1):
        d = 0.5 * np.abs(m[i + 1 :] - m[i]).sum(axis=1).max()
        if d > best:
            best = float(d)
    return best


def compose(M: IntegralOperator, N: IntegralOperator) -> IntegralOperator:
    """Operator composition ``(M N)(x, z) = sum_y M(x, y) N(y, z)``."""
    _check_space(M.dst, N.src, "compose")
    return IntegralOperator(M.src, N.dst, M.matrix @ N.matrix, markov=M.markov and N.markov)


def operator_norm(M: IntegralOperator) -> float:
    """Norm induced by the sup norm on functions: max row absolute sum."""
    return float(np.abs(M.matrix).sum(axis=1).max())


def allclose(a, b, atol: float = DEFAULT_ATOL) -> bool:
    """Entrywise comparison of two measures, functions, or operators.

    The default tolerance is the package-wide 1e-12 absolute; pass `atol`
    to tighten or relax a single comparison.
    """
    if type(a) is not type(b):
        raise TypeError(f"cannot compare {type(a).__name__} with {type(b).__name__}")
    if isinstance(a, Measure):
        _check_space(a.space, b.space, "allclose")
        return bool(np.abs(a.weights - b.weights).max() <= atol)
    if isinstance(a, TestFunction):
        _check_space(a.space, b.space, "allclose")
        return bool(np.abs(a.values - b.values).max() <= atol)
    if isinstance(a, IntegralOperator):
        _check_space(a.src, b.src, "allclose")
        _check_space(a.dst, b.dst, "allclose")
        return bool(np.abs(a.matrix - b.matrix).max() <= atol)
    raise TypeError(f"unsupported type {type(a).__name__}")


def tensor(a, b):
    """Tensor product of two measures, functions, or operators.

    The result lives on the product space with the left factor as the
    high digit, so the flat index ``i*size_b + j`` pairs state ``i`` of
    `a` with state ``j`` of `b`.
    """
    if isinstance(a, Measure) and isinstance(b, Measure):
        space = product_space(a.space, b.space)
        w = np.outer(a.weights, b.weights).ravel()
        kind = PROBABILITY if a.kind == b.kind == PROBABILITY else SIGNED
        return Measure(space, w, kind=kind)
    if isinstance(a, TestFunction) and isinstance(b, TestFunction):
        space = product_space(a.space, b.space)
        return TestFunction(space, np.outer(a.values, b.values).ravel())
    if isinstance(a, IntegralOperator) and isinstance(b, IntegralOperator):
        src = product_space(a.src, b.src)
        dst = product_space(a.dst, b.dst)
        return IntegralOperator(src, dst, np.kron(a.matrix, b.matrix),
                                markov=a.markov and b.markov)
    raise TypeError(
        f"tensor requires two measures, two functions, or two operators; "
        f"got {type(a).__name__} and {type(b).__name__}"
    )
