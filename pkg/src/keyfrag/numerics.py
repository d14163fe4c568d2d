"""Dense linear algebra, Adam optimizer, seeded RNG, and a finite-difference gradient checker.

Everything here runs in double precision; the gradient tolerances used across
the test suite assume it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

SYMMETRY_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """Eigensolver failed to converge; carries the last residual if known."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with explicit shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d arrays, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite entries")
    return out


def sym_eigs_smallest(m: Array, k: int) -> tuple[Array, Array]:
    """Return the k smallest eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Raises ValueError if `m` is not symmetric within 1e-9, ConvergenceError if
    the underlying solver does not converge.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n}x{n} matrix")
    asym = float(np.max(np.abs(m - m.T))) if n else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric: max |m - m^T| = {asym:.3e}")
    sym = 0.5 * (m + m.T)
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigendecomposition did not converge: {exc}") from exc
    return vals[:k].copy(), vecs[:, :k].copy()


@dataclass
class AdamState:
    """Per-parameter Adam accumulators with decoupled weight decay."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, Array] = field(default_factory=dict)
    second_moment: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Array], learning_rate: float,
                   weight_decay: float = 0.0, **kwargs) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        state = cls(learning_rate=learning_rate, weight_decay=weight_decay, **kwargs)
        for name, value in params.items():
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: AdamState) -> tuple[dict[str, Array], AdamState]:
    """One Adam update, minimizing: params are mutated in place and returned.

    Weight decay is decoupled (applied directly to the parameters, not mixed
    into the moment estimates).
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.learning_rate * update
    return params, state


class Rng:
    """Counter-based (Philox) generator: same seed and call sequence give
    bit-identical draws on every platform."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *key: int) -> "Rng":
        """Independent substream identified by `key`; deterministic and
        unaffected by draws from the parent."""
        return Rng(self.seed, _key=self._key + tuple(key))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> Array:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None) -> Array:
        return self._gen.standard_normal(size=size)

    def integers(self, low: int, high: int, size=None) -> Array:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> Array:
        return self._gen.choice(n, size=size, replace=replace)


def finite_diff_check(f, params: dict[str, Array], analytic: dict[str, Array],
                      eps: float = 1e-5) -> float:
    """Max over parameters of the relative error between central differences
    of `f` and `analytic`.

    `f` takes the params dict and returns a scalar; every scalar entry of
    every parameter is perturbed by +/- eps. The error for one parameter is
    ||central_diff - analytic|| / (||analytic|| + 1e-8) over that parameter's
    entries, which keeps the check meaningful for entries whose true gradient
    sits below what central differences can resolve.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-4]")
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"analytic gradient shape mismatch for '{name}'")
        flat = p.reshape(-1)
        cd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(params)
            flat[i] = orig - eps
            f_minus = f(params)
            flat[i] = orig
            cd[i] = (f_plus - f_minus) / (2.0 * eps)
        err = np.linalg.norm(cd - a.reshape(-1)) / (np.linalg.norm(a) + 1e-8)
        worst = max(worst, err)
    return worst
