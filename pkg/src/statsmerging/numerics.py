"""Dense float64 linear algebra, singular values, seeded RNG, and Adam/StepLR.

A "matrix" throughout the package is a 2-D ``numpy.ndarray`` of float64.
Vectors such as biases are stored as ``1 x n`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError, ShapeError

SVD_TOL = 1e-10
_MAX_SWEEPS = 100


def as_matrix(values) -> np.ndarray:
    """Coerce ``values`` to a 2-D float64 array; 1-D input becomes a single row."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim} dimensions")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every column pair exactly once per sweep.

    Each round holds ``n // 2`` disjoint pairs so a whole round can be
    rotated at once. ``n`` must be even.
    """
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = np.array(players[: n // 2])
        right = np.array(players[n // 2 :][::-1])
        rounds.append((left, right))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_column_norms(a: np.ndarray, tol: float) -> np.ndarray:
    """One-sided Jacobi: orthogonalize the columns of ``a`` (in place), return their norms."""
    n = a.shape[1]
    if n == 1:
        return np.linalg.norm(a, axis=0)
    if n % 2:
        a = np.hstack([a, np.zeros((a.shape[0], 1))])
        n += 1
    rounds = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for left, right in rounds:
            ai = a[:, left]
            aj = a[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            # a huge zeta just means a negligible rotation (t -> 0)
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            a[:, left] = c * ai - s * aj
            a[:, right] = s * ai + c * aj
        if not rotated:
            break
    return np.linalg.norm(a, axis=0)


def svd_values(m: np.ndarray, r: int | None = None, tol: float = SVD_TOL) -> np.ndarray:
    """Return the ``r`` largest singular values of ``m`` in descending order.

    Uses one-sided Jacobi rotations on the columns of whichever orientation
    has fewer columns. Only the singular values are produced.
    """
    m = as_matrix(m)
    k = min(m.shape)
    if r is None:
        r = k
    if r < 0 or r > k:
        raise ParameterError(f"rank {r} exceeds min dimension {k} of {m.shape}")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if r == 0:
        return np.zeros(0)
    work = m.T.copy() if m.shape[0] < m.shape[1] else m.copy()
    values = _jacobi_column_norms(work, tol)
    values = np.sort(values)[::-1][:k]
    return values[:r].copy()


@dataclass(frozen=True)
class OptimizerState:
    """Adam moments plus the StepLR schedule that scales its step size."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kwargs) -> OptimizerState:
        return cls(np.zeros(size), np.zeros(size), **kwargs)

    def learning_rate(self, epoch: int) -> float:
        return step_lr(self.base_lr, self.decay_factor, self.decay_every, epoch)


def step_lr(base_lr: float, decay_factor: float, decay_every: int, epoch: int) -> float:
    return base_lr * decay_factor ** (epoch // decay_every)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: OptimizerState, epoch: int
) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update at the StepLR rate for ``epoch``.

    Returns fresh parameter and state objects; the inputs are left untouched.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape} and moments "
            f"{state.first_moment.shape} must match"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    lr = state.learning_rate(epoch)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)
