"""Small dense numerical kernel: activations, softmax, sparse-row Adam,
seeded random streams and a central-difference gradient checker."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's input contract is broken."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, tag: str, item: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, purpose, item) triple.

    Backed by Philox4x64-10, a counter-based bit generator, keyed through a
    SeedSequence built from the global seed, the CRC32 of ``tag`` and ``item``.
    The same triple yields the same stream on every platform.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8")), int(item)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# elementwise maps
# ---------------------------------------------------------------------------

def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ContractViolation(f"affine: W {W.shape} does not conform with x {x.shape}")
    y = x.astype(np.float64) @ W.astype(np.float64).T
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise ContractViolation(f"affine: bias {b.shape} does not match {W.shape[0]} rows")
        y = y + b
    return y


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient 0 at the kink
    return (np.asarray(x) > 0).astype(np.float64)


def tanh(x):
    return np.tanh(x)


def tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def identity(x):
    return np.asarray(x, dtype=np.float64)


def identity_grad(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (relu, relu_grad),
    "tanh": (tanh, tanh_grad),
    "sigmoid": (sigmoid, sigmoid_grad),
    "identity": (identity, identity_grad),
}


def activation(name: str) -> tuple[Callable, Callable]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractViolation(f"unknown activation {name!r}") from None


def softmax(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0:
        raise ContractViolation("softmax of an empty vector")
    e = np.exp(theta - theta.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Adam with sparse row updates
# ---------------------------------------------------------------------------

@dataclass
class SparseRows:
    """Row-indexed gradient for one parameter array.

    ``rows`` are unique row indices and ``values`` the matching gradient rows
    (for 1-d parameters ``values`` is 1-d).
    """
    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def dense(cls, grad: np.ndarray) -> "SparseRows":
        return cls(np.arange(grad.shape[0]), grad)

    @classmethod
    def scatter(cls, idx: np.ndarray, vals: np.ndarray, n_rows: int | None = None) -> "SparseRows":
        """Sum ``vals`` into unique rows of ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        rows, inv = np.unique(idx, return_inverse=True)
        out = np.zeros((rows.size,) + vals.shape[1:], dtype=np.float64)
        np.add.at(out, inv, vals)
        return cls(rows, out)

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, self.rows, self.values)
        return out

    def __add__(self, other: "SparseRows") -> "SparseRows":
        return SparseRows.scatter(np.concatenate([self.rows, other.rows]),
                                  np.concatenate([self.values, other.values]))


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        return st


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, SparseRows]) -> None:
    """One lazy Adam step: only rows with a nonzero gradient move.

    Bias correction uses the global step, which advances once per call.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        vals = np.asarray(g.values, dtype=np.float64)
        flat = vals.reshape(vals.shape[0], -1)
        nz = np.any(flat != 0.0, axis=1)
        if not nz.any():
            continue
        rows = g.rows[nz]
        gv = vals[nz]
        m = state.m[name]
        v = state.v[name]
        m_rows = state.beta1 * m[rows] + (1.0 - state.beta1) * gv
        v_rows = state.beta2 * v[rows] + (1.0 - state.beta2) * gv * gv
        m[rows] = m_rows
        v[rows] = v_rows
        upd = state.lr * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + state.epsilon)
        p[rows] = p[rows] - upd


def decay_rows(params: dict[str, np.ndarray], grads: dict[str, SparseRows], factor: float) -> None:
    """Decoupled weight decay on the rows present in ``grads``."""
    if factor == 0.0:
        return
    for name, g in grads.items():
        p = params[name]
        p[g.rows] = p[g.rows] * (1.0 - factor)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

class GradientCheckError(AssertionError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    probes: list[tuple[str, tuple, float, float, float]]  # name, index, analytic, numeric, rel
    failures: list[tuple[str, tuple, float, float, float]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_for_failure(self) -> None:
        if self.failures:
            lines = [f"{n}{list(i)}: analytic={a:.6g} numeric={nm:.6g} rel={r:.3g}"
                     for n, i, a, nm, r in self.failures]
            raise GradientCheckError(
                f"gradient check failed (max rel {self.max_rel_error:.3g} > {self.tolerance:g}):\n"
                + "\n".join(lines))


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(loss_fn: Callable[[dict], tuple[float | np.ndarray, dict[str, SparseRows]]],
                      params: dict[str, np.ndarray], probe_count: int = 20, h: float = 1e-5,
                      tolerance: float = 1e-4, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients to central differences at random coordinates.

    ``loss_fn(params)`` returns ``(loss, sparse_grads)``.  The loss may be
    given as the array of its summands: the difference is then taken term by
    term and summed exactly, so terms the probe does not reach cancel instead
    of adding rounding noise of the size of the whole loss.  Probes are drawn
    from coordinates that receive a gradient entry (every other coordinate
    has an exact zero on both sides); if none do, from all coordinates.
    Parameters are perturbed in place and restored.
    """
    _, grads = loss_fn(params)
    dense = {n: g.to_dense(params[n].shape) for n, g in grads.items()}
    candidates = []
    for n, g in grads.items():
        for r in np.asarray(g.rows):
            for tail in np.ndindex(*params[n].shape[1:]):
                candidates.append((n, (int(r),) + tail))
    if not candidates:
        for n, p in params.items():
            for idx in np.ndindex(*p.shape):
                candidates.append((n, idx))
    rng = rng_stream(seed, "gradcheck")
    if not candidates:
        return GradCheckReport(0.0, tolerance, [], [])
    pick = rng.choice(len(candidates), size=min(probe_count, len(candidates)), replace=False)

    probes, failures = [], []
    worst = 0.0
    for i in sorted(pick):
        name, idx = candidates[i]
        p = params[name]
        orig = p[idx]
        p[idx] = orig + h
        lp, _ = loss_fn(params)
        p[idx] = orig - h
        lm, _ = loss_fn(params)
        p[idx] = orig
        if np.ndim(lp) and np.shape(lp) == np.shape(lm):
            numeric = math.fsum((np.asarray(lp) - np.asarray(lm)).tolist()) / (2.0 * h)
        else:
            numeric = (np.sum(lp) - np.sum(lm)) / (2.0 * h)
        analytic = float(dense[name][idx]) if name in dense else 0.0
        rel = relative_error(analytic, numeric, floor)
        worst = max(worst, rel)
        rec = (name, idx, analytic, numeric, rel)
        probes.append(rec)
        if rel > tolerance:
            failures.append(rec)
    return GradCheckReport(worst, tolerance, probes, failures)
