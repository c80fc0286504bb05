"""Finite-difference gradient oracle.

This module is the independent check on the autodiff engine: it evaluates a
scalar loss under central coordinate perturbations and never touches the
backward machinery.  Tests freeze their comparisons against it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .params import ParameterStore

LossFn = Callable[[ParameterStore], float]


def finite_difference_gradient(loss_fn: LossFn, store: ParameterStore,
                               h: float = 1e-6,
                               coords: Optional[Sequence[int]] = None,
                               check_determinism: bool = True) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at the current parameters.

    ``loss_fn`` must be a pure function of the store's values; this is
    checked by evaluating it twice and requiring bitwise-equal results.
    Parameters are restored bit-exactly after probing (values are saved and
    reassigned, never incrementally undone).
    """
    if check_determinism:
        l0 = float(loss_fn(store))
        l1 = float(loss_fn(store))
        if l0 != l1 and not (np.isnan(l0) and np.isnan(l1)):
            raise ValueError(
                f"loss_fn is not deterministic: {l0!r} != {l1!r}; "
                "finite differences would be meaningless")

    if coords is None:
        coords = np.arange(store.size, dtype=np.int64)
    else:
        coords = np.asarray(coords, dtype=np.int64)

    grad = np.empty(coords.size, dtype=np.float64)
    for k, c in enumerate(coords):
        name, flat_idx = store.locate(int(c))
        buf = store[name].data.reshape(-1)
        saved = buf[flat_idx]
        buf[flat_idx] = saved + h
        lp = float(loss_fn(store))
        buf[flat_idx] = saved - h
        lm = float(loss_fn(store))
        buf[flat_idx] = saved
        grad[k] = (lp - lm) / (2.0 * h)
    return grad


def fd_noise_floor(loss_value: float, h: float, tol: float) -> float:
    """Smallest gradient magnitude certifiable at relative tolerance ``tol``.

    Central differences carry absolute rounding noise of about
    eps * |L| / h, so coordinates with |g| below noise/tol cannot be
    distinguished from that noise and are compared against this floor
    instead of their own magnitude.
    """
    eps = np.finfo(np.float64).eps
    return eps * max(abs(loss_value), 1.0) / (h * tol)


def directional_derivative_error(loss_fn: LossFn, store: ParameterStore,
                                 grad: np.ndarray, direction: np.ndarray,
                                 h: float = 1e-6) -> float:
    """Relative error between <grad, u> and the FD derivative along u.

    Aggregating over a dense direction keeps magnitudes healthy, so this
    check needs no per-coordinate floor.
    """
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    theta = store.flatten()
    store.load_flat(theta + h * u)
    lp = float(loss_fn(store))
    store.load_flat(theta - h * u)
    lm = float(loss_fn(store))
    store.load_flat(theta)
    fd = (lp - lm) / (2.0 * h)
    proj = float(np.dot(grad, u))
    return abs(fd - proj) / max(abs(fd), abs(proj), 1e-12)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).

    The floor keeps near-zero entries from turning rounding noise into huge
    relative errors; it is far below any gradient magnitude the tests probe.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradient(loss_fn: LossFn, store: ParameterStore,
                   h: float = 1e-6,
                   coords: Optional[Sequence[int]] = None,
                   floor: float = 1e-8) -> float:
    """Max relative error between autodiff and finite differences.

    The caller's ``loss_fn`` is expected to zero grads, build the graph and
    call backward itself; here we run it once, read the grads, then compare
    against the oracle on the same coordinates.
    """
    from .tensor import Tensor

    def as_value(s: ParameterStore) -> float:
        out = loss_fn(s)
        return out.value if isinstance(out, Tensor) else float(out)

    store.zero_grad()
    out = loss_fn(store)
    if not isinstance(out, Tensor):
        raise TypeError("check_gradient expects loss_fn to return a Tensor")
    out.backward()
    if coords is None:
        coords = np.arange(store.size, dtype=np.int64)
    auto = store.coord_view(coords).get_grad()
    fd = finite_difference_gradient(as_value, store, h=h, coords=coords,
                                    check_determinism=True)
    return relative_error(auto, fd, floor=floor)
