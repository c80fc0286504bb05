"""Selective two-pass sharpness-aware optimizer.

Every ``tau_sam``-th step runs two passes: the first gradient is restricted
to a masked coordinate subspace and normalized into a perturbation of norm
``rho``; the second gradient is taken at the perturbed point and drives an
ordinary full-parameter update from the original point.  Off-cycle steps
are plain base-optimizer steps, so ``tau_sam`` dilutes the extra cost.

The perturbation is applied in place and restored by reassigning the saved
values, never by subtracting, so the restore is bit-exact.  A non-finite
loss or gradient aborts the step with parameters and optimizer state
unchanged.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .params import CoordView, ParameterStore
from .probe import SubspaceMask
from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Loss or gradient turned non-finite; the step was aborted cleanly."""


@dataclass(frozen=True)
class SelectiveSamConfig:
    rho: Optional[float] = None   # None -> default_rho(mask size) when bound
    tau_sam: int = 5              # two-pass cadence; fires when step % tau == 0
    eps_num: float = 1e-12        # normalization guard in the perturbation
    lr: float = 3e-4
    base_update: str = "sgd"      # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.tau_sam < 1:
            raise ValueError("tau_sam must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.base_update not in ("sgd", "adam"):
            raise ValueError(f"unknown base_update {self.base_update!r}")
        if self.eps_num <= 0:
            raise ValueError("eps_num must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("rho", "tau_sam", "eps_num", "lr", "base_update",
                 "adam_beta1", "adam_beta2", "adam_eps")}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectiveSamConfig":
        return cls(**d)


def default_rho(coord_count: int) -> float:
    """Desk-scale default radius, 0.05 * sqrt(subspace dimension).

    Scales like the norm of a random unit-coordinate-variance vector so the
    per-coordinate displacement stays comparable across mask sizes.
    """
    return 0.05 * math.sqrt(max(coord_count, 1))


def resolve_rho(config: SelectiveSamConfig, mask: SubspaceMask) -> float:
    if config.rho is not None:
        return config.rho
    return default_rho(mask.coord_count)


def sam_perturbation(g_s: np.ndarray, rho: float, eps_num: float = 1e-12) -> np.ndarray:
    """rho * g_s / (||g_s|| + eps_num); norm deviates from rho by at most
    a factor eps_num / ||g_s||."""
    g_s = np.asarray(g_s, dtype=np.float64)
    return (rho / (np.linalg.norm(g_s) + eps_num)) * g_s


def _all_finite_grads(store: ParameterStore) -> bool:
    for _, t in store.items():
        if not np.isfinite(t.grad).all():
            return False
    return True


@dataclass
class StepMetrics:
    step: int
    loss: float                   # L(theta) before any update
    sam_fired: bool
    eps_norm: float               # 0.0 when the two-pass branch did not fire
    grad_norm: float              # norm of the gradient that drove the update
    loss_at_perturbed: float      # nan when not fired
    wall_ms: float

    def to_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "sam_fired": self.sam_fired,
                "eps_norm": self.eps_norm, "grad_norm": self.grad_norm,
                "loss_at_perturbed": self.loss_at_perturbed, "wall_ms": self.wall_ms}


class SelectiveSam:
    """Stateful optimizer binding a parameter store, a mask and a config.

    ``loss_builder`` passed to :meth:`step` must rebuild the loss graph at
    the current parameters on every call (training loops close it over the
    current batch).
    """

    def __init__(self, store: ParameterStore, mask: SubspaceMask,
                 config: SelectiveSamConfig):
        if mask.total_coords is not None and mask.total_coords != store.size:
            raise ValueError(
                f"mask was built for a store of size {mask.total_coords}, "
                f"this store has {store.size}")
        self.store = store
        self.mask = mask
        self.config = config
        self.rho = resolve_rho(config, mask)
        self.view: CoordView = store.coord_view(mask.coordinate_ids)
        self.t = 0
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.last_perturbation: Optional[np.ndarray] = None  # debug hook

    # -- internals ---------------------------------------------------------

    def _backward(self, loss_builder: Callable[[], Tensor]) -> float:
        """Zero grads, build, check, backprop; returns the loss value."""
        self.store.zero_grad()
        loss = loss_builder()
        value = loss.value
        if not np.isfinite(value):
            raise NonFiniteGradientError(f"non-finite loss {value!r} at step {self.t + 1}")
        loss.backward()
        if not _all_finite_grads(self.store):
            raise NonFiniteGradientError(f"non-finite gradient at step {self.t + 1}")
        return value

    def _apply_base_update(self) -> float:
        """Consume grad buffers; returns the driving gradient's norm."""
        cfg = self.config
        sq_norm = 0.0
        if cfg.base_update == "sgd":
            for _, t in self.store.items():
                sq_norm += float(np.dot(t.grad.reshape(-1), t.grad.reshape(-1)))
                t.data -= cfg.lr * t.grad
            return math.sqrt(sq_norm)
        # adam with bias correction; moments keyed by parameter name
        step = self.t + 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for name, t in self.store.items():
            g = t.grad
            sq_norm += float(np.dot(g.reshape(-1), g.reshape(-1)))
            if name not in self._adam_m:
                self._adam_m[name] = np.zeros_like(g)
                self._adam_v[name] = np.zeros_like(g)
            m, v = self._adam_m[name], self._adam_v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        return math.sqrt(sq_norm)

    # -- public ------------------------------------------------------------

    def step(self, loss_builder: Callable[[], Tensor]) -> StepMetrics:
        """One optimizer step; fires the two-pass branch on cadence.

        On NonFiniteGradientError the parameters, step counter and adam
        moments are exactly as before the call.
        """
        t0 = time.perf_counter()
        step_index = self.t + 1
        fire = self.view.n > 0 and step_index % self.config.tau_sam == 0
        loss_perturbed = math.nan
        eps_norm = 0.0

        if fire:
            base_loss = self._backward(loss_builder)
            g_s = self.view.get_grad()
            eps = sam_perturbation(g_s, self.rho, self.config.eps_num)
            self.last_perturbation = eps
            saved = self.view.get()
            self.view.add(eps)
            try:
                loss_perturbed = self._backward(loss_builder)
            finally:
                self.view.set(saved)  # reassignment: bit-exact restore
            eps_norm = float(np.linalg.norm(eps))
        else:
            base_loss = self._backward(loss_builder)

        grad_norm = self._apply_base_update()
        self.t = step_index
        wall_ms = (time.perf_counter() - t0) * 1e3
        return StepMetrics(step=step_index, loss=base_loss, sam_fired=fire,
                           eps_norm=eps_norm, grad_norm=grad_norm,
                           loss_at_perturbed=loss_perturbed, wall_ms=wall_ms)


def subspace_gradient(store: ParameterStore, view: CoordView,
                      loss_builder: Callable[[], Tensor]) -> np.ndarray:
    """Gradient restricted to the view's coordinates (full backward, gather)."""
    store.zero_grad()
    loss = loss_builder()
    loss.backward()
    return view.get_grad()
