"""Loss-landscape diagnostics on parameter subspaces.

Everything here answers one of three questions about a trained model:
how much can the loss rise under a norm-bounded perturbation of a chosen
coordinate set (worst-case increase, concentration across neuron subsets),
how curved is the loss on that set (top Hessian eigenvalue via power
iteration on finite-difference Hessian-vector products), and how far can
the parameters drift before the loss crosses a risk threshold (predicted
vs empirically probed radius).

Every diagnostic restores the parameter store bit-exactly; callers can
checksum before and after.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .params import CoordView, ParameterStore
from .probe import SubspaceMask
from .sam import NonFiniteGradientError, sam_perturbation, subspace_gradient
from .tensor import NonFiniteError, Tensor
from .utils import rng_for

FORMAT_REPORT = "alignlab-georeport v1"
FORMAT_CURVE = "alignlab-curve v1"

LAMBDA_FLOOR = 1e-8
# worst-case totals below this are treated as "no measurable sharpness"
SHARPNESS_FLOOR = 1e-12

LossBuilder = Callable[[], Tensor]
MaskLike = Union[SubspaceMask, np.ndarray]


def _as_view(store: ParameterStore, mask: MaskLike) -> CoordView:
    coords = mask.coordinate_ids if isinstance(mask, SubspaceMask) else mask
    return store.coord_view(np.asarray(coords, dtype=np.int64))


def _loss_value(loss_builder: LossBuilder) -> float:
    v = float(loss_builder().data)
    if not math.isfinite(v):
        raise NonFiniteError(f"loss evaluated to {v}")
    return v


def _masked_gradient(store: ParameterStore, view: CoordView,
                     loss_builder: LossBuilder) -> np.ndarray:
    g = subspace_gradient(store, view, loss_builder)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite gradient on mask coordinates")
    return g


# ---------------------------------------------------------------------------
# worst-case loss increase


@dataclass
class SharpnessProbe:
    """Result of one worst-case search: how much the loss rose and where."""
    delta: float                 # max(0, worst - base)
    base_loss: float
    worst_loss: float
    best_eps: np.ndarray         # perturbation achieving worst_loss, on mask coords
    rho: float
    method: str
    hit_nonfinite: bool = False  # search ran into a non-finite region; delta is
                                 # the best finite value found before that


def worst_case_loss_increase(store: ParameterStore, mask: MaskLike,
                             loss_builder: LossBuilder, rho: float,
                             method: str = "ascent", ascent_steps: int = 10,
                             eps_num: float = 1e-12,
                             init: Optional[np.ndarray] = None) -> SharpnessProbe:
    """Estimate max over ||eps|| <= rho of L(theta + eps) - L(theta).

    eps lives on the mask coordinates only.  ``single_sam_step`` evaluates
    the one-shot perturbation rho * g/||g||; ``ascent`` additionally runs
    projected gradient ascent on the rho-ball and keeps the best visited
    point.  eps = 0 is always admissible, so the result is clamped at zero.
    ``init`` warm-starts the ascent (used by nested-mask sweeps); it is
    visited before any gradient work, so the estimate never falls below
    the value at the starting point.
    """
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    if method not in ("ascent", "single_sam_step"):
        raise ValueError(f"unknown method {method!r}")
    view = _as_view(store, mask)
    base = _loss_value(loss_builder)
    if rho == 0.0 or view.n == 0:
        return SharpnessProbe(delta=0.0, base_loss=base, worst_loss=base,
                              best_eps=np.zeros(view.n), rho=rho, method=method)

    saved = view.get()
    worst = base
    best_eps = np.zeros(view.n)
    warned = False

    def visit(eps: np.ndarray) -> Optional[float]:
        nonlocal worst, best_eps, warned
        view.set(saved + eps)
        try:
            val = _loss_value(loss_builder)
        except NonFiniteError:
            warned = True
            return None
        if val > worst:
            worst = val
            best_eps = eps.copy()
        return val

    try:
        if init is not None:
            eps = np.asarray(init, dtype=np.float64).copy()
            if eps.shape != (view.n,):
                raise ValueError(f"init has shape {eps.shape}, mask has {view.n} coords")
            nrm = np.linalg.norm(eps)
            if nrm > rho:
                eps *= rho / nrm
            visit(eps)
        else:
            eps = np.zeros(view.n)
        # one-shot SAM point from the unperturbed gradient
        view.set(saved)
        try:
            g0 = _masked_gradient(store, view, loss_builder)
        except (NonFiniteError, NonFiniteGradientError):
            return SharpnessProbe(delta=max(0.0, worst - base), base_loss=base,
                                  worst_loss=worst, best_eps=best_eps, rho=rho,
                                  method=method, hit_nonfinite=True)
        sam_eps = sam_perturbation(g0, rho, eps_num)
        val = visit(sam_eps)
        if method == "single_sam_step":
            return SharpnessProbe(delta=max(0.0, worst - base), base_loss=base,
                                  worst_loss=worst, best_eps=best_eps, rho=rho,
                                  method=method, hit_nonfinite=warned)
        if val is not None and np.linalg.norm(sam_eps) > np.linalg.norm(eps):
            eps = sam_eps
        step = 0.5 * rho
        for _ in range(ascent_steps):
            view.set(saved + eps)
            try:
                g = _masked_gradient(store, view, loss_builder)
            except (NonFiniteError, NonFiniteGradientError):
                warned = True
                break
            gn = np.linalg.norm(g)
            if gn < 1e-14:
                break
            eps = eps + step * (g / gn)
            nrm = np.linalg.norm(eps)
            if nrm > rho:
                eps *= rho / nrm
            visit(eps)
    finally:
        view.set(saved)
    return SharpnessProbe(delta=max(0.0, worst - base), base_loss=base,
                          worst_loss=worst, best_eps=best_eps, rho=rho,
                          method=method, hit_nonfinite=warned)


# ---------------------------------------------------------------------------
# curvature


def default_fd_step(view: CoordView) -> float:
    theta = view.get()
    scale = float(np.abs(theta).max()) if theta.size else 0.0
    return 1e-4 * (1.0 + scale)


def hvp(store: ParameterStore, mask: MaskLike, loss_builder: LossBuilder,
        v: np.ndarray, h_fd: Optional[float] = None) -> np.ndarray:
    """Hessian-vector product on the mask via central differences of the
    masked gradient: [g(theta + h v) - g(theta - h v)] / (2h)."""
    view = _as_view(store, mask)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (view.n,):
        raise ValueError(f"v has shape {v.shape}, mask has {view.n} coordinates")
    h = default_fd_step(view) if h_fd is None else float(h_fd)
    if h <= 0:
        raise ValueError(f"h_fd must be positive, got {h}")
    saved = view.get()
    try:
        view.set(saved + h * v)
        g_plus = _masked_gradient(store, view, loss_builder)
        view.set(saved - h * v)
        g_minus = _masked_gradient(store, view, loss_builder)
    finally:
        view.set(saved)
    return (g_plus - g_minus) / (2.0 * h)


@dataclass
class PowerIterResult:
    value: float            # Rayleigh quotient v^T H v at the final unit v
    residual: float         # ||H v - value * v|| at the final unit v
    iterations: int
    converged: bool
    vector: np.ndarray      # final unit direction on mask coordinates

    def to_dict(self) -> dict:
        return {"value": self.value, "residual": self.residual,
                "iterations": self.iterations, "converged": self.converged}


def lambda_max_subspace(store: ParameterStore, mask: MaskLike,
                        loss_builder: LossBuilder, iters: int = 100,
                        tol: float = 1e-6, h_fd: Optional[float] = None,
                        seed: int = 0) -> PowerIterResult:
    """Top (signed) Hessian eigenvalue restricted to the mask coordinates.

    Plain power iteration converges to the eigenvalue of largest magnitude,
    which off-optimum may be a large negative one.  So: a first pass
    estimates the spectral radius; if its Rayleigh quotient is negative or
    it failed to settle, a second pass iterates on H + shift*I, whose
    dominant eigenvalue is the true lambda_max plus the shift.
    """
    view = _as_view(store, mask)
    if view.n == 0:
        raise ValueError("lambda_max needs a nonempty mask")
    apply_h = lambda u: hvp(store, mask, loss_builder, u, h_fd=h_fd)
    rng = rng_for(seed, "power-iter")
    v = rng.standard_normal(view.n)
    v /= np.linalg.norm(v)

    def iterate(shift: float, v0: np.ndarray):
        v, ray, used, ok = v0, math.inf, 0, False
        hv = apply_h(v)
        for i in range(1, iters + 1):
            used = i
            new_ray = float(v @ hv)
            b = hv + shift * v
            bn = np.linalg.norm(b)
            if bn < 1e-14:
                # operator annihilates v: flat direction, Rayleigh ~ 0
                ray, ok = new_ray, True
                break
            if abs(new_ray - ray) <= tol * max(abs(new_ray), 1e-12):
                ray, ok = new_ray, True
                break
            ray = new_ray
            v = b / bn
            hv = apply_h(v)
        return v, hv, ray, used, ok

    v1, hv1, ray1, used1, ok1 = iterate(0.0, v)
    if ok1 and ray1 > 0:
        res = float(np.linalg.norm(hv1 - ray1 * v1))
        return PowerIterResult(value=ray1, residual=res, iterations=used1,
                               converged=True, vector=v1)
    # dominant eigenvalue negative (or no convergence): shift past the
    # spectral radius so the largest eigenvalue becomes dominant.  Restart
    # from a fresh draw: the phase-1 vector may be orthogonal to the target.
    radius = max(abs(ray1), float(np.linalg.norm(hv1)), 1e-12)
    shift = 1.1 * radius
    v0 = rng.standard_normal(view.n)
    v0 /= np.linalg.norm(v0)
    v2, hv2, ray2, used2, ok2 = iterate(shift, v0)
    res = float(np.linalg.norm(hv2 - ray2 * v2))
    return PowerIterResult(value=ray2, residual=res, iterations=used1 + used2,
                           converged=ok2, vector=v2)


# ---------------------------------------------------------------------------
# risk boundary


def predicted_bypass_radius(base_loss: float, lam_max: float,
                            tau_risk: float) -> float:
    """Second-order estimate of how far parameters can move before the loss
    crosses tau_risk: sqrt(2 (tau - L) / lambda), with lambda floored."""
    if tau_risk < base_loss:
        raise ValueError(f"tau_risk {tau_risk} below current loss {base_loss}")
    lam = max(lam_max, LAMBDA_FLOOR)
    return math.sqrt(2.0 * (tau_risk - base_loss) / lam)


@dataclass
class BypassProbe:
    radius: float            # first grid radius with an exceedance; inf if none
    exceeded: bool
    tau_risk: float
    n_directions: int        # random directions; the ascent direction is extra
    grid: list = field(default_factory=list)


def empirical_bypass_radius(store: ParameterStore, mask: MaskLike,
                            loss_builder: LossBuilder, tau_risk: float,
                            radius_grid, n_directions: int = 16,
                            seed: int = 0) -> BypassProbe:
    """Probe actual loss exceedance along random unit directions on the mask
    plus the gradient-ascent direction.

    Returns the smallest grid radius at which any probed direction pushes
    the loss above tau_risk (non-finite evaluations count as exceedances),
    or an infinity marker when none does.
    """
    grid = [float(r) for r in radius_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= 0:
        raise ValueError("radius_grid must be positive and strictly increasing")
    if n_directions < 16:
        raise ValueError(f"need at least 16 probe directions, got {n_directions}")
    view = _as_view(store, mask)
    if view.n == 0:
        raise ValueError("bypass probing needs a nonempty mask")
    rng = rng_for(seed, "bypass-dirs")
    dirs = rng.standard_normal((n_directions, view.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    saved = view.get()
    try:
        g = _masked_gradient(store, view, loss_builder)
        gn = np.linalg.norm(g)
        if gn > 1e-14:
            dirs = np.vstack([dirs, g / gn])
        for r in grid:
            for u in dirs:
                view.set(saved + r * u)
                try:
                    val = _loss_value(loss_builder)
                except NonFiniteError:
                    val = math.inf
                if val > tau_risk:
                    return BypassProbe(radius=r, exceeded=True, tau_risk=tau_risk,
                                       n_directions=n_directions, grid=grid)
    finally:
        view.set(saved)
    return BypassProbe(radius=math.inf, exceeded=False, tau_risk=tau_risk,
                       n_directions=n_directions, grid=grid)


# ---------------------------------------------------------------------------
# concentration across neuron subsets


@dataclass
class ConcentrationCurve:
    """Worst-case increase of nested Top-K / Random-K neuron masks, as a
    fraction of the all-neurons value."""
    k_grid: list
    top_fraction: list
    random_mean: list
    random_sd: list
    n_random_seeds: int
    rho: float
    ascent_steps: int
    total_increase: float    # best known all-neurons worst-case increase
    n_neurons: int
    methodology: str = ("joint nested masks, warm-started projected ascent, "
                        "normalized by the shared all-neurons estimate")

    def to_dict(self) -> dict:
        return {"format": FORMAT_CURVE, "k_grid": self.k_grid,
                "top_fraction": self.top_fraction,
                "random_mean": self.random_mean, "random_sd": self.random_sd,
                "n_random_seeds": self.n_random_seeds, "rho": self.rho,
                "ascent_steps": self.ascent_steps,
                "total_increase": self.total_increase,
                "n_neurons": self.n_neurons, "methodology": self.methodology}

    def table_text(self) -> str:
        lines = [FORMAT_CURVE,
                 f"# rho={self.rho} ascent_steps={self.ascent_steps} "
                 f"seeds={self.n_random_seeds} total={self.total_increase:.6e}",
                 "K,top_fraction,random_mean,random_sd"]
        for k, t, m, s in zip(self.k_grid, self.top_fraction,
                              self.random_mean, self.random_sd):
            lines.append(f"{k},{t:.6f},{m:.6f},{s:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.table_text())


def _chain_estimates(store, index, loss_builder, neuron_order, ks, rho,
                     ascent_steps) -> list:
    """Worst-case estimates over nested prefixes of one neuron ordering.

    The best perturbation at each K seeds the search at the next larger K
    (feasible there: same norm, enlarged support), so estimates are
    nondecreasing by construction.
    """
    estimates = []
    prev_coords: Optional[np.ndarray] = None
    prev_eps: Optional[np.ndarray] = None
    best = 0.0
    for k in ks:
        if k == 0:
            estimates.append(0.0)
            continue
        coords = index.coordinate_ids(store, neuron_order[:k])
        init = None
        if prev_eps is not None and prev_coords is not None:
            init = np.zeros(coords.size)
            init[np.searchsorted(coords, prev_coords)] = prev_eps
        probe = worst_case_loss_increase(store, coords, loss_builder, rho,
                                         method="ascent",
                                         ascent_steps=ascent_steps, init=init)
        best = max(best, probe.delta)
        estimates.append(best)
        prev_coords, prev_eps = coords, probe.best_eps
    return estimates


def concentration_curve(store: ParameterStore, index, loss_builder: LossBuilder,
                        ranking: np.ndarray, rho: float, k_grid,
                        n_random_seeds: int = 5, ascent_steps: int = 10,
                        seed: int = 0) -> ConcentrationCurve:
    """How much of the all-neurons worst-case loss increase is already
    reachable by perturbing only the top-ranked K neurons, versus K random
    neurons (mean and sd over seeded orderings).

    All masks share one perturbation budget rho.  At K = all neurons every
    ordering yields the same mask, so that cell is normalized to exactly 1
    against the best estimate across every chain.
    """
    ranking = np.asarray(ranking, dtype=np.int64)
    n = index.count
    if sorted(ranking.tolist()) != list(range(n)):
        raise ValueError("ranking must be a permutation of all neuron ids")
    ks = sorted({int(k) for k in k_grid})
    if ks and (ks[0] < 0 or ks[-1] > n):
        raise ValueError(f"K grid outside [0, {n}]")
    if ks and ks[-1] == n:
        ks = ks[:-1]
    full = ks + [n]

    top = _chain_estimates(store, index, loss_builder, ranking, full, rho,
                           ascent_steps)
    rand = []
    for s in range(n_random_seeds):
        order = rng_for(seed, "curve-perm", s).permutation(n)
        rand.append(_chain_estimates(store, index, loss_builder, order, full,
                                     rho, ascent_steps))
    rand = np.asarray(rand)

    total = max(top[-1], float(rand[:, -1].max()) if rand.size else 0.0)
    if total <= SHARPNESS_FLOOR:
        raise ValueError(f"all-neurons worst-case increase {total:.3e} is below "
                         f"the measurable floor at rho={rho}")
    top_frac = [min(1.0, t / total) for t in top]
    rmean = [float(np.mean(rand[:, i] / total)) for i in range(len(full))]
    rsd = [float(np.std(rand[:, i] / total)) for i in range(len(full))]
    # K = all: identical mask for every ordering, one shared value
    top_frac[-1] = 1.0
    rmean[-1], rsd[-1] = 1.0, 0.0
    return ConcentrationCurve(k_grid=full, top_fraction=top_frac,
                              random_mean=rmean, random_sd=rsd,
                              n_random_seeds=n_random_seeds, rho=rho,
                              ascent_steps=ascent_steps, total_increase=total,
                              n_neurons=n)


# ---------------------------------------------------------------------------
# assembled report


@dataclass
class GeometryReport:
    checkpoint_hash: str
    mask_mode: str
    mask_coords: int
    base_loss: float
    rho: float
    worst_case: list            # [(rho, delta), ...]
    lambda_max: float
    lambda_residual: float
    lambda_converged: bool
    sharpness: float            # 0.5 * rho^2 * max(lambda_max, 0)
    tau_risk: float
    predicted_radius: float
    empirical_radius: float     # inf when no probed direction exceeded
    n_probe_directions: int

    def to_dict(self) -> dict:
        d = {"format": FORMAT_REPORT}
        d.update({k: getattr(self, k) for k in self.__dataclass_fields__})
        d["empirical_radius"] = (None if math.isinf(self.empirical_radius)
                                 else self.empirical_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryReport":
        if d.get("format") != FORMAT_REPORT:
            raise ValueError(f"unexpected report format {d.get('format')!r}")
        body = {k: v for k, v in d.items() if k != "format"}
        if body.get("empirical_radius") is None:
            body["empirical_radius"] = math.inf
        body["worst_case"] = [tuple(x) for x in body["worst_case"]]
        return cls(**body)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True,
                                         default=float))

    @classmethod
    def load(cls, path) -> "GeometryReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def diagnose(store: ParameterStore, mask: SubspaceMask,
             loss_builder: LossBuilder, rho: float,
             tau_risk: Optional[float] = None, rho_grid=None,
             radius_grid=None, iters: int = 100, tol: float = 1e-6,
             n_directions: int = 16, seed: int = 0,
             checkpoint_hash: str = "") -> GeometryReport:
    """Full geometry readout for one checkpoint and mask.

    tau_risk defaults to base loss + ln 2: one coin-flip of preference loss
    above where the model sits now.
    """
    base = _loss_value(loss_builder)
    if tau_risk is None:
        tau_risk = base + math.log(2.0)
    if rho_grid is None:
        rho_grid = [0.5 * rho, rho, 2.0 * rho]
    if radius_grid is None:
        radius_grid = np.logspace(-2, 2, 41)
    lam = lambda_max_subspace(store, mask, loss_builder, iters=iters, tol=tol,
                              seed=seed)
    worst = [(float(r), worst_case_loss_increase(store, mask, loss_builder,
                                                 float(r)).delta)
             for r in rho_grid]
    probe = empirical_bypass_radius(store, mask, loss_builder, tau_risk,
                                    radius_grid, n_directions=n_directions,
                                    seed=seed)
    return GeometryReport(
        checkpoint_hash=checkpoint_hash, mask_mode=mask.mode,
        mask_coords=mask.coord_count, base_loss=base, rho=rho,
        worst_case=worst, lambda_max=lam.value, lambda_residual=lam.residual,
        lambda_converged=lam.converged,
        sharpness=0.5 * rho * rho * max(lam.value, 0.0), tau_risk=tau_risk,
        predicted_radius=predicted_bypass_radius(base, lam.value, tau_risk),
        empirical_radius=probe.radius, n_probe_directions=probe.n_directions)
