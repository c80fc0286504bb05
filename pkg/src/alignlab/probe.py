"""Linear safety probe and the neuron-selection pipeline built on it.

The probe is a two-class linear classifier trained with full-batch gradient
descent on frozen residual-stream representations.  Its direction
p = w_safe - w_unsafe is compared against every value vector to score
neurons; the top slice of that ranking defines the selective parameter
subspace that the two-pass optimizer perturbs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .model import ValueVectorIndex
from .params import ParameterStore
from .utils import rng_for

FORMAT_PROBE = "alignlab-probe v1"
FORMAT_MASK = "alignlab-mask v1"

SCORE_METRICS = ("abs_inner", "abs_cosine")
MASK_MODES = ("selective", "uniform", "random", "none")


class ProbeDivergence(RuntimeError):
    """Training loss rose for many consecutive epochs; lower the lr."""


@dataclass
class ProbeDirection:
    direction: np.ndarray   # [d_model], w_safe - w_unsafe
    bias: float
    heldout_accuracy: float
    train_loss: float
    epochs_run: int
    pooling: str = "last"
    seed: int = 0

    def predict(self, reps: np.ndarray) -> np.ndarray:
        """+1 / -1 labels; the decision value is <p, h> + bias."""
        return np.where(reps @ self.direction + self.bias >= 0.0, 1, -1)

    def to_dict(self) -> dict:
        return {"format": FORMAT_PROBE, "direction": self.direction.tolist(),
                "bias": self.bias, "heldout_accuracy": self.heldout_accuracy,
                "train_loss": self.train_loss, "epochs_run": self.epochs_run,
                "pooling": self.pooling, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeDirection":
        if d.get("format") != FORMAT_PROBE:
            raise ValueError(f"unexpected probe format {d.get('format')!r}")
        return cls(direction=np.asarray(d["direction"], dtype=np.float64),
                   bias=d["bias"], heldout_accuracy=d["heldout_accuracy"],
                   train_loss=d["train_loss"], epochs_run=d["epochs_run"],
                   pooling=d["pooling"], seed=d["seed"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ProbeDirection":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_probe(reps: np.ndarray, labels: np.ndarray, epochs: int = 600,
                lr: float = 0.5, heldout_frac: float = 0.2, seed: int = 0,
                tol: float = 1e-9, pooling: str = "last") -> ProbeDirection:
    """Fit the two-class linear head and return its difference direction.

    ``reps`` [N, d] are representations from a frozen model; ``labels`` are
    +1 (safe) / -1 (unsafe).  A fixed fraction is held out for the accuracy
    estimate.  Raises on degenerate inputs and on divergence.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if reps.ndim != 2 or labels.shape != (reps.shape[0],):
        raise ValueError(f"bad shapes: reps {reps.shape}, labels {labels.shape}")
    if not set(np.unique(labels)) <= {-1, 1}:
        raise ValueError("labels must be +1 or -1")
    if len(set(np.unique(labels))) < 2:
        raise ValueError("probe training needs both classes present")
    n, d = reps.shape
    n_held = int(math.floor(heldout_frac * n + 0.5))
    if n - n_held < 2:
        raise ValueError("not enough examples left to train after holdout")
    perm = rng_for(seed, "probe-split").permutation(n)
    held, train = perm[:n_held], perm[n_held:]
    if len(set(np.unique(labels[train]))) < 2:
        raise ValueError("holdout split left a single-class training set")

    X = T.constant(reps[train])
    y01 = ((labels[train] + 1) // 2).astype(np.int64)  # class 1 = safe
    store = ParameterStore()
    W = store.add("w", np.zeros((2, d)))
    b = store.add("b", np.zeros(2))

    def epoch_loss() -> T.Tensor:
        logits = T.add(T.matmul(X, W, transpose_b=True), b)
        logp = T.row_log_softmax(logits)
        return T.scale(T.tensor_mean(T.gather_logprob(logp, y01)), -1.0)

    prev = math.inf
    first = None
    rises = 0
    loss_val = math.nan
    epochs_run = 0
    for epoch in range(epochs):
        store.zero_grad()
        loss = epoch_loss()
        loss.backward()
        loss_val = loss.value
        if not np.isfinite(loss_val):
            raise ProbeDivergence(f"non-finite probe loss at epoch {epoch}")
        if first is None:
            first = loss_val
        if loss_val > 10.0 * abs(first) + 50.0:
            raise ProbeDivergence(
                f"probe loss exploded to {loss_val:.3g} at epoch {epoch} "
                f"(started at {first:.3g}); lower the learning rate")
        if loss_val > prev + 1e-12:
            rises += 1
            if rises >= 10:
                raise ProbeDivergence(
                    f"probe loss rose for {rises} consecutive epochs (lr too high?)")
        else:
            rises = 0
        epochs_run = epoch + 1
        if abs(prev - loss_val) < tol:
            break
        prev = loss_val
        W.data -= lr * W.grad
        b.data -= lr * b.grad

    direction = W.data[1] - W.data[0]
    bias = float(b.data[1] - b.data[0])
    if n_held:
        pred = np.where(reps[held] @ direction + bias >= 0.0, 1, -1)
        acc = float(np.mean(pred == labels[held]))
    else:
        acc = math.nan
    return ProbeDirection(direction=direction, bias=bias, heldout_accuracy=acc,
                          train_loss=float(loss_val), epochs_run=epochs_run,
                          pooling=pooling, seed=seed)


# ---------------------------------------------------------------------------
# neuron scoring


@dataclass
class ScoreTable:
    """Per-neuron alignment scores between value vectors and a direction."""
    scores: np.ndarray      # [n_neurons], nonnegative
    metric: str
    vv_source: str
    vector_dim: int

    @property
    def count(self) -> int:
        return int(self.scores.size)

    def ranked_neurons(self) -> np.ndarray:
        """Neuron ids by descending score; ties broken toward smaller id."""
        return np.argsort(-self.scores, kind="stable").astype(np.int64)

    def to_dict(self) -> dict:
        return {"scores": self.scores.tolist(), "metric": self.metric,
                "vv_source": self.vv_source, "vector_dim": self.vector_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        return cls(scores=np.asarray(d["scores"], dtype=np.float64),
                   metric=d["metric"], vv_source=d["vv_source"],
                   vector_dim=d["vector_dim"])


def score_value_vectors(store: ParameterStore, index: ValueVectorIndex,
                        direction: np.ndarray, metric: str = "abs_inner") -> ScoreTable:
    """s_j = |<v_j, p>| (abs_inner) or its cosine-normalized variant."""
    if metric not in SCORE_METRICS:
        raise ValueError(f"unknown metric {metric!r}, have {SCORE_METRICS}")
    direction = np.asarray(direction, dtype=np.float64)
    V = index.matrix(store)  # [n, d]
    if V.shape[1] != direction.shape[0]:
        raise ValueError(f"direction dim {direction.shape[0]} != vector dim {V.shape[1]}")
    inner = np.abs(V @ direction)
    if metric == "abs_cosine":
        norms = np.linalg.norm(V, axis=1) * np.linalg.norm(direction)
        inner = inner / np.maximum(norms, 1e-30)
    return ScoreTable(scores=inner, metric=metric, vv_source=index.source,
                      vector_dim=index.vector_dim)


def probe_to_tokens(direction: np.ndarray, unembedding: np.ndarray,
                    k: int) -> list[tuple[int, float]]:
    """Top-k vocabulary tokens by projection onto the probe direction.

    A readout aid: which tokens the probe direction points toward under the
    unembedding.  Ties resolve toward the smaller token id.
    """
    direction = np.asarray(direction, dtype=np.float64)
    unembedding = np.asarray(unembedding, dtype=np.float64)
    if unembedding.ndim != 2 or unembedding.shape[1] != direction.shape[0]:
        raise ValueError(f"unembedding shape {unembedding.shape} incompatible "
                         f"with direction of dim {direction.shape[0]}")
    if not 1 <= k <= unembedding.shape[0]:
        raise ValueError(f"k={k} outside [1, vocab={unembedding.shape[0]}]")
    proj = unembedding @ direction
    order = np.argsort(-proj, kind="stable")[:k]
    return [(int(t), float(proj[t])) for t in order]


# ---------------------------------------------------------------------------
# subspace masks


@dataclass
class SubspaceMask:
    """A set of parameter coordinates the two-pass optimizer may perturb.

    modes: selective (top-scored neurons), random (size-matched random
    neurons), uniform (every model coordinate), none (empty; disables the
    perturbation entirely).
    """
    mode: str
    coordinate_ids: np.ndarray            # sorted ascending, unique
    neuron_ids: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    fraction: Optional[float] = None
    metric: Optional[str] = None
    seed: Optional[int] = None
    total_coords: Optional[int] = None    # store size at creation, for validation

    def __post_init__(self):
        self.coordinate_ids = np.asarray(self.coordinate_ids, dtype=np.int64)
        self.neuron_ids = np.asarray(self.neuron_ids, dtype=np.int64)
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.coordinate_ids.size:
            d = np.diff(self.coordinate_ids)
            if np.any(d <= 0):
                raise ValueError("coordinate_ids must be strictly increasing")
        if self.mode == "none" and self.coordinate_ids.size:
            raise ValueError("mode 'none' must carry no coordinates")
        if self.mode != "none" and self.coordinate_ids.size == 0:
            raise ValueError(f"mode {self.mode!r} with an empty coordinate set")

    @property
    def coord_count(self) -> int:
        return int(self.coordinate_ids.size)

    def coordinate_ranges(self) -> list[list[int]]:
        """[start, stop) runs of consecutive ids, a compact manifest form."""
        ids = self.coordinate_ids
        if not ids.size:
            return []
        cuts = np.flatnonzero(np.diff(ids) != 1) + 1
        starts = np.concatenate(([0], cuts))
        stops = np.concatenate((cuts, [ids.size]))
        return [[int(ids[a]), int(ids[b - 1]) + 1] for a, b in zip(starts, stops)]

    def to_dict(self) -> dict:
        return {"format": FORMAT_MASK, "mode": self.mode,
                "coord_ranges": self.coordinate_ranges(),
                "neuron_ids": self.neuron_ids.tolist(),
                "fraction": self.fraction, "metric": self.metric,
                "seed": self.seed, "total_coords": self.total_coords,
                "coord_count": self.coord_count}

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceMask":
        if d.get("format") != FORMAT_MASK:
            raise ValueError(f"unexpected mask format {d.get('format')!r}")
        ids = [np.arange(a, b, dtype=np.int64) for a, b in d["coord_ranges"]]
        coords = np.concatenate(ids) if ids else np.array([], dtype=np.int64)
        mask = cls(mode=d["mode"], coordinate_ids=coords,
                   neuron_ids=np.asarray(d["neuron_ids"], dtype=np.int64),
                   fraction=d["fraction"], metric=d["metric"], seed=d["seed"],
                   total_coords=d["total_coords"])
        if mask.coord_count != d["coord_count"]:
            raise ValueError("mask coord_count does not match its ranges")
        return mask

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "SubspaceMask":
        return cls.from_dict(json.loads(Path(path).read_text()))


def select_topk(table: ScoreTable, fraction: float, store: ParameterStore,
                index: ValueVectorIndex) -> SubspaceMask:
    """Selective mask over the ceil(fraction * count) best-scored neurons."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    if table.count != index.count:
        raise ValueError(f"score table covers {table.count} neurons, "
                         f"index has {index.count}")
    k = math.ceil(fraction * table.count)
    neuron_ids = table.ranked_neurons()[:k]
    coords = index.coordinate_ids(store, neuron_ids)
    return SubspaceMask(mode="selective", coordinate_ids=coords,
                        neuron_ids=neuron_ids, fraction=fraction,
                        metric=table.metric, total_coords=store.size)


def random_neuron_mask(store: ParameterStore, index: ValueVectorIndex,
                       n_neurons: int, seed: int) -> SubspaceMask:
    """Size-matched control: uniformly random neurons from the same index."""
    if not 1 <= n_neurons <= index.count:
        raise ValueError(f"n_neurons {n_neurons} outside [1, {index.count}]")
    rng = rng_for(seed, "random-mask")
    neuron_ids = np.sort(rng.choice(index.count, size=n_neurons, replace=False))
    coords = index.coordinate_ids(store, neuron_ids)
    return SubspaceMask(mode="random", coordinate_ids=coords,
                        neuron_ids=neuron_ids.astype(np.int64), seed=seed,
                        total_coords=store.size)


def uniform_mask(store: ParameterStore) -> SubspaceMask:
    """Every coordinate of the model: classic non-selective perturbation."""
    return SubspaceMask(mode="uniform",
                        coordinate_ids=np.arange(store.size, dtype=np.int64),
                        total_coords=store.size)


def empty_mask(store: ParameterStore) -> SubspaceMask:
    return SubspaceMask(mode="none", coordinate_ids=np.array([], dtype=np.int64),
                        total_coords=store.size)


def build_mask(mode: str, store: ParameterStore, index: ValueVectorIndex,
               table: Optional[ScoreTable] = None, fraction: float = 0.01,
               seed: int = 0) -> SubspaceMask:
    """One-stop construction used by the harness; 'random' is size-matched
    to what 'selective' would pick at the same fraction."""
    if mode == "selective":
        if table is None:
            raise ValueError("selective mask needs a score table")
        return select_topk(table, fraction, store, index)
    if mode == "random":
        k = math.ceil(fraction * index.count)
        return random_neuron_mask(store, index, k, seed)
    if mode == "uniform":
        return uniform_mask(store)
    if mode == "none":
        return empty_mask(store)
    raise ValueError(f"unknown mask mode {mode!r}")
