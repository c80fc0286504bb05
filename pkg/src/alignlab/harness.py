"""Config-driven experiment pipeline.

One ExperimentConfig describes a whole study: the model, the synthetic
safety task, the preference loss, the two-pass optimizer, probe settings,
data sizes and seeds.  Pipeline stages write their artifacts into a fixed
workspace layout under the config's output directory:

    data/       preference triples, probe examples, eval pairs, prompts
    sft/        reference checkpoints (one per seed) and their metrics
    probe/      probe direction, neuron scores, subspace masks (per seed)
    train/      one directory per aligned run: metrics, checkpoints, record
    eval/       evaluation summaries
    sweep/      label-noise sweep cells and summary table
    ablate/     mask-mode ablation cells and summary table
    figure1/    concentration curve table and summary
    geometry/   per-checkpoint geometry reports

Every artifact embeds the config hash; evaluation refuses checkpoints whose
recorded config or task hash does not match.  All randomness flows through
rng_for(seed, tag), so a rerun from the same config and seed reproduces
every file byte-for-byte (wall-clock columns excluded).
"""

import dataclasses
import json
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (PreferenceTriple, SafetyTaskSpec, build_probe_set,
                   default_task_spec, eval_preference_pairs, eval_prompt_suite,
                   flip_labels, generate_preference_dataset, load_preferences,
                   load_probe_examples, load_prompts, safety_oracle,
                   save_preferences, save_probe_examples, save_prompts)
from .geometry import (GeometryReport, concentration_curve, diagnose,
                       lambda_max_subspace)
from .losses import (LossSpec, TrainedRewardScorer, UnsafeFractionReward,
                     pair_scores, preference_loss_with_margins,
                     reference_pair_logprobs)
from .model import ModelConfig, PolicyModel
from .probe import ScoreTable, SubspaceMask, build_mask, score_value_vectors, train_probe
from .sam import NonFiniteGradientError, SelectiveSam, SelectiveSamConfig
from .utils import hash_file, hash_json, rng_for

FORMAT_CONFIG = "alignlab-config v1"
FORMAT_METRICS = "alignlab-metrics v1"
FORMAT_RECORD = "alignlab-runrecord v1"
FORMAT_SCORES = "alignlab-scores v1"
FORMAT_TABLE = "alignlab-table v1"

MASK_MODES = ("none", "random", "uniform", "selective")
SUITES = ("in_dist", "ood_proxy")


class MissingArtifact(FileNotFoundError):
    """A pipeline stage needs a file an earlier stage has not produced."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Everything one study needs; sub-configs carry their own validation."""
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SafetyTaskSpec = field(default_factory=default_task_spec)
    loss: LossSpec = field(default_factory=LossSpec)
    sam: SelectiveSamConfig = field(default_factory=SelectiveSamConfig)
    mask_mode: str = "selective"
    # probe stage
    probe_metric: str = "abs_inner"
    probe_fraction: float = 0.01
    probe_epochs: int = 600
    probe_lr: float = 0.5
    probe_pooling: str = "last"
    reward: str = "unsafe_fraction"       # rm_bce target source: unsafe_fraction | trained
    # data sizes
    flip_rate: float = 0.0
    n_train: int = 4000
    n_probe_safe: int = 128
    n_probe_unsafe: int = 128
    n_eval_pairs: int = 256
    n_eval_prompts: int = 128
    # reference pre-training
    sft_steps: int = 300
    sft_lr: float = 0.01
    sft_batch: int = 32
    sft_update: str = "adam"
    # aligned training
    train_steps: int = 2000
    batch_size: int = 32
    snapshot_every: int = 0               # 0 disables mid-run checkpoints
    eval_every: int = 0                   # 0 disables periodic eval columns
    lambda_every: int = 0                 # 0 disables periodic curvature column
    # grids for sweep / ablation commands
    sweep_rates: tuple = (0.0, 0.1, 0.2, 0.4)
    sweep_kinds: tuple = ("dpo", "rm_bce")
    sweep_modes: tuple = ("none", "selective")
    ablate_modes: tuple = MASK_MODES
    # figure-1 style concentration measurement
    curve_rho: float = 1.0
    curve_fractions: tuple = (0.005, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0)
    curve_seeds: int = 5
    curve_batch: int = 64
    curve_ascent_steps: int = 10
    # geometry reports
    diag_iters: int = 150
    diag_tol: float = 1e-6
    diag_directions: int = 16
    diag_batch: int = 64
    seeds: tuple = (0,)
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        for name in ("sweep_rates", "sweep_kinds", "sweep_modes",
                     "ablate_modes", "curve_fractions"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if any(m not in MASK_MODES for m in (*self.sweep_modes, *self.ablate_modes)):
            raise ValueError("sweep/ablate modes must be valid mask modes")
        if self.reward not in ("unsafe_fraction", "trained"):
            raise ValueError(f"unknown reward source {self.reward!r}")
        if self.sft_update not in ("sgd", "adam"):
            raise ValueError(f"unknown sft_update {self.sft_update!r}")
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError(f"flip_rate {self.flip_rate} outside [0, 1]")
        if any(r < 0.0 or r > 1.0 for r in self.sweep_rates):
            raise ValueError("sweep rates outside [0, 1]")
        for name in ("n_train", "n_probe_safe", "n_probe_unsafe", "n_eval_pairs",
                     "n_eval_prompts", "sft_steps", "sft_batch", "train_steps",
                     "batch_size", "curve_seeds", "curve_batch", "diag_iters",
                     "diag_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size > self.n_train:
            raise ValueError("batch_size exceeds the training set size")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction outside (0, 1]")
        if self.model.vocab_size != self.task.vocab_size:
            raise ValueError(f"model vocab {self.model.vocab_size} != task "
                             f"vocab {self.task.vocab_size}")
        if self.diag_directions < 16:
            raise ValueError("diag_directions must be at least 16")

    def to_dict(self) -> dict:
        d = {"format": FORMAT_CONFIG,
             "model": self.model.to_dict(), "task": self.task.to_dict(),
             "loss": self.loss.to_dict(), "sam": self.sam.to_dict()}
        skip = {"model", "task", "loss", "sam"}
        for f in dataclasses.fields(self):
            if f.name not in skip:
                v = getattr(self, f.name)
                d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if d.get("format") != FORMAT_CONFIG:
            raise ValueError(f"unexpected config format {d.get('format')!r}")
        kw = {k: v for k, v in d.items() if k != "format"}
        kw["model"] = ModelConfig.from_dict(kw["model"])
        kw["task"] = SafetyTaskSpec.from_dict(kw["task"])
        kw["loss"] = LossSpec.from_dict(kw["loss"])
        kw["sam"] = SelectiveSamConfig.from_dict(kw["sam"])
        return cls(**kw)

    @property
    def config_hash(self) -> str:
        return hash_json(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path)


# ---------------------------------------------------------------------------
# workspace layout


def run_label(kind: str, mode: str, rate: float, seed: int) -> str:
    return f"{kind}-{mode}-r{round(rate * 100):03d}-s{seed}"


class Workspace:
    """Path bookkeeping for one config's artifact tree."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run the producing stage first")
        return p

    def rel(self, p: Path) -> str:
        return str(Path(p).relative_to(self.root))

    # data
    @property
    def train_file(self): return self.root / "data" / "train.jsonl"
    @property
    def probe_file(self): return self.root / "data" / "probe.jsonl"
    @property
    def eval_pairs_file(self): return self.root / "data" / "eval_pairs.jsonl"

    def prompts_file(self, suite: str):
        return self.root / "data" / f"prompts_{suite}.jsonl"

    # per-seed reference and probe artifacts
    def ref_ckpt(self, seed: int): return self.root / "sft" / f"ref-s{seed}.ckpt"
    def sft_metrics(self, seed: int): return self.root / "sft" / f"metrics-s{seed}.csv"
    def probe_json(self, seed: int): return self.root / "probe" / f"probe-s{seed}.json"
    def scores_json(self, seed: int): return self.root / "probe" / f"scores-s{seed}.json"

    def mask_json(self, mode: str, seed: int):
        return self.root / "probe" / f"mask-{mode}-s{seed}.json"

    def run_dir(self, label: str): return self.root / "train" / label


# ---------------------------------------------------------------------------
# metrics stream


@dataclass
class MetricsRow:
    step: int
    loss: float
    margin: float
    sam_fired: bool
    eps_norm: float
    wall_ms: float
    lambda_max: Optional[float] = None
    asr_proxy: Optional[float] = None
    pref_accuracy: Optional[float] = None

    HEADER = "step,loss,margin,sam_fired,eps_norm,wall_ms,lambda_max,asr_proxy,pref_accuracy"

    def line(self) -> str:
        opt = [("" if v is None else repr(float(v)))
               for v in (self.lambda_max, self.asr_proxy, self.pref_accuracy)]
        return (f"{self.step},{self.loss!r},{self.margin!r},{int(self.sam_fired)},"
                f"{self.eps_norm!r},{self.wall_ms:.3f}," + ",".join(opt))


def write_metrics(path, rows: list, cfg_hash: str, label: str) -> None:
    lines = [FORMAT_METRICS, f"# config {cfg_hash} run {label}", MetricsRow.HEADER]
    lines += [r.line() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != FORMAT_METRICS:
        raise ValueError(f"{path} is not a metrics file")
    out = []
    for line in lines[3:]:
        c = line.split(",")
        out.append(MetricsRow(
            step=int(c[0]), loss=float(c[1]), margin=float(c[2]),
            sam_fired=bool(int(c[3])), eps_norm=float(c[4]), wall_ms=float(c[5]),
            lambda_max=float(c[6]) if c[6] else None,
            asr_proxy=float(c[7]) if c[7] else None,
            pref_accuracy=float(c[8]) if c[8] else None))
    return out


def canonical_metrics_hash(path) -> str:
    """Metrics digest with the wall-clock column zeroed.

    Wall time is the one column that legitimately differs between identical
    reruns, so reproducibility checks and run records hash this canonical
    form instead of the raw bytes.
    """
    lines = Path(path).read_text().splitlines()
    body = lines[:3]
    for line in lines[3:]:
        c = line.split(",")
        c[5] = "0"
        body.append(",".join(c))
    return hash_json(body)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    config_hash: str
    label: str
    seed: int
    kind: str
    mode: str
    flip_rate: float
    steps_run: int
    final_loss: float
    diverged: bool
    artifacts: dict                  # relative path -> sha256
    metrics_canonical: str
    eval_summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"format": FORMAT_RECORD}
        d.update(dataclasses.asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("format") != FORMAT_RECORD:
            raise ValueError(f"unexpected record format {d.get('format')!r}")
        return cls(**{k: v for k, v in d.items() if k != "format"})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def verify(self, root) -> None:
        """Every referenced artifact must exist with a matching checksum."""
        for rel, digest in self.artifacts.items():
            p = Path(root) / rel
            if not p.exists():
                raise MissingArtifact(f"recorded artifact {rel} is missing")
            actual = (canonical_metrics_hash(p) if rel.endswith("metrics.csv")
                      else hash_file(p))
            if actual != digest:
                raise ValueError(f"artifact {rel} checksum mismatch")


# ---------------------------------------------------------------------------
# stage: data generation


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    """Write the full synthetic dataset family for this config's task."""
    ws = Workspace(cfg)
    task = cfg.task
    triples = generate_preference_dataset(task, cfg.n_train)
    save_preferences(ws.path("data", "train.jsonl"), triples, task)
    probe_examples = build_probe_set(task, cfg.n_probe_safe, cfg.n_probe_unsafe)
    save_probe_examples(ws.path("data", "probe.jsonl"), probe_examples, task)
    pairs = eval_preference_pairs(task, cfg.n_eval_pairs)
    save_preferences(ws.path("data", "eval_pairs.jsonl"), pairs, task)
    out = {"train": str(ws.train_file), "probe": str(ws.probe_file),
           "eval_pairs": str(ws.eval_pairs_file)}
    for suite in SUITES:
        prompts = eval_prompt_suite(task, cfg.n_eval_prompts, family=suite)
        save_prompts(ws.path("data", f"prompts_{suite}.jsonl"), prompts, task, suite)
        out[f"prompts_{suite}"] = str(ws.prompts_file(suite))
    cfg.save(ws.path("config.json"))
    return out


def _load_train_triples(ws: Workspace) -> list:
    triples, task, _ = load_preferences(ws.require("data", "train.jsonl"))
    if task.task_hash() != ws.cfg.task.task_hash():
        raise ValueError("training data was generated for a different task")
    return triples


# ---------------------------------------------------------------------------
# stage: reference pre-training (SFT on chosen responses)


def run_sft(cfg: ExperimentConfig, seed: int, triples: list) -> tuple:
    """Train a fresh model on chosen responses by next-token likelihood.

    Returns (policy, rows, diverged).  On a non-finite step the loop stops
    and the parameters from the last good step are returned.
    """
    from . import tensor as T
    from .model import encode_batch
    policy = PolicyModel.initialize(replace(cfg.model, init_seed=seed))
    opt = SelectiveSam(policy.params, _empty_mask_for(policy),
                       SelectiveSamConfig(rho=None, tau_sam=cfg.sam.tau_sam,
                                          lr=cfg.sft_lr,
                                          base_update=cfg.sft_update))
    rng = rng_for(seed, "sft-batches")
    chosen = [t.chosen_sequence() for t in triples]
    rows, diverged = [], False
    for _ in range(cfg.sft_steps):
        idx = rng.integers(0, len(chosen), size=cfg.sft_batch)
        batch = encode_batch([chosen[i] for i in idx])

        def builder():
            lp = policy.response_logprob(batch, length_normalized=True)
            return T.scale(T.tensor_mean(lp), -1.0)

        try:
            m = opt.step(builder)
        except NonFiniteGradientError:
            diverged = True
            break
        rows.append(MetricsRow(step=m.step, loss=m.loss, margin=0.0,
                               sam_fired=False, eps_norm=0.0, wall_ms=m.wall_ms))
    return policy, rows, diverged


def _empty_mask_for(policy: PolicyModel) -> SubspaceMask:
    return SubspaceMask(mode="none", coordinate_ids=np.array([], dtype=np.int64),
                        total_coords=policy.params.size)


def cmd_sft(cfg: ExperimentConfig, seeds=None) -> list:
    """Reference checkpoints, one per seed; frozen for all aligned runs."""
    ws = Workspace(cfg)
    triples = _load_train_triples(ws)
    out = []
    for seed in (cfg.seeds if seeds is None else seeds):
        policy, rows, diverged = run_sft(cfg, seed, triples)
        write_metrics(ws.path("sft", f"metrics-s{seed}.csv"), rows,
                      cfg.config_hash, f"sft-s{seed}")
        meta = {"config_hash": cfg.config_hash, "task_hash": cfg.task.task_hash(),
                "seed": seed, "role": "reference", "diverged": diverged,
                "steps": len(rows)}
        path = ws.path("sft", f"ref-s{seed}.ckpt")
        save_checkpoint(path, policy, meta)
        out.append(str(path))
    return out


def load_reference(ws: Workspace, seed: int) -> PolicyModel:
    policy, meta = load_checkpoint(ws.require("sft", f"ref-s{seed}.ckpt"))
    if meta.get("task_hash") != ws.cfg.task.task_hash():
        raise ValueError("reference checkpoint belongs to a different task")
    return policy


# ---------------------------------------------------------------------------
# stage: probe training and mask construction


def cmd_train_probe(cfg: ExperimentConfig, seeds=None) -> list:
    """Fit the safety probe on frozen reference representations, score the
    value vectors, and write every mask mode's coordinate set."""
    ws = Workspace(cfg)
    examples, task = load_probe_examples(ws.require("data", "probe.jsonl"))
    if task.task_hash() != cfg.task.task_hash():
        raise ValueError("probe examples belong to a different task")
    labels = np.array([e.label for e in examples])
    out = []
    for seed in (cfg.seeds if seeds is None else seeds):
        ref = load_reference(ws, seed)
        reps = ref.representations([e.sequence() for e in examples],
                                   pooling=cfg.probe_pooling)
        # probe_lr is quoted at unit feature scale; gradient descent on the
        # logistic loss is stable for steps ~ 1/lambda_max of the raw second
        # moment, which varies by orders of magnitude across checkpoints
        lam = float(np.linalg.eigvalsh(reps.T @ reps / len(reps))[-1])
        probe = train_probe(reps, labels, epochs=cfg.probe_epochs,
                            lr=cfg.probe_lr / max(lam, 1e-12), seed=seed,
                            pooling=cfg.probe_pooling)
        probe.save(ws.path("probe", f"probe-s{seed}.json"))
        table = score_value_vectors(ref.params, ref.vv_index, probe.direction,
                                    metric=cfg.probe_metric)
        ws.path("probe", f"scores-s{seed}.json").write_text(
            json.dumps({"format": FORMAT_SCORES, "config_hash": cfg.config_hash,
                        "seed": seed, **table.to_dict()}, sort_keys=True))
        for mode in MASK_MODES:
            mask = build_mask(mode, ref.params, ref.vv_index, table=table,
                              fraction=cfg.probe_fraction, seed=seed)
            mask.save(ws.path("probe", f"mask-{mode}-s{seed}.json"))
        out.append({"seed": seed, "heldout_accuracy": probe.heldout_accuracy,
                    "probe": str(ws.probe_json(seed))})
    return out


def load_mask(ws: Workspace, mode: str, seed: int) -> SubspaceMask:
    return SubspaceMask.load(ws.require("probe", f"mask-{mode}-s{seed}.json"))


def load_scores(ws: Workspace, seed: int) -> ScoreTable:
    d = json.loads(ws.require("probe", f"scores-s{seed}.json").read_text())
    if d.get("format") != FORMAT_SCORES:
        raise ValueError("unexpected score table format")
    return ScoreTable.from_dict({k: v for k, v in d.items()
                                 if k not in ("format", "config_hash", "seed")})


# ---------------------------------------------------------------------------
# reward models for the reward-consistency loss


def make_reward_model(cfg: ExperimentConfig, ws: Optional[Workspace] = None):
    if cfg.reward == "unsafe_fraction":
        return UnsafeFractionReward(cfg.task)
    examples, _ = load_probe_examples(ws.require("data", "probe.jsonl"))
    scorer = TrainedRewardScorer(cfg.task)
    scorer.fit([tuple(e.tokens[e.prompt_len:]) for e in examples],
               [1 if e.label > 0 else 0 for e in examples])
    return scorer


# ---------------------------------------------------------------------------
# stage: aligned preference training


def _periodic_eval(policy, ref, spec, eval_pairs, prompts, task):
    ps = pair_scores(policy, ref, eval_pairs, spec)
    return asr_proxy(policy, prompts, task), ps.accuracy


def run_training(cfg: ExperimentConfig, policy: PolicyModel, ref: PolicyModel,
                 triples: list, mask: SubspaceMask, spec: LossSpec, seed: int,
                 reward_model=None, snapshot_dir: Optional[Path] = None,
                 eval_pairs: Optional[list] = None,
                 eval_prompts: Optional[list] = None,
                 lambda_mask: Optional[SubspaceMask] = None) -> tuple:
    """The core loop: selective two-pass optimization of a preference loss.

    Returns (rows, diverged, snapshots).  Reference log-probs for the whole
    dataset are computed once up front; the reference is frozen so they
    never change.
    """
    from . import tensor as T  # noqa: F401  (loss builders pull the engine)
    opt = SelectiveSam(policy.params, mask, cfg.sam)
    rng = rng_for(seed, "batches")
    need_ref = spec.kind != "rm_bce"
    ref_w = ref_l = None
    if need_ref:
        ref_w, ref_l = _dataset_reference_logprobs(ref, triples, spec, cfg.batch_size)
    rows, snapshots, diverged = [], [], False
    cell = {}
    for _ in range(cfg.train_steps):
        idx = rng.integers(0, len(triples), size=cfg.batch_size)
        batch = [triples[i] for i in idx]
        lps = (ref_w[idx], ref_l[idx]) if need_ref else None
        cell.clear()

        def builder():
            loss, margins = preference_loss_with_margins(
                policy, ref if need_ref else None, batch, spec,
                reward_model=reward_model, ref_lps=lps)
            cell.setdefault("margins", margins)  # first pass only: base point
            return loss

        try:
            m = opt.step(builder)
        except NonFiniteGradientError:
            diverged = True
            break
        row = MetricsRow(step=m.step, loss=m.loss,
                         margin=float(np.mean(cell["margins"])),
                         sam_fired=m.sam_fired, eps_norm=m.eps_norm,
                         wall_ms=m.wall_ms)
        if cfg.eval_every and m.step % cfg.eval_every == 0 and eval_pairs:
            row.asr_proxy, row.pref_accuracy = _periodic_eval(
                policy, ref, spec, eval_pairs, eval_prompts or [], cfg.task)
        if cfg.lambda_every and m.step % cfg.lambda_every == 0 and lambda_mask:
            sub = eval_pairs[:min(32, len(eval_pairs))] if eval_pairs else triples[:32]
            r_lps = reference_pair_logprobs(ref, sub, spec.length_normalized)
            row.lambda_max = lambda_max_subspace(
                policy.params, lambda_mask,
                lambda: preference_loss_with_margins(policy, ref, sub, spec,
                                                     ref_lps=r_lps)[0],
                iters=40, tol=1e-4, seed=seed).value
        rows.append(row)
        if (snapshot_dir is not None and cfg.snapshot_every
                and m.step % cfg.snapshot_every == 0):
            Path(snapshot_dir).mkdir(parents=True, exist_ok=True)
            p = Path(snapshot_dir) / f"step-{m.step:05d}.ckpt"
            save_checkpoint(p, policy, {"config_hash": cfg.config_hash,
                                        "task_hash": cfg.task.task_hash(),
                                        "seed": seed, "step": m.step,
                                        "role": "snapshot"})
            snapshots.append(p)
    return rows, diverged, snapshots


def _dataset_reference_logprobs(ref, triples, spec, batch_size):
    """Frozen per-triple reference log-probs, computed in chunks."""
    ws_, ls_ = [], []
    for lo in range(0, len(triples), max(batch_size, 64)):
        chunk = triples[lo:lo + max(batch_size, 64)]
        w, l = reference_pair_logprobs(ref, chunk, spec.length_normalized)
        ws_.append(w)
        ls_.append(l)
    return np.concatenate(ws_), np.concatenate(ls_)


def cmd_train(cfg: ExperimentConfig, seed: Optional[int] = None,
              kind: Optional[str] = None, mode: Optional[str] = None,
              flip_rate: Optional[float] = None) -> RunRecord:
    """One aligned run: loss kind x mask mode x flip rate x seed.

    Defaults come from the config; arguments override single cells so the
    sweep commands can reuse this path.
    """
    ws = Workspace(cfg)
    seed = cfg.seeds[0] if seed is None else seed
    kind = cfg.loss.kind if kind is None else kind
    mode = cfg.mask_mode if mode is None else mode
    rate = cfg.flip_rate if flip_rate is None else flip_rate
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    spec = cfg.loss.with_kind(kind)
    label = run_label(kind, mode, rate, seed)

    triples = _load_train_triples(ws)
    if rate > 0.0:
        triples = flip_labels(triples, rate, seed)
    ref = load_reference(ws, seed)
    mask = load_mask(ws, mode, seed)
    reward_model = make_reward_model(cfg, ws) if kind == "rm_bce" else None
    eval_pairs = eval_prompts = None
    if cfg.eval_every:
        eval_pairs, _, _ = load_preferences(ws.require("data", "eval_pairs.jsonl"))
        prompts, _, _ = load_prompts(ws.require("data", "prompts_in_dist.jsonl"))
        eval_prompts = prompts[:32]
    lambda_mask = None
    if cfg.lambda_every:
        lambda_mask = load_mask(ws, "selective", seed)

    run_dir = ws.run_dir(label)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    snap_dir = run_dir / "snaps"

    policy = ref.clone()
    rows, diverged, snapshots = run_training(
        cfg, policy, ref, triples, mask, spec, seed,
        reward_model=reward_model, snapshot_dir=snap_dir,
        eval_pairs=eval_pairs, eval_prompts=eval_prompts,
        lambda_mask=lambda_mask)

    metrics_path = run_dir / "metrics.csv"
    write_metrics(metrics_path, rows, cfg.config_hash, label)
    final_path = run_dir / "final.ckpt"
    save_checkpoint(final_path, policy,
                    {"config_hash": cfg.config_hash, "task_hash": cfg.task.task_hash(),
                     "seed": seed, "kind": kind, "mode": mode, "flip_rate": rate,
                     "step": len(rows), "role": "aligned", "diverged": diverged})
    artifacts = {ws.rel(final_path): hash_file(final_path),
                 ws.rel(metrics_path): canonical_metrics_hash(metrics_path)}
    for p in snapshots:
        artifacts[ws.rel(p)] = hash_file(p)
    record = RunRecord(config_hash=cfg.config_hash, label=label, seed=seed,
                       kind=kind, mode=mode, flip_rate=rate, steps_run=len(rows),
                       final_loss=rows[-1].loss if rows else math.nan,
                       diverged=diverged, artifacts=artifacts,
                       metrics_canonical=canonical_metrics_hash(metrics_path))
    record.save(run_dir / "record.json")
    return record


# ---------------------------------------------------------------------------
# stage: evaluation


def asr_proxy(policy, prompts: list, task: SafetyTaskSpec,
              max_new_tokens: Optional[int] = None) -> float:
    """Fraction of greedy generations the safety oracle marks unsafe."""
    if not prompts:
        raise ValueError("empty evaluation suite")
    budget = task.response_len[1] if max_new_tokens is None else max_new_tokens
    unsafe = 0
    for prompt in prompts:
        seq = policy.generate(np.asarray(prompt, dtype=np.int64), budget)
        unsafe += int(not safety_oracle(seq.response, task))
    return unsafe / len(prompts)


def evaluate_policy(cfg: ExperimentConfig, policy: PolicyModel,
                    ref: PolicyModel, suite: str) -> dict:
    """ASR proxy on the suite's prompts plus clean-pair preference metrics."""
    ws = Workspace(cfg)
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}, have {SUITES}")
    prompts, family, _ = load_prompts(ws.require("data", f"prompts_{suite}.jsonl"))
    if family != suite:
        raise ValueError(f"prompt file family {family!r} does not match {suite!r}")
    pairs, task, _ = load_preferences(ws.require("data", "eval_pairs.jsonl"))
    if task.task_hash() != cfg.task.task_hash():
        raise ValueError("eval pairs belong to a different task")
    ps = pair_scores(policy, ref, pairs, cfg.loss)
    return {"suite": suite, "asr_proxy": asr_proxy(policy, prompts, cfg.task),
            "pref_accuracy": ps.accuracy, "mean_margin": ps.mean_margin,
            "n_prompts": len(prompts), "n_pairs": len(pairs),
            "config_hash": cfg.config_hash}


def cmd_eval(cfg: ExperimentConfig, checkpoint, suite: str = "in_dist",
             out_path=None) -> dict:
    """Evaluate a checkpoint file; refuses config or task hash mismatches."""
    ws = Workspace(cfg)
    policy, meta = load_checkpoint(checkpoint)
    if meta.get("task_hash") != cfg.task.task_hash():
        raise ValueError(f"checkpoint task hash {meta.get('task_hash')!r} does "
                         f"not match the configured task")
    if meta.get("config_hash") != cfg.config_hash:
        raise ValueError("checkpoint was produced under a different config")
    ref = load_reference(ws, int(meta.get("seed", cfg.seeds[0])))
    summary = evaluate_policy(cfg, policy, ref, suite)
    summary["checkpoint"] = str(checkpoint)
    summary["checkpoint_hash"] = hash_file(checkpoint)
    if out_path is None:
        name = Path(checkpoint).stem
        out_path = ws.path("eval", f"{name}-{suite}.json")
    Path(out_path).write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


# ---------------------------------------------------------------------------
# grid commands: noise sweep and geometry ablation


def _run_cell(payload: dict) -> dict:
    """One (kind, mode, rate, seed) training + clean eval, process-safe."""
    cfg = ExperimentConfig.from_dict(payload["config"])
    record = cmd_train(cfg, seed=payload["seed"], kind=payload["kind"],
                       mode=payload["mode"], flip_rate=payload["rate"])
    ws = Workspace(cfg)
    policy, _ = load_checkpoint(ws.run_dir(record.label) / "final.ckpt")
    ref = load_reference(ws, payload["seed"])
    cell = {"kind": payload["kind"], "mode": payload["mode"],
            "rate": payload["rate"], "seed": payload["seed"],
            "label": record.label, "final_loss": record.final_loss,
            "diverged": record.diverged}
    for suite in payload["suites"]:
        s = evaluate_policy(cfg, policy, ref, suite)
        tag = "" if suite == "in_dist" else "_ood"
        cell[f"asr_proxy{tag}"] = s["asr_proxy"]
        if suite == "in_dist":
            cell["pref_accuracy"] = s["pref_accuracy"]
            cell["mean_margin"] = s["mean_margin"]
    record.eval_summary = {k: v for k, v in cell.items()
                           if k not in ("kind", "mode", "rate", "seed", "label")}
    record.save(ws.run_dir(record.label) / "record.json")
    return cell


def _run_grid(cfg: ExperimentConfig, cells: list, suites: list,
              threads: int = 1) -> list:
    payloads = [{"config": cfg.to_dict(), "kind": kind, "mode": mode,
                 "rate": rate, "seed": seed, "suites": suites}
                for kind, mode, rate, seed in cells]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]
    got = {(c["kind"], c["mode"], c["rate"], c["seed"]) for c in results}
    missing = [c for c in cells if c not in got]
    if missing:
        raise RuntimeError(f"grid incomplete, missing cells: {missing}")
    return results


def _write_table(path, rows: list, columns: list, cfg_hash: str) -> None:
    lines = [FORMAT_TABLE, f"# config {cfg_hash}", ",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_noise_sweep(cfg: ExperimentConfig, rates=None, threads: int = 1):
    """Corrupt labels at each rate, train every (kind, mode, seed), evaluate
    on clean held-out data; one row per cell."""
    rates = list(cfg.sweep_rates if rates is None else rates)
    if any(r < 0 or r > 1 for r in rates):
        raise ValueError("rates outside [0, 1]")
    cells = [(k, m, float(r), s) for r in rates for k in cfg.sweep_kinds
             for m in cfg.sweep_modes for s in cfg.seeds]
    results = _run_grid(cfg, cells, ["in_dist"], threads=threads)
    results.sort(key=lambda c: (c["rate"], c["kind"], c["mode"], c["seed"]))
    ws = Workspace(cfg)
    for c in results:
        ws.path("sweep", f"{c['label']}.json").write_text(
            json.dumps(c, sort_keys=True))
    out = ws.path("sweep", "summary.csv")
    _write_table(out, results, ["rate", "kind", "mode", "seed", "pref_accuracy",
                                "mean_margin", "asr_proxy", "final_loss",
                                "diverged"], cfg.config_hash)
    return out


def cmd_ablate_geometry(cfg: ExperimentConfig, threads: int = 1):
    """Mask-mode ablation at the configured loss: {none, random, uniform,
    selective} x {in_dist, ood_proxy} ASR, shared data and reference."""
    cells = [(cfg.loss.kind, m, float(cfg.flip_rate), s)
             for m in cfg.ablate_modes for s in cfg.seeds]
    results = _run_grid(cfg, cells, list(SUITES), threads=threads)
    results.sort(key=lambda c: (c["mode"], c["seed"]))
    ws = Workspace(cfg)
    for c in results:
        ws.path("ablate", f"{c['label']}.json").write_text(
            json.dumps(c, sort_keys=True))
    out = ws.path("ablate", "summary.csv")
    _write_table(out, results, ["mode", "seed", "asr_proxy", "asr_proxy_ood",
                                "pref_accuracy", "mean_margin", "final_loss",
                                "diverged"], cfg.config_hash)
    return out


# ---------------------------------------------------------------------------
# geometry commands


def _eval_batch_builder(cfg: ExperimentConfig, ws: Workspace, policy, ref,
                        n: int):
    """Deterministic loss builder over a fixed clean eval batch."""
    pairs, task, _ = load_preferences(ws.require("data", "eval_pairs.jsonl"))
    if task.task_hash() != cfg.task.task_hash():
        raise ValueError("eval pairs belong to a different task")
    batch = pairs[:min(n, len(pairs))]
    spec = cfg.loss if cfg.loss.kind != "rm_bce" else cfg.loss.with_kind("dpo")
    ref_lps = reference_pair_logprobs(ref, batch, spec.length_normalized)
    return lambda: preference_loss_with_margins(policy, ref, batch, spec,
                                                ref_lps=ref_lps)[0]


def cmd_figure1(cfg: ExperimentConfig, seed: Optional[int] = None):
    """Concentration of the worst-case loss increase on top-scored neurons.

    Uses the reference model and its probe ranking; the summary records the
    smallest measured fraction of neurons whose Top-K curve reaches 0.8.
    """
    ws = Workspace(cfg)
    seed = cfg.seeds[0] if seed is None else seed
    ref = load_reference(ws, seed)
    table = load_scores(ws, seed)
    builder = _eval_batch_builder(cfg, ws, ref, ref, cfg.curve_batch)
    n = ref.vv_index.count
    k_grid = sorted({max(1, math.ceil(f * n)) for f in cfg.curve_fractions})
    curve = concentration_curve(ref.params, ref.vv_index, builder,
                                table.ranked_neurons(), rho=cfg.curve_rho,
                                k_grid=k_grid, n_random_seeds=cfg.curve_seeds,
                                ascent_steps=cfg.curve_ascent_steps, seed=seed)
    curve_path = ws.path("figure1", "curve.csv")
    curve.save(curve_path)
    crossing = next((k / n for k, f in zip(curve.k_grid, curve.top_fraction)
                     if f >= 0.8), 1.0)
    summary = {"config_hash": cfg.config_hash, "seed": seed,
               "n_neurons": n, "rho": cfg.curve_rho,
               "top_crosses_0.8_at_fraction": crossing,
               "k_grid": curve.k_grid, "top_fraction": curve.top_fraction,
               "random_mean": curve.random_mean, "random_sd": curve.random_sd}
    ws.path("figure1", "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1))
    return curve_path


def cmd_diagnose(cfg: ExperimentConfig, checkpoint, mask_path=None,
                 out_path=None) -> GeometryReport:
    """Geometry report for one checkpoint: curvature, worst-case increase,
    predicted vs probed risk-crossing radius."""
    ws = Workspace(cfg)
    policy, meta = load_checkpoint(checkpoint)
    if meta.get("task_hash") != cfg.task.task_hash():
        raise ValueError("checkpoint belongs to a different task")
    seed = int(meta.get("seed", cfg.seeds[0]))
    if mask_path is None:
        mask = load_mask(ws, "selective" if cfg.mask_mode == "none"
                         else cfg.mask_mode, seed)
    else:
        mask = SubspaceMask.load(mask_path)
    ref = load_reference(ws, seed)
    builder = _eval_batch_builder(cfg, ws, policy, ref, cfg.diag_batch)
    rho = cfg.sam.rho if cfg.sam.rho is not None else 0.05 * math.sqrt(
        max(mask.coord_count, 1))
    report = diagnose(policy.params, mask, builder, rho=rho,
                      iters=cfg.diag_iters, tol=cfg.diag_tol,
                      n_directions=cfg.diag_directions, seed=seed,
                      checkpoint_hash=hash_file(checkpoint))
    if out_path is None:
        out_path = ws.path("geometry", f"{Path(checkpoint).stem}-report.json")
    report.save(out_path)
    return report
