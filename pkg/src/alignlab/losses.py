"""Preference losses over policy/reference log-probability margins.

All losses reduce with an arithmetic mean over the batch and are built from
the same margin graph, so robustness variants at their neutral settings are
bitwise-identical to plain DPO (asserted in tests):

- dpo     -E[log sigmoid(m)]
- cdpo    -E[(1-eps) log sigmoid(m) + eps log sigmoid(-m)]
- rdpo    E[((1-eps)(-log sigmoid(m)) - eps(-log sigmoid(-m))) / (1-2 eps)]
- ipo     E[(g - 1/(2 beta))^2] on the unscaled gap g
- drdpo   -beta' log E[exp(log sigmoid(m) / beta')]
- rm_bce  soft-target cross entropy against reward-model preferences

with m = beta * ((lp_w - ref_w) - (lp_l - ref_l)) and g = m / beta computed
directly from the log-prob gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Protocol

import numpy as np

from . import tensor as T
from .data import PreferenceTriple, SafetyTaskSpec
from .model import PolicyModel, encode_batch
from .tensor import Tensor

LOSS_KINDS = ("dpo", "ipo", "cdpo", "rdpo", "drdpo", "rm_bce")

_LOG_P_FLOOR = math.log(1e-12)  # rm_bce clamps probabilities to [1e-12, 1-1e-12]


@dataclass(frozen=True)
class LossSpec:
    kind: str = "dpo"
    beta: float = 0.1
    eps_label: float = 0.0      # cdpo / rdpo assumed flip rate
    beta_prime: float = 1.0     # drdpo temperature
    beta_r: float = 10.0        # reward-gap scale for soft targets
    length_normalized: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, have {LOSS_KINDS}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0.0 <= self.eps_label < 0.5:
            raise ValueError("eps_label must lie in [0, 0.5)")
        if self.beta_prime <= 0:
            raise ValueError("beta_prime must be positive")
        if self.beta_r <= 0:
            raise ValueError("beta_r must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kind", "beta", "eps_label", "beta_prime", "beta_r",
                 "length_normalized")}

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)

    def with_kind(self, kind: str) -> "LossSpec":
        return replace(self, kind=kind)


# ---------------------------------------------------------------------------
# margins


def policy_pair_logprobs(policy: PolicyModel, triples: list,
                         length_normalized: bool = False) -> tuple[Tensor, Tensor]:
    """Differentiable response log-probs for chosen and rejected, each [B]."""
    if not triples:
        raise ValueError("empty preference batch")
    enc_w = encode_batch([t.chosen_sequence() for t in triples])
    enc_l = encode_batch([t.rejected_sequence() for t in triples])
    lp_w = policy.response_logprob(enc_w, length_normalized=length_normalized)
    lp_l = policy.response_logprob(enc_l, length_normalized=length_normalized)
    return lp_w, lp_l


def reference_pair_logprobs(ref: PolicyModel, triples: list,
                            length_normalized: bool = False
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Detached reference log-probs; gradients never reach the reference."""
    lp_w, lp_l = policy_pair_logprobs(ref, triples, length_normalized)
    return lp_w.data.copy(), lp_l.data.copy()


def margin_gap(policy: PolicyModel, ref: PolicyModel, triples: list,
               spec: LossSpec,
               ref_lps: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Unscaled preference gap g = (lp_w - ref_w) - (lp_l - ref_l), shape [B].

    ``ref_lps`` may carry precomputed reference log-probs (the reference is
    frozen, so callers that revisit the same pairs cache them).
    """
    if ref_lps is None:
        ref_lps = reference_pair_logprobs(ref, triples, spec.length_normalized)
    ref_w, ref_l = ref_lps
    lp_w, lp_l = policy_pair_logprobs(policy, triples, spec.length_normalized)
    return T.subtract(T.subtract(lp_w, T.constant(ref_w)),
                      T.subtract(lp_l, T.constant(ref_l)))


def _neg_log_sigmoid(x: Tensor) -> Tensor:
    return T.scale(T.log_sigmoid(x), -1.0)


# ---------------------------------------------------------------------------
# loss family
#
# Each margin-based loss is a tail applied to the shared gap graph, so the
# kinds differ only in their written formula and per-batch margins can be
# read off the same forward pass that produced the loss.


def _tail_from_gap(gap: Tensor, spec: LossSpec) -> Tensor:
    kind = spec.kind
    if kind == "ipo":
        d = T.subtract(gap, T.constant(1.0 / (2.0 * spec.beta)))
        return T.tensor_mean(T.multiply(d, d))
    m = T.scale(gap, spec.beta)
    if kind == "dpo":
        return T.tensor_mean(_neg_log_sigmoid(m))
    if kind == "cdpo":
        eps = spec.eps_label
        per_pair = T.add(T.scale(_neg_log_sigmoid(m), 1.0 - eps),
                         T.scale(_neg_log_sigmoid(T.scale(m, -1.0)), eps))
        return T.tensor_mean(per_pair)
    if kind == "rdpo":
        eps = spec.eps_label
        per_pair = T.subtract(T.scale(_neg_log_sigmoid(m), 1.0 - eps),
                              T.scale(_neg_log_sigmoid(T.scale(m, -1.0)), eps))
        return T.tensor_mean(T.scale(per_pair, 1.0 / (1.0 - 2.0 * eps)))
    if kind == "drdpo":
        inner = T.tensor_mean(T.exp(T.scale(T.log_sigmoid(m), 1.0 / spec.beta_prime)))
        return T.scale(T.log(inner), -spec.beta_prime)
    raise ValueError(f"no margin tail for kind {kind!r}")


def dpo_loss(policy, ref, triples, spec: LossSpec, ref_lps=None) -> Tensor:
    """-E[log sigmoid(m)] with m = beta * gap."""
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec.with_kind("dpo"))


def cdpo_loss(policy, ref, triples, spec: LossSpec, ref_lps=None) -> Tensor:
    """Conservative DPO: mixes the flipped-pair term with weight eps_label."""
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec.with_kind("cdpo"))


def rdpo_loss(policy, ref, triples, spec: LossSpec, ref_lps=None) -> Tensor:
    """Unbiased-under-flips DPO; eps_label is the assumed flip rate."""
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec.with_kind("rdpo"))


def ipo_loss(policy, ref, triples, spec: LossSpec, ref_lps=None) -> Tensor:
    """Squared regression of the unscaled gap onto the target 1/(2 beta)."""
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec.with_kind("ipo"))


def drdpo_loss(policy, ref, triples, spec: LossSpec, ref_lps=None) -> Tensor:
    """Distributionally robust DPO: log-mean-exp aggregation over the batch.

    Pairs the policy fits badly (likely mislabeled) get soft-truncated
    influence, so the value never exceeds the plain DPO batch mean;
    beta_prime -> inf recovers it exactly.
    """
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec.with_kind("drdpo"))


def soft_bce_from_scores(z: Tensor, targets: np.ndarray) -> Tensor:
    """-mean[t log p + (1-t) log(1-p)] with p = sigmoid(z).

    Probabilities are clamped to [1e-12, 1-1e-12] before the log (via the
    equivalent clamp on log sigmoid of each sign), so the loss stays finite
    and the gradient bounded even at saturated scores.
    """
    log_p = T.clamp_min(T.log_sigmoid(z), _LOG_P_FLOOR)
    log_q = T.clamp_min(T.log_sigmoid(T.scale(z, -1.0)), _LOG_P_FLOOR)
    per_pair = T.add(T.multiply(T.constant(targets), log_p),
                     T.multiply(T.constant(1.0 - targets), log_q))
    return T.scale(T.tensor_mean(per_pair), -1.0)


def rm_bce_loss(policy: PolicyModel, triples: list, reward_model,
                spec: LossSpec) -> Tensor:
    """Reward-level route: BCE against soft targets from an external reward.

    Targets t_i = sigmoid(beta_r * (R(chosen) - R(rejected))) come from the
    reward model, not from the pair labels, so a swapped pair produces the
    complementary target and an identical loss term.  No reference policy
    is involved; the score is the (optionally length-normalized) policy
    log-probability of the response.
    """
    if not triples:
        raise ValueError("empty preference batch")
    t = np.array([soft_target(reward_model, tr, spec.beta_r) for tr in triples])
    s_w, s_l = policy_pair_logprobs(policy, triples, spec.length_normalized)
    return soft_bce_from_scores(T.subtract(s_w, s_l), t)


_LOSS_TABLE = {"dpo": dpo_loss, "ipo": ipo_loss, "cdpo": cdpo_loss,
               "rdpo": rdpo_loss, "drdpo": drdpo_loss}


def preference_loss(policy: PolicyModel, ref: Optional[PolicyModel], triples: list,
                    spec: LossSpec, reward_model=None, ref_lps=None) -> Tensor:
    """Dispatch on spec.kind; the single entry point used by training loops."""
    if spec.kind == "rm_bce":
        if reward_model is None:
            raise ValueError("rm_bce requires a reward model")
        return rm_bce_loss(policy, triples, reward_model, spec)
    if ref is None:
        raise ValueError(f"{spec.kind} requires a reference policy")
    return _LOSS_TABLE[spec.kind](policy, ref, triples, spec, ref_lps=ref_lps)


def preference_loss_with_margins(policy: PolicyModel, ref: Optional[PolicyModel],
                                 triples: list, spec: LossSpec, reward_model=None,
                                 ref_lps=None) -> tuple[Tensor, np.ndarray]:
    """Loss plus detached per-pair margins from the same forward pass.

    Margins are beta-scaled for the margin-based kinds and the raw score gap
    for rm_bce; training loops log their mean without a second forward.
    """
    if spec.kind == "rm_bce":
        if reward_model is None:
            raise ValueError("rm_bce requires a reward model")
        t = np.array([soft_target(reward_model, tr, spec.beta_r) for tr in triples])
        s_w, s_l = policy_pair_logprobs(policy, triples, spec.length_normalized)
        z = T.subtract(s_w, s_l)
        return soft_bce_from_scores(z, t), z.data.copy()
    if ref is None:
        raise ValueError(f"{spec.kind} requires a reference policy")
    gap = margin_gap(policy, ref, triples, spec, ref_lps)
    return _tail_from_gap(gap, spec), spec.beta * gap.data


# ---------------------------------------------------------------------------
# reporting helpers


@dataclass
class PairScores:
    """Detached per-pair quantities for metrics and reports."""
    reward_chosen: np.ndarray    # beta * (lp_w - ref_w)
    reward_rejected: np.ndarray  # beta * (lp_l - ref_l)
    margins: np.ndarray          # reward_chosen - reward_rejected

    @property
    def mean_margin(self) -> float:
        return float(self.margins.mean())

    @property
    def accuracy(self) -> float:
        """Fraction of pairs with strictly positive margin; ties count as errors."""
        return float(np.mean(self.margins > 0.0))


def pair_scores(policy: PolicyModel, ref: PolicyModel, triples: list,
                spec: LossSpec, ref_lps=None) -> PairScores:
    if ref_lps is None:
        ref_lps = reference_pair_logprobs(ref, triples, spec.length_normalized)
    ref_w, ref_l = ref_lps
    lp_w, lp_l = policy_pair_logprobs(policy, triples, spec.length_normalized)
    rc = spec.beta * (lp_w.data - ref_w)
    rr = spec.beta * (lp_l.data - ref_l)
    return PairScores(reward_chosen=rc, reward_rejected=rr, margins=rc - rr)


# ---------------------------------------------------------------------------
# reward models


class RewardModel(Protocol):
    def score(self, prompt: tuple, response: tuple) -> float:
        """Deterministic scalar, higher = safer."""
        ...


@dataclass(frozen=True)
class UnsafeFractionReward:
    """Programmatic reward: 1 - (unsafe token share of the response)."""
    task: SafetyTaskSpec

    def score(self, prompt: tuple, response: tuple) -> float:
        if len(response) == 0:
            return 1.0
        bad = sum(1 for t in response if int(t) in self.task.unsafe_tokens)
        return 1.0 - bad / len(response)


class TrainedRewardScorer:
    """Logistic scorer on response token histograms, fit to oracle labels.

    A learned stand-in for UnsafeFractionReward when a trained reward is
    wanted; score() maps to (0, 1), higher = safer.
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.w = np.zeros(vocab_size)
        self.b = 0.0
        self.fitted = False

    def _features(self, response: tuple) -> np.ndarray:
        f = np.zeros(self.vocab_size)
        for t in response:
            f[int(t)] += 1.0
        return f / max(len(response), 1)

    def fit(self, responses: list, labels: list, epochs: int = 2000,
            lr: float = 20.0) -> "TrainedRewardScorer":
        """labels: +1 safe, -1 unsafe."""
        X = np.stack([self._features(r) for r in responses])
        y = (np.asarray(labels, dtype=np.float64) + 1.0) / 2.0
        for _ in range(epochs):
            z = X @ self.w + self.b
            p = 1.0 / (1.0 + np.exp(-z))
            gz = (p - y) / len(y)
            self.w -= lr * (X.T @ gz)
            self.b -= lr * float(gz.sum())
        self.fitted = True
        return self

    def score(self, prompt: tuple, response: tuple) -> float:
        if not self.fitted:
            raise RuntimeError("TrainedRewardScorer.score before fit")
        z = float(self._features(response) @ self.w + self.b)
        return float(1.0 / (1.0 + np.exp(-z)))


def soft_target(reward_model, triple: PreferenceTriple, beta_r: float) -> float:
    """sigmoid(beta_r * (R(chosen) - R(rejected))); 0.5 for equal rewards."""
    gap = (reward_model.score(triple.prompt, triple.chosen)
           - reward_model.score(triple.prompt, triple.rejected))
    return float(1.0 / (1.0 + np.exp(-beta_r * gap)))
