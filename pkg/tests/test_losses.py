"""Loss-family semantics: frozen closed-form values, reduction identities,
reference freezing, gradient soundness and reward-model behavior.

Closed-form oracle values are computed from the definitions with math.*
(independent of the tensor engine) and frozen here.
"""

import math

import numpy as np
import pytest

from alignlab import tensor as T
from alignlab.data import default_task_spec, flip_labels, generate_preference_dataset
from alignlab.gradcheck import check_gradient, fd_noise_floor
from alignlab.losses import (LossSpec, PairScores, TrainedRewardScorer,
                             UnsafeFractionReward, cdpo_loss, dpo_loss, drdpo_loss,
                             ipo_loss, pair_scores, preference_loss, rdpo_loss,
                             reference_pair_logprobs, rm_bce_loss,
                             soft_bce_from_scores, soft_target)
from alignlab.model import ModelConfig, PolicyModel

# independent closed forms, frozen
LN2 = 0.6931471805599453
NEG_LOG_SIG = lambda m: math.log1p(math.exp(-m))
assert abs(NEG_LOG_SIG(0.3) - 0.5543552444685271) < 1e-15

TASK = default_task_spec(vocab_size=32, seed=11)
CFG = ModelConfig(vocab_size=32, d_model=16, n_layers=1, n_heads=2,
                  mlp_hidden=12, max_seq_len=32, init_seed=2)


@pytest.fixture(scope="module")
def policy_and_ref():
    ref = PolicyModel.initialize(CFG)
    policy = ref.clone()
    return policy, ref


@pytest.fixture(scope="module")
def perturbed_policy():
    policy = PolicyModel.initialize(CFG)
    rng = np.random.default_rng(4)
    flat = policy.params.flatten()
    policy.params.load_flat(flat + 0.02 * rng.standard_normal(flat.size))
    return policy


@pytest.fixture(scope="module")
def triples():
    return generate_preference_dataset(TASK, 16)


def test_dpo_at_reference_is_ln2(policy_and_ref, triples):
    policy, ref = policy_and_ref
    loss = dpo_loss(policy, ref, triples, LossSpec(kind="dpo", beta=0.1))
    assert abs(loss.value - LN2) < 1e-9


def test_ipo_at_reference_matches_closed_form(policy_and_ref, triples):
    policy, ref = policy_and_ref
    loss = ipo_loss(policy, ref, triples, LossSpec(kind="ipo", beta=0.1))
    assert abs(loss.value - 25.0) < 1e-9  # (0 - 1/(2*0.1))^2


def test_neutral_settings_are_bitwise_dpo(perturbed_policy, policy_and_ref, triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    spec = LossSpec(kind="dpo", beta=0.1)
    base = dpo_loss(policy, ref, triples, spec).value
    c = cdpo_loss(policy, ref, triples, LossSpec(kind="cdpo", beta=0.1,
                                                 eps_label=0.0)).value
    r = rdpo_loss(policy, ref, triples, LossSpec(kind="rdpo", beta=0.1,
                                                 eps_label=0.0)).value
    assert c == base, "cdpo(eps=0) must equal dpo bitwise"
    assert r == base, "rdpo(eps=0) must equal dpo bitwise"


def test_single_pair_closed_forms(perturbed_policy, policy_and_ref, triples):
    """One-pair batches against definitions evaluated with math.* only."""
    _, ref = policy_and_ref
    policy = perturbed_policy
    one = triples[:1]
    beta = 0.1
    ref_w, ref_l = reference_pair_logprobs(ref, one)
    from alignlab.losses import policy_pair_logprobs
    lp_w, lp_l = policy_pair_logprobs(policy, one)
    g = (lp_w.data[0] - ref_w[0]) - (lp_l.data[0] - ref_l[0])
    m = beta * g

    spec = LossSpec(beta=beta, eps_label=0.1, beta_prime=0.7)
    assert abs(dpo_loss(policy, ref, one, spec).value - NEG_LOG_SIG(m)) < 1e-12
    want_cdpo = 0.9 * NEG_LOG_SIG(m) + 0.1 * NEG_LOG_SIG(-m)
    assert abs(cdpo_loss(policy, ref, one, spec).value - want_cdpo) < 1e-12
    want_rdpo = (0.9 * NEG_LOG_SIG(m) - 0.1 * NEG_LOG_SIG(-m)) / 0.8
    assert abs(rdpo_loss(policy, ref, one, spec).value - want_rdpo) < 1e-12
    want_ipo = (g - 1.0 / (2 * beta)) ** 2
    assert abs(ipo_loss(policy, ref, one, spec).value - want_ipo) < 1e-12
    # single-pair drdpo collapses to dpo for any temperature
    assert abs(drdpo_loss(policy, ref, one, spec).value - NEG_LOG_SIG(m)) < 1e-12


def test_cdpo_mixture_identity(perturbed_policy, policy_and_ref, triples):
    """cdpo(batch) == (1-eps) dpo(batch) + eps dpo(all-flipped batch)."""
    _, ref = policy_and_ref
    policy = perturbed_policy
    eps = 0.2
    spec = LossSpec(kind="cdpo", beta=0.1, eps_label=eps)
    flipped = flip_labels(triples, 1.0, seed=0)
    lhs = cdpo_loss(policy, ref, triples, spec).value
    rhs = ((1 - eps) * dpo_loss(policy, ref, triples, spec).value
           + eps * dpo_loss(policy, ref, flipped, spec).value)
    assert abs(lhs - rhs) < 1e-12


def test_rdpo_debiasing_identity(perturbed_policy, policy_and_ref, triples):
    """(1-eps) rdpo(clean) + eps rdpo(all-flipped) == dpo(clean), per pair."""
    _, ref = policy_and_ref
    policy = perturbed_policy
    eps = 0.3
    spec = LossSpec(kind="rdpo", beta=0.1, eps_label=eps)
    flipped = flip_labels(triples, 1.0, seed=0)
    lhs = ((1 - eps) * rdpo_loss(policy, ref, triples, spec).value
           + eps * rdpo_loss(policy, ref, flipped, spec).value)
    rhs = dpo_loss(policy, ref, triples, spec).value
    assert abs(lhs - rhs) < 1e-12


def test_drdpo_large_temperature_approaches_dpo(perturbed_policy, policy_and_ref,
                                                triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    spec = LossSpec(kind="drdpo", beta=0.1, beta_prime=1e6)
    d = dpo_loss(policy, ref, triples, spec).value
    dr = drdpo_loss(policy, ref, triples, spec).value
    assert abs(d - dr) < 1e-4
    # log-mean-exp soft-truncates badly-fit pairs: never above the mean
    spec_small = LossSpec(kind="drdpo", beta=0.1, beta_prime=0.5)
    assert drdpo_loss(policy, ref, triples, spec_small).value <= d + 1e-12


def test_reference_gradients_identically_zero(perturbed_policy, policy_and_ref,
                                              triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    for fn, spec in ((dpo_loss, LossSpec(kind="dpo")),
                     (ipo_loss, LossSpec(kind="ipo")),
                     (drdpo_loss, LossSpec(kind="drdpo"))):
        policy.params.zero_grad()
        ref.params.zero_grad()
        fn(policy, ref, triples, spec).backward()
        assert np.all(ref.params.grad_vector() == 0.0), \
            f"{spec.kind}: reference leaked gradient"
        assert np.any(policy.params.grad_vector() != 0.0)


def test_precomputed_reference_logprobs_match(perturbed_policy, policy_and_ref,
                                              triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    spec = LossSpec(kind="dpo", beta=0.1)
    cached = reference_pair_logprobs(ref, triples)
    a = dpo_loss(policy, ref, triples, spec).value
    b = dpo_loss(policy, ref, triples, spec, ref_lps=cached).value
    assert a == b


def test_dpo_gradient_matches_finite_differences(policy_and_ref):
    """Whole-loss gradient check on a deliberately small model."""
    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2,
                      mlp_hidden=6, max_seq_len=24, init_seed=8)
    task = default_task_spec(vocab_size=16, seed=3)
    ref = PolicyModel.initialize(cfg)
    policy = ref.clone()
    rng = np.random.default_rng(0)
    policy.params.load_flat(policy.params.flatten()
                            + 0.05 * rng.standard_normal(policy.params.size))
    batch = generate_preference_dataset(task, 3)
    spec = LossSpec(kind="dpo", beta=0.1)
    cached = reference_pair_logprobs(ref, batch)

    def loss(_s):
        return dpo_loss(policy, ref, batch, spec, ref_lps=cached)

    h, tol = 1e-5, 1e-4
    l0 = loss(None).value
    err = check_gradient(loss, policy.params, h=h, floor=fd_noise_floor(l0, h, tol))
    assert err < tol, f"dpo gradient error {err:.2e}"


def test_loss_decreases_under_gradient_step(perturbed_policy, policy_and_ref,
                                            triples):
    """One small SGD step on the dpo loss must reduce it (sanity of signs)."""
    _, ref = policy_and_ref
    policy = perturbed_policy.clone()
    spec = LossSpec(kind="dpo", beta=0.1)
    before = dpo_loss(policy, ref, triples, spec)
    policy.params.zero_grad()
    before.backward()
    g = policy.params.grad_vector()
    policy.params.load_flat(policy.params.flatten() - 0.05 * g)
    after = dpo_loss(policy, ref, triples, spec).value
    assert after < before.value


# ---------------------------------------------------------------------------
# reward-level route


def test_unsafe_fraction_reward():
    rm = UnsafeFractionReward(TASK)
    safe = tuple(TASK.response_pool[:4])
    unsafe_tok = min(TASK.unsafe_tokens)
    assert rm.score((), safe) == 1.0
    assert rm.score((), (unsafe_tok,) * 4) == 0.0
    assert abs(rm.score((), safe[:3] + (unsafe_tok,)) - 0.75) < 1e-15
    assert rm.score((), ()) == 1.0


def test_soft_target_values(triples):
    rm = UnsafeFractionReward(TASK)

    class Flat:
        def score(self, prompt, response):
            return 0.5

    assert soft_target(Flat(), triples[0], beta_r=10.0) == 0.5
    t = soft_target(rm, triples[0], beta_r=10.0)
    assert 0.5 < t <= 1.0  # chosen is safe, rejected unsafe
    # frozen value: gap known exactly from token counts
    tr = triples[0]
    gap = rm.score(tr.prompt, tr.chosen) - rm.score(tr.prompt, tr.rejected)
    assert abs(t - 1.0 / (1.0 + math.exp(-10.0 * gap))) < 1e-15


def test_sigmoid_two_reference_value():
    # frozen reference point for the score->probability map
    assert abs(T.sigmoid(T.constant(np.array([2.0]))).data[0]
               - 0.8807970779778823) < 1e-15


def test_rm_bce_flip_invariant_with_symmetric_reward(perturbed_policy, triples):
    """Swapping every pair leaves the reward-level loss unchanged."""
    policy = perturbed_policy
    rm = UnsafeFractionReward(TASK)
    spec = LossSpec(kind="rm_bce", beta_r=10.0)
    clean = rm_bce_loss(policy, triples, rm, spec).value
    flipped = rm_bce_loss(policy, flip_labels(triples, 1.0, seed=0), rm, spec).value
    assert abs(clean - flipped) < 1e-12


def test_soft_bce_saturation_keeps_loss_finite_and_grad_bounded():
    from alignlab.params import ParameterStore
    store = ParameterStore()
    store.add("z", np.array([500.0, -500.0, 0.0]))
    targets = np.array([0.0, 1.0, 0.5])  # worst case: confident and wrong
    loss = soft_bce_from_scores(store["z"], targets)
    assert np.isfinite(loss.value)
    assert loss.value <= -math.log(1e-12) + 1.0
    loss.backward()
    assert np.all(np.isfinite(store["z"].grad))
    assert np.max(np.abs(store["z"].grad)) <= 1.0


def test_soft_bce_equal_scores_and_targets():
    from alignlab.params import ParameterStore
    store = ParameterStore()
    store.add("z", np.zeros(4))
    loss = soft_bce_from_scores(store["z"], np.full(4, 0.5))
    assert abs(loss.value - LN2) < 1e-12


def test_trained_reward_scorer_learns_oracle():
    rng = np.random.default_rng(0)
    task = TASK
    resp, labels = [], []
    pool = np.asarray(task.response_pool)
    unsafe = sorted(task.unsafe_tokens)
    for i in range(200):
        r = [int(t) for t in rng.choice(pool, size=6)]
        if i % 2 == 0:
            r[int(rng.integers(0, 6))] = int(unsafe[int(rng.integers(0, len(unsafe)))])
            labels.append(-1)
        else:
            labels.append(1)
        resp.append(tuple(r))
    scorer = TrainedRewardScorer(task.vocab_size).fit(resp, labels)
    safe_scores = [scorer.score((), r) for r, l in zip(resp, labels) if l == 1]
    unsafe_scores = [scorer.score((), r) for r, l in zip(resp, labels) if l == -1]
    assert np.mean(safe_scores) > 0.8
    assert np.mean(unsafe_scores) < 0.2
    with pytest.raises(RuntimeError):
        TrainedRewardScorer(task.vocab_size).score((), (4, 5))


def test_preference_loss_dispatch(perturbed_policy, policy_and_ref, triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    rm = UnsafeFractionReward(TASK)
    for kind in ("dpo", "ipo", "cdpo", "rdpo", "drdpo"):
        spec = LossSpec(kind=kind, eps_label=0.1 if kind in ("cdpo", "rdpo") else 0.0)
        v = preference_loss(policy, ref, triples, spec).value
        assert np.isfinite(v)
    v = preference_loss(policy, None, triples, LossSpec(kind="rm_bce"),
                        reward_model=rm).value
    assert np.isfinite(v)
    with pytest.raises(ValueError):
        preference_loss(policy, None, triples, LossSpec(kind="dpo"))
    with pytest.raises(ValueError):
        preference_loss(policy, ref, triples, LossSpec(kind="rm_bce"))


def test_pair_scores_reporting(perturbed_policy, policy_and_ref, triples):
    _, ref = policy_and_ref
    scores = pair_scores(perturbed_policy, ref, triples, LossSpec(beta=0.1))
    assert scores.margins.shape == (len(triples),)
    assert np.allclose(scores.margins,
                       scores.reward_chosen - scores.reward_rejected)
    assert 0.0 <= scores.accuracy <= 1.0
    # at the reference, every margin is exactly zero and accuracy counts ties as 0
    at_ref = pair_scores(policy_and_ref[0], ref, triples, LossSpec(beta=0.1))
    assert np.all(at_ref.margins == 0.0)
    assert at_ref.accuracy == 0.0


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(kind="nope")
    with pytest.raises(ValueError):
        LossSpec(eps_label=0.5)
    with pytest.raises(ValueError):
        LossSpec(beta=0.0)
    with pytest.raises(ValueError):
        LossSpec(beta_prime=-1.0)


def test_length_normalized_margins(perturbed_policy, policy_and_ref, triples):
    _, ref = policy_and_ref
    policy = perturbed_policy
    a = dpo_loss(policy, ref, triples, LossSpec(beta=0.1)).value
    b = dpo_loss(policy, ref, triples,
                 LossSpec(beta=0.1, length_normalized=True)).value
    assert np.isfinite(b) and a != b
