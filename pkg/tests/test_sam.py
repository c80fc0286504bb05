"""Two-pass optimizer semantics: perturbation geometry, cadence, restore
bit-exactness, clone equivalence, abort behavior, base updates."""

import math

import numpy as np
import pytest

from alignlab import tensor as T
from alignlab.data import default_task_spec, generate_preference_dataset
from alignlab.losses import LossSpec, preference_loss
from alignlab.model import ModelConfig, PolicyModel
from alignlab.params import ParameterStore
from alignlab.probe import SubspaceMask, empty_mask, uniform_mask
from alignlab.sam import (NonFiniteGradientError, SelectiveSam, SelectiveSamConfig,
                          default_rho, resolve_rho, sam_perturbation,
                          subspace_gradient)
from alignlab.utils import rng_for


def _quad_store(n=8, seed=0):
    store = ParameterStore()
    store.add("theta", rng_for(seed, "theta").standard_normal(n))
    return store


def _quad_loss(store, A):
    # L = 0.5 theta^T A theta, built through the engine
    th = T.reshape(store["theta"], (1, A.shape[0]))
    return T.scale(T.tensor_sum(T.multiply(T.matmul(th, T.constant(A)), th)), 0.5)


def _mask_from_coords(store, coords):
    return SubspaceMask(mode="selective",
                        coordinate_ids=np.asarray(coords, dtype=np.int64),
                        total_coords=store.size)


def _spd(n, seed):
    rng = rng_for(seed, "spd")
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    return Q @ np.diag(rng.uniform(0.5, 3.0, n)) @ Q.T


# ---------------------------------------------------------------------------
# perturbation geometry


def test_perturbation_norm_tracks_rho():
    rng = rng_for(0, "norm")
    for _ in range(50):
        g = rng.standard_normal(rng.integers(2, 40)) * 10.0 ** rng.integers(-3, 3)
        rho = float(10.0 ** rng.uniform(-3, 0))
        eps = sam_perturbation(g, rho, eps_num=1e-12)
        gn = np.linalg.norm(g)
        bound = rho * 1e-12 / gn
        assert abs(np.linalg.norm(eps) - rho) <= bound + 1e-15, \
            f"||eps||={np.linalg.norm(eps)} vs rho={rho} (||g||={gn})"


def test_perturbation_zero_gradient_is_zero():
    eps = sam_perturbation(np.zeros(5), rho=0.1)
    assert np.array_equal(eps, np.zeros(5))


def test_perturbation_direction_matches_gradient():
    g = np.array([3.0, 4.0])
    eps = sam_perturbation(g, rho=1.0)
    assert np.allclose(eps, [0.6, 0.8], atol=1e-12)


def test_default_rho_rule():
    assert default_rho(384) == pytest.approx(0.05 * math.sqrt(384))
    cfg = SelectiveSamConfig(rho=None)
    store = _quad_store()
    mask = _mask_from_coords(store, [0, 1, 2])
    assert resolve_rho(cfg, mask) == pytest.approx(0.05 * math.sqrt(3))
    assert resolve_rho(SelectiveSamConfig(rho=0.7), mask) == 0.7


# ---------------------------------------------------------------------------
# step mechanics on quadratics


def test_two_pass_perturbs_only_masked_coords_then_restores():
    store = _quad_store(6)
    A = _spd(6, 1)
    mask = _mask_from_coords(store, [1, 4])
    opt = SelectiveSam(store, mask, SelectiveSamConfig(rho=0.05, tau_sam=1, lr=1e-3))
    snapshots = []

    def builder():
        snapshots.append(store.flatten())
        return _quad_loss(store, A)

    theta0 = store.flatten()
    opt.step(builder)
    assert len(snapshots) == 2
    delta = snapshots[1] - snapshots[0]
    on_mask = np.zeros(6, dtype=bool)
    on_mask[[1, 4]] = True
    assert np.all(delta[~on_mask] == 0.0), "perturbation leaked off the mask"
    assert np.linalg.norm(delta[on_mask]) == pytest.approx(0.05, rel=1e-9)
    # outer update moved from theta0 (with the perturbed-point gradient),
    # not from the perturbed point
    g_pert = A @ snapshots[1]
    assert np.allclose(store.flatten(), theta0 - 1e-3 * g_pert, atol=1e-15)


def test_restore_is_bit_exact_under_clone_equivalence():
    """Two-pass step == explicit clone-based procedure, bitwise."""
    store = _quad_store(10, seed=3)
    A = _spd(10, 4)
    coords = [0, 2, 3, 7, 9]
    mask = _mask_from_coords(store, coords)
    cfg = SelectiveSamConfig(rho=0.1, tau_sam=1, lr=0.01)

    clone = store.clone()
    opt = SelectiveSam(store, mask, cfg)
    opt.step(lambda: _quad_loss(store, A))

    # clone-based formulation: perturb a copy, read its gradient, update original
    view = clone.coord_view(np.asarray(coords, dtype=np.int64))
    g_s = subspace_gradient(clone, view, lambda: _quad_loss(clone, A))
    eps = sam_perturbation(g_s, cfg.rho, cfg.eps_num)
    probe = clone.clone()
    probe.coord_view(np.asarray(coords, dtype=np.int64)).add(eps)
    probe.zero_grad()
    _quad_loss(probe, _spd(10, 4)).backward()
    expected = clone.flatten() - cfg.lr * probe.grad_vector()

    assert np.array_equal(store.flatten(), expected), \
        "two-pass step differs from the clone-based formulation"


def test_fire_cadence_floor():
    store = _quad_store(4)
    A = _spd(4, 0)
    mask = _mask_from_coords(store, [0, 1])
    opt = SelectiveSam(store, mask, SelectiveSamConfig(rho=0.01, tau_sam=5, lr=1e-4))
    fired = [opt.step(lambda: _quad_loss(store, A)).sam_fired for _ in range(23)]
    assert sum(fired) == 23 // 5
    assert [i + 1 for i, f in enumerate(fired) if f] == [5, 10, 15, 20]


def test_tau_one_fires_every_step_and_none_mask_never_fires():
    store = _quad_store(4)
    A = _spd(4, 2)
    every = SelectiveSam(store.clone(), _mask_from_coords(store, [0, 1, 2, 3]),
                         SelectiveSamConfig(rho=0.01, tau_sam=1, lr=1e-4))
    m = [every.step(lambda: _quad_loss(every.store, A)) for _ in range(4)]
    assert all(x.sam_fired for x in m)
    assert all(x.eps_norm > 0 for x in m)

    disabled = SelectiveSam(store.clone(), empty_mask(store),
                            SelectiveSamConfig(rho=0.01, tau_sam=1, lr=1e-4))
    m = [disabled.step(lambda: _quad_loss(disabled.store, A)) for _ in range(4)]
    assert not any(x.sam_fired for x in m)
    assert all(x.eps_norm == 0.0 for x in m)


def test_none_mask_is_bitwise_plain_sgd():
    storeA = _quad_store(6, seed=5)
    storeB = storeA.clone()
    A = _spd(6, 6)
    opt = SelectiveSam(storeA, empty_mask(storeA),
                       SelectiveSamConfig(rho=0.5, tau_sam=2, lr=0.02))
    for _ in range(7):
        opt.step(lambda: _quad_loss(storeA, A))
    for _ in range(7):  # hand-written SGD
        storeB.zero_grad()
        _quad_loss(storeB, A).backward()
        for _, t in storeB.items():
            t.data -= 0.02 * t.grad
    assert np.array_equal(storeA.flatten(), storeB.flatten())


def test_uniform_mask_is_classic_sam():
    store = _quad_store(5, seed=7)
    A = _spd(5, 8)
    opt = SelectiveSam(store, uniform_mask(store),
                       SelectiveSamConfig(rho=0.1, tau_sam=1, lr=0.01))
    theta0 = store.flatten()
    opt.step(lambda: _quad_loss(store, A))
    g0 = A @ theta0
    eps = 0.1 * g0 / (np.linalg.norm(g0) + 1e-12)
    want = theta0 - 0.01 * (A @ (theta0 + eps))
    assert np.allclose(store.flatten(), want, atol=1e-12)


def test_grad_norm_and_loss_reporting():
    store = _quad_store(4, seed=9)
    A = _spd(4, 9)
    theta0 = store.flatten()
    opt = SelectiveSam(store, empty_mask(store),
                       SelectiveSamConfig(tau_sam=1, lr=1e-3))
    m = opt.step(lambda: _quad_loss(store, A))
    assert m.loss == pytest.approx(0.5 * theta0 @ A @ theta0, rel=1e-12)
    assert m.grad_norm == pytest.approx(np.linalg.norm(A @ theta0), rel=1e-9)
    assert math.isnan(m.loss_at_perturbed)
    assert m.step == 1 and m.wall_ms >= 0.0


# ---------------------------------------------------------------------------
# abort semantics


def _state_fingerprint(opt):
    return (opt.store.checksum(), opt.t,
            {k: v.copy() for k, v in opt._adam_m.items()})


def test_nonfinite_loss_aborts_with_state_unchanged():
    store = _quad_store(4)
    A = _spd(4, 1)
    mask = _mask_from_coords(store, [0, 1])
    opt = SelectiveSam(store, mask, SelectiveSamConfig(rho=0.1, tau_sam=1, lr=1e-3))
    before = _state_fingerprint(opt)

    def bad_builder():
        return T.tensor_sum(T.multiply(store["theta"], T.constant(np.full(4, np.nan))))

    with pytest.raises(NonFiniteGradientError):
        opt.step(bad_builder)
    assert _state_fingerprint(opt) == before


def test_second_pass_failure_still_restores_parameters():
    store = _quad_store(4)
    A = _spd(4, 2)
    mask = _mask_from_coords(store, [0, 1])
    opt = SelectiveSam(store, mask, SelectiveSamConfig(rho=0.1, tau_sam=1, lr=1e-3))
    before = store.checksum()
    calls = {"n": 0}

    def flaky_builder():
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("synthetic failure at the perturbed point")
        return _quad_loss(store, A)

    with pytest.raises(RuntimeError):
        opt.step(flaky_builder)
    assert store.checksum() == before
    assert opt.t == 0


def test_nonfinite_gradient_detector():
    from alignlab.sam import _all_finite_grads
    store = _quad_store(3)
    assert _all_finite_grads(store)
    store["theta"].grad[1] = np.inf
    assert not _all_finite_grads(store)


def test_mask_store_size_mismatch_rejected():
    store = _quad_store(4)
    other = _quad_store(6)
    mask = _mask_from_coords(other, [0, 1])
    with pytest.raises(ValueError):
        SelectiveSam(store, mask, SelectiveSamConfig())


# ---------------------------------------------------------------------------
# base updates


def test_adam_first_step_matches_closed_form():
    store = _quad_store(5, seed=11)
    A = _spd(5, 11)
    theta0 = store.flatten()
    g0 = A @ theta0
    cfg = SelectiveSamConfig(tau_sam=10, lr=1e-2, base_update="adam")
    opt = SelectiveSam(store, empty_mask(store), cfg)
    opt.step(lambda: _quad_loss(store, A))
    # with zero moments and bias correction, step 1 is lr * g/(|g| + eps)
    want = theta0 - 1e-2 * g0 / (np.abs(g0) + cfg.adam_eps)
    assert np.allclose(store.flatten(), want, atol=1e-12)


def test_adam_moments_untouched_by_abort():
    store = _quad_store(3)
    cfg = SelectiveSamConfig(tau_sam=5, lr=1e-2, base_update="adam")
    opt = SelectiveSam(store, empty_mask(store), cfg)
    opt.step(lambda: _quad_loss(store, _spd(3, 0)))
    m_before = {k: v.copy() for k, v in opt._adam_m.items()}
    with pytest.raises(NonFiniteGradientError):
        opt.step(lambda: T.tensor_sum(
            T.multiply(store["theta"], T.constant(np.full(3, np.nan)))))
    for k in m_before:
        assert np.array_equal(opt._adam_m[k], m_before[k])
    assert opt.t == 1


def test_config_validation():
    with pytest.raises(ValueError):
        SelectiveSamConfig(tau_sam=0)
    with pytest.raises(ValueError):
        SelectiveSamConfig(lr=0.0)
    with pytest.raises(ValueError):
        SelectiveSamConfig(base_update="rmsprop")
    with pytest.raises(ValueError):
        SelectiveSamConfig(rho=-0.1)


# ---------------------------------------------------------------------------
# ascent property on the real task


def test_perturbation_increases_loss_on_most_fired_steps():
    """First-order ascent: the perturbed loss should exceed the base loss
    on nearly all fired steps of a short preference-training run."""
    task = default_task_spec(vocab_size=32, seed=21)
    cfg = ModelConfig(vocab_size=32, d_model=16, n_layers=1, n_heads=2,
                      mlp_hidden=12, max_seq_len=32, init_seed=21)
    ref = PolicyModel.initialize(cfg)
    policy = ref.clone()
    triples = generate_preference_dataset(task, 64)
    spec = LossSpec(kind="dpo", beta=0.1)
    mask = uniform_mask(policy.params)
    opt = SelectiveSam(policy.params, mask,
                       SelectiveSamConfig(rho=0.05, tau_sam=2, lr=0.05))
    rng = rng_for(21, "batches")
    wins = total = 0
    for _ in range(60):
        batch = [triples[i] for i in rng.integers(0, len(triples), size=8)]
        m = opt.step(lambda: preference_loss(policy, ref, batch, spec))
        if m.sam_fired:
            total += 1
            wins += int(m.loss_at_perturbed >= m.loss)
    assert total == 30
    assert wins / total >= 0.95, f"ascent held on only {wins}/{total} fired steps"
