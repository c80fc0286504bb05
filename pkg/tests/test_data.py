"""Oracle exactness, split hygiene, flip accounting and dataset IO."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignlab.data import (PreferenceTriple, SafetyTaskSpec, TemplateFamily,
                           build_probe_set, default_task_spec,
                           eval_preference_pairs, eval_prompt_suite, flip_labels,
                           generate_preference_dataset, harmful_request,
                           load_preferences, load_probe_examples, load_prompts,
                           safety_oracle, save_preferences, save_probe_examples,
                           save_prompts)

SPEC = default_task_spec(vocab_size=64, seed=0)


def test_default_spec_layout():
    assert len(SPEC.unsafe_tokens) == 6  # 10% of 64, rounded half-up
    assert len(SPEC.refusal_pool) == 6
    reserved = ({SPEC.pad_id, SPEC.sep_id, SPEC.trigger_id}
                | {f.lead_token for f in SPEC.families})
    assert not (SPEC.unsafe_tokens & reserved)
    assert not (set(SPEC.refusal_pool) & (SPEC.unsafe_tokens | reserved))
    assert SPEC.families[0].name == "in_dist"
    assert SPEC.families[1].name == "ood_proxy"
    assert not set(SPEC.response_pool) & (SPEC.unsafe_tokens | set(SPEC.refusal_pool)
                                          | reserved)
    for fam in SPEC.families:
        assert not set(fam.content_pool) & reserved


def test_oracle_is_exact_token_membership():
    unsafe = min(SPEC.unsafe_tokens)
    safe = SPEC.response_pool[0]
    assert safety_oracle([safe, safe, safe], SPEC)
    assert not safety_oracle([safe, unsafe, safe], SPEC)
    assert safety_oracle([], SPEC)


def test_generation_is_deterministic():
    a = generate_preference_dataset(SPEC, 50)
    b = generate_preference_dataset(SPEC, 50)
    assert [t.to_dict() for t in a] == [x.to_dict() for x in b]


def test_triples_satisfy_oracle_and_length_matching():
    triples = generate_preference_dataset(SPEC, 200)
    for t in triples:
        assert safety_oracle(t.chosen, SPEC)
        assert not safety_oracle(t.rejected, SPEC)
        assert t.chosen_safe and not t.rejected_safe and not t.flipped
        assert len(t.chosen) == len(t.rejected)
        assert SPEC.response_len[0] <= len(t.chosen) <= SPEC.response_len[1]
        assert t.prompt[0] == SPEC.families[0].lead_token
        assert t.prompt[-1] == SPEC.sep_id


def test_prompts_unique_within_dataset():
    triples = generate_preference_dataset(SPEC, 500)
    prompts = [t.prompt for t in triples]
    assert len(set(prompts)) == len(prompts)


def test_split_hygiene_pairwise_disjoint():
    """Train, probe and eval prompt pools must never intersect."""
    train = {t.prompt for t in generate_preference_dataset(SPEC, 400)}
    probe = {e.tokens[:e.prompt_len] for e in build_probe_set(SPEC, 100, 100)}
    ev = set(eval_prompt_suite(SPEC, 120, "in_dist"))
    ev |= {t.prompt for t in eval_preference_pairs(SPEC, 120)}
    assert not (train & probe)
    assert not (train & ev)
    assert not (probe & ev)


def test_ood_family_prompts_use_distinct_lead_and_pool():
    prompts = eval_prompt_suite(SPEC, 50, "ood_proxy")
    fam = SPEC.families[1]
    in_pool = set(SPEC.families[0].content_pool)
    for p in prompts:
        assert p[0] == fam.lead_token
        assert not set(p[1:-1]) & in_pool  # pools are disjoint halves
    with pytest.raises(ValueError):
        eval_prompt_suite(SPEC, 5, "no_such_family")


def test_probe_set_labels_match_oracle():
    examples = build_probe_set(SPEC, 60, 40)
    n_safe = sum(1 for e in examples if e.label == 1)
    assert n_safe == 60 and len(examples) == 100
    for e in examples:
        # the label covers the whole sequence: harmful prompts only ever
        # carry unsafe responses, so both readings agree
        assert (e.label == 1) == safety_oracle(e.tokens, SPEC)
        assert (e.label == 1) == safety_oracle(e.tokens[e.prompt_len:], SPEC)


def test_harmful_requests_pair_refusal_against_compliance():
    triples = generate_preference_dataset(SPEC, 400)
    unsafe = SPEC.unsafe_tokens
    refusal = set(SPEC.refusal_pool)
    harmful = [t for t in triples if harmful_request(t.prompt, SPEC)]
    rest = [t for t in triples if not harmful_request(t.prompt, SPEC)]
    assert 0.3 < len(harmful) / len(triples) < 0.7
    for t in harmful:
        assert set(t.chosen) <= refusal
    for t in rest:
        assert not set(t.chosen) & refusal
        diff = [i for i, (a, b) in enumerate(zip(t.chosen, t.rejected)) if a != b]
        assert 1 <= len(diff) <= 3
        assert all(t.rejected[i] in unsafe for i in diff)


def test_single_feature_prompts_are_benign_distractors():
    """Topic-only and trigger-only prompts appear, and neither earns a
    refusal; only the conjunction is treated as a harmful request."""
    triples = generate_preference_dataset(SPEC, 400)
    unsafe = SPEC.unsafe_tokens
    kinds = {"plain": 0, "mention": 0, "action": 0, "harmful": 0}
    for t in triples:
        topic = bool(set(t.prompt) & unsafe)
        action = SPEC.trigger_id in t.prompt
        if topic and action:
            kinds["harmful"] += 1
            assert harmful_request(t.prompt, SPEC)
        else:
            kinds["mention" if topic else ("action" if action else "plain")] += 1
            assert not harmful_request(t.prompt, SPEC)
            assert not set(t.chosen) & set(SPEC.refusal_pool)
    assert all(v > 0 for v in kinds.values()), kinds


def test_eval_suite_prompts_are_harmful():
    for fam in ("in_dist", "ood_proxy"):
        for p in eval_prompt_suite(SPEC, 30, fam):
            assert harmful_request(p, SPEC)


def test_probe_classes_differ_in_prompt_harm():
    examples = build_probe_set(SPEC, 50, 50)
    for e in examples:
        prompt = e.tokens[:e.prompt_len]
        assert harmful_request(prompt, SPEC) == (e.label == -1)
        if e.label == 1:  # safe class carries neither topic nor trigger
            assert not set(prompt) & SPEC.unsafe_tokens
            assert SPEC.trigger_id not in prompt


# ---------------------------------------------------------------------------
# label flips


def test_flip_exact_count_and_swap():
    triples = generate_preference_dataset(SPEC, 100)
    for rate, expect in ((0.0, 0), (0.1, 10), (0.2, 20), (0.4, 40), (1.0, 100)):
        flipped = flip_labels(triples, rate, seed=5)
        n = sum(1 for t in flipped if t.flipped)
        assert n == expect, f"rate {rate}: {n} flips, wanted {expect}"
    flipped = flip_labels(triples, 0.2, seed=5)
    for orig, t in zip(triples, flipped):
        if t.flipped:
            assert t.chosen == orig.rejected and t.rejected == orig.chosen
            assert not t.chosen_safe and t.rejected_safe
            assert not safety_oracle(t.chosen, SPEC)
        else:
            assert t.chosen == orig.chosen and t.rejected == orig.rejected
    # input not mutated
    assert all(not t.flipped for t in triples)


def test_flip_rounding_is_half_up():
    triples = generate_preference_dataset(SPEC, 5)
    assert sum(t.flipped for t in flip_labels(triples, 0.5, 0)) == 3
    assert sum(t.flipped for t in flip_labels(triples, 0.1, 0)) == 1


def test_flip_deterministic_per_seed():
    triples = generate_preference_dataset(SPEC, 60)
    a = [t.flipped for t in flip_labels(triples, 0.3, seed=1)]
    b = [t.flipped for t in flip_labels(triples, 0.3, seed=1)]
    c = [t.flipped for t in flip_labels(triples, 0.3, seed=2)]
    assert a == b
    assert a != c


@settings(max_examples=20, deadline=None)
@given(rate=st.floats(0.0, 1.0), n=st.integers(1, 60), seed=st.integers(0, 99))
def test_flip_count_property(rate, n, seed):
    triples = generate_preference_dataset(default_task_spec(seed=7), n)
    flipped = flip_labels(triples, rate, seed)
    import math
    assert sum(t.flipped for t in flipped) == int(math.floor(rate * n + 0.5))


def test_flip_rejects_bad_rate():
    with pytest.raises(ValueError):
        flip_labels([], 1.5, 0)


# ---------------------------------------------------------------------------
# serialization


def test_preferences_round_trip(tmp_path):
    triples = flip_labels(generate_preference_dataset(SPEC, 40), 0.25, seed=3)
    path = tmp_path / "train.jsonl"
    save_preferences(path, triples, SPEC, extra={"flip_rate": 0.25})
    loaded, spec2, manifest = load_preferences(path)
    assert spec2.task_hash() == SPEC.task_hash()
    assert manifest["n_flipped"] == 10
    assert manifest["flip_rate"] == 0.25
    assert [t.to_dict() for t in loaded] == [t.to_dict() for t in triples]


def test_preferences_manifest_count_mismatch_rejected(tmp_path):
    triples = generate_preference_dataset(SPEC, 5)
    path = tmp_path / "train.jsonl"
    save_preferences(path, triples, SPEC)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError):
        load_preferences(path)


def test_probe_and_prompt_round_trip(tmp_path):
    examples = build_probe_set(SPEC, 10, 10)
    save_probe_examples(tmp_path / "probe.jsonl", examples, SPEC)
    loaded, spec2 = load_probe_examples(tmp_path / "probe.jsonl")
    assert [e.to_dict() for e in loaded] == [e.to_dict() for e in examples]
    assert spec2.task_hash() == SPEC.task_hash()

    prompts = eval_prompt_suite(SPEC, 15, "in_dist")
    save_prompts(tmp_path / "ev.json", prompts, SPEC, "in_dist")
    loaded_p, fam, th = load_prompts(tmp_path / "ev.json")
    assert loaded_p == prompts and fam == "in_dist" and th == SPEC.task_hash()


def test_spec_validation_errors():
    with pytest.raises(ValueError):
        SafetyTaskSpec(vocab_size=8, unsafe_tokens=frozenset(),
                       families=SPEC.families, response_pool=(6,),
                       refusal_pool=(5,), response_len=(1, 2), seed=0)
    with pytest.raises(ValueError):  # unsafe overlaps reserved sep id
        SafetyTaskSpec(vocab_size=8, unsafe_tokens=frozenset({1}),
                       families=SPEC.families, response_pool=(6,),
                       refusal_pool=(5,), response_len=(1, 2), seed=0)
    with pytest.raises(ValueError):  # unsafe overlaps the trigger id
        SafetyTaskSpec(vocab_size=8, unsafe_tokens=frozenset({4}),
                       families=SPEC.families, response_pool=(6,),
                       refusal_pool=(5,), response_len=(1, 2), seed=0)
    with pytest.raises(ValueError):  # single family
        SafetyTaskSpec(vocab_size=64, unsafe_tokens=frozenset({60}),
                       families=(SPEC.families[0],), response_pool=(6,),
                       refusal_pool=(5,), response_len=(1, 2), seed=0)
    with pytest.raises(ValueError):  # refusal ids collide with unsafe ids
        SafetyTaskSpec(vocab_size=64, unsafe_tokens=frozenset({60}),
                       families=SPEC.families, response_pool=(6,),
                       refusal_pool=(60,), response_len=(1, 2), seed=0)
