import json
import math

import pytest

from comfygi.mutations import (
    InfeasibleMutation,
    KSamplerMutation,
    LlmError,
    MutationApplyError,
    MutationConfig,
    NEGATIVE_REWRITE_TEMPLATE,
    POSITIVE_REWRITE_TEMPLATE,
    PromptStatementMutation,
    PromptWordMutation,
    apply_mutation,
    draw_ksampler_value,
    mutation_from_dict,
    mutation_to_dict,
    render_llm_request,
    sample_checkpoint_mutation,
    sample_ksampler_mutation,
    sample_prompt_llm_mutation,
    sample_prompt_statement_mutation,
    sample_prompt_word_mutation,
    split_statements,
    strip_llm_response,
)
from comfygi.rng import Rng
from comfygi.workflow import (
    KSAMPLER_SAMPLERS,
    KSAMPLER_SCHEDULERS,
    get_field,
    resolve_roles,
    serialize_workflow,
    set_field,
)
from conftest import EchoLlm, SuffixLlm


def changed_nodes(before, after):
    """Node ids whose content differs between two workflows."""
    ids = set(before.nodes) | set(after.nodes)
    return {nid for nid in ids if before.nodes.get(nid) != after.nodes.get(nid)}


# --- checkpoint ---------------------------------------------------------------


def test_checkpoint_forced_choice(default_workflow, roles):
    cfg = MutationConfig(checkpoint_pool=("Stable Diffusion 1.5", "Other Model"))
    for seed in range(20):
        m = sample_checkpoint_mutation(default_workflow, roles, cfg, Rng(seed))
        assert m.ckpt_name == "Other Model"


def test_checkpoint_pool_too_small(default_workflow, roles):
    with pytest.raises(InfeasibleMutation):
        sample_checkpoint_mutation(
            default_workflow, roles, MutationConfig(checkpoint_pool=("only-one",)), Rng(0)
        )


def test_checkpoint_uniform_over_alternatives(default_workflow, roles):
    # 10,000 draws over the 8 alternatives: each within 5 sigma of n/8
    cfg = MutationConfig()
    rng = Rng(123)
    counts = {}
    n = 10000
    current = get_field(default_workflow, roles.checkpoint_id, "ckpt_name")
    for _ in range(n):
        m = sample_checkpoint_mutation(default_workflow, roles, cfg, rng)
        assert m.ckpt_name != current
        counts[m.ckpt_name] = counts.get(m.ckpt_name, 0) + 1
    assert len(counts) == 8
    expected = n / 8
    sigma = math.sqrt(n * (1 / 8) * (7 / 8))
    for name, count in counts.items():
        assert abs(count - expected) < 5 * sigma, (name, count)


# --- ksampler -----------------------------------------------------------------


def test_ksampler_domains_per_field():
    # 1,000 draws per field, all inside their domains
    for index, field in enumerate(("seed", "steps", "cfg", "sampler_name", "scheduler", "denoise")):
        rng = Rng(1000 + index)
        for _ in range(1000):
            value = draw_ksampler_value(field, rng)
            if field == "seed":
                assert isinstance(value, int) and 0 <= value <= 100000
            elif field == "steps":
                assert isinstance(value, int) and 1 <= value < 200
            elif field == "cfg":
                assert 0.0 <= value < 25.0
                assert round(value, 1) == value
            elif field == "sampler_name":
                assert value in KSAMPLER_SAMPLERS
            elif field == "scheduler":
                assert value in KSAMPLER_SCHEDULERS
            else:
                assert 0.0 <= value <= 1.0
                assert round(value, 2) == value


def test_ksampler_sampled_mutations_in_domain(default_workflow, roles):
    cfg = MutationConfig()
    rng = Rng(7)
    seen = set()
    for _ in range(1000):
        m = sample_ksampler_mutation(default_workflow, roles, cfg, rng)
        seen.add(m.field)
        # applying validates the domain; out-of-domain would raise
        apply_mutation(default_workflow, m)
    assert seen == {"seed", "steps", "cfg", "sampler_name", "scheduler", "denoise"}


def test_denoise_rounding_rule(monkeypatch):
    rng = Rng(0)
    monkeypatch.setattr(rng, "real", lambda lo, hi: 0.375)
    assert draw_ksampler_value("denoise", rng) == 0.38


def test_cfg_clamped_below_exclusive_bound(monkeypatch):
    rng = Rng(0)
    monkeypatch.setattr(rng, "real", lambda lo, hi: 24.97)
    assert draw_ksampler_value("cfg", rng) == 24.9


def test_ksampler_resamples_once_on_equal(default_workflow, roles, monkeypatch):
    # force the field to steps and the first draw to the current value
    rng = Rng(0)
    draws = iter([20, 57])
    monkeypatch.setattr(rng, "choice", lambda seq: "steps")
    monkeypatch.setattr(rng, "int_between", lambda lo, hi: next(draws))
    m = sample_ksampler_mutation(default_workflow, roles, MutationConfig(), rng)
    assert m.value == 57
    # equal value after the single resample is kept
    rng2 = Rng(0)
    draws2 = iter([20, 20])
    monkeypatch.setattr(rng2, "choice", lambda seq: "steps")
    monkeypatch.setattr(rng2, "int_between", lambda lo, hi: next(draws2))
    m2 = sample_ksampler_mutation(default_workflow, roles, MutationConfig(), rng2)
    assert m2.value == 20


# --- prompt_word ----------------------------------------------------------------


def prompt_workflow(default_workflow, roles, which, text):
    target = roles.positive_prompt_id if which == "positive" else roles.negative_prompt_id
    return set_field(default_workflow, target, "text", text), target


def test_word_remove_example(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "a red car")
    m = PromptWordMutation(target=target, action="remove", indices=(1,))
    assert get_field(apply_mutation(w, m), target, "text") == "a car"


def test_word_switch_example(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "a red car")
    m = PromptWordMutation(target=target, action="switch", indices=(0, 2))
    assert get_field(apply_mutation(w, m), target, "text") == "car red a"


def test_word_copy_insert(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "a red car")
    m = PromptWordMutation(target=target, action="copy", indices=(2, 0))
    assert get_field(apply_mutation(w, m), target, "text") == "car a red car"


def test_word_count_properties(default_workflow, roles):
    # remove: n-1, copy: n+1, switch: n with the multiset preserved
    rng = Rng(99)
    vocab = ["sun", "cat", "blue", "car", "tree", "sky", "red"]
    for case in range(4000):
        n_words = rng.int_between(1, 8)
        text = " ".join(rng.choice(vocab) for _ in range(n_words))
        w, target = prompt_workflow(default_workflow, roles, "positive", text)
        try:
            m = sample_prompt_word_mutation(w, resolve_roles(w), "positive", rng)
        except InfeasibleMutation:
            pytest.fail("non-empty prompt must always be mutable")
        out = get_field(apply_mutation(w, m), target, "text").split()
        before = text.split()
        if m.action == "remove":
            assert len(out) == len(before) - 1
        elif m.action == "copy":
            assert len(out) == len(before) + 1
        else:
            assert len(out) == len(before)
            assert sorted(out) == sorted(before)


def test_word_infeasible_on_empty_prompt(default_workflow, roles):
    w, _ = prompt_workflow(default_workflow, roles, "positive", "")
    with pytest.raises(InfeasibleMutation):
        sample_prompt_word_mutation(w, resolve_roles(w), "positive", Rng(0))


def test_word_single_word_only_copy(default_workflow, roles):
    w, _ = prompt_workflow(default_workflow, roles, "positive", "hello")
    for seed in range(10):
        m = sample_prompt_word_mutation(w, resolve_roles(w), "positive", Rng(seed))
        assert m.action == "copy"


# --- prompt_statement -----------------------------------------------------------


def test_statement_split():
    assert split_statements("a cat, digital painting") == ["a cat", "digital painting"]
    assert split_statements(" a ,  , b, ") == ["a", "b"]
    assert split_statements("") == []


def test_statement_remove_example(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "a cat, digital painting")
    m = PromptStatementMutation(target=target, action="remove", indices=(1,))
    assert get_field(apply_mutation(w, m), target, "text") == "a cat"


def test_statement_add_into_empty(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "")
    m = PromptStatementMutation(target=target, action="add", indices=(0,), statement="ultra realistic")
    assert get_field(apply_mutation(w, m), target, "text") == "ultra realistic"


def test_statement_empty_prompt_empty_pool_infeasible(default_workflow, roles):
    w, _ = prompt_workflow(default_workflow, roles, "positive", "")
    cfg = MutationConfig(positive_statement_pool=(), negative_statement_pool=())
    with pytest.raises(InfeasibleMutation):
        sample_prompt_statement_mutation(w, resolve_roles(w), "positive", cfg, Rng(0))


def test_statement_pool_is_prompt_specific(default_workflow, roles, small_mcfg):
    rng = Rng(5)
    for _ in range(300):
        m = sample_prompt_statement_mutation(
            default_workflow, roles, "positive", small_mcfg, rng
        )
        if m.statement is not None:
            assert m.statement in small_mcfg.positive_statement_pool
        m = sample_prompt_statement_mutation(
            default_workflow, roles, "negative", small_mcfg, rng
        )
        if m.statement is not None:
            assert m.statement in small_mcfg.negative_statement_pool


def test_statement_count_deltas(default_workflow, roles, small_mcfg):
    rng = Rng(31)
    segments = ["a cat", "bright colors", "night sky", "oil painting"]
    for case in range(3000):
        n = rng.int_between(1, 4)
        text = ", ".join(rng.choice(segments) for _ in range(n))
        w, target = prompt_workflow(default_workflow, roles, "positive", text)
        m = sample_prompt_statement_mutation(w, resolve_roles(w), "positive", small_mcfg, rng)
        out = split_statements(get_field(apply_mutation(w, m), target, "text"))
        before = split_statements(text)
        delta = {"remove": -1, "add": 1, "copy": 1, "switch": 0, "replace": 0}[m.action]
        assert len(out) == len(before) + delta


# --- prompt_llm ------------------------------------------------------------------


def test_llm_request_templates():
    positive = render_llm_request("positive", "mcdonalds church")
    assert positive.startswith("Rewrite the following positive prompt")
    assert '"mcdonalds church"' in positive
    assert positive == POSITIVE_REWRITE_TEMPLATE.replace("[PROMPT]", "mcdonalds church")
    negative = render_llm_request("negative", "text, watermark")
    assert negative.startswith("Replace the following negative prompt")
    assert negative == NEGATIVE_REWRITE_TEMPLATE.replace("[PROMPT]", "text, watermark")


def test_llm_response_quote_stripping():
    assert strip_llm_response('"a gothic cathedral, golden arches"') == "a gothic cathedral, golden arches"
    assert strip_llm_response("  'quoted'  ") == "quoted"
    assert strip_llm_response("plain text") == "plain text"
    assert strip_llm_response('say "hi" now') == 'say "hi" now'


def test_llm_mutation_materializes_text(default_workflow, roles, small_mcfg):
    llm = SuffixLlm(", masterpiece")
    m = sample_prompt_llm_mutation(default_workflow, roles, "positive", small_mcfg, Rng(3), llm)
    original = get_field(default_workflow, roles.positive_prompt_id, "text")
    assert m.text == original + ", masterpiece"
    assert m.model in small_mcfg.llm_models
    assert 0 <= m.llm_seed <= 100000
    lo, hi = small_mcfg.llm_temperature_range
    assert lo <= m.temperature <= hi
    assert round(m.temperature, 2) == m.temperature
    out = apply_mutation(default_workflow, m)
    assert get_field(out, roles.positive_prompt_id, "text") == m.text


def test_llm_failure_is_infeasible(default_workflow, roles, small_mcfg):
    class DeadLlm:
        def complete(self, model, seed, temperature, request):
            raise LlmError("connection refused")

    with pytest.raises(InfeasibleMutation):
        sample_prompt_llm_mutation(default_workflow, roles, "positive", small_mcfg, Rng(0), DeadLlm())

    class EmptyLlm:
        def complete(self, model, seed, temperature, request):
            return '""'

    with pytest.raises(InfeasibleMutation):
        sample_prompt_llm_mutation(default_workflow, roles, "positive", small_mcfg, Rng(0), EmptyLlm())


# --- apply ------------------------------------------------------------------------


def test_apply_ksampler_cfg(default_workflow, roles):
    m = KSamplerMutation(target=roles.ksampler_id, field="cfg", value=7.5)
    out = apply_mutation(default_workflow, m)
    assert get_field(out, roles.ksampler_id, "cfg") == 7.5
    assert changed_nodes(default_workflow, out) == {roles.ksampler_id}


def test_apply_rejects_out_of_domain(default_workflow, roles):
    m = KSamplerMutation(target=roles.ksampler_id, field="cfg", value=30.0)
    with pytest.raises(MutationApplyError):
        apply_mutation(default_workflow, m)


def test_apply_checkpoint_idempotent(default_workflow, roles, small_mcfg):
    m = sample_checkpoint_mutation(default_workflow, roles, small_mcfg, Rng(11))
    once = apply_mutation(default_workflow, m)
    twice = apply_mutation(once, m)
    assert once == twice


def test_apply_touches_exactly_one_node(default_workflow, roles, small_mcfg, echo_llm):
    rng = Rng(1234)
    samplers = [
        lambda: sample_checkpoint_mutation(default_workflow, roles, small_mcfg, rng),
        lambda: sample_ksampler_mutation(default_workflow, roles, small_mcfg, rng),
        lambda: sample_prompt_word_mutation(default_workflow, roles, "positive", rng),
        lambda: sample_prompt_statement_mutation(default_workflow, roles, "negative", small_mcfg, rng),
        lambda: sample_prompt_llm_mutation(
            default_workflow, roles, "positive", small_mcfg, rng, SuffixLlm(", hdr")
        ),
    ]
    for case in range(500):
        m = samplers[case % len(samplers)]()
        out = apply_mutation(default_workflow, m)
        assert changed_nodes(default_workflow, out) <= {m.target}


def test_apply_stale_indices_fail(default_workflow, roles):
    w, target = prompt_workflow(default_workflow, roles, "positive", "one two")
    m = PromptWordMutation(target=target, action="remove", indices=(5,))
    with pytest.raises(MutationApplyError):
        apply_mutation(w, m)


def test_apply_unknown_target(default_workflow):
    m = KSamplerMutation(target="404", field="steps", value=10)
    with pytest.raises(MutationApplyError):
        apply_mutation(default_workflow, m)


def test_sampling_is_deterministic(default_workflow, roles, small_mcfg):
    def draw(seed):
        rng = Rng(seed)
        out = [
            sample_checkpoint_mutation(default_workflow, roles, small_mcfg, rng),
            sample_ksampler_mutation(default_workflow, roles, small_mcfg, rng),
            sample_prompt_word_mutation(default_workflow, roles, "negative", rng),
            sample_prompt_statement_mutation(default_workflow, roles, "positive", small_mcfg, rng),
            sample_prompt_llm_mutation(
                default_workflow, roles, "positive", small_mcfg, rng, EchoLlm()
            ),
        ]
        return json.dumps([mutation_to_dict(m) for m in out], sort_keys=True)

    assert draw(77) == draw(77)
    assert draw(77) != draw(78)


def test_mutation_dict_round_trip(default_workflow, roles, small_mcfg):
    rng = Rng(2024)
    mutations = [
        sample_checkpoint_mutation(default_workflow, roles, small_mcfg, rng),
        sample_ksampler_mutation(default_workflow, roles, small_mcfg, rng),
        sample_prompt_word_mutation(default_workflow, roles, "positive", rng),
        sample_prompt_statement_mutation(default_workflow, roles, "negative", small_mcfg, rng),
        sample_prompt_llm_mutation(default_workflow, roles, "negative", small_mcfg, rng, EchoLlm()),
    ]
    for m in mutations:
        assert mutation_from_dict(mutation_to_dict(m)) == m


def test_mutation_purity(default_workflow, roles):
    text_before = serialize_workflow(default_workflow)
    m = KSamplerMutation(target=roles.ksampler_id, field="steps", value=55)
    apply_mutation(default_workflow, m)
    assert serialize_workflow(default_workflow) == text_before
