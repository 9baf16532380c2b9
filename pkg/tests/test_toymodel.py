import numpy as np
import pytest

from lpsr.numerics import ConfigError, DomainError
from lpsr.problems import EOS, Problem, extract_answer
from lpsr.toymodel import ModelConfig, ToyTransformer, greedy_tokens, make_toy_problems


@pytest.fixture(scope="module")
def model():
    return ToyTransformer(ModelConfig())


def first_logits(m, tok=3):
    return m.step(m.new_cache(), tok).logits


def test_same_seed_same_weights():
    a, b = ToyTransformer(ModelConfig(seed=5)), ToyTransformer(ModelConfig(seed=5))
    assert first_logits(a).tobytes() == first_logits(b).tobytes()
    assert not np.array_equal(first_logits(a), first_logits(ToyTransformer(ModelConfig(seed=6))))


@pytest.mark.parametrize("bad", [dict(n_layers=0), dict(d=63), dict(vocab=1), dict(heads=0)])
def test_invalid_geometry(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_step_does_not_mutate_and_replays(model):
    cache = model.new_cache(8)
    cache.append(model.step(cache, 5).kv_delta)
    d = cache.digest()
    a = model.step(cache, 7)
    assert cache.digest() == d
    b = model.step(cache, 7)
    assert a.logits.tobytes() == b.logits.tobytes() and a.token == b.token
    for l in a.hidden:
        assert a.hidden[l].tobytes() == b.hidden[l].tobytes()


def test_replay_after_rollback_matches_checkpoint(model):
    cache = model.new_cache(16)
    toks = [3, 9, 4, 1, 7, 2, 8]
    for t in toks[:3]:
        cache.append(model.step(cache, t).kv_delta)
    a = cache.checkpoint()
    for t in toks[3:]:
        cache.append(model.step(cache, t).kv_delta)
    b = cache.checkpoint()
    cache.rollback_to(a)
    for t in toks[3:]:
        cache.append(model.step(cache, t).kv_delta)
    assert cache.digest() == b.digest


def test_hook_consistency(model):
    cache = model.new_cache(4)
    all_l = model.step(cache, 3, hooks=None)
    for l in range(model.n_layers):
        one = model.step(cache, 3, hooks=(l,))
        assert one.hidden[l].tobytes() == all_l.hidden[l].tobytes()
        assert one.token == all_l.token


def test_one_layer_logits_oracle():
    m = ToyTransformer(ModelConfig(n_layers=1, final_norm=False))
    out = m.step(m.new_cache(2), 4, hooks=(0,))
    np.testing.assert_allclose(out.logits, m.unembed @ out.hidden[0], rtol=1e-5, atol=1e-5)


def test_zero_injection_identity(model):
    cache = model.new_cache(4)
    a = model.step(cache, 6, lens=(3,))
    b = model.step_with_injection(cache, 6, 3, np.zeros(model.d, np.float32), lens=(3,))
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.kv_delta[0].tobytes() == b.kv_delta[0].tobytes()
    assert a.kv_delta[1].tobytes() == b.kv_delta[1].tobytes()


def test_injection_ratio_within_triangle_bounds(model):
    rng = np.random.default_rng(0)
    cache = model.new_cache(4)
    h = model.step(cache, 6, hooks=(4,)).hidden[4].astype(np.float64)
    delta = rng.standard_normal(model.d)
    delta /= np.linalg.norm(delta)
    alpha = 0.1 * np.linalg.norm(h)  # relative size 0.1
    r = np.linalg.norm(h + alpha * delta) / np.linalg.norm(h)
    assert 0.9 <= r <= 1.1


def test_final_layer_linear_response():
    m = ToyTransformer(ModelConfig(n_layers=1, final_norm=False))
    add = np.random.default_rng(1).standard_normal(m.d).astype(np.float32)
    cache = m.new_cache(2)
    base = m.step(cache, 2).logits.astype(np.float64)
    pushed = m.step_with_injection(cache, 2, 0, add).logits.astype(np.float64)
    np.testing.assert_allclose(pushed - base, m.unembed.astype(np.float64) @ add, rtol=1e-4, atol=1e-4)


def test_teacher_forcing_self_consistency(model):
    prompt = (5, 9, 2)
    toks = greedy_tokens(model, prompt, 20)
    ep = model.episode(Problem("p", prompt), 20)
    prev, free = ep.first_token, []
    for _ in toks:
        so = ep.step(prev, hooks=(4,))
        ep.cache.append(so.kv_delta)
        free.append(so.hidden[4])
        prev = so.token
    forced = model.teacher_forced_hiddens(toks, 4, prompt)
    assert len(forced) == len(toks)
    for a, b in zip(free, forced):
        assert a.tobytes() == b.tobytes()


def test_teacher_forcing_diverges_after_first_difference(model):
    prompt = (5, 9, 2)
    toks = greedy_tokens(model, prompt, 12)
    alt = list(toks)
    alt[3] = (alt[3] % (model.vocab - 1)) + 1
    a = model.teacher_forced_hiddens(toks, 4, prompt)
    b = model.teacher_forced_hiddens(alt, 4, prompt)
    # token i is fed at step i+1, so hiddens agree through step 4 (index 3)
    for i in range(4):
        assert a[i].tobytes() == b[i].tobytes()
    assert not np.array_equal(a[4], b[4])


def test_teacher_forcing_errors(model):
    assert len(model.teacher_forced_hiddens([3], 2)) == 1
    with pytest.raises(DomainError):
        model.teacher_forced_hiddens([], 2)
    with pytest.raises(DomainError):
        model.teacher_forced_hiddens([model.vocab], 2)


def test_toy_problems_gold_consistency(model):
    probs = make_toy_problems(model, 12, seed=3, max_T=24)
    for p in probs:
        greedy = greedy_tokens(model, p.prompt, 24)
        assert p.gold_answer == extract_answer(p.gold_tokens)
        if p.metadata["solvable"]:
            assert list(p.gold_tokens) == greedy
        else:
            assert p.gold_tokens[-1] == EOS
            assert extract_answer(greedy) != p.gold_answer


def test_toy_problems_always_have_gold(model):
    for p in make_toy_problems(model, 100, seed=0, max_T=32):
        assert p.gold_answer is not None
