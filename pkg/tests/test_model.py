import math

import numpy as np
import pytest
from helpers import numeric_grad, rel_error
from hypothesis import given
from hypothesis import strategies as st

from curlora import nn
from curlora.matrix import RandomSource
from curlora.model import (
    ModelConfig,
    attach_adapters,
    backbone_shapes,
    init_model,
    load_checkpoint,
    param_count,
    perplexity,
    save_checkpoint,
    swap_head,
)

TINY = dict(vocab_size=11, d_model=8, n_heads=2, n_layers=2, max_seq_len=6)


def tiny(adapter="none", seed=0, rank=2, **kw):
    return init_model(ModelConfig(**{**TINY, **kw}, adapter=adapter, rank=rank, seed=seed))


def perturb_trainables(model, gen, scale=0.3):
    """Move adapters off their zero init so every gradient path is exercised."""
    for ad in model.adapters.values():
        for t in ad.tensors().values():
            t += gen.normal(scale=scale, size=t.shape)


def classify_loss(model, x, y, tid):
    logits = model.forward_classify(x, tid)
    model._tape = None
    return nn.softmax_xent_forward(logits, y)[0]


def lm_loss(model, x, y):
    logits = model.forward_lm(x)
    model._tape = None
    return nn.softmax_xent_forward(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))[0]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3).validate()
    with pytest.raises(ValueError):
        ModelConfig(adapter="curlora", rank=64, d_model=64).validate()
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"d_model": 8, "dmodel": 8})


def test_same_seed_gives_identical_parameters():
    a, b = tiny("curlora", seed=3), tiny("curlora", seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    for k in a.adapters:
        assert a.adapters[k].factors.col_indices == b.adapters[k].factors.col_indices


def test_parameter_count_matches_formula():
    cfg = ModelConfig(**TINY)
    d, v, L, T = cfg.d_model, cfg.vocab_size, cfg.n_layers, cfg.max_seq_len
    per_block = 4 * (d * d + d) + 2 * 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    expected = v * d + T * d + L * per_block + 2 * d + d * v + v
    assert param_count(tiny())["backbone"] == expected
    assert sum(math.prod(s) for s in backbone_shapes(cfg).values()) == expected


@pytest.mark.parametrize("kind", ["curlora", "lora"])
@pytest.mark.parametrize("seed", range(10))
def test_adapters_do_not_change_outputs_before_training(kind, seed):
    base = tiny(seed=seed)
    adapted = base.copy()
    attach_adapters(adapted, kind, 3, 1.0, RandomSource(seed))
    swap_head(base, "t", 3, RandomSource(seed))
    swap_head(adapted, "t", 3, RandomSource(seed))
    x = np.random.default_rng(seed).integers(0, 11, size=(4, 6))
    np.testing.assert_array_equal(adapted.forward_lm(x), base.forward_lm(x))
    np.testing.assert_array_equal(adapted.forward_classify(x, "t"), base.forward_classify(x, "t"))


def test_exactly_three_adapters_per_layer():
    m = tiny("curlora")
    assert sorted(m.adapters) == [f"blocks.{i}.attn.{n}" for i in range(2) for n in "kqv"]


@pytest.mark.parametrize("kind,names", [("curlora", {"U"}), ("lora", {"A", "B"})])
def test_gradient_set_is_adapters_plus_active_head(kind, names):
    m = tiny(kind)
    swap_head(m, "a", 2, RandomSource(0))
    swap_head(m, "b", 2, RandomSource(0))
    x = np.random.default_rng(0).integers(0, 11, size=(3, 4))
    _, grads = m.loss_and_grads(x, np.array([0, 1, 1]), "b")
    expected = {f"{k}.{n}" for k in m.adapters for n in names} | {"heads.b.weight", "heads.b.bias"}
    assert set(grads) == expected


def flat_rel_error(grads, numeric):
    # one relative error over all tensors: the key bias has an exactly zero
    # gradient (softmax ignores a shift of all scores), so per-tensor ratios
    # would compare rounding noise against rounding noise
    names = sorted(grads)
    return rel_error(np.concatenate([grads[n].ravel() for n in names]),
                     np.concatenate([numeric[n].ravel() for n in names]))


def well_conditioned(kind, seed, gen):
    """Backbone at O(1) scale so that adapter gradients sit far above difference noise."""
    m = tiny(seed=seed)
    for name, p in m.params.items():
        p += gen.normal(scale=0.5, size=p.shape)
    attach_adapters(m, kind, 2, 1.0, RandomSource(seed))
    perturb_trainables(m, gen)
    return m


@pytest.mark.parametrize("kind", ["curlora", "lora"])
@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_classification_gradients(kind, seed):
    gen = np.random.default_rng(seed)
    m = well_conditioned(kind, seed, gen)
    swap_head(m, "t", 3, RandomSource(seed))
    x, y = gen.integers(0, 11, size=(3, 5)), gen.integers(0, 3, size=3)
    _, grads = m.loss_and_grads(x, y, "t")
    params = m.trainable_tensors()
    numeric = {n: numeric_grad(lambda: classify_loss(m, x, y, "t"), params[n]) for n in grads}
    assert flat_rel_error(grads, numeric) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_language_model_gradients(seed):
    gen = np.random.default_rng(seed)
    m = well_conditioned("none", seed, gen)
    m.train_backbone = True
    x = gen.integers(0, 11, size=(2, 6))
    y = gen.integers(0, 11, size=(2, 6))
    _, grads = m.loss_and_grads(x, y)
    assert set(grads) == set(m.params)
    sub, numeric = {}, {}
    for name, g in grads.items():
        p = m.params[name]
        # a random subset of coordinates keeps the big tensors cheap
        coords = gen.choice(p.size, size=min(p.size, 12), replace=False)
        sub[name] = g.reshape(-1)[coords]
        numeric[name] = numeric_grad(lambda: lm_loss(m, x, y), p, coords=coords).reshape(-1)[coords]
    assert flat_rel_error(sub, numeric) < 1e-5


def test_batch_matches_single_example_loop():
    m = tiny("curlora", seed=2)
    perturb_trainables(m, np.random.default_rng(2))
    swap_head(m, "t", 2, RandomSource(0))
    x = np.random.default_rng(5).integers(0, 11, size=(4, 6))
    batch = m.forward_classify(x, "t")
    loop = np.concatenate([m.forward_classify(x[i : i + 1], "t") for i in range(4)])
    np.testing.assert_allclose(batch, loop, rtol=1e-12, atol=1e-14)
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(m.forward_lm(x[perm]), m.forward_lm(x)[perm], rtol=1e-12, atol=1e-14)


def test_untrained_lm_loss_is_near_log_vocab():
    m = tiny()
    x = np.random.default_rng(0).integers(0, 11, size=(8, 6))
    assert lm_loss(m, x, x) == pytest.approx(math.log(11), rel=0.05)


def test_classify_errors():
    m = tiny()
    with pytest.raises(KeyError):
        m.forward_classify(np.zeros((1, 3), dtype=int), "missing")
    swap_head(m, "t", 2, RandomSource(0))
    with pytest.raises(IndexError):
        m.forward_classify(np.full((1, 3), 11), "t")


def test_swap_head_keeps_earlier_heads():
    m = tiny()
    swap_head(m, "a", 2, RandomSource(0))
    w = m.heads["a"].weight.copy()
    swap_head(m, "b", 3, RandomSource(0))
    swap_head(m, "a", 2, RandomSource(99))
    np.testing.assert_array_equal(m.heads["a"].weight, w)
    assert m.active_task == "a"
    with pytest.raises(ValueError):
        swap_head(m, "a", 3, RandomSource(0))


def test_uniform_model_has_vocab_perplexity():
    m = init_model(ModelConfig(vocab_size=27, d_model=8, n_heads=2, n_layers=1, max_seq_len=5))
    m.params["lm_head.weight"][:] = 0.0
    stream = np.random.default_rng(0).integers(0, 27, size=23)
    assert perplexity(m, stream) == pytest.approx(27.0, abs=1e-6)


@given(st.integers(2, 40), st.integers(0, 1000))
def test_perplexity_is_exp_of_mean_window_loss(n, seed):
    m = tiny(seed=1)
    stream = np.random.default_rng(seed).integers(0, 11, size=n)
    L = m.cfg.max_seq_len
    nll, count = 0.0, 0
    for s in range(0, n - 1, L):
        e = min(s + L, n - 1)
        nll += lm_loss(m, stream[None, s:e], stream[None, s + 1 : e + 1]) * (e - s)
        count += e - s
    assert perplexity(m, stream) == pytest.approx(math.exp(nll / count), rel=1e-10)


def test_perplexity_needs_two_tokens():
    with pytest.raises(ValueError):
        perplexity(tiny(), np.array([1]))


@pytest.mark.parametrize("kind", ["none", "curlora", "lora"])
def test_checkpoint_round_trip(tmp_path, kind):
    m = tiny(kind, seed=4)
    perturb_trainables(m, np.random.default_rng(4))
    swap_head(m, "t", 2, RandomSource(1))
    save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    stream = np.random.default_rng(0).integers(0, 11, size=40)
    assert perplexity(back, stream) == perplexity(m, stream)
    x = stream[:12].reshape(2, 6)
    np.testing.assert_array_equal(back.forward_classify(x, "t"), m.forward_classify(x, "t"))
