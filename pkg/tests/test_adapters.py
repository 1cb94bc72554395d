import numpy as np
import pytest
from helpers import numeric_grad, rel_error
from hypothesis import given
from hypothesis import strategies as st

from curlora.adapters import (
    CurLoraAdapter,
    LoraAdapter,
    adapter_backward,
    adapter_forward,
    adapter_from_dict,
    adapted_weight,
    frobenius_bound_gap,
    output_shift,
    trainable_param_count,
)
from curlora.matrix import RandomSource, ShapeError, frobenius_norm

seeds = st.integers(0, 2**32 - 1)


def make(kind, seed, m=7, n=5, rank=3, alpha=1.0, trained=True):
    gen = np.random.default_rng(seed)
    w = gen.normal(size=(m, n))
    rng = RandomSource(seed)
    if kind == "curlora":
        ad = CurLoraAdapter.from_weight(w, rank, rng, alpha)
        if trained:
            ad.u[:] = gen.normal(size=ad.u.shape)
    else:
        ad = LoraAdapter.from_weight(w, rank, rng, alpha)
        if trained:
            ad.b[:] = gen.normal(size=ad.b.shape)
    return ad, gen


@pytest.mark.parametrize("kind", ["curlora", "lora"])
@pytest.mark.parametrize("seed", range(20))
def test_adapter_gradients_match_finite_differences(kind, seed):
    ad, gen = make(kind, seed, alpha=0.7)
    x = gen.normal(size=(4, ad.shape[0]))
    g_out = gen.normal(size=(4, ad.shape[1]))

    def loss():
        return float(np.sum(adapter_forward(x, ad) * g_out))

    grads, dx = adapter_backward(x, g_out, ad)
    for name, t in ad.tensors().items():
        assert rel_error(grads[name], numeric_grad(loss, t)) < 1e-6
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-6


@pytest.mark.parametrize("kind", ["curlora", "lora"])
@given(seed=seeds)
def test_zero_init_is_an_exact_no_op(kind, seed):
    ad, gen = make(kind, seed, trained=False)
    x = gen.normal(size=(3, ad.shape[0]))
    np.testing.assert_array_equal(adapter_forward(x, ad), x @ ad.w)
    assert output_shift(x, ad) == 0.0


def test_curlora_only_u_is_trainable():
    ad, _ = make("curlora", 0)
    assert set(ad.tensors()) == {"U"}
    assert ad.tensors()["U"] is ad.factors.u


def test_lora_init_ranges():
    ad, _ = make("lora", 3, m=50, n=10, rank=4, trained=False)
    bound = np.sqrt(6 / 50)
    assert np.all(np.abs(ad.a) <= bound) and ad.a.std() > 0.3 * bound
    assert not np.any(ad.b)


@pytest.mark.parametrize("kind", ["curlora", "lora"])
def test_forward_and_backward_leave_frozen_weight_untouched(kind):
    ad, gen = make(kind, 1)
    w0 = ad.w.copy()
    c0 = ad.factors.c.copy() if kind == "curlora" else None
    x = gen.normal(size=(4, ad.shape[0]))
    adapter_backward(x, gen.normal(size=(4, ad.shape[1])), ad)
    np.testing.assert_array_equal(ad.w, w0)
    if kind == "curlora":
        np.testing.assert_array_equal(ad.factors.c, c0)


@given(seed=seeds, alpha=st.floats(-3, 3))
def test_frobenius_bound_holds(seed, alpha):
    ad, _ = make("curlora", seed, alpha=alpha)
    lhs, rhs = frobenius_bound_gap(ad)
    assert lhs <= rhs + 1e-9
    assert lhs == pytest.approx(frobenius_norm(adapted_weight(ad)), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("kind", ["curlora", "lora"])
@given(seed=seeds)
def test_output_shift_equals_direct_difference(kind, seed):
    ad, gen = make(kind, seed)
    x = gen.normal(size=(6, ad.shape[0]))
    direct = frobenius_norm(adapter_forward(x, ad) - x @ ad.w)
    assert abs(direct - output_shift(x, ad)) <= 1e-9


def test_input_shape_is_checked():
    ad, _ = make("curlora", 0)
    with pytest.raises(ShapeError):
        adapter_forward(np.ones((2, ad.shape[0] + 1)), ad)


def test_parameter_counts():
    assert trainable_param_count("full", 4096, 1024, 16) == 4096 * 1024
    assert trainable_param_count("lora", 4096, 1024, 16) == 16 * (4096 + 1024)
    assert trainable_param_count("curlora", 4096, 1024, 16) == 256
    with pytest.raises(ValueError):
        trainable_param_count("dora", 4, 4, 2)


def test_seven_billion_attention_counts():
    # 32 layers; q is 4096x4096, k and v are 4096x1024
    shapes = [(4096, 4096), (4096, 1024), (4096, 1024)] * 32
    assert sum(trainable_param_count("lora", m, n, 16) for m, n in shapes) == 9_437_184
    assert sum(trainable_param_count("curlora", m, n, 16) for m, n in shapes) == 24_576


@pytest.mark.parametrize("kind", ["curlora", "lora"])
def test_serialization_round_trip(kind):
    ad, gen = make(kind, 4)
    back = adapter_from_dict(ad.to_dict(), ad.w)
    x = gen.normal(size=(3, ad.shape[0]))
    np.testing.assert_array_equal(adapter_forward(x, back), adapter_forward(x, ad))


def test_deserialize_rejects_wrong_weight_shape():
    ad, _ = make("curlora", 4)
    with pytest.raises(ShapeError):
        adapter_from_dict(ad.to_dict(), np.ones((3, 3)))
