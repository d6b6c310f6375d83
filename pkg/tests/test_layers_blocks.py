import numpy as np
import pytest

from fundusseg import reference as ref
from fundusseg import tensor as T
from fundusseg.blocks import GlobalContextBlock, RelationBlock, RelationHead
from fundusseg.layers import ChannelNorm, Conv2dLayer, seeded_rng, xavier_uniform
from fundusseg.tensor import Node


def nd(a):
    return Node(np.asarray(a, dtype=np.float64))


def randomize(block, seed):
    """Overwrite every parameter (including zero-init embeds) with N(0, 0.5)."""
    rng = np.random.default_rng(seed)
    for p in block.params():
        p.data = rng.standard_normal(p.data.shape) * 0.5
        p.grad = None


def weight_dict(head_or_block):
    return {
        "query.kernel": head_or_block.query.kernel.data,
        "query.bias": head_or_block.query.bias.data,
        "key.kernel": head_or_block.key.kernel.data,
        "key.bias": head_or_block.key.bias.data,
        "value.kernel": head_or_block.value.kernel.data,
        "value.bias": head_or_block.value.bias.data,
        "embed.kernel": head_or_block.embed.kernel.data,
        "embed.bias": head_or_block.embed.bias.data,
    }


# ---------------------------------------------------------------- init

def test_seeded_init_is_stable_and_name_dependent():
    a1 = Conv2dLayer("m.a", 4, 4, 3, dtype=np.float64, seed=7)
    a2 = Conv2dLayer("m.a", 4, 4, 3, dtype=np.float64, seed=7)
    b = Conv2dLayer("m.b", 4, 4, 3, dtype=np.float64, seed=7)
    np.testing.assert_array_equal(a1.kernel.data, a2.kernel.data)
    assert np.any(a1.kernel.data != b.kernel.data)
    assert np.all(a1.bias.data == 0)


def test_xavier_bound():
    rng = np.random.default_rng(0)
    w = xavier_uniform((64, 64), 100, 44, rng, np.float64)
    bound = np.sqrt(6.0 / 144.0)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > bound * 0.9   # actually fills the range


def test_seeded_rng_differs_between_names():
    r1 = seeded_rng("x", 0).uniform()
    r2 = seeded_rng("y", 0).uniform()
    r3 = seeded_rng("x", 1).uniform()
    assert r1 != r2 and r1 != r3


# ---------------------------------------------------------------- norm

def test_channel_norm_training_standardizes():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 8, 8)) * 4 + 2
    norm = ChannelNorm("n", 3, dtype=np.float64)
    out = norm(nd(x), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=(1, 2)), 1, atol=1e-4)


def test_channel_norm_running_stats_convention():
    x = np.full((1, 2, 2), 10.0)
    norm = ChannelNorm("n", 1, dtype=np.float64)
    norm(nd(x), training=True)
    # running = 0.9 * initial + 0.1 * batch
    np.testing.assert_allclose(norm.running_mean, [1.0])      # 0.9*0 + 0.1*10
    np.testing.assert_allclose(norm.running_var, [0.9])       # 0.9*1 + 0.1*0


def test_channel_norm_eval_uses_running_stats():
    norm = ChannelNorm("n", 1, dtype=np.float64)
    norm.running_mean[:] = 2.0
    norm.running_var[:] = 4.0
    out = norm(nd(np.full((1, 1, 2), 6.0)), training=False)
    np.testing.assert_allclose(out.data, (6.0 - 2.0) / np.sqrt(4.0 + 1e-5), rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_channel_norm_gradients(training):
    for seed in range(5):
        rng = np.random.default_rng(600 + seed)
        norm = ChannelNorm("n", 2, dtype=np.float64)
        norm.running_mean = rng.standard_normal(2)
        norm.running_var = rng.uniform(0.5, 2.0, 2)
        x = nd(rng.standard_normal((2, 3, 4)))
        m = nd(rng.standard_normal((2, 3, 4)))
        rm, rv = norm.running_mean.copy(), norm.running_var.copy()

        def f():
            norm.running_mean, norm.running_var = rm.copy(), rv.copy()
            return T.sum_all(T.mul(norm(x, training=training), m))

        err, _ = T.grad_check(f, [x, norm.scale, norm.shift])
        assert err < 1e-7, err


# ---------------------------------------------------------------- blocks

def test_global_context_block_is_identity_at_init():
    rng = np.random.default_rng(21)
    for dtype in (np.float32, np.float64):
        f = Node(rng.standard_normal((8, 4, 4)).astype(dtype))
        block = GlobalContextBlock("ctx", 8, dtype=dtype, seed=3)
        out = block(f)
        assert out.data.dtype == dtype
        np.testing.assert_array_equal(out.data, f.data)   # bitwise


def test_relation_block_is_channel_copy_at_init():
    rng = np.random.default_rng(22)
    f_l = Node(rng.standard_normal((8, 4, 4)))
    f_v = Node(rng.standard_normal((8, 4, 4)))
    block = RelationBlock("rel", 8, dtype=np.float64, seed=3)
    out = block(f_l, f_v)
    assert out.data.shape == (16, 4, 4)
    np.testing.assert_array_equal(out.data[:8], f_l.data)   # self head, bitwise
    np.testing.assert_array_equal(out.data[8:], f_l.data)   # cross head, bitwise


@pytest.mark.parametrize("c", [8, 16])
@pytest.mark.parametrize("hw", [1, 2, 4])
def test_global_context_matches_naive(c, hw):
    for seed in range(3):
        rng = np.random.default_rng(1000 + seed)
        block = GlobalContextBlock("ctx", c, dtype=np.float64, seed=seed)
        randomize(block, 40 + seed)
        f = rng.standard_normal((c, hw, hw))
        got = block(Node(f.copy())).data
        want = ref.global_context_naive(f, weight_dict(block))
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("c", [8, 16])
@pytest.mark.parametrize("hw", [1, 2, 4])
def test_relation_block_matches_naive(c, hw):
    for seed in range(3):
        rng = np.random.default_rng(2000 + seed)
        block = RelationBlock("rel", c, dtype=np.float64, seed=seed)
        randomize(block, 50 + seed)
        f_l = rng.standard_normal((c, hw, hw))
        f_v = rng.standard_normal((c, hw, hw))
        got = block(Node(f_l.copy()), Node(f_v.copy())).data
        want = ref.relation_naive(f_l, f_v, weight_dict(block.self_head),
                                  weight_dict(block.cross_head))
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_single_head_variants():
    rng = np.random.default_rng(23)
    f_l = Node(rng.standard_normal((8, 2, 2)))
    f_v = Node(rng.standard_normal((8, 2, 2)))
    for heads, kv in (("self", f_l), ("cross", f_v)):
        block = RelationBlock("rel", 8, heads=heads, dtype=np.float64, seed=1)
        head = block.self_head if heads == "self" else block.cross_head
        randomize(block, 9)
        got = block(f_l, f_v).data
        assert got.shape == (8, 2, 2)
        want = ref.attention_head_naive(f_l.data, kv.data, weight_dict(head))
        np.testing.assert_allclose(got, want, rtol=1e-9)


def _assert_grads(block_params, f_leaves, objective):
    """FD-check every parameter except key biases, which are provably dead:
    a per-channel constant added to all keys shifts each softmax column's
    logits uniformly and cancels, so their true gradient is zero and finite
    differences only see cancellation noise there."""
    live = [p for p in block_params if not p.name.endswith("key.bias")]
    dead = [p for p in block_params if p.name.endswith("key.bias")]
    err, _ = T.grad_check(objective, f_leaves + live, sample_per_tensor=8)
    assert err < 1e-6, err
    objective().backward()
    for p in dead:
        assert np.abs(p.grad).max() < 1e-10


def test_block_gradients():
    for seed in range(3):
        rng = np.random.default_rng(3000 + seed)
        gcb = GlobalContextBlock("ctx", 8, dtype=np.float64, seed=seed)
        randomize(gcb, seed)
        f = nd(rng.standard_normal((8, 3, 3)))
        m = nd(rng.standard_normal((8, 3, 3)))
        _assert_grads(gcb.params(), [f], lambda: T.sum_all(T.mul(gcb(f), m)))

        rel = RelationBlock("rel", 8, dtype=np.float64, seed=seed)
        randomize(rel, seed + 100)
        f_l = nd(rng.standard_normal((8, 3, 3)))
        f_v = nd(rng.standard_normal((8, 3, 3)))
        m2 = nd(rng.standard_normal((16, 3, 3)))
        _assert_grads(rel.params(), [f_l, f_v],
                      lambda: T.sum_all(T.mul(rel(f_l, f_v), m2)))


def test_key_bias_shift_invariance():
    # the property behind the dead gradient: shifting every key by a
    # constant per channel leaves the attention output (nearly) unchanged
    rng = np.random.default_rng(77)
    gcb = GlobalContextBlock("ctx", 8, dtype=np.float64, seed=5)
    randomize(gcb, 5)
    f = nd(rng.standard_normal((8, 4, 4)))
    out0 = gcb(f).data.copy()
    gcb.key.bias.data = gcb.key.bias.data + 3.7
    out1 = gcb(f).data
    np.testing.assert_allclose(out0, out1, rtol=1e-9, atol=1e-9)


def test_channel_divisibility_is_enforced():
    with pytest.raises(ValueError, match="divisible"):
        GlobalContextBlock("ctx", 12)
    with pytest.raises(ValueError, match="divisible"):
        RelationHead("rel.self", 20)


def test_attention_budget_is_enforced():
    block = RelationBlock("rel", 8, attention_budget=16, dtype=np.float64, seed=0)
    f = nd(np.zeros((8, 5, 5)))
    with pytest.raises(ValueError, match="attention_budget"):
        block(f, f)
