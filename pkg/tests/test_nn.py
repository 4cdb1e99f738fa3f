import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rttd.datasets import LabeledDataset
from rttd.nn import (
    Checkpoint,
    ModelArch,
    ModelWeights,
    RngKey,
    SubRunSpec,
    decode_checkpoint,
    decode_checkpoint_binary,
    encode_checkpoint,
    encode_checkpoint_binary,
    evaluate_accuracy,
    forward,
    forward_hidden,
    init_weights,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    softmax,
    train_subrun,
)

ARCH_283 = ModelArch(2, (8,), 3, "tanh")


def random_weights(arch, rng, scale=1.0):
    return ModelWeights(arch, scale * rng.standard_normal(arch.num_params))


# -- arch and init ------------------------------------------------------------

def test_arch_validation():
    with pytest.raises(ValueError):
        ModelArch(2, (8,), 1)
    with pytest.raises(ValueError):
        ModelArch(0, (8,), 3)
    with pytest.raises(ValueError):
        ModelArch(2, (0,), 3)
    with pytest.raises(ValueError):
        ModelArch(2, (8,), 3, "sigmoid")


def test_layout_is_total():
    arch = ModelArch(5, (7, 3), 4)
    covered = np.zeros(arch.num_params, dtype=int)
    for ws, bs in arch.slices():
        covered[ws] += 1
        covered[bs] += 1
    assert np.all(covered == 1)


def test_softmax_regression_layout():
    arch = ModelArch(6, (), 3)
    assert init_weights(arch, RngKey(0, 1, 0)).values.size == 6 * 3 + 3


def test_init_deterministic_and_key_sensitive():
    arch = ModelArch(10, (16,), 4)
    a = init_weights(arch, RngKey(5, 1, 0))
    assert a.same_as(init_weights(arch, RngKey(5, 1, 0)))
    assert not a.same_as(init_weights(arch, RngKey(5, 2, 0)))


def test_init_bounds():
    arch = ModelArch(10, (16,), 4)
    w = init_weights(arch, RngKey(1, 1, 0))
    for (fi, fo), (wl, bl) in zip(arch.layer_dims, w.layers()):
        assert np.all(np.abs(wl) <= math.sqrt(6 / (fi + fo)))
        assert np.all(bl == 0)


def test_weights_reject_bad_values():
    with pytest.raises(ValueError):
        ModelWeights(ARCH_283, np.zeros(3))
    bad = np.zeros(ARCH_283.num_params)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        ModelWeights(ARCH_283, bad)


def test_rng_key_derivation():
    key = RngKey(42, 7, 3, "augment")
    text = b"rttd|42|7|3|augment|5"
    expected = int.from_bytes(hashlib.blake2b(text, digest_size=32).digest()[:8], "little")
    assert key.seed64(5) == expected
    draw = key.generator(5).random(4)
    assert np.array_equal(draw, np.random.Generator(np.random.PCG64(expected)).random(4))
    with pytest.raises(ValueError):
        RngKey(0, 0, 0, "other")


# -- forward ------------------------------------------------------------------

def test_zero_weights_give_zero_logits():
    w = ModelWeights(ARCH_283, np.zeros(ARCH_283.num_params))
    assert np.all(forward(w, [3.0, -1.0]) == 0)


def test_linear_layer_hand_product():
    arch = ModelArch(2, (), 2)
    # W = [[1, 2], [3, 4]] (in x out), b = [0.5, -0.5]
    w = ModelWeights(arch, [1, 2, 3, 4, 0.5, -0.5])
    assert np.array_equal(forward(w, [1.0, 2.0]), [1 + 6 + 0.5, 2 + 8 - 0.5])


def test_forward_rejects_dimension_mismatch():
    w = init_weights(ARCH_283, RngKey(0, 1, 0))
    with pytest.raises(ValueError):
        forward(w, [1.0, 2.0, 3.0])


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_softmax_on_simplex(logits):
    p = softmax(np.array(logits))
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)


def test_hidden_relu_dead_zone():
    arch = ModelArch(2, (4,), 3)
    vals = np.zeros(arch.num_params)
    (ws, bs), _ = arch.slices()
    vals[ws] = 1.0
    vals[bs] = -10.0
    assert np.all(forward_hidden(ModelWeights(arch, vals), [1.0, 1.0]) == 0)


def test_hidden_tanh_range():
    w = random_weights(ARCH_283, np.random.default_rng(0))
    h = forward_hidden(w, np.random.default_rng(1).normal(size=(50, 2)))
    assert np.all(np.abs(h) < 1)


def test_hidden_matches_layer_by_layer():
    arch = ModelArch(3, (5, 4), 2, "relu")
    w = random_weights(arch, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=3)
    vals = w.values
    pos = 0
    h = x
    for fi, fo in [(3, 5), (5, 4)]:
        W = vals[pos:pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        b = vals[pos:pos + fo]
        pos += fo
        h = np.array([max(0.0, sum(h[i] * W[i, j] for i in range(fi)) + b[j]) for j in range(fo)])
    assert np.allclose(forward_hidden(w, x), h, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        forward_hidden(ModelWeights(ModelArch(3, (), 2), np.zeros(8)), x)


# -- loss and gradient --------------------------------------------------------

def test_uniform_logits_loss():
    w = ModelWeights(ModelArch(2, (), 5), np.zeros(15))
    loss, _ = loss_and_grad(w, [[1.0, 2.0]], [3])
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_loss_errors():
    w = ModelWeights(ARCH_283, np.zeros(ARCH_283.num_params))
    with pytest.raises(ValueError):
        loss_and_grad(w, np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        loss_and_grad(w, [[0.0, 0.0]], [3])


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradient_matches_central_differences(activation):
    arch = ModelArch(2, (8,), 3, activation)
    rng = np.random.default_rng(17)
    eps = 1e-5
    for _ in range(100):
        w = random_weights(arch, rng)
        x = rng.normal(size=(6, 2))
        y = rng.integers(0, 3, size=6)
        _, grad = loss_and_grad(w, x, y)
        num = np.empty_like(grad)
        for i in range(grad.size):
            up = w.values.copy()
            dn = w.values.copy()
            up[i] += eps
            dn[i] -= eps
            num[i] = (loss_and_grad(w.with_values(up), x, y)[0]
                      - loss_and_grad(w.with_values(dn), x, y)[0]) / (2 * eps)
        big = np.maximum(np.abs(grad), np.abs(num)) > 1e-6
        rel = np.abs(grad - num)[big] / np.maximum(np.abs(grad), np.abs(num))[big]
        assert rel.size == 0 or rel.max() <= 1e-4


def test_duplicated_batch_same_loss_and_grad():
    w = random_weights(ARCH_283, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(5, 2))
    y = np.array([0, 1, 2, 0, 1])
    l1, g1 = loss_and_grad(w, x, y)
    l2, g2 = loss_and_grad(w, np.vstack([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


# -- training ----------------------------------------------------------------

def toy_data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    return LabeledDataset(x, (x[:, 0] > 0).astype(int) + (x[:, 1] > 0), 3)


def test_subrun_spec_validation():
    with pytest.raises(ValueError):
        SubRunSpec(0, 0.1, 4)
    with pytest.raises(ValueError):
        SubRunSpec(1, -0.1, 4)


def test_zero_lr_is_identity():
    w = init_weights(ARCH_283, RngKey(0, 1, 0))
    out = train_subrun(w, toy_data(), SubRunSpec(1, 0.0, 8), RngKey(0, 1, 0))
    assert out.same_as(w)


def test_training_deterministic():
    w = init_weights(ARCH_283, RngKey(0, 1, 0))
    spec = SubRunSpec(25, 0.1, 8)
    a = train_subrun(w, toy_data(), spec, RngKey(3, 2, 1))
    assert a.same_as(train_subrun(w, toy_data(), spec, RngKey(3, 2, 1)))
    assert not a.same_as(train_subrun(w, toy_data(), spec, RngKey(3, 3, 1)))


def test_single_full_batch_step():
    data = toy_data()
    w = init_weights(ARCH_283, RngKey(0, 1, 0))
    out = train_subrun(w, data, SubRunSpec(1, 0.3, len(data), augment_noise_std=0.0), RngKey(0, 1, 0))
    # a full batch is a permutation of the data; the mean gradient does not depend on order
    _, g = loss_and_grad(w, data.features, data.labels)
    assert np.allclose(out.values, w.values - 0.3 * g, rtol=0, atol=1e-15)


def test_batch_larger_than_dataset_rejected():
    w = init_weights(ARCH_283, RngKey(0, 1, 0))
    with pytest.raises(ValueError):
        train_subrun(w, toy_data(10), SubRunSpec(1, 0.1, 11), RngKey(0, 1, 0))


def test_training_learns():
    data = toy_data(200)
    w = init_weights(ModelArch(2, (16,), 3), RngKey(0, 1, 0))
    out = train_subrun(w, data, SubRunSpec(600, 0.2, 20), RngKey(0, 1, 0))
    assert evaluate_accuracy(out, data) > 0.9


# -- accuracy -----------------------------------------------------------------

def test_accuracy_single_point():
    w = ModelWeights(ModelArch(1, (), 2), [0.0, 1.0, 0.0, 0.0])
    assert evaluate_accuracy(w, LabeledDataset([[2.0]], [1], 2)) == 1.0


def test_accuracy_ties_go_to_lowest_class():
    w = ModelWeights(ModelArch(1, (), 3), np.zeros(6))
    assert evaluate_accuracy(w, LabeledDataset([[1.0], [2.0]], [0, 0], 3)) == 1.0


def test_random_weights_near_chance():
    rng = np.random.default_rng(9)
    n, c = 2000, 10
    data = LabeledDataset(rng.normal(size=(n, 5)), np.tile(np.arange(c), n // c), c)
    w = init_weights(ModelArch(5, (16,), c), RngKey(9, 1, 0))
    sigma = math.sqrt(0.1 * 0.9 / n)
    assert abs(evaluate_accuracy(w, data) - 0.1) <= 3 * sigma


def test_memorizer_hits_full_accuracy():
    rng = np.random.default_rng(1)
    data = LabeledDataset(rng.normal(size=(20, 4)), rng.integers(0, 3, size=20), 3)
    w = init_weights(ModelArch(4, (64,), 3), RngKey(1, 1, 0))
    out = train_subrun(w, data, SubRunSpec(2000, 0.5, 20, augment_noise_std=0.0), RngKey(1, 1, 0))
    assert evaluate_accuracy(out, data) == 1.0


# -- checkpoints --------------------------------------------------------------

weights_strategy = st.lists(
    st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=ARCH_283.num_params,
    max_size=ARCH_283.num_params)


@given(weights_strategy, st.integers(0, 10**12),
       st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=4))
def test_checkpoint_round_trip(values, step, meta):
    ck = Checkpoint(ModelWeights(ARCH_283, values), step, meta)
    assert decode_checkpoint(encode_checkpoint(ck)).same_as(ck)
    assert decode_checkpoint_binary(encode_checkpoint_binary(ck)).same_as(ck)


def test_checkpoint_files(tmp_path):
    ck = Checkpoint(init_weights(ARCH_283, RngKey(0, 1, 0)), 7, {"server": "3"})
    for name in ("a.json", "a.bin"):
        save_checkpoint(ck, tmp_path / name)
        assert load_checkpoint(tmp_path / name).same_as(ck)
    assert (tmp_path / "a.bin").read_bytes() == encode_checkpoint_binary(ck)


def test_checkpoint_bad_format():
    with pytest.raises(ValueError):
        decode_checkpoint('{"format": "other"}')
    with pytest.raises(ValueError):
        decode_checkpoint_binary(b"nope")
