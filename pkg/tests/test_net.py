import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from aimlab import autodiff as ad
from aimlab.autodiff import DimensionError, Tensor
from aimlab.net import (Block, EncoderBlockStack, FusionHead, LayerSpec, MultimodalNet,
                        fuse_and_classify, load_checkpoint, nearest_prototype, read_checkpoint,
                        save_checkpoint, task_loss, unimodal_probe_accuracy)

LN_6 = 1.7917594692280550008


def rng(seed=0):
    return np.random.default_rng(seed)


def test_layer_spec_counts():
    assert LayerSpec(3, 2).n_params == 8


def test_zero_weights_give_zero_activations():
    stack = EncoderBlockStack(0, 5, 4, 3, rng())
    for p in stack.parameters():
        p.value[...] = 0.0
    for h in stack.forward(Tensor(rng(1).standard_normal((6, 5)))):
        npt.assert_array_equal(h.value, 0.0)


def test_identity_linear_block():
    block = Block([LayerSpec(3, 3, "linear")], rng())
    block.layers[0].weight.value[...] = np.eye(3)
    x = rng(2).standard_normal((4, 3))
    npt.assert_array_equal(block.forward(Tensor(x)).value, x)


def test_two_blocks_compose():
    stack = EncoderBlockStack(0, 4, 5, 2, rng(3))
    x = rng(4).standard_normal((3, 4))
    h = stack.forward(Tensor(x))
    w1, b1 = stack.blocks[0].layers[0].weight.value, stack.blocks[0].layers[0].bias.value
    w2, b2 = stack.blocks[1].layers[0].weight.value, stack.blocks[1].layers[0].bias.value
    manual = np.maximum(np.maximum(x @ w1 + b1, 0) @ w2 + b2, 0)
    npt.assert_allclose(h[1].value, manual, atol=1e-14)


def test_encoder_rejects_wrong_width():
    with pytest.raises(DimensionError):
        EncoderBlockStack(0, 4, 5, 2, rng()).forward(Tensor(np.ones((2, 3))))


def test_summation_with_zero_second_modality():
    head = FusionHead("summation", 2, 4, 3, rng())
    f0 = rng(5).standard_normal((2, 4))
    both = fuse_and_classify(head, [f0, np.zeros((2, 4))]).value
    w, b = head.params["classifier.w"].value, head.params["classifier.b"].value
    npt.assert_allclose(both, f0 @ w + b, atol=1e-14)


def test_gated_with_zero_gate_averages():
    head = FusionHead("gated", 2, 4, 3, rng())
    head.params["gate1.w"].value[...] = 0.0
    head.params["gate1.b"].value[...] = 0.0
    f0, f1 = rng(6).standard_normal((2, 4)), rng(7).standard_normal((2, 4))
    w, b = head.params["classifier.w"].value, head.params["classifier.b"].value
    npt.assert_allclose(fuse_and_classify(head, [f0, f1]).value, (0.5 * f0 + 0.5 * f1) @ w + b, atol=1e-14)


def test_film_left_fold():
    head = FusionHead("film", 2, 3, 2, rng(8))
    p = {k: v.value for k, v in head.params.items()}
    f0, f1 = rng(9).standard_normal((2, 3)), rng(10).standard_normal((2, 3))
    gamma = f0 @ p["film1.gamma_w"] + p["film1.gamma_b"]
    beta = f0 @ p["film1.beta_w"] + p["film1.beta_b"]
    expect = (gamma * f1 + beta) @ p["classifier.w"] + p["classifier.b"]
    npt.assert_allclose(fuse_and_classify(head, [f0, f1]).value, expect, atol=1e-13)


def test_concatenation_hand_classifier():
    head = FusionHead("concatenation", 2, 1, 3, rng())
    head.params["classifier.w"].value[...] = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    head.params["classifier.b"].value[...] = 0.0
    logits = fuse_and_classify(head, [np.array([[1.0]]), np.array([[2.0]])]).value
    npt.assert_array_equal(logits, [[9.0, 12.0, 15.0]])


def test_fusion_rejects_unknown_kind():
    with pytest.raises(ValueError):
        FusionHead("attention", 2, 4, 3, rng())


def test_task_loss_values():
    assert abs(task_loss(Tensor(np.zeros((1, 6))), [3]).item() - LN_6) <= 1e-12
    logits = np.zeros((1, 4))
    logits[0, 2] = 20.0
    assert task_loss(Tensor(logits), [2]).item() < 1e-8


def test_task_loss_batch_is_row_mean():
    z = rng(11).standard_normal((2, 5))
    per_row = [task_loss(Tensor(z[i:i + 1]), [y]).item() for i, y in enumerate([1, 4])]
    assert abs(task_loss(Tensor(z), [1, 4]).item() - np.mean(per_row)) <= 1e-14


@given(st.floats(0, 30))
def test_task_loss_decreases_in_true_logit(c):
    lo = task_loss(Tensor([[c, 0.0, 0.0]]), [0]).item()
    hi = task_loss(Tensor([[c + 1.0, 0.0, 0.0]]), [0]).item()
    assert hi <= lo


def test_probe_perfect_features():
    protos = rng(12).standard_normal((3, 4))
    y = np.array([0, 1, 2, 2, 1])
    npt.assert_array_equal(nearest_prototype(protos[y], protos), y)


def test_probe_ties_go_to_class_zero():
    y = np.array([0, 1, 2, 0, 1, 2, 0, 0, 1, 2])
    pred = nearest_prototype(rng(13).standard_normal((10, 3)), np.zeros((3, 3)))
    assert np.mean(pred == y) == np.mean(y == 0)


def test_probe_random_features_near_chance():
    K, n = 5, 4000
    r = rng(14)
    stack = EncoderBlockStack(0, 6, 8, 2, r)
    acc = unimodal_probe_accuracy(stack, r.standard_normal((K, 8)), r.standard_normal((n, 6)),
                                  r.integers(0, K, n))
    sigma = np.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(acc - 1 / K) <= 3 * sigma


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["concatenation", "summation", "film", "gated"]), st.integers(0, 2**31))
def test_network_gradients(kind, seed):
    net = MultimodalNet([3, 2], 3, hidden=4, depth=2, fusion=kind, seed=seed)
    for p in net.parameters():
        if p.name.endswith("bias"):
            # zero biases on an all-dead row put a relu exactly on its kink
            p.value[...] = rng(seed + 2).uniform(0.1, 0.5, p.shape)
    xs = [Tensor(rng(seed).standard_normal((4, 3))), Tensor(rng(seed + 1).standard_normal((4, 2)))]
    y = [0, 1, 2, 1]
    err = ad.grad_check(lambda: task_loss(net.forward(xs)[0], y), net.parameters())
    assert err <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    net = MultimodalNet([4, 3], 3, hidden=5, depth=2, fusion="film", seed=4)
    extra = [("proto0.root", Tensor(rng(15).standard_normal((3, 4))))]
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, extra, extra={"mode": "aim"})
    loaded, header, arrays = load_checkpoint(path)
    assert header["extra"] == {"mode": "aim"} and header["fusion"] == "film"
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        npt.assert_array_equal(p1.value, p2.value)
    npt.assert_array_equal(arrays["proto0.root"], extra[0][1].value)
    xs = [rng(16).standard_normal((7, 4)), rng(17).standard_normal((7, 3))]
    npt.assert_array_equal(net.predict(xs), loaded.predict(xs))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        read_checkpoint(path)
