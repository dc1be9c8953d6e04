import math

import numpy as np
import pytest

import amalgam


def small_spec(heads=(("is_red", 2),)):
    spec = amalgam.BlockNetSpec()
    spec.input_shape = [3, 8, 8]
    spec.stem_channels = 4
    spec.block_channels = [4, 8]
    spec.block_strides = [1, 2]
    spec.heads = [amalgam.HeadSpec(t, c) for t, c in heads]
    return spec


def test_fa_forward_matches_einsum():
    rng = np.random.default_rng(0)
    w = rng.uniform(-1, 1, (3, 5))
    f = rng.uniform(-1, 1, (2, 5, 4, 4))
    np.testing.assert_allclose(amalgam.fa_forward(w, f), np.einsum("oc,nchw->nohw", w, f), atol=1e-12)


def test_losses():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    assert amalgam.transfer_loss(s, t) == pytest.approx(np.mean((s - t) ** 2), abs=1e-12)
    assert amalgam.weight_regularization(np.zeros((4, 6))) == 1.0
    assert amalgam.weight_regularization(np.eye(3)) == 0.0
    assert amalgam.entropy_impurity([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    logits = rng.normal(size=(4, 3))
    assert amalgam.soft_target_loss(logits, logits) == 0.0


def test_selection():
    assert amalgam.select_teacher([[0.5, 0.5], [0.9, 0.1], [0.9, 0.1]]) == 1
    probs = [amalgam.softmax(np.random.default_rng(k).normal(size=(6, 2))) for k in range(3)]
    picks = amalgam.select_batch(probs)
    for r, pick in enumerate(picks):
        assert pick == amalgam.select_teacher([p[r] for p in probs])


def test_errors_carry_kind():
    with pytest.raises(amalgam.AmalgamError, match="normalization"):
        amalgam.entropy_impurity([0.7, 0.7])


def test_blocknet_and_checkpoint(tmp_path):
    net = amalgam.BlockNet.build(small_spec((("is_red", 2), ("shape", 3))), 3)
    data = amalgam.generate(5, seed=2, image_size=8)
    assert data["images"].shape == (5, 3, 8, 8)
    logits, maps = net.forward(data["images"])
    assert logits["shape"].shape == (5, 3)
    assert [m.shape[1] for m in maps] == [4, 8]
    assert net.count_resources().params == sum(p.size for p in net.parameters().values())

    amalgam.save_net(net, tmp_path / "net.amlg")
    back = amalgam.load_net(tmp_path / "net.amlg")
    assert back.bitwise_equal(net)


def test_gradient_suite_passes():
    errors = [err for _, _, err in amalgam.gradient_suite(1)]
    assert errors and max(errors) < 1e-6


def test_cli_roundtrip(tmp_path):
    code, out, err = amalgam.run_cli(["resources", "--out", str(tmp_path), "--run-id", "r"])
    assert code == 0, err
    assert "target" in out
    assert (tmp_path / "r" / "metrics.csv").read_text().startswith("run_id,stage,epoch,task,metric,value")
    code, _, err = amalgam.run_cli(["not-a-command"])
    assert code == 1 and err.startswith("ERROR 1 usage: ")
