import numpy as np
import pytest

from ctr.losses import orthogonal_term
from ctr.model import Classifier, build_model, load_checkpoint, save_checkpoint
from ctr.tensor import ShapeError, Tensor


def _zeroed(model):
    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    return model


def test_zero_weights_give_uniform_output():
    model = _zeroed(build_model("mlp", 5, 4, rng=np.random.default_rng(0)))
    assert np.allclose(model.predict_proba(np.full((3, 5), 0.5)), 0.25)


def test_init_is_deterministic():
    a = build_model("mlp", 5, 4, rng=np.random.default_rng(7))
    b = build_model("mlp", 5, 4, rng=np.random.default_rng(7))
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_single_sample_equals_ordinary_dropout():
    model = build_model("mlp", 6, 3, hidden=(8, 5), rng=np.random.default_rng(0)).train()
    x = np.random.default_rng(1).uniform(size=(4, 6))
    one = model.forward_multisample(Tensor(x), 1, np.random.default_rng(5)).logits[0].data
    plain = model.forward(Tensor(x), np.random.default_rng(5)).data
    assert np.array_equal(one, plain)


def test_rate_zero_subnets_coincide():
    model = build_model("mlp", 6, 4, dropout=0.0, hidden=(8, 5), rng=np.random.default_rng(0)).train()
    x = np.random.default_rng(1).uniform(size=(4, 6))
    outs = model.forward_multisample(Tensor(x), 4, np.random.default_rng(0))
    for p in outs.probs[1:]:
        assert np.array_equal(p.data, outs.probs[0].data)
    assert np.allclose(orthogonal_term(outs.probs, [0, 1, 2, 3]).data, 1.0)


def test_subnets_differ_under_dropout():
    model = build_model("mlp", 6, 4, hidden=(16, 8), rng=np.random.default_rng(0)).train()
    outs = model.forward_multisample(Tensor(np.full((2, 6), 0.5)), 3, np.random.default_rng(0))
    assert not np.array_equal(outs.probs[0].data, outs.probs[1].data)
    assert outs.K == 3 and outs.mean_probs().shape == (2, 4)


def test_bad_K_and_shapes():
    model = build_model("mlp", 6, 4, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.forward_multisample(Tensor(np.zeros((1, 6))), 0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 5))))
    with pytest.raises(ValueError):
        Classifier(6, 1)


def test_eval_mode_is_deterministic():
    model = build_model("mlp", 6, 4, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(3, 6))
    assert np.array_equal(model.logits(x), model.logits(x))


@pytest.mark.parametrize("arch,dim", [("mlp", 7), ("cnn", 64)])
def test_checkpoint_roundtrip(tmp_path, arch, dim):
    model = build_model(arch, dim, 3, rng=np.random.default_rng(0))
    save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    x = np.random.default_rng(2).uniform(size=(5, dim))
    assert np.array_equal(model.logits(x), back.logits(x))
    assert back.meta() == model.meta()


def test_checkpoint_rejects_foreign_npz(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def test_frozen_restores_flags():
    model = build_model("mlp", 4, 3, rng=np.random.default_rng(0)).train()
    with model.frozen():
        assert not model.training
        assert not any(p.requires_grad for p in model.parameters())
    assert model.training and all(p.requires_grad for p in model.parameters())
