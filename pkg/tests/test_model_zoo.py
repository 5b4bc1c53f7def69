import numpy as np
import pytest

from config import TrainConfig
from errors import ConfigError, DimensionError
from gradcheck import max_rel_error, numeric_grad, sample_indices
from model_zoo import (
    HeadNet,
    build_composite_model,
    build_feature_extractor,
    build_model,
    build_patchgd_model,
    count_params,
    default_depth_spec,
    gd_forward,
    head_forward,
    predict_proba,
)
from tensor_core import Tensor, backward, no_grad, softmax_cross_entropy


def _small_cfg(**changes):
    base = dict(patch_size=8, embed_dim=4, head_channels=6, head_layers=2, num_classes=3, seed=7)
    base.update(changes)
    return TrainConfig(**base)


def test_default_depth_spec():
    assert default_depth_spec(8) == (("conv", 16), ("conv", 32), ("conv", 64))
    assert default_depth_spec(64)[-1] == ("conv", 64)
    assert len(default_depth_spec(256)) == 8


def test_parameter_count_for_p16_s8():
    f = build_feature_extractor(16, 1, 8)
    assert count_params(f.parameters()) == 80 + 2080 + 8256 + 16448 + 520


def test_parameter_prefixes():
    model = build_patchgd_model(_small_cfg())
    assert all(name.startswith("f.") for name in model.theta1())
    assert all(name.startswith("g.") for name in model.theta2())
    gd = build_composite_model(_small_cfg(), "gd")
    assert {"cls.weight", "cls.bias"} <= set(gd.parameters())


def test_embed_shape():
    f = build_feature_extractor(8, 1, 5, seed=1)
    out = f.embed(Tensor(np.zeros((3, 1, 8, 8))))
    assert out.shape == (3, 5)


def test_embed_rejects_wrong_patch():
    f = build_feature_extractor(8, 1, 5)
    with pytest.raises(DimensionError):
        f.embed(Tensor(np.zeros((1, 1, 16, 16))))
    with pytest.raises(DimensionError):
        f(Tensor(np.zeros((1, 2, 8, 8))))


def test_full_image_map_equals_patchwise_embeddings(f64, rng):
    f = build_feature_extractor(8, 1, 4, (("conv", 3), ("pool", 3), ("conv", 5)), seed=3)
    image = rng.random((1, 1, 24, 16))
    with no_grad():
        fmap = f(Tensor(image)).data[0]            # [s, 3, 2]
        for i in range(3):
            for j in range(2):
                patch = image[:, :, i * 8:(i + 1) * 8, j * 8:(j + 1) * 8]
                np.testing.assert_allclose(f.embed(Tensor(patch)).data[0], fmap[:, i, j], rtol=1e-12, atol=1e-12)


def test_depth_spec_errors():
    with pytest.raises(ConfigError, match="needs 3"):
        build_feature_extractor(8, 1, 4, (("conv", 4), ("conv", 4)))
    with pytest.raises(ConfigError, match="pool keeps 1 channels"):
        build_feature_extractor(8, 1, 4, (("pool", 4), ("conv", 4), ("conv", 4)))
    with pytest.raises(ConfigError):
        build_feature_extractor(12, 1, 4)


def test_seeded_builds_are_identical():
    a = build_patchgd_model(_small_cfg()).parameters()
    b = build_patchgd_model(_small_cfg()).parameters()
    c = build_patchgd_model(_small_cfg(seed=8)).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not all(np.array_equal(a[k].data, c[k].data) for k in a)


def test_composite_shares_weights_with_patchgd():
    cfg = _small_cfg()
    patch_model = build_patchgd_model(cfg)
    ext = build_composite_model(cfg, "gd_extended")
    for name, tensor in patch_model.parameters().items():
        np.testing.assert_array_equal(ext.parameters()[name].data, tensor.data)


def test_head_on_any_grid():
    head = HeadNet(4, 3, channels=6, layers=2)
    for m, n in [(1, 1), (3, 5), (8, 8)]:
        assert head_forward(Tensor(np.zeros((2, m, n, 4))), head).shape == (2, 3)
    assert head_forward(Tensor(np.zeros((2, 2, 4))), head).shape == (1, 3)


def test_head_width_mismatch():
    head = HeadNet(4, 3, channels=6, layers=1)
    with pytest.raises(DimensionError, match="s=5"):
        head_forward(Tensor(np.zeros((1, 2, 2, 5))), head)


def test_gd_forward_shapes_and_divisibility():
    cfg = _small_cfg()
    for mode in ("gd", "gd_extended"):
        model = build_composite_model(cfg, mode)
        assert gd_forward(Tensor(np.zeros((2, 1, 16, 24))), model).shape == (2, 3)
        with pytest.raises(DimensionError, match="not divisible"):
            gd_forward(Tensor(np.zeros((1, 1, 20, 16))), model)


def test_predict_proba_rows_sum_to_one(rng):
    probs = predict_proba(Tensor(rng.standard_normal((4, 3))))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_build_model_dispatch():
    assert type(build_model(_small_cfg())).__name__ == "PatchGDModel"
    assert build_model(_small_cfg(mode="gd")).mode == "gd"


@pytest.mark.parametrize("mode", ["gd", "gd_extended"])
def test_composite_gradients(f64, rng, mode):
    model = build_composite_model(_small_cfg(), mode)
    X = Tensor(rng.random((2, 1, 16, 16)))
    y = np.array([0, 2])
    params = model.parameters()
    backward(softmax_cross_entropy(gd_forward(X, model), y))

    def loss_fn():
        with no_grad():
            return softmax_cross_entropy(gd_forward(X, model), y).item()

    for name in ("f.stage0.weight", "f.proj.bias"):
        idx = sample_indices(params[name].shape, 6, seed=1)
        num = numeric_grad(loss_fn, params[name].data, indices=idx)
        analytic = np.zeros_like(num)
        for i in idx:
            analytic[i] = params[name].grad[i]
        assert max_rel_error(analytic, num) < 1e-6
