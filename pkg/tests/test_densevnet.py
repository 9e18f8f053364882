import numpy as np
import pytest

from brainstrip import autodiff as ad
from brainstrip.densevnet import (
    ConfigError,
    DenseVnetConfig,
    build_dense_vnet,
    check_window,
    forward,
    load_network,
    mask_from_logits,
    predict_mask,
    save_network,
)
from brainstrip.volume import Volume3D

from gradcheck import max_relative_error

TINY = DenseVnetConfig(stack_growth=(2, 2, 2), units_per_stack=(1, 2, 1), input_window=8, initial_channels=2, skip_channels=(2, 2, 2))


def _conv_params(c_out, c_in, k=3):
    return c_out * c_in * k**3 + c_out


def test_default_parameter_count():
    # counted layer by layer: input conv, three dense stacks with their
    # downsampling and skip convolutions, then the 1x1x1 classifier
    expected = _conv_params(8, 2)
    expected += sum(_conv_params(4, 8 + 4 * u) for u in range(4)) + _conv_params(4, 16)
    expected += _conv_params(16, 16) + sum(_conv_params(8, 16 + 8 * u) for u in range(4)) + _conv_params(8, 32)
    expected += _conv_params(32, 32) + sum(_conv_params(16, 32 + 16 * u) for u in range(4)) + _conv_params(16, 64)
    expected += _conv_params(2, 28, 1)
    assert expected == 198542
    assert build_dense_vnet(DenseVnetConfig()).parameter_count() == expected


def test_single_channel_has_fewer_inputs():
    one = build_dense_vnet(DenseVnetConfig(in_channels=1, input_mode="flair"))
    assert one.params["init.w"].shape == (8, 1, 3, 3, 3)
    assert one.parameter_count() == 198542 - 8 * 27


@pytest.mark.parametrize("size", [8, 12, 16, 20])
def test_output_matches_input_grid(size):
    net = build_dense_vnet(TINY, 1)
    x = np.random.default_rng(0).normal(size=(2, 2, size, size, size))
    assert forward(net, x).shape == (2, 2, size, size, size)


def test_window_checks():
    for bad in (4, 10, 18):
        with pytest.raises(ConfigError):
            check_window(bad)
    net = build_dense_vnet(TINY)
    with pytest.raises(ConfigError):
        forward(net, np.zeros((1, 2, 10, 8, 8)))
    with pytest.raises(ConfigError):
        forward(net, np.zeros((1, 1, 8, 8, 8)))


def test_config_validation_and_record():
    with pytest.raises(ConfigError):
        DenseVnetConfig(num_classes=3)
    with pytest.raises(ConfigError):
        DenseVnetConfig(in_channels=1)  # "both" needs two channels
    with pytest.raises(ConfigError):
        DenseVnetConfig(stack_growth=(4, 8))
    rec = TINY.to_record()
    assert rec["spatial_window_size"] == "8"
    assert DenseVnetConfig.from_record(rec) == TINY


def test_init_is_seeded():
    a, b, c = build_dense_vnet(TINY, 3), build_dense_vnet(TINY, 3), build_dense_vnet(TINY, 4)
    assert all(np.array_equal(a.params[k].values, b.params[k].values) for k in a.params)
    assert not np.array_equal(a.params["init.w"].values, c.params["init.w"].values)
    assert not a.params["init.b"].values.any()


def test_end_to_end_gradient():
    net = build_dense_vnet(TINY, 2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 8, 8, 8))
    target = (rng.uniform(size=(1, 8, 8, 8)) > 0.5).astype(float)
    names = ["init.w", "L1.unit1.w", "final.b"]

    def loss(ts):
        trial = net.copy()
        for n, t in zip(names, ts):
            trial.params[n] = t
        return ad.dice_loss(forward(trial, x), target)

    err = max_relative_error(loss, [net.params[n].values for n in names], rng, n_coords=30)
    assert err < 1e-4


def test_save_load_round_trip(tmp_path):
    net = build_dense_vnet(TINY, 5)
    save_network(tmp_path / "m.ckpt", net, {"iteration": "7"}, {**net.arrays(), "extra.a": np.ones(3)})
    back, meta, extra = load_network(tmp_path / "m.ckpt")
    assert back.config == TINY and meta["iteration"] == "7"
    assert list(extra) == ["extra.a"]
    for k in net.params:
        assert np.array_equal(back.params[k].values, net.params[k].values)


def test_load_rejects_other_containers(tmp_path):
    ad.save_arrays(tmp_path / "x", {"w": np.ones(2)}, {"kind": "other"})
    with pytest.raises(ConfigError):
        load_network(tmp_path / "x")


def test_mask_from_logits_tie_goes_to_background():
    logits = np.array([[1.0, 0.0, 2.0], [1.0, 1.0, 1.0]])
    assert mask_from_logits(logits).tolist() == [0, 1, 0]


def test_predict_mask_on_native_grid():
    net = build_dense_vnet(TINY, 0)
    rng = np.random.default_rng(2)
    t1 = Volume3D(rng.normal(size=(11, 9, 13)), (1.5, 1.0, 2.0), (3.0, 0.0, -1.0))
    fl = t1.with_data(rng.normal(size=t1.dims))
    mask = predict_mask(net, t1, fl)
    assert mask.dims == t1.dims and mask.spacing == t1.spacing and mask.origin == t1.origin
    assert mask.is_binary()
    with pytest.raises(ConfigError):
        predict_mask(net, t1, None)


def test_frozen_view_records_no_graph():
    net = build_dense_vnet(TINY, 0)
    out = forward(net.frozen(), np.zeros((1, 2, 8, 8, 8)))
    assert not out.requires_grad
    assert all(p.grad is None for p in net.params.values())


def test_window_46_rejected():
    with pytest.raises(ConfigError):
        DenseVnetConfig(input_window=46)


def test_softmax_of_logits_and_determinism():
    net = build_dense_vnet(TINY, 6)
    x = np.random.default_rng(3).normal(size=(2, 2, 12, 12, 12))
    a, b = forward(net, x).values, forward(net, x).values
    assert np.array_equal(a, b)
    np.testing.assert_allclose(ad.softmax(ad.Tensor(a)).values.sum(axis=1), 1.0, atol=1e-9)


def test_batch_samples_do_not_interact():
    net = build_dense_vnet(TINY, 7)
    x = np.random.default_rng(4).normal(size=(3, 2, 8, 8, 8))
    together = forward(net, x).values
    for i in range(3):
        np.testing.assert_allclose(forward(net, x[i : i + 1]).values[0], together[i], atol=1e-12, rtol=0)


def test_background_bias_gives_empty_mask():
    net = build_dense_vnet(TINY, 0)
    net.params["final.b"].values = np.array([1e6, -1e6])
    vol = Volume3D(np.random.default_rng(5).normal(size=(10, 10, 10)))
    assert not predict_mask(net, vol, vol).data.any()


def test_predict_mask_ignores_affine_intensity_changes():
    net = build_dense_vnet(TINY, 8)
    rng = np.random.default_rng(6)
    t1 = Volume3D(rng.normal(size=(12, 12, 12)))
    fl = Volume3D(rng.normal(size=(12, 12, 12)))
    base = predict_mask(net, t1, fl)
    scaled = predict_mask(net, t1.with_data(4.0 * t1.data + 3.0), fl.with_data(0.5 * fl.data - 1.0))
    assert np.array_equal(base.data, scaled.data)
