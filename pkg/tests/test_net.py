import io

import numpy as np
import pytest

from darkvid import autodiff as ad
from darkvid import net
from darkvid.autodiff import Tape, Tensor
from darkvid.net import NetConfig


def tiny_config(**kw):
    base = dict(frame_window=3, pre_conv_layers=1, lstm_hidden=4,
                enc_channels=(4, 6, 8, 10), kernel_size=3)
    base.update(kw)
    return NetConfig(**base).validate()


def make_windows(config, rng, batch=1, size=32, dtype=np.float64):
    rgb = [Tensor(rng.uniform(0, 1, (batch, 3, size, size)).astype(dtype))
           for _ in range(config.frame_window)]
    nir = [Tensor(rng.uniform(0, 1, (batch, 1, size, size)).astype(dtype))
           for _ in range(config.frame_window)]
    return rgb, nir


# ---------------------------------------------------------------------------
# config + weights

def test_config_validation():
    with pytest.raises(net.NetConfigError):
        NetConfig(frame_window=4).validate()
    with pytest.raises(net.NetConfigError):
        NetConfig(enc_channels=(4, 8)).validate()
    with pytest.raises(net.NetConfigError):
        NetConfig(kernel_size=4).validate()
    assert NetConfig().validate().half_window == 3


def test_config_dict_roundtrip():
    c = tiny_config(use_lstm=False, frame_window=5)
    assert NetConfig.from_dict(c.to_dict()) == c


def test_init_weights_deterministic_and_shaped():
    c = tiny_config()
    a = net.init_weights(c, seed=3)
    b = net.init_weights(c, seed=3)
    for name in a.names():
        assert np.array_equal(a[name], b[name])
    d = net.init_weights(c, seed=4)
    assert any(not np.array_equal(a[n], d[n]) for n in a.names())
    shapes = net.weight_shapes(c)
    assert all(tuple(a[n].shape) == shapes[n] for n in shapes)


def test_single_channel_has_strictly_fewer_params():
    c = tiny_config()
    dual = net.init_weights(c, seed=0)
    single = net.init_weights(NetConfig(**{**c.to_dict(), "use_nir": False}), seed=0)
    assert single.param_count() < dual.param_count()


def test_weightset_rejects_wrong_names_and_shapes():
    c = tiny_config()
    ws = net.init_weights(c, seed=0)
    broken = dict(ws.tensors)
    broken.pop("rgb.head.own.bias")
    with pytest.raises(net.NetConfigError, match="missing"):
        net.WeightSet(c, broken)
    bad = dict(ws.tensors)
    bad["rgb.head.own.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(net.NetConfigError, match="shape"):
        net.WeightSet(c, bad)


# ---------------------------------------------------------------------------
# shape contracts

@pytest.mark.parametrize("use_nir,use_lstm,fw", [
    (True, True, 3), (True, False, 3), (False, True, 1), (True, True, 1),
])
def test_output_shapes_match_input(use_nir, use_lstm, fw):
    c = tiny_config(use_nir=use_nir, use_lstm=use_lstm, frame_window=fw)
    ws = net.init_weights(c, seed=1)
    rng = np.random.default_rng(0)
    rgb, nir = make_windows(c, rng, batch=2, size=32, dtype=np.float32)
    out_rgb, out_nir = net.forward(c, ws, rgb, nir if use_nir else None)
    assert out_rgb.shape == (2, 3, 32, 32)
    if use_nir:
        assert out_nir.shape == (2, 1, 32, 32)
    else:
        assert out_nir is None


def test_encoder_halves_each_level():
    c = tiny_config()
    ws = net.init_weights(c, seed=2)
    wt = net.weights_as_tensors(ws)
    x = Tensor(np.zeros((1, c.lstm_hidden, 64, 64), dtype=np.float32))
    feats = net.encoder_forward(c, wt, "rgb", x)
    assert [f.data.shape[2] for f in feats] == [32, 16, 8, 4]
    assert [f.data.shape[1] for f in feats] == list(c.enc_channels)


def test_encoder_rejects_indivisible_input():
    c = tiny_config()
    wt = net.weights_as_tensors(net.init_weights(c, seed=0))
    x = Tensor(np.zeros((1, c.lstm_hidden, 24, 24), dtype=np.float32))
    with pytest.raises(ad.ShapeError, match="divisible by 16"):
        net.encoder_forward(c, wt, "rgb", x)


def test_encoder_zero_input_zero_bias_gives_zero():
    c = tiny_config()
    ws = net.init_weights(c, seed=5)  # biases start at zero
    wt = net.weights_as_tensors(ws)
    x = Tensor(np.zeros((1, c.lstm_hidden, 32, 32), dtype=np.float32))
    feats = net.encoder_forward(c, wt, "rgb", x)
    assert all(np.all(f.data == 0) for f in feats)


def test_encoder_linearity_probe():
    # alpha=1 linearizes the activation; biases are zero at init
    c = tiny_config(leaky_alpha=1.0)
    wt = net.weights_as_tensors(net.init_weights(c, seed=6))
    x = np.random.default_rng(1).uniform(-1, 1, (1, c.lstm_hidden, 32, 32))
    f1 = net.encoder_forward(c, wt, "rgb", Tensor(x))
    f2 = net.encoder_forward(c, wt, "rgb", Tensor(2.0 * x))
    for a, b in zip(f1, f2):
        assert np.allclose(2.0 * a.data, b.data, rtol=1e-12, atol=1e-12)


def test_window_length_mismatch_raises():
    c = tiny_config()
    ws = net.init_weights(c, seed=0)
    rng = np.random.default_rng(0)
    rgb, nir = make_windows(c, rng)
    with pytest.raises(ad.ShapeError, match="window length"):
        net.forward(c, ws, rgb[:-1], nir)


def test_batch_permutation_equivariance():
    c = tiny_config()
    ws = net.init_weights(c, seed=7)
    rng = np.random.default_rng(2)
    rgb, nir = make_windows(c, rng, batch=3, size=32, dtype=np.float32)
    out, _ = net.forward(c, ws, rgb, nir)
    perm = [2, 0, 1]
    rgb_p = [Tensor(t.data[perm]) for t in rgb]
    nir_p = [Tensor(t.data[perm]) for t in nir]
    out_p, _ = net.forward(c, ws, rgb_p, nir_p)
    assert np.array_equal(out.data[perm], out_p.data)


# ---------------------------------------------------------------------------
# temporal fusion semantics

def test_fn1_reduces_to_single_step():
    c = tiny_config(frame_window=1)
    ws = net.init_weights(c, seed=8)
    rng = np.random.default_rng(3)
    rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
    out, _ = net.forward(c, ws, rgb, nir)
    assert out.shape == (1, 3, 32, 32)


def test_time_reversal_symmetry_with_tied_cells():
    c = tiny_config(frame_window=5)
    ws = net.init_weights(c, seed=9)
    # tie forward/backward cells and make the merge symmetric in its halves
    for arm in ("rgb", "nir"):
        ws.tensors[f"{arm}.lstm.bwd.kernel"] = ws.tensors[f"{arm}.lstm.fwd.kernel"].copy()
        ws.tensors[f"{arm}.lstm.bwd.bias"] = ws.tensors[f"{arm}.lstm.fwd.bias"].copy()
        mk = ws.tensors[f"{arm}.lstm.merge.kernel"]
        h = c.lstm_hidden
        mk[:, h:] = mk[:, :h]
    rng = np.random.default_rng(4)
    rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
    out_fwd, _ = net.forward(c, ws, rgb, nir)
    out_rev, _ = net.forward(c, ws, rgb[::-1], nir[::-1])
    assert np.allclose(out_fwd.data, out_rev.data, atol=1e-6)


def test_zero_weights_match_lstm_closed_form():
    # all-zero weights: pre-conv output 0, gates 0.5, g 0 -> states stay 0,
    # merge 0, residual 0 -> every prediction is exactly 0
    c = tiny_config()
    shapes = net.weight_shapes(c)
    ws = net.WeightSet(c, {k: np.zeros(s, dtype=np.float64)
                           for k, s in shapes.items()})
    rng = np.random.default_rng(5)
    rgb, nir = make_windows(c, rng, size=32)
    out_rgb, out_nir = net.forward(c, ws, rgb, nir)
    assert np.all(out_rgb.data == 0)
    assert np.all(out_nir.data == 0)


def test_cnn_early_fusion_concats_all_frames():
    c = tiny_config(use_lstm=False, frame_window=3)
    shapes = net.weight_shapes(c)
    assert shapes["rgb.fuse.kernel"] == (4, 3 * 4, 1, 1)
    ws = net.init_weights(c, seed=10)
    rng = np.random.default_rng(6)
    rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
    out, _ = net.forward(c, ws, rgb, nir)
    assert out.shape == (1, 3, 32, 32)


# ---------------------------------------------------------------------------
# cross-channel ablation equivalence

def test_zeroed_cross_slices_equal_single_channel():
    c = tiny_config()
    rng = np.random.default_rng(7)
    for trial in range(10):
        ws = net.init_weights(c, seed=100 + trial)
        zeroed = net.zero_cross_weights(ws)
        single = net.single_channel_view(ws)
        rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
        out_dual, _ = net.forward(c, zeroed, rgb, nir)
        out_single, _ = net.forward(single.config, single, rgb)
        assert np.array_equal(out_dual.data, out_single.data)


def test_nonzero_cross_slices_change_output():
    c = tiny_config()
    ws = net.init_weights(c, seed=11)
    rng = np.random.default_rng(8)
    rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
    out_dual, _ = net.forward(c, ws, rgb, nir)
    single = net.single_channel_view(ws)
    out_single, _ = net.forward(single.config, single, rgb)
    assert not np.allclose(out_dual.data, out_single.data)


# ---------------------------------------------------------------------------
# gradients

@pytest.mark.parametrize("use_nir,use_lstm,fw", [
    (True, True, 1), (True, True, 3), (True, False, 3),
    (False, True, 1), (False, True, 3), (False, False, 3),
])
def test_end_to_end_gradients(use_nir, use_lstm, fw):
    c = tiny_config(use_nir=use_nir, use_lstm=use_lstm, frame_window=fw)
    ws = net.init_weights(c, seed=12, dtype=np.float64)
    rng = np.random.default_rng(9)
    size = 16
    rgb_np = [rng.uniform(0, 1, (1, 3, size, size)) for _ in range(fw)]
    nir_np = [rng.uniform(0, 1, (1, 1, size, size)) for _ in range(fw)]

    def loss_for(wt_dict):
        rgb = [Tensor(a) for a in rgb_np]
        nir = [Tensor(a) for a in nir_np] if use_nir else None
        out_rgb, out_nir = net.forward(c, wt_dict, rgb, nir)
        loss = ad.mean_all(ad.mul(out_rgb, out_rgb))
        if out_nir is not None:
            loss = ad.add(loss, ad.mean_all(ad.mul(out_nir, out_nir)))
        return loss

    tape = Tape()
    wt = net.weights_as_tensors(ws, tape=tape)
    loss = loss_for(wt)
    tape.backward(loss)

    # spot-check a handful of scalar weights against central differences
    check = ["rgb.pre.0.kernel", "rgb.enc.2.kernel", "rgb.dec.1.own.kernel",
             "rgb.head.own.kernel"]
    if use_lstm:
        check.append("rgb.lstm.fwd.kernel")
    else:
        check.append("rgb.fuse.kernel")
    if use_nir:
        check.append("rgb.dec.3.cross.kernel")
    h = 1e-5
    for name in check:
        arr = ws.tensors[name]
        flat_idx = int(np.random.default_rng(hash(name) % 2**32).integers(arr.size))
        idx = np.unravel_index(flat_idx, arr.shape)
        analytic = tape.grad(wt[name])[idx]

        def eval_loss(delta):
            ws2 = {k: v.copy() for k, v in ws.tensors.items()}
            ws2[name][idx] += delta
            wt2 = {k: Tensor(v) for k, v in ws2.items()}
            return float(loss_for(wt2).data)

        numeric = (eval_loss(h) - eval_loss(-h)) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        assert abs(analytic - numeric) / denom < 1e-5, \
            f"{name}{idx}: analytic {analytic} vs numeric {numeric}"


def test_forward_deterministic_bitwise():
    c = tiny_config()
    ws = net.init_weights(c, seed=13)
    rng = np.random.default_rng(10)
    rgb, nir = make_windows(c, rng, size=32, dtype=np.float32)
    a, an = net.forward(c, ws, rgb, nir)
    b, bn = net.forward(c, ws, rgb, nir)
    assert a.data.tobytes() == b.data.tobytes()
    assert an.data.tobytes() == bn.data.tobytes()


# ---------------------------------------------------------------------------
# weights file

def test_weights_roundtrip_bitwise(tmp_path):
    c = tiny_config()
    ws = net.init_weights(c, seed=14)
    path = tmp_path / "w.dvw"
    net.save_weights(path, ws, extra={"note": "x"})
    loaded, extra = net.load_weights(path)
    assert extra == {"note": "x"}
    assert loaded.config == c
    assert set(loaded.names()) == set(ws.names())
    for n in ws.names():
        assert loaded[n].dtype == ws[n].dtype
        assert np.array_equal(loaded[n], ws[n])
        assert loaded[n].tobytes() == ws[n].tobytes()


def test_weights_bad_magic():
    buf = io.BytesIO(b"NOTAWEIGHTSFILE")
    with pytest.raises(net.WeightsFormatError, match="magic"):
        net.load_weights(buf)


def test_weights_mixed_dtypes_roundtrip(tmp_path):
    c = tiny_config()
    ws = net.init_weights(c, seed=15, dtype=np.float64)
    path = tmp_path / "w64.dvw"
    net.save_weights(path, ws)
    loaded, _ = net.load_weights(path)
    assert all(loaded[n].dtype == np.float64 for n in loaded.names())
    assert all(np.array_equal(loaded[n], ws[n]) for n in ws.names())
