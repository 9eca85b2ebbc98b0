"""Dual-channel multi-frame video denoiser.

Two arms (RGB and NIR) each run a pre-conv stack, a bidirectional ConvLSTM
fused at the center frame, a 4-level strided encoder, and a decoder whose
skip connections concatenate same-level features from both arms (guided
skips). Final heads emit the denoised center frame per arm. The
single-channel variant drops the NIR arm and every cross-arm slice; the
cross slices live in separate bias-free convs so zeroing them reproduces
the single-channel output exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, ShapeError
from .noise import derive_stream, STREAM_INIT

ENC_LEVELS = 4
SPATIAL_MULTIPLE = 2 ** ENC_LEVELS


class NetConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    frame_window: int = 7          # odd number of frames denoising the center
    pre_conv_layers: int = 2
    lstm_hidden: int = 16
    enc_channels: tuple = (16, 32, 64, 128)
    kernel_size: int = 3
    activation: str = "leaky_relu"
    leaky_alpha: float = 0.1
    use_nir: bool = True           # dual-channel vs single-channel variant
    use_lstm: bool = True          # bidirectional ConvLSTM vs CNN early fusion

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)

    @property
    def half_window(self):
        return self.frame_window // 2

    def validate(self):
        if self.frame_window < 1 or self.frame_window % 2 == 0:
            raise NetConfigError(
                f"frame_window must be odd and >= 1, got {self.frame_window}")
        if len(self.enc_channels) != ENC_LEVELS:
            raise NetConfigError(
                f"enc_channels must have {ENC_LEVELS} entries, got {self.enc_channels}")
        if any(c < 1 for c in self.enc_channels) or self.lstm_hidden < 1:
            raise NetConfigError("channel widths must be >= 1")
        if self.pre_conv_layers < 1:
            raise NetConfigError("pre_conv_layers must be >= 1")
        if self.kernel_size % 2 != 1:
            raise NetConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def arms(self):
        return ("rgb", "nir") if self.use_nir else ("rgb",)


ARM_INPUT_CHANNELS = {"rgb": 3, "nir": 1}


def weight_shapes(config):
    """Ordered name -> shape map for every parameter of the network."""
    config.validate()
    k = config.kernel_size
    h = config.lstm_hidden
    enc = config.enc_channels
    shapes = {}
    for arm in config.arms():
        cin = ARM_INPUT_CHANNELS[arm]
        prev = cin
        for i in range(config.pre_conv_layers):
            shapes[f"{arm}.pre.{i}.kernel"] = (h, prev, k, k)
            shapes[f"{arm}.pre.{i}.bias"] = (h,)
            prev = h
        if config.use_lstm:
            for d in ("fwd", "bwd"):
                shapes[f"{arm}.lstm.{d}.kernel"] = (4 * h, 2 * h, k, k)
                shapes[f"{arm}.lstm.{d}.bias"] = (4 * h,)
            shapes[f"{arm}.lstm.merge.kernel"] = (h, 2 * h, 1, 1)
            shapes[f"{arm}.lstm.merge.bias"] = (h,)
        else:
            shapes[f"{arm}.fuse.kernel"] = (h, config.frame_window * h, 1, 1)
            shapes[f"{arm}.fuse.bias"] = (h,)
        prev = h
        for lvl in range(1, ENC_LEVELS + 1):
            shapes[f"{arm}.enc.{lvl}.kernel"] = (enc[lvl - 1], prev, k, k)
            shapes[f"{arm}.enc.{lvl}.bias"] = (enc[lvl - 1],)
            prev = enc[lvl - 1]
        for lvl in range(ENC_LEVELS, 0, -1):
            out_c = enc[lvl - 2] if lvl >= 2 else h
            own_in = 2 * enc[lvl - 1]   # decoder state + own encoder feature
            shapes[f"{arm}.dec.{lvl}.own.kernel"] = (out_c, own_in, k, k)
            shapes[f"{arm}.dec.{lvl}.own.bias"] = (out_c,)
            if config.use_nir:
                shapes[f"{arm}.dec.{lvl}.cross.kernel"] = (out_c, enc[lvl - 1], k, k)
        head_c = ARM_INPUT_CHANNELS[arm]
        shapes[f"{arm}.head.own.kernel"] = (head_c, 2 * h, k, k)
        shapes[f"{arm}.head.own.bias"] = (head_c,)
        if config.use_nir:
            shapes[f"{arm}.head.cross.kernel"] = (head_c, h, k, k)
    return shapes


class WeightSet:
    """Named, shaped parameter collection tied to a NetConfig.

    check=False skips the name/shape audit (used for checkpoint carriers
    that store optimizer state records alongside the weights).
    """

    def __init__(self, config, tensors, check=True):
        self.config = config
        self.tensors = dict(tensors)
        if not check:
            return
        expected = weight_shapes(config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise NetConfigError(
                f"weight names do not match config (missing {sorted(missing)}, "
                f"extra {sorted(extra)})")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise NetConfigError(
                    f"{name}: shape {self.tensors[name].shape} != expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def param_count(self):
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self):
        return WeightSet(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return WeightSet(self.config,
                         {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_weights(config, seed=0, dtype=np.float32):
    """He-style initialization, deterministic in (seed, name order)."""
    shapes = weight_shapes(config)
    tensors = {}
    for idx, (name, shape) in enumerate(shapes.items()):
        rng = derive_stream(seed, name, idx, 0, purpose=STREAM_INIT)
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return WeightSet(config, tensors)


# ---------------------------------------------------------------------------
# forward passes

def _act(config, x):
    return ad.activation(x, config.activation, config.leaky_alpha)


def _conv(w, x, kernel_name, padding, bias=True, stride=1):
    b = w.get(kernel_name.replace(".kernel", ".bias")) if bias else None
    return ad.conv2d(x, w[kernel_name], b, stride=stride, padding=padding)


def pre_conv_stack(config, w, arm, frame):
    k = config.kernel_size
    x = frame
    for i in range(config.pre_conv_layers):
        x = _act(config, _conv(w, x, f"{arm}.pre.{i}.kernel", padding=k // 2))
    return x


def temporal_fuse(config, w, arm, frames):
    """Pre-conv each frame, then fuse the window into center-frame features.

    With use_lstm, forward and backward ConvLSTM passes meet at the center
    frame and are merged by a 1x1 conv; otherwise all pre-conv features are
    channel-concatenated (CNN early fusion). Either way a residual adds the
    center frame's pre-conv features.
    """
    if len(frames) != config.frame_window:
        raise ShapeError(
            f"window length {len(frames)} != frame_window {config.frame_window}")
    if len(frames) > 1:
        # one conv call over all frames at once, then split back
        b = frames[0].data.shape[0]
        stacked = pre_conv_stack(config, w, arm, ad.concat_batch(*frames))
        feats = [ad.slice_batch(stacked, i * b, (i + 1) * b)
                 for i in range(len(frames))]
    else:
        feats = [pre_conv_stack(config, w, arm, frames[0])]
    center = config.half_window
    if config.use_lstm:
        fused = _bilstm_center(config, w, arm, feats, center)
    else:
        fused = _act(config, _conv(w, ad.concat_channels(*feats),
                                   f"{arm}.fuse.kernel", padding=0))
    return ad.add(fused, feats[center])


def _zero_state(like):
    b, _, h, w_ = like.data.shape
    z = np.zeros((b, like.data.shape[1], h, w_), dtype=like.data.dtype)
    return Tensor(z, like.tape), Tensor(z.copy(), like.tape)


def _bilstm_center(config, w, arm, feats, center):
    hf, cf = _zero_state(feats[0])
    for t in range(center + 1):
        hf, cf = ad.convlstm_step(feats[t], hf, cf,
                                  w[f"{arm}.lstm.fwd.kernel"],
                                  w[f"{arm}.lstm.fwd.bias"])
    hb, cb = _zero_state(feats[0])
    for t in range(len(feats) - 1, center - 1, -1):
        hb, cb = ad.convlstm_step(feats[t], hb, cb,
                                  w[f"{arm}.lstm.bwd.kernel"],
                                  w[f"{arm}.lstm.bwd.bias"])
    merged = _conv(w, ad.concat_channels(hf, hb), f"{arm}.lstm.merge.kernel",
                   padding=0)
    return _act(config, merged)


def encoder_forward(config, w, arm, x):
    """Four stride-2 conv levels; level k halves the spatial size."""
    h, w_ = x.data.shape[2], x.data.shape[3]
    if h % SPATIAL_MULTIPLE or w_ % SPATIAL_MULTIPLE:
        raise ShapeError(
            f"encoder input {h}x{w_} must be divisible by {SPATIAL_MULTIPLE}")
    k = config.kernel_size
    feats = []
    for lvl in range(1, ENC_LEVELS + 1):
        x = _act(config, _conv(w, x, f"{arm}.enc.{lvl}.kernel",
                               padding=k // 2, stride=2))
        feats.append(x)
    return feats


def decoder_forward(config, w, arm, own_feats, cross_feats=None):
    """Guided-skip decoder: per level, upsample the running state, fuse the
    same-level encoder features from both arms, conv up one level.

    The cross-arm contribution is a separate bias-free conv added before
    the activation, so zero cross kernels give exactly the single-arm path.
    """
    k = config.kernel_size
    state = own_feats[-1]  # decoder boundary: top encoder feature
    for lvl in range(ENC_LEVELS, 0, -1):
        own_in = ad.upsample_nearest(
            ad.concat_channels(state, own_feats[lvl - 1]), 2)
        z = _conv(w, own_in, f"{arm}.dec.{lvl}.own.kernel", padding=k // 2)
        if cross_feats is not None:
            zc = ad.conv2d(ad.upsample_nearest(cross_feats[lvl - 1], 2),
                           w[f"{arm}.dec.{lvl}.cross.kernel"], None,
                           stride=1, padding=k // 2)
            z = ad.add(z, zc)
        state = _act(config, z)
    return state


def head_forward(config, w, arm, state, own0, cross0=None):
    k = config.kernel_size
    z = _conv(w, ad.concat_channels(state, own0), f"{arm}.head.own.kernel",
              padding=k // 2)
    if cross0 is not None:
        zc = ad.conv2d(cross0, w[f"{arm}.head.cross.kernel"], None,
                       stride=1, padding=k // 2)
        z = ad.add(z, zc)
    return z  # linear output


def _check_windows(config, rgb_window, nir_window):
    if len(rgb_window) != config.frame_window:
        raise ShapeError(
            f"rgb window length {len(rgb_window)} != frame_window {config.frame_window}")
    if config.use_nir:
        if nir_window is None:
            raise ShapeError("dual-channel forward needs a NIR window")
        if len(nir_window) != config.frame_window:
            raise ShapeError(
                f"nir window length {len(nir_window)} != frame_window "
                f"{config.frame_window}")
        if rgb_window[0].data.shape[2:] != nir_window[0].data.shape[2:]:
            raise ShapeError(
                f"rgb/nir spatial mismatch: {rgb_window[0].data.shape[2:]} vs "
                f"{nir_window[0].data.shape[2:]}")


def forward(config, weights, rgb_window, nir_window=None):
    """Full forward pass. weights maps name -> Tensor (see weights_as_tensors).

    Returns (rgb_pred, nir_pred) for the dual-channel network and
    (rgb_pred, None) for the single-channel variant.
    """
    config.validate()
    if isinstance(weights, WeightSet):
        weights = weights_as_tensors(weights)
    _check_windows(config, rgb_window, nir_window)
    rgb0 = temporal_fuse(config, weights, "rgb", rgb_window)
    if not config.use_nir:
        feats = encoder_forward(config, weights, "rgb", rgb0)
        state = decoder_forward(config, weights, "rgb", feats)
        return head_forward(config, weights, "rgb", state, rgb0), None
    nir0 = temporal_fuse(config, weights, "nir", nir_window)
    rgb_feats = encoder_forward(config, weights, "rgb", rgb0)
    nir_feats = encoder_forward(config, weights, "nir", nir0)
    rgb_state = decoder_forward(config, weights, "rgb", rgb_feats, nir_feats)
    nir_state = decoder_forward(config, weights, "nir", nir_feats, rgb_feats)
    rgb_out = head_forward(config, weights, "rgb", rgb_state, rgb0, nir0)
    nir_out = head_forward(config, weights, "nir", nir_state, nir0, rgb0)
    return rgb_out, nir_out


def weights_as_tensors(ws, tape=None, dtype=None):
    out = {}
    for name, arr in ws.tensors.items():
        a = arr if dtype is None else arr.astype(dtype)
        out[name] = Tensor(a, tape) if tape is None else tape.leaf(a)
    return out


def frames_to_tensors(frames, tape=None, dtype=None):
    """Stack per-sample windows into per-position batch tensors.

    frames: array (F, B, C, H, W) or list of (B, C, H, W) arrays.
    """
    out = []
    for f in frames:
        a = np.asarray(f)
        if dtype is not None:
            a = a.astype(dtype)
        out.append(Tensor(a, tape) if tape is None else tape.leaf(a))
    return out


# ---------------------------------------------------------------------------
# ablation constructions

def zero_cross_weights(ws):
    """Copy of a dual-channel WeightSet with every cross-arm kernel zeroed."""
    t = {k: (np.zeros_like(v) if ".cross." in k else v.copy())
         for k, v in ws.tensors.items()}
    return WeightSet(ws.config, t)


def single_channel_view(ws):
    """The single-channel WeightSet sharing the RGB-arm weights of a
    dual-channel one (cross and NIR parameters dropped)."""
    cfg = replace(ws.config, use_nir=False)
    keep = {k: v.copy() for k, v in ws.tensors.items()
            if k.startswith("rgb.") and ".cross." not in k}
    return WeightSet(cfg, keep)


# ---------------------------------------------------------------------------
# weights file format

WEIGHTS_MAGIC = b"DVID-WTS"
WEIGHTS_VERSION = 1


def save_weights(path_or_file, ws, extra=None):
    """Versioned binary container: magic, version, JSON meta block
    (config + extra), then (name, dtype, shape, little-endian payload)
    records. Round-trips bit-exactly."""
    meta = {"config": ws.config.to_dict(), "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "wb") if own else path_or_file
    try:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(ws.tensors)))
        for name, arr in ws.tensors.items():
            _write_record(f, name, arr)
    finally:
        if own:
            f.close()


def _write_record(f, name, arr):
    nb = name.encode("utf-8")
    dt = np.dtype(arr.dtype).newbyteorder("<")
    db = dt.str.encode("ascii")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", len(db)))
    f.write(db)
    f.write(struct.pack("<B", arr.ndim))
    for ext in arr.shape:
        f.write(struct.pack("<I", ext))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


class WeightsFormatError(ValueError):
    pass


def load_weights(path_or_file):
    """Returns (WeightSet, extra dict)."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "rb") if own else path_or_file
    try:
        magic = f.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise WeightsFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(n):
            name, arr = _read_record(f)
            tensors[name] = arr
        config = NetConfig.from_dict(
            {**meta["config"],
             "enc_channels": tuple(meta["config"]["enc_channels"])})
        check = not any(name.startswith("adam.") for name in tensors)
        return WeightSet(config, tensors, check=check), meta.get("extra", {})
    finally:
        if own:
            f.close()


def _read_record(f):
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode("utf-8")
    (dt_len,) = struct.unpack("<B", f.read(1))
    dt = np.dtype(f.read(dt_len).decode("ascii"))
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise WeightsFormatError(
            f"record {name}: truncated payload ({len(raw)} of {count * dt.itemsize})")
    return name, np.frombuffer(raw, dtype=dt).reshape(shape).copy()
