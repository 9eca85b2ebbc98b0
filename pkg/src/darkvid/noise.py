"""Physical-process CMOS noise synthesis for low-light video.

Electron-domain pipeline per pixel: Poisson shot noise on the expected
photon count, clipped-Poisson dark current, Gaussian read noise; then a
per-row multiplicative streak gain, analog gain, floor quantization with
ADC clipping, and digital gain. An additive white Gaussian mode is kept
alongside for the Gaussian-trained ablation.

All randomness flows through Philox streams derived from
(seed, clip id, frame index, channel), so clips regenerate bitwise
identically regardless of frame order or parallelism.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

_MASK64 = (1 << 64) - 1

CHANNEL_CODES = {"r": 0, "g": 1, "b": 2, "nir": 3}

# purpose codes keep pixel, parameter, and sampler streams disjoint
STREAM_PIXELS = 0
STREAM_PARAMS = 1
STREAM_SAMPLER = 2
STREAM_INIT = 3


class NoiseConfigError(ValueError):
    pass


def _clip_key(clip_id):
    digest = hashlib.sha256(str(clip_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_stream(seed, clip_id, frame_index, channel_code, purpose=STREAM_PIXELS):
    """Philox generator for one (seed, clip, frame, channel) slot."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & _MASK64,
        spawn_key=(int(purpose), _clip_key(clip_id), int(frame_index), int(channel_code)),
    )
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class NoiseParams:
    """Per-clip noise configuration in electron / digital-number units.

    dark_current and read_std may be scalars or (H, W) maps.
    """

    dark_current: float | np.ndarray = 4.0
    read_std: float | np.ndarray = 1.0
    streak_std: float = 0.05
    gain_rgb: float = 20.0
    gain_nir: float = 20.0
    digital_gain: float = 1.0
    adc_max: int = 255
    seed: int = 0

    def analog_gain(self, channel):
        if channel in ("r", "g", "b", "rgb"):
            return float(self.gain_rgb)
        if channel == "nir":
            return float(self.gain_nir)
        raise NoiseConfigError(f"unknown channel {channel!r}")

    def validate(self, frame_shape=None):
        for name in ("dark_current", "read_std"):
            v = getattr(self, name)
            if isinstance(v, np.ndarray):
                if frame_shape is not None and v.shape != frame_shape:
                    raise NoiseConfigError(
                        f"{name} map shape {v.shape} != frame shape {frame_shape}")
                if np.any(v < 0):
                    raise NoiseConfigError(f"{name} must be >= 0")
            elif v < 0:
                raise NoiseConfigError(f"{name} must be >= 0, got {v}")
        if not 0.0 <= self.streak_std < 1.0:
            raise NoiseConfigError(f"streak_std must be in [0, 1), got {self.streak_std}")
        for name in ("gain_rgb", "gain_nir", "digital_gain"):
            if getattr(self, name) < 1.0:
                raise NoiseConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.adc_max <= 0:
            raise NoiseConfigError(f"adc_max must be positive, got {self.adc_max}")
        return self


@dataclass
class ParamRanges:
    """Uniform sampling ranges for NoiseParams; defaults follow the noise
    model's published calibration table. gain_nir is drawn as
    U(scale_lo * gain_rgb, scale_hi * gain_rgb) after gain_rgb.

    awgn_std switches dataset synthesis to additive white Gaussian noise
    (in digital numbers) when set; the physical model is bypassed.
    """

    dark_current: tuple = (2.0, 10.0)
    streak_std: tuple = (0.02, 0.08)
    read_std: tuple = (0.5, 2.0)
    gain_rgb: tuple = (10.0, 40.0)
    nir_gain_scale: tuple = (1.0, 3.0)
    digital_gain: tuple = (1.0, 1.0)
    adc_max: int = 255
    awgn_std: tuple | None = None

    def validate(self):
        for name in ("dark_current", "streak_std", "read_std", "gain_rgb",
                     "nir_gain_scale", "digital_gain"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise NoiseConfigError(f"{name}: lo {lo} > hi {hi}")
        if self.awgn_std is not None and self.awgn_std[0] > self.awgn_std[1]:
            raise NoiseConfigError("awgn_std: lo > hi")
        return self


def sample_noise_params(ranges, rng):
    """Draw one NoiseParams uniformly from ranges; the seed is drawn too."""
    ranges.validate()
    dark = rng.uniform(*ranges.dark_current)
    streak = rng.uniform(*ranges.streak_std)
    read = rng.uniform(*ranges.read_std)
    g_rgb = rng.uniform(*ranges.gain_rgb)
    g_nir = rng.uniform(ranges.nir_gain_scale[0] * g_rgb,
                        ranges.nir_gain_scale[1] * g_rgb)
    k_d = rng.uniform(*ranges.digital_gain)
    seed = int(rng.integers(0, _MASK64, dtype=np.uint64))
    return NoiseParams(dark_current=dark, read_std=read, streak_std=streak,
                       gain_rgb=g_rgb, gain_nir=g_nir, digital_gain=k_d,
                       adc_max=ranges.adc_max, seed=seed).validate()


# ---------------------------------------------------------------------------
# component samplers (electron domain)

def sample_shot_noise(n_expected, rng, size=None):
    """Poisson photon/electron arrivals with mean n_expected (scalar or map)."""
    lam = np.asarray(n_expected, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise NoiseConfigError("expected count must be finite")
    if np.any(lam < 0):
        raise NoiseConfigError("expected count must be >= 0")
    return rng.poisson(lam, size=size).astype(np.float64)


def sample_dark_current(n_dark, rng, size=None):
    """Clipped-Poisson dark current: max(0, n - n_dark), n ~ Poisson(n_dark)."""
    lam = np.asarray(n_dark, dtype=np.float64)
    if np.any(lam < 0):
        raise NoiseConfigError("dark current mean must be >= 0")
    n = rng.poisson(lam, size=size).astype(np.float64)
    return np.maximum(0.0, n - lam)


def sample_read_noise(std, rng, size=None):
    """Signal-independent Gaussian read noise, zero mean."""
    s = np.asarray(std, dtype=np.float64)
    if np.any(s < 0):
        raise NoiseConfigError("read noise std must be >= 0")
    return rng.standard_normal(size=size) * s


def apply_dsn_gain_quantize(electrons, params, channel, rng):
    """Row-wise streak gain, analog gain, floor quantization, digital gain.

    electrons: (H, W) plane or (C, H, W) frame of real electron counts.
    One streak multiplier per row (and per plane for 3-d input), drawn
    fresh from rng. Output values are digital_gain times an integer in
    [0, adc_max].
    """
    e = np.asarray(electrons, dtype=np.float64)
    if not np.all(np.isfinite(e)):
        raise NoiseConfigError("electron frame must be finite")
    gain = params.analog_gain(channel)
    squeeze = e.ndim == 2
    planes = e[None] if squeeze else e
    c, h, w = planes.shape
    beta = 1.0 + rng.standard_normal((c, h, 1)) * params.streak_std
    y = np.floor(gain * beta * planes)
    np.clip(y, 0.0, float(params.adc_max), out=y)
    y *= params.digital_gain
    return y[0] if squeeze else y


def synthesize_noisy_plane(clean_plane, params, channel, rng):
    """Full electron-to-digital pipeline for one plane in [0, 1]."""
    clean_plane = np.asarray(clean_plane, dtype=np.float64)
    if np.any(clean_plane < 0) or np.any(clean_plane > 1):
        raise NoiseConfigError("clean plane must lie in [0, 1]")
    params.validate(frame_shape=clean_plane.shape)
    gain_total = params.analog_gain(channel) * params.digital_gain
    n_expected = clean_plane * params.adc_max / gain_total
    e = sample_shot_noise(n_expected, rng)
    e += sample_dark_current(params.dark_current, rng, size=clean_plane.shape)
    e += sample_read_noise(params.read_std, rng, size=clean_plane.shape)
    return apply_dsn_gain_quantize(e, params, channel, rng)


def synthesize_noisy_frame(clean, params, channel, frame_index=0, clip_id=""):
    """Synthesize a noisy frame in digital numbers from a clean [0,1] frame.

    clean: (C, H, W) with C=3 for channel="rgb", C=1 for channel="nir".
    Deterministic given (params.seed, clip_id, frame_index, channel): each
    plane draws from its own counter-derived stream, so generation order
    does not matter.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3:
        raise NoiseConfigError(f"frame must be (C, H, W), got {clean.shape}")
    if channel == "rgb":
        plane_channels = ["r", "g", "b"]
    elif channel == "nir":
        plane_channels = ["nir"]
    else:
        raise NoiseConfigError(f"channel must be 'rgb' or 'nir', got {channel!r}")
    if clean.shape[0] != len(plane_channels):
        raise NoiseConfigError(
            f"{channel} frame must have {len(plane_channels)} planes, got {clean.shape[0]}")
    out = np.empty_like(clean)
    for i, pc in enumerate(plane_channels):
        rng = derive_stream(params.seed, clip_id, frame_index, CHANNEL_CODES[pc])
        out[i] = synthesize_noisy_plane(clean[i], params, pc, rng)
    return out


def synthesize_awgn_frame(clean, std, rng, adc_max=255):
    """clean * adc_max plus white Gaussian noise, clamped to [0, adc_max]."""
    if std < 0:
        raise NoiseConfigError(f"awgn std must be >= 0, got {std}")
    clean = np.asarray(clean, dtype=np.float64)
    y = clean * adc_max + rng.standard_normal(clean.shape) * std
    return np.clip(y, 0.0, float(adc_max))


def synthesize_awgn_frame_keyed(clean, std, seed, frame_index=0, clip_id="",
                                adc_max=255):
    """Deterministic AWGN frame using the same stream keying as the
    physical model (one stream per plane)."""
    clean = np.asarray(clean, dtype=np.float64)
    out = np.empty_like(clean)
    for i in range(clean.shape[0]):
        rng = derive_stream(seed, clip_id, frame_index, i)
        out[i] = synthesize_awgn_frame(clean[i], std, rng, adc_max=adc_max)
    return out


def scale_to_unit(noisy, params):
    """Map digital numbers to the [0, 1] network input range."""
    return np.asarray(noisy, dtype=np.float64) / (params.digital_gain * params.adc_max)


# ---------------------------------------------------------------------------
# key/value config files (versioned, human readable)

_CONFIG_VERSION = 1


def _format_value(v):
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def params_to_text(params):
    lines = [f"version = {_CONFIG_VERSION}", "kind = params"]
    d = asdict(params)
    for key in ("dark_current", "read_std", "streak_std", "gain_rgb",
                "gain_nir", "digital_gain", "adc_max", "seed"):
        v = d[key]
        if isinstance(v, np.ndarray):
            raise NoiseConfigError(f"per-pixel {key} maps are not serializable to text")
        lines.append(f"{key} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def ranges_to_text(ranges):
    lines = [f"version = {_CONFIG_VERSION}", "kind = ranges"]
    for key in ("dark_current", "streak_std", "read_std", "gain_rgb",
                "nir_gain_scale", "digital_gain"):
        lines.append(f"{key} = {_format_value(getattr(ranges, key))}")
    lines.append(f"adc_max = {ranges.adc_max}")
    if ranges.awgn_std is not None:
        lines.append(f"awgn_std = {_format_value(ranges.awgn_std)}")
    return "\n".join(lines) + "\n"


def _parse_kv(text):
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise NoiseConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
    if fields.get("version") != str(_CONFIG_VERSION):
        raise NoiseConfigError(
            f"unsupported config version {fields.get('version')!r}, want {_CONFIG_VERSION}")
    return fields


def config_kind(text):
    return _parse_kv(text).get("kind")


def params_from_text(text):
    f = _parse_kv(text)
    if f.get("kind") != "params":
        raise NoiseConfigError(f"expected kind = params, got {f.get('kind')!r}")
    return NoiseParams(
        dark_current=float(f["dark_current"]),
        read_std=float(f["read_std"]),
        streak_std=float(f["streak_std"]),
        gain_rgb=float(f["gain_rgb"]),
        gain_nir=float(f["gain_nir"]),
        digital_gain=float(f["digital_gain"]),
        adc_max=int(f["adc_max"]),
        seed=int(f["seed"]),
    ).validate()


def ranges_from_text(text):
    f = _parse_kv(text)
    if f.get("kind") != "ranges":
        raise NoiseConfigError(f"expected kind = ranges, got {f.get('kind')!r}")

    def pair(key):
        parts = f[key].split()
        if len(parts) != 2:
            raise NoiseConfigError(f"{key}: expected two numbers, got {f[key]!r}")
        return (float(parts[0]), float(parts[1]))

    return ParamRanges(
        dark_current=pair("dark_current"),
        streak_std=pair("streak_std"),
        read_std=pair("read_std"),
        gain_rgb=pair("gain_rgb"),
        nir_gain_scale=pair("nir_gain_scale"),
        digital_gain=pair("digital_gain"),
        adc_max=int(f.get("adc_max", 255)),
        awgn_std=pair("awgn_std") if "awgn_std" in f else None,
    ).validate()
