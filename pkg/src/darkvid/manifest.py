"""Clip manifests and noisy-dataset synthesis.

A manifest is a versioned JSON file describing paired RGB/NIR clips:
frame path patterns (str.format with {frame}), frame counts, sizes, a
train/test role, and optionally a registration transform path and an
embedded noise parameter block for exact regeneration.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import frameio
from . import noise as nz

MANIFEST_VERSION = 1
ROLES = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ClipEntry:
    id: str
    role: str
    rgb_pattern: str
    nir_pattern: str
    frame_count: int
    width: int
    height: int
    transform_path: str | None = None
    noise_params: dict | None = None
    awgn_std: float | None = None
    clean_rgb_pattern: str | None = None
    clean_nir_pattern: str | None = None

    def rgb_path(self, root, frame):
        return os.path.join(root, self.rgb_pattern.format(frame=frame))

    def nir_path(self, root, frame):
        return os.path.join(root, self.nir_pattern.format(frame=frame))


@dataclass
class ClipManifest:
    clips: list = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: str = "."  # directory the patterns are relative to (not serialized)

    def clip(self, clip_id):
        for c in self.clips:
            if c.id == clip_id:
                return c
        raise ManifestError(f"unknown clip id {clip_id!r}")

    def by_role(self, role):
        return [c for c in self.clips if c.role == role]

    def validate(self, check_files=True):
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"field 'id': duplicate clip ids {dupes}")
        for c in self.clips:
            if c.role not in ROLES:
                raise ManifestError(
                    f"clip {c.id}: field 'role' must be one of {ROLES}, got {c.role!r}")
            if c.frame_count < 1:
                raise ManifestError(
                    f"clip {c.id}: field 'frame_count' must be >= 1, got {c.frame_count}")
            for name in ("width", "height"):
                if getattr(c, name) < 1:
                    raise ManifestError(
                        f"clip {c.id}: field '{name}' must be >= 1")
            for name in ("rgb_pattern", "nir_pattern"):
                pattern = getattr(c, name)
                try:
                    first = pattern.format(frame=0)
                except (KeyError, IndexError, ValueError) as e:
                    raise ManifestError(
                        f"clip {c.id}: field '{name}' is not a valid pattern: {e}")
                if pattern.format(frame=1) == first and c.frame_count > 1:
                    raise ManifestError(
                        f"clip {c.id}: field '{name}' does not vary with {{frame}}")
            if not check_files:
                continue
            for name, chans in (("rgb_pattern", 3), ("nir_pattern", 1)):
                for frame in (0, c.frame_count - 1):
                    path = os.path.join(self.root, getattr(c, name).format(frame=frame))
                    if not os.path.exists(path):
                        raise ManifestError(
                            f"clip {c.id}: field '{name}': missing file {path}")
                arr = frameio.read_frame(
                    os.path.join(self.root, getattr(c, name).format(frame=0)))
                if arr.shape != (chans, c.height, c.width):
                    raise ManifestError(
                        f"clip {c.id}: field '{name}': frame shape {arr.shape} does not "
                        f"match declared ({chans}, {c.height}, {c.width})")
        return self

    def save(self, path):
        doc = {
            "version": self.version,
            "clips": [
                {k: v for k, v in asdict(c).items() if v is not None}
                for c in self.clips
            ],
        }
        _atomic_write_json(path, doc)
        self.root = os.path.dirname(os.path.abspath(path))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        if not isinstance(doc, dict) or "version" not in doc:
            raise ManifestError("field 'version': missing")
        if doc["version"] != MANIFEST_VERSION:
            raise ManifestError(
                f"field 'version': unsupported value {doc['version']!r}")
        if "clips" not in doc or not isinstance(doc["clips"], list):
            raise ManifestError("field 'clips': missing or not a list")
        clips = []
        for i, raw in enumerate(doc["clips"]):
            required = ("id", "role", "rgb_pattern", "nir_pattern",
                        "frame_count", "width", "height")
            for key in required:
                if key not in raw:
                    raise ManifestError(f"clips[{i}]: field '{key}': missing")
            clips.append(ClipEntry(**raw))
        return cls(clips=clips, version=doc["version"],
                   root=os.path.dirname(os.path.abspath(path)))


def _atomic_write_json(path, doc):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def params_to_dict(params):
    return {
        "dark_current": float(params.dark_current),
        "read_std": float(params.read_std),
        "streak_std": float(params.streak_std),
        "gain_rgb": float(params.gain_rgb),
        "gain_nir": float(params.gain_nir),
        "digital_gain": float(params.digital_gain),
        "adc_max": int(params.adc_max),
        "seed": int(params.seed),
    }


def params_from_dict(d):
    return nz.NoiseParams(**d).validate()


# ---------------------------------------------------------------------------
# noisy dataset synthesis

def clip_noise_params(clip, ranges, seed):
    """Per-clip params: manifest override wins, else sampled from ranges."""
    if clip.noise_params is not None:
        return params_from_dict(clip.noise_params)
    if ranges is None:
        raise ManifestError(
            f"clip {clip.id}: no embedded noise_params and no ranges given")
    rng = nz.derive_stream(seed, clip.id, 0, 0, purpose=nz.STREAM_PARAMS)
    return nz.sample_noise_params(ranges, rng)


def synthesize_clip_frame(clean_frame, channel, params, frame_index, clip_id,
                          awgn_std=None):
    """Noisy frame scaled to the [0, 1] network range, float32."""
    if awgn_std is not None:
        dn = nz.synthesize_awgn_frame_keyed(clean_frame, awgn_std, params.seed,
                                            frame_index, clip_id,
                                            adc_max=params.adc_max)
        return (dn / params.adc_max).astype(np.float32)
    dn = nz.synthesize_noisy_frame(clean_frame, params, channel,
                                   frame_index=frame_index, clip_id=clip_id)
    return nz.scale_to_unit(dn, params).astype(np.float32)


def clip_awgn_std(ranges, params_seed):
    """Per-clip AWGN sigma when ranges request the Gaussian ablation."""
    if ranges is None or ranges.awgn_std is None:
        return None
    rng = nz.derive_stream(params_seed, "awgn-std", 0, 0, purpose=nz.STREAM_PARAMS)
    return float(rng.uniform(*ranges.awgn_std))


def build_noisy_dataset(manifest, ranges, seed, out_dir):
    """Synthesize noisy counterparts for every clip in a clean manifest.

    Writes per-clip PFB frames (scaled [0, 1]) plus a params file, and a
    new manifest embedding the exact NoiseParams for regeneration.
    Returns (noisy manifest, list of (clip_id, error)); failed clips are
    skipped, the rest still complete.
    """
    os.makedirs(out_dir, exist_ok=True)
    out_clips = []
    failures = []
    for clip in manifest.clips:
        try:
            out_clips.append(_synthesize_one_clip(manifest, clip, ranges, seed, out_dir))
        except Exception as e:  # keep going; caller decides the exit code
            failures.append((clip.id, str(e)))
    noisy = ClipManifest(clips=out_clips)
    noisy.save(os.path.join(out_dir, "manifest.json"))
    return noisy, failures


def _synthesize_one_clip(manifest, clip, ranges, seed, out_dir):
    params = clip_noise_params(clip, ranges, seed)
    awgn = clip_awgn_std(ranges, params.seed)
    clip_dir = os.path.join(out_dir, clip.id)
    os.makedirs(clip_dir, exist_ok=True)
    for frame in range(clip.frame_count):
        clean_rgb = frameio.read_frame(clip.rgb_path(manifest.root, frame))
        clean_nir = frameio.read_frame(clip.nir_path(manifest.root, frame))
        noisy_rgb = synthesize_clip_frame(clean_rgb, "rgb", params, frame, clip.id,
                                          awgn_std=awgn)
        noisy_nir = synthesize_clip_frame(clean_nir, "nir", params, frame, clip.id,
                                          awgn_std=awgn)
        frameio.write_pfb(os.path.join(clip_dir, f"rgb_{frame:04d}.pfb"), noisy_rgb)
        frameio.write_pfb(os.path.join(clip_dir, f"nir_{frame:04d}.pfb"), noisy_nir)
    with open(os.path.join(clip_dir, "noise_params.txt"), "w") as f:
        f.write(nz.params_to_text(params))
    return ClipEntry(
        id=clip.id,
        role=clip.role,
        rgb_pattern=f"{clip.id}/rgb_{{frame:04d}}.pfb",
        nir_pattern=f"{clip.id}/nir_{{frame:04d}}.pfb",
        frame_count=clip.frame_count,
        width=clip.width,
        height=clip.height,
        noise_params=params_to_dict(params),
        awgn_std=awgn,
        clean_rgb_pattern=os.path.join(os.path.abspath(manifest.root), clip.rgb_pattern),
        clean_nir_pattern=os.path.join(os.path.abspath(manifest.root), clip.nir_pattern),
    )
