"""Procedural moving-texture clips for desk-scale experiments.

Each clip is a multi-octave noise texture drifting at a constant subpixel
velocity; RGB channels and the NIR plane are different tonal mixes of the
same structural layers, so the cross-spectral correlation the denoiser
exploits is present by construction.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from . import frameio
from .manifest import ClipEntry, ClipManifest


def _octave(rng, size, sigma):
    layer = ndimage.gaussian_filter(rng.uniform(0, 1, (size, size)), sigma)
    lo, hi = layer.min(), layer.max()
    return (layer - lo) / (hi - lo + 1e-12)


def make_toy_clip(seed, size=64, frames=40, margin=None):
    """Returns (rgb (N,3,H,W), nir (N,1,H,W)) float32 in [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    speed = rng.uniform(0.3, 1.5)
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.sin(angle), np.cos(angle)])  # (dy, dx) per frame
    if margin is None:
        margin = int(np.ceil(speed * frames)) + 4
    world = size + 2 * margin

    layers = np.stack([_octave(rng, world, s) for s in (1.5, 4.0, 10.0)])
    # tonal mixes; NIR shares structure but weights the octaves differently
    mix_rgb = rng.uniform(0.1, 1.0, (3, 3))
    mix_rgb /= mix_rgb.sum(axis=1, keepdims=True)
    mix_nir = rng.uniform(0.1, 1.0, 3)
    mix_nir /= mix_nir.sum()

    base_rgb = np.tensordot(mix_rgb, layers, axes=(1, 0))   # (3, world, world)
    base_nir = np.tensordot(mix_nir, layers, axes=(0, 0))[None]

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    rgb = np.empty((frames, 3, size, size), dtype=np.float32)
    nir = np.empty((frames, 1, size, size), dtype=np.float32)
    for t in range(frames):
        oy = margin + vel[0] * t
        ox = margin + vel[1] * t
        coords = np.stack([ys + oy, xs + ox])
        for c in range(3):
            rgb[t, c] = ndimage.map_coordinates(base_rgb[c], coords, order=1,
                                                mode="nearest")
        nir[t, 0] = ndimage.map_coordinates(base_nir[0], coords, order=1,
                                            mode="nearest")
    # keep away from the sensor floor and ceiling
    rgb = 0.05 + 0.9 * np.clip(rgb, 0, 1)
    nir = 0.05 + 0.9 * np.clip(nir, 0, 1)
    return rgb.astype(np.float32), nir.astype(np.float32)


def write_toy_corpus(out_dir, n_clips=8, size=64, frames=40, seed=0,
                     train_clips=None):
    """Write a clean PFB corpus plus manifest; returns the manifest.

    The last (n_clips - train_clips) clips get the test role.
    """
    if train_clips is None:
        train_clips = max(n_clips - 2, 1)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_clips):
        clip_id = f"clip{i:02d}"
        clip_dir = os.path.join(out_dir, clip_id)
        os.makedirs(clip_dir, exist_ok=True)
        rgb, nir = make_toy_clip(seed * 1000 + i, size=size, frames=frames)
        for t in range(frames):
            frameio.write_pfb(os.path.join(clip_dir, f"rgb_{t:04d}.pfb"), rgb[t])
            frameio.write_pfb(os.path.join(clip_dir, f"nir_{t:04d}.pfb"), nir[t])
        entries.append(ClipEntry(
            id=clip_id,
            role="train" if i < train_clips else "test",
            rgb_pattern=f"{clip_id}/rgb_{{frame:04d}}.pfb",
            nir_pattern=f"{clip_id}/nir_{{frame:04d}}.pfb",
            frame_count=frames,
            width=size,
            height=size,
        ))
    man = ClipManifest(clips=entries)
    man.save(os.path.join(out_dir, "manifest.json"))
    return man
