"""Desk-scale denoising trend experiment.

Trains the dual-channel network at two window sizes plus the
single-channel variant on a toy moving-texture corpus, over several
seeds, and reports test-clip PSNR against the noisy-input baseline.
This reproduces, as a trend, the orderings reported for the full-scale
system: wider temporal windows help, and the NIR arm helps.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import manifest as mf
from . import net as dnet
from . import training
from .metrics import psnr
from .noise import NoiseParams

GAIN_20_PARAMS = dict(dark_current=6.0, read_std=1.25, streak_std=0.05,
                      gain_rgb=20.0, gain_nir=20.0, digital_gain=1.0,
                      adc_max=255)

VARIANTS = {
    "dual_fn7": dict(use_nir=True, frame_window=7),
    "dual_fn1": dict(use_nir=True, frame_window=1),
    "single_fn7": dict(use_nir=False, frame_window=7),
}


@dataclass
class TrendConfig:
    seeds: tuple = (0, 1, 2)
    noise_seed: int = 99
    variants: tuple = ("dual_fn7", "dual_fn1", "single_fn7")
    train: training.TrainConfig = field(default_factory=lambda: training.TrainConfig(
        patch_size=16, batch_size=4, epochs=3, steps_per_epoch=150,
        val_frame_stride=1000))
    net: dnet.NetConfig = field(default_factory=dnet.NetConfig)


def manifest_with_fixed_noise(man, noise_seed):
    """Copy of the manifest with identical K=20 noise params on every clip
    (streams still differ per clip through the clip id)."""
    out = copy.deepcopy(man)
    params = NoiseParams(seed=noise_seed, **GAIN_20_PARAMS).validate()
    for clip in out.clips:
        clip.noise_params = mf.params_to_dict(params)
    return out


def noisy_input_psnr(store, clips):
    vals = []
    for clip in clips:
        for t in range(clip.frame_count):
            noisy = store.noisy(clip.id, "rgb", t)
            clean = store.clean(clip.id, "rgb", t)
            vals.append(psnr(np.clip(noisy, 0, 1), clean, peak=1.0))
    return float(np.mean(vals))


def evaluate_on_test_clips(config, ws, store, clips):
    vals = []
    for clip in clips:
        rgb = np.stack([store.noisy(clip.id, "rgb", t)
                        for t in range(clip.frame_count)])
        nir = np.stack([store.noisy(clip.id, "nir", t)
                        for t in range(clip.frame_count)]) if config.use_nir else None
        den_rgb, _ = training.denoise_clip(config, ws, rgb, nir)
        for t in range(clip.frame_count):
            vals.append(psnr(den_rgb[t], store.clean(clip.id, "rgb", t), peak=1.0))
    return float(np.mean(vals))


def run_trend_experiment(man, out_dir, config=None, log=print):
    """Returns a results dict with per-variant per-seed PSNR, seed means,
    and the noisy baseline; also written to out_dir/results.json."""
    config = config or TrendConfig()
    os.makedirs(out_dir, exist_ok=True)
    noisy_man = manifest_with_fixed_noise(man, config.noise_seed)
    store = training.ClipStore(noisy_man, ranges=None, dataset_seed=0)
    test_clips = noisy_man.by_role("test")
    baseline = noisy_input_psnr(store, test_clips)
    log(f"noisy-input baseline: {baseline:.2f} dB")

    results = {"noisy_psnr": baseline, "variants": {}, "runtime_s": None}
    t0 = time.time()
    for name in config.variants:
        overrides = VARIANTS[name]
        net_cfg = replace(config.net, **overrides).validate()
        per_seed = {}
        for seed in config.seeds:
            train_cfg = replace(config.train, seed=seed).validate()
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}")
            ws, _ = training.train(noisy_man, train_cfg, net_cfg, run_dir)
            score = evaluate_on_test_clips(net_cfg, ws, store, test_clips)
            per_seed[str(seed)] = score
            log(f"{name} seed {seed}: {score:.2f} dB "
                f"({score - baseline:+.2f} vs noisy)")
        results["variants"][name] = {
            "per_seed": per_seed,
            "mean": float(np.mean(list(per_seed.values()))),
        }
    results["runtime_s"] = time.time() - t0
    with open(os.path.join(out_dir, "results.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return results


def trend_orderings(results):
    """The two orderings under test plus the improvement over noisy input."""
    v = results["variants"]
    gain = v["dual_fn7"]["mean"] - results["noisy_psnr"]
    return {
        "gain_db": gain,
        "fn7_ge_fn1": v["dual_fn7"]["mean"] >= v["dual_fn1"]["mean"],
        "dual_ge_single": v["dual_fn7"]["mean"] >= v["single_fn7"]["mean"],
    }
