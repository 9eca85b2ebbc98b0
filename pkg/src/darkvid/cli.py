"""Command-line surface tying the synthesis, training, denoising,
evaluation, and alignment pieces together.

Exit codes: 0 success, 2 validation/usage error, 1 anything else.
"""

import os

# a fixed BLAS thread count keeps runs bitwise reproducible (recorded in
# each training run's run.json); must be set before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import csv
import glob
import json
import math
import sys

import numpy as np

from . import frameio
from . import manifest as mf
from . import metrics
from . import net as dnet
from . import noise as nz
from . import registration as reg
from . import training

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _load_ranges(path):
    with open(path) as f:
        text = f.read()
    return nz.ranges_from_text(text)


def _load_params(path):
    with open(path) as f:
        text = f.read()
    return nz.params_from_text(text)


def _frame_files(spec):
    """A clip argument: a directory of frames or a glob pattern."""
    if os.path.isdir(spec):
        files = sorted(glob.glob(os.path.join(spec, "*.pfb"))) \
            or sorted(glob.glob(os.path.join(spec, "*.png")))
    else:
        files = sorted(glob.glob(spec))
    if not files:
        raise CliError(f"no frames found at {spec!r}")
    return files


def _load_clip(spec):
    files = _frame_files(spec)
    return np.stack([frameio.read_frame(p) for p in files]), files


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args):
    man = mf.ClipManifest.load(args.manifest)
    man.validate(check_files=True)
    ranges = _load_ranges(args.ranges)
    noisy, failures = mf.build_noisy_dataset(man, ranges, args.seed, args.out)
    print(f"wrote {len(noisy.clips)} noisy clips to {args.out}")
    for clip_id, err in failures:
        print(f"clip {clip_id} failed: {err}", file=sys.stderr)
    return EXIT_ERROR if failures else EXIT_OK


def cmd_train(args):
    man = mf.ClipManifest.load(args.manifest)
    man.validate(check_files=True)
    with open(args.net_config) as f:
        net_cfg = dnet.NetConfig.from_dict(json.load(f))
    with open(args.train_config) as f:
        doc = json.load(f)
    ranges = None
    if "noise_ranges_file" in doc:
        path = doc.pop("noise_ranges_file")
        if not os.path.isabs(path):
            path = os.path.join(os.path.dirname(os.path.abspath(args.train_config)),
                                path)
        ranges = _load_ranges(path)
    train_cfg = training.TrainConfig.from_dict(doc)
    training.train(man, train_cfg, net_cfg, args.out, ranges=ranges,
                   resume_from=args.resume)
    print(f"run complete; weights and metrics in {args.out}")
    return EXIT_OK


def cmd_denoise(args):
    ws, _ = dnet.load_weights(args.weights)
    config = ws.config
    if args.scman and config.use_nir:
        raise CliError("--scman given but the weights file holds a dual-channel net")
    if not config.use_nir and not args.scman:
        print("note: weights are single-channel; NIR input ignored", file=sys.stderr)
    rgb, rgb_files = _load_clip(args.rgb)
    nir = None
    if config.use_nir:
        if args.nir is None:
            raise CliError("dual-channel weights need --nir")
        nir, _ = _load_clip(args.nir)
        if nir.shape[0] != rgb.shape[0]:
            raise CliError(
                f"clip lengths differ: rgb {rgb.shape[0]} vs nir {nir.shape[0]}")
    out_rgb, out_nir = training.denoise_clip(config, ws, rgb, nir)
    os.makedirs(args.out, exist_ok=True)
    for t, src in enumerate(rgb_files):
        base = os.path.splitext(os.path.basename(src))[0]
        frameio.write_pfb(os.path.join(args.out, f"{base}_denoised.pfb"), out_rgb[t])
        if out_nir is not None:
            frameio.write_pfb(os.path.join(args.out, f"{base}_denoised_nir.pfb"),
                              out_nir[t])
    print(f"denoised {rgb.shape[0]} frames into {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    pred, _ = _load_clip(args.pred)
    ref, _ = _load_clip(args.ref)
    if pred.shape != ref.shape:
        raise CliError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    report = metrics.evaluate_frames(pred, ref, peak=args.peak)
    with open(args.csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "psnr_db", "ssim"])
        for i, (p, s) in enumerate(zip(report.psnr_frames, report.ssim_frames)):
            w.writerow([i, repr(p), repr(s)])
    print(f"frames: {len(report.psnr_frames)}")
    print(f"psnr_mean_db: {report.psnr_mean:.4f}")
    print(f"ssim_mean: {report.ssim_mean:.6f}")
    return EXIT_OK


def cmd_analyze_corr(args):
    man = mf.ClipManifest.load(args.manifest)
    man.validate(check_files=True)
    pairs = []
    for clip in man.clips:
        for t in range(0, clip.frame_count, args.frame_stride):
            rgb = frameio.read_frame(clip.rgb_path(man.root, t))
            nir = frameio.read_frame(clip.nir_path(man.root, t))
            pairs.append((rgb, nir))
    rows = metrics.cross_channel_report(pairs)
    with open(args.csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["pair", "channel_a", "channel_b",
                                          "ssim", "nmi"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    print(f"wrote {len(rows)} rows ({len(pairs)} pairs) to {args.csv}")
    return EXIT_OK


def cmd_align(args):
    rgb = frameio.read_frame(args.rgb)
    nir = frameio.read_frame(args.nir)
    fixed = rgb[1] if rgb.shape[0] == 3 else rgb[0]  # green channel guides
    moving = nir[0]
    transform, diag = reg.register_pair(fixed, moving, seed=args.seed)
    with open(args.out_transform, "w") as f:
        f.write(transform.to_text())
    print(f"inliers {diag['n_inliers']}/{diag['n_matches']}, "
          f"rms {diag['rms_px']:.3f} px")
    if args.apply:
        warped, _ = reg.warp_affine(nir, transform,
                                    out_shape=(rgb.shape[1], rgb.shape[2]))
        out_path = os.path.splitext(args.out_transform)[0] + "_warped.pfb"
        frameio.write_pfb(out_path, warped.astype(np.float32))
        print(f"warped NIR written to {out_path}")
    return EXIT_OK


def cmd_noise_sample(args):
    params = _load_params(args.params)
    clean = frameio.read_frame(args.clean)
    channel = "rgb" if clean.shape[0] == 3 else "nir"
    noisy = nz.synthesize_noisy_frame(clean, params, channel,
                                      frame_index=args.frame_index,
                                      clip_id=args.clip_id)
    scaled = nz.scale_to_unit(noisy, params).astype(np.float32)
    frameio.write_frame(args.out, scaled)
    print(f"synthesized {channel} frame -> {args.out} "
          f"(digital range [0, {params.digital_gain * params.adc_max:g}], "
          "stored scaled to [0, 1])")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="darkvid",
                                description="Low-light RGB/NIR video toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a noisy dataset from clean clips")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ranges", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--net-config", required=True)
    s.add_argument("--train-config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise a clip with trained weights")
    s.add_argument("--weights", required=True)
    s.add_argument("--rgb", required=True)
    s.add_argument("--nir", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--scman", action="store_true",
                   help="expect single-channel weights (no NIR arm)")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("evaluate", help="PSNR/SSIM of predictions vs references")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze-corr",
                       help="cross-channel SSIM/NMI correlation table")
    s.add_argument("--manifest", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--frame-stride", type=int, default=1)
    s.set_defaults(func=cmd_analyze_corr)

    s = sub.add_parser("align", help="estimate the NIR->RGB affine transform")
    s.add_argument("--rgb", required=True)
    s.add_argument("--nir", required=True)
    s.add_argument("--out-transform", required=True)
    s.add_argument("--apply", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("noise-sample",
                       help="single-frame noise synthesis for debugging")
    s.add_argument("--params", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frame-index", type=int, default=0)
    s.add_argument("--clip-id", default="")
    s.set_defaults(func=cmd_noise_sample)
    return p


VALIDATION_ERRORS = (CliError, mf.ManifestError, nz.NoiseConfigError,
                     frameio.FrameFormatError, dnet.NetConfigError,
                     metrics.MetricError, FileNotFoundError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        code = getattr(e, "code", EXIT_VALIDATION)
        print(f"error: {e}", file=sys.stderr)
        return code
    except (reg.RegistrationError, training.TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # pragma: no cover - unexpected
        print(f"unexpected error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
