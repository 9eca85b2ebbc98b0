"""Training: loss terms, lambda schedule, Adam, the patch sampler over
paired clips, and the training loop with per-epoch checkpoints.

Noisy windows are synthesized on the fly from the clean clips with
per-clip noise parameters; everything is keyed by global sample index so
a resumed run continues bitwise identically.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import frameio
from . import manifest as mf
from . import net as dnet
from . import noise as nz
from .autodiff import Tape, Tensor
from .metrics import psnr

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


DEFAULT_LAMBDA2_SCHEDULE = ((0, 0.1), (20, 0.25), (30, 0.6))


@dataclass
class TrainConfig:
    patch_size: int = 48
    batch_size: int = 10
    lr0: float = 1e-4
    lr_decay: float = 0.1          # multiplicative, per epoch
    epochs: int = 6
    steps_per_epoch: int = 500
    lambda2_schedule: tuple = DEFAULT_LAMBDA2_SCHEDULE
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_frame_stride: int = 8      # validate on every k-th eligible frame
    checkpoint_every: int = 1      # epochs

    def validate(self):
        if self.patch_size % dnet.SPATIAL_MULTIPLE:
            raise TrainingError(
                f"patch_size must be divisible by {dnet.SPATIAL_MULTIPLE}, "
                f"got {self.patch_size}")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise TrainingError("batch_size, epochs, steps_per_epoch must be >= 1")
        for ep, lam2 in self.lambda2_schedule:
            if not 0.0 < lam2 < 1.0:
                raise TrainingError(f"lambda2 must be in (0,1), got {lam2} at epoch {ep}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["lambda2_schedule"] = [list(p) for p in self.lambda2_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda2_schedule" in d:
            d["lambda2_schedule"] = tuple(tuple(p) for p in d["lambda2_schedule"])
        return cls(**d).validate()


def lambda_schedule(epoch, config):
    """Piecewise-constant lambda2 over epochs; lambda1 = 1 - lambda2."""
    if epoch < 0:
        raise TrainingError(f"epoch must be >= 0, got {epoch}")
    lam2 = None
    for ep, value in sorted(config.lambda2_schedule):
        if epoch >= ep:
            lam2 = value
    if lam2 is None:
        lam2 = sorted(config.lambda2_schedule)[0][1]
    return 1.0 - lam2, lam2


def learning_rate(epoch, config):
    return config.lr0 * config.lr_decay ** epoch


# ---------------------------------------------------------------------------
# loss terms (built from tape ops, so they are differentiable)

def l1_mean(pred, gt):
    return ad.mean_all(ad.absolute(ad.sub(pred, gt)))


def cosine_loss(pred, gt, eps=1e-8):
    """Mean over pixels of 1 - cos(pred_p, gt_p) for per-pixel RGB vectors.

    Pixels where either vector's norm falls below eps contribute 0.
    """
    if pred.data.ndim != 4 or pred.data.shape[1] != 3:
        raise ad.ShapeError(
            f"cosine loss needs (B,3,H,W) RGB input, got {pred.data.shape}")
    if pred.data.shape != gt.data.shape:
        raise ad.ShapeError(
            f"cosine loss: shape {pred.data.shape} != {gt.data.shape}")
    dot = ad.sum_channels(ad.mul(pred, gt))
    sq_x = ad.sum_channels(ad.mul(pred, pred))
    sq_y = ad.sum_channels(ad.mul(gt, gt))
    nx = ad.sqrt(ad.clamp_min(sq_x, eps * eps))
    ny = ad.sqrt(ad.clamp_min(sq_y, eps * eps))
    cos = ad.div(dot, ad.mul(nx, ny))
    mask = ((sq_x.data > eps * eps) & (sq_y.data > eps * eps)).astype(pred.data.dtype)
    one_minus = ad.add_const(ad.scale(cos, -1.0), 1.0)
    return ad.mean_all(ad.mul(one_minus, Tensor(mask)))


def total_loss(pred_rgb, pred_nir, gt_rgb, gt_nir, lam1, lam2):
    """lam1 * (L1_rgb + L1_nir) + lam2 * cosine(rgb); L1 terms are
    per-element means so the balance is patch-size independent. The NIR
    term drops out for the single-channel variant (pred_nir None)."""
    loss = ad.scale(l1_mean(pred_rgb, gt_rgb), lam1)
    if pred_nir is not None:
        loss = ad.add(loss, ad.scale(l1_mean(pred_nir, gt_nir), lam1))
    return ad.add(loss, ad.scale(cosine_loss(pred_rgb, gt_rgb), lam2))


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}

    def ensure(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(weights, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place on weights.

    Rejects non-finite gradients before mutating anything.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = weights[name]
        state.ensure(name, w)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        w -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(w.dtype)
    return weights


# ---------------------------------------------------------------------------
# clip access + patch sampling

class ClipStore:
    """Loads clean frames and synthesizes noisy [0,1] frames with per-clip
    params, caching both (desk-scale datasets fit in memory)."""

    def __init__(self, man, ranges=None, dataset_seed=0):
        self.manifest = man
        self.ranges = ranges
        self.dataset_seed = dataset_seed
        self._clean = {}
        self._noisy = {}
        self._params = {}

    def params_for(self, clip_id):
        if clip_id not in self._params:
            clip = self.manifest.clip(clip_id)
            self._params[clip_id] = mf.clip_noise_params(clip, self.ranges,
                                                         self.dataset_seed)
        return self._params[clip_id]

    def awgn_for(self, clip_id):
        clip = self.manifest.clip(clip_id)
        if clip.awgn_std is not None:
            return float(clip.awgn_std)
        return mf.clip_awgn_std(self.ranges, self.params_for(clip_id).seed)

    def clean(self, clip_id, channel, frame):
        key = (clip_id, channel, frame)
        if key not in self._clean:
            clip = self.manifest.clip(clip_id)
            path = (clip.rgb_path if channel == "rgb" else clip.nir_path)(
                self.manifest.root, frame)
            self._clean[key] = frameio.read_frame(path)
        return self._clean[key]

    def noisy(self, clip_id, channel, frame):
        key = (clip_id, channel, frame)
        if key not in self._noisy:
            params = self.params_for(clip_id)
            self._noisy[key] = mf.synthesize_clip_frame(
                self.clean(clip_id, channel, frame), channel, params, frame,
                clip_id, awgn_std=self.awgn_for(clip_id))
        return self._noisy[key]


@dataclass
class PatchSample:
    rgb_window: np.ndarray   # (F, 3, p, p) noisy, scaled [0,1]
    nir_window: np.ndarray   # (F, 1, p, p)
    clean_rgb: np.ndarray    # (3, p, p) center frame
    clean_nir: np.ndarray    # (1, p, p)
    clip_id: str
    frame_index: int
    origin: tuple            # (y, x)


class PatchSampler:
    """Uniform random (clip, center frame, crop origin); fully determined
    by (seed, global sample index)."""

    def __init__(self, store, net_config, train_config, role="train"):
        self.store = store
        self.net_config = net_config
        self.train_config = train_config
        t = net_config.half_window
        p = train_config.patch_size
        self.clips = []
        for clip in store.manifest.by_role(role):
            if clip.frame_count < net_config.frame_window:
                log.warning("clip %s skipped: %d frames < window %d",
                            clip.id, clip.frame_count, net_config.frame_window)
                continue
            if clip.width < p or clip.height < p:
                log.warning("clip %s skipped: %dx%d smaller than patch %d",
                            clip.id, clip.width, clip.height, p)
                continue
            self.clips.append(clip)
        if not self.clips:
            raise TrainingError(f"no usable clips with role {role!r}")
        self.half = t

    def sample(self, index):
        rng = nz.derive_stream(self.train_config.seed, "patch-sampler", index, 0,
                               purpose=nz.STREAM_SAMPLER)
        clip = self.clips[int(rng.integers(len(self.clips)))]
        t = self.half
        center = int(rng.integers(t, clip.frame_count - t))
        p = self.train_config.patch_size
        oy = int(rng.integers(0, clip.height - p + 1))
        ox = int(rng.integers(0, clip.width - p + 1))
        frames = range(center - t, center + t + 1)
        rgb_win = np.stack([
            self.store.noisy(clip.id, "rgb", f)[:, oy:oy + p, ox:ox + p]
            for f in frames])
        nir_win = np.stack([
            self.store.noisy(clip.id, "nir", f)[:, oy:oy + p, ox:ox + p]
            for f in frames])
        return PatchSample(
            rgb_window=rgb_win,
            nir_window=nir_win,
            clean_rgb=self.store.clean(clip.id, "rgb", center)[:, oy:oy + p, ox:ox + p],
            clean_nir=self.store.clean(clip.id, "nir", center)[:, oy:oy + p, ox:ox + p],
            clip_id=clip.id,
            frame_index=center,
            origin=(oy, ox),
        )

    def batch(self, first_index, size):
        samples = [self.sample(first_index + j) for j in range(size)]
        fw = self.net_config.frame_window
        rgb = [np.stack([s.rgb_window[f] for s in samples]) for f in range(fw)]
        nir = [np.stack([s.nir_window[f] for s in samples]) for f in range(fw)]
        gt_rgb = np.stack([s.clean_rgb for s in samples])
        gt_nir = np.stack([s.clean_nir for s in samples])
        return rgb, nir, gt_rgb, gt_nir


# ---------------------------------------------------------------------------
# inference over a clip

def window_indices(center, n_frames, half):
    """Edge-clamped temporal window around a frame index."""
    return [min(max(i, 0), n_frames - 1)
            for i in range(center - half, center + half + 1)]


def denoise_clip(config, ws, rgb_frames, nir_frames=None, clip_output=True):
    """Run the denoiser over every frame of a clip (batch 1 per frame).

    rgb_frames: (N, 3, H, W) scaled [0,1]; nir_frames required for the
    dual-channel network. Returns (rgb_out, nir_out or None), clipped to
    [0, 1] unless clip_output is False.
    """
    rgb_frames = np.asarray(rgb_frames, dtype=np.float32)
    n = rgb_frames.shape[0]
    half = config.half_window
    out_rgb = np.empty_like(rgb_frames)
    out_nir = None
    if config.use_nir:
        if nir_frames is None:
            raise TrainingError("dual-channel denoising needs NIR frames")
        nir_frames = np.asarray(nir_frames, dtype=np.float32)
        out_nir = np.empty_like(nir_frames)
    for t in range(n):
        idx = window_indices(t, n, half)
        rgb_win = [Tensor(rgb_frames[i][None]) for i in idx]
        nir_win = [Tensor(nir_frames[i][None]) for i in idx] if config.use_nir else None
        pred_rgb, pred_nir = dnet.forward(config, ws, rgb_win, nir_win)
        out_rgb[t] = pred_rgb.data[0]
        if out_nir is not None:
            out_nir[t] = pred_nir.data[0]
    if clip_output:
        np.clip(out_rgb, 0.0, 1.0, out=out_rgb)
        if out_nir is not None:
            np.clip(out_nir, 0.0, 1.0, out=out_nir)
    return out_rgb, out_nir


# ---------------------------------------------------------------------------
# training loop

METRICS_FIELDS = ("epoch", "step", "loss", "lambda2", "lr", "val_psnr")


def _write_metrics_row(path, row, header_if_new=True):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        if new and header_if_new:
            w.writeheader()
        w.writerow(row)


def _validation_psnr(config, ws, store, stride):
    vals = []
    for clip in store.manifest.by_role("test"):
        if clip.frame_count < config.frame_window:
            continue
        frames = list(range(config.half_window,
                            clip.frame_count - config.half_window, stride))
        if not frames:
            continue
        for t in frames:
            idx = window_indices(t, clip.frame_count, config.half_window)
            rgb_win = [Tensor(store.noisy(clip.id, "rgb", i)[None]) for i in idx]
            nir_win = [Tensor(store.noisy(clip.id, "nir", i)[None]) for i in idx] \
                if config.use_nir else None
            pred, _ = dnet.forward(config, ws, rgb_win, nir_win)
            clean = store.clean(clip.id, "rgb", t)
            vals.append(psnr(np.clip(pred.data[0], 0, 1), clean, peak=1.0))
    return float(np.mean(vals)) if vals else math.nan


def save_checkpoint(path, ws, adam, next_epoch, train_config):
    extra = {
        "next_epoch": next_epoch,
        "adam_t": adam.t,
        "train_config": train_config.to_dict(),
    }
    full = dict(ws.tensors)
    for name in ws.names():
        if name in adam.m:
            full[f"adam.m.{name}"] = adam.m[name]
            full[f"adam.v.{name}"] = adam.v[name]
    carrier = dnet.WeightSet(ws.config, full, check=False)
    dnet.save_weights(path, carrier, extra=extra)


def load_checkpoint(path):
    carrier, extra = dnet.load_weights(path)
    tensors = {k: v for k, v in carrier.tensors.items() if not k.startswith("adam.")}
    ws = dnet.WeightSet(carrier.config, tensors)
    adam = AdamState()
    adam.t = extra["adam_t"]
    for k, v in carrier.tensors.items():
        if k.startswith("adam.m."):
            adam.m[k[len("adam.m."):]] = v.copy()
        elif k.startswith("adam.v."):
            adam.v[k[len("adam.v."):]] = v.copy()
    return ws, adam, extra


def train(man, train_config, net_config, out_dir, ranges=None, resume_from=None):
    """Train on the manifest's train-role clips; returns (WeightSet, rows).

    Writes to out_dir: config.json snapshot, run.json environment record,
    metrics.csv (one row per step, plus an epoch row carrying val_psnr),
    epoch checkpoints, and final.dvw.
    """
    train_config.validate()
    net_config.validate()
    os.makedirs(out_dir, exist_ok=True)
    store = ClipStore(man, ranges=ranges, dataset_seed=train_config.seed)
    sampler = PatchSampler(store, net_config, train_config, role="train")

    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"train": train_config.to_dict(), "net": net_config.to_dict()},
                  f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump({"blas_threads": os.environ.get("OPENBLAS_NUM_THREADS",
                                                  os.environ.get("OMP_NUM_THREADS", "default")),
                   "numpy": np.__version__}, f, indent=2, sort_keys=True)

    if resume_from is not None:
        ws, adam, extra = load_checkpoint(resume_from)
        start_epoch = extra["next_epoch"]
        if dnet.weight_shapes(net_config) != dnet.weight_shapes(ws.config):
            raise TrainingError("checkpoint config does not match net_config")
    else:
        ws = dnet.init_weights(net_config, seed=train_config.seed)
        adam = AdamState()
        start_epoch = 0

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = []
    for epoch in range(start_epoch, train_config.epochs):
        lr = learning_rate(epoch, train_config)
        lam1, lam2 = lambda_schedule(epoch, train_config)
        epoch_losses = []
        for step in range(train_config.steps_per_epoch):
            global_step = epoch * train_config.steps_per_epoch + step
            first_index = global_step * train_config.batch_size
            rgb_np, nir_np, gt_rgb, gt_nir = sampler.batch(first_index,
                                                           train_config.batch_size)
            tape = Tape()
            wt = dnet.weights_as_tensors(ws, tape=tape)
            rgb_win = dnet.frames_to_tensors(rgb_np, tape=tape)
            nir_win = dnet.frames_to_tensors(nir_np, tape=tape) \
                if net_config.use_nir else None
            pred_rgb, pred_nir = dnet.forward(net_config, wt, rgb_win, nir_win)
            loss = total_loss(pred_rgb, pred_nir,
                              Tensor(gt_rgb.astype(np.float32)),
                              Tensor(gt_nir.astype(np.float32)) if pred_nir is not None
                              else None,
                              lam1, lam2)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                diag = os.path.join(out_dir, "diagnostic.dvw")
                save_checkpoint(diag, ws, adam, epoch, train_config)
                raise TrainingError(
                    f"non-finite loss {loss_val} at epoch {epoch} step {step}; "
                    f"diagnostic checkpoint written to {diag}")
            tape.backward(loss)
            grads = {name: tape.grad(wt[name]) for name in ws.names()}
            adam_step(ws.tensors, grads, adam, lr,
                      beta1=train_config.adam_beta1,
                      beta2=train_config.adam_beta2,
                      eps=train_config.adam_eps)
            epoch_losses.append(loss_val)
            row = {"epoch": epoch, "step": step, "loss": repr(loss_val),
                   "lambda2": repr(lam2), "lr": repr(lr), "val_psnr": ""}
            rows.append(row)
            _write_metrics_row(metrics_path, row)
        val = _validation_psnr(net_config, ws, store, train_config.val_frame_stride)
        row = {"epoch": epoch, "step": "epoch", "loss": repr(float(np.mean(epoch_losses))),
               "lambda2": repr(lam2), "lr": repr(lr),
               "val_psnr": "" if math.isnan(val) else repr(val)}
        rows.append(row)
        _write_metrics_row(metrics_path, row)
        if (epoch + 1) % train_config.checkpoint_every == 0 \
                or epoch == train_config.epochs - 1:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:03d}.dvw"),
                            ws, adam, epoch + 1, train_config)
    dnet.save_weights(os.path.join(out_dir, "final.dvw"), ws,
                      extra={"epochs": train_config.epochs})
    return ws, rows
