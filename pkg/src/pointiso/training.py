"""Labelled sample construction and training loops for both networks."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, IO, Sequence

import numpy as np

from . import tensor as T
from .detecting import NUM_CLASSES, IsoDetectingNet, class_weights
from .grouping import (GROUP_SIZE, Frame, IsoGroupingNet, blank_frame, frame_from_trace_profile,
                       group_label, make_isotope)
from .lcms import LcmsMap, ScanWindow, WindowGeometry, cut_window
from .optim import load_checkpoint, make_optimizer, restore, save_checkpoint, snapshot
from .synth import GroundTruth, label_points
from .tensor import no_grad

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    detecting_batch: int = 8
    grouping_batch: int = 128
    detecting_lr: float = 0.001
    grouping_lr: float = 0.07
    plateau_patience: int = 5
    plateau_delta: float = 1e-4
    early_stop_patience: int = 15
    validate_every: int = 1200  # samples
    fine_tune_lr: float = 1e-4
    fine_tune_epochs: int = 3
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k not in ("seed", "epochs", "fine_tune_epochs") and v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.epochs < 0 or self.fine_tune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.validate_every < max(self.detecting_batch, 1):
            raise ValueError("validate_every must be at least the batch size")


# -- IsoDetecting samples -----------------------------------------------------------

@dataclass
class SampleConfig:
    offsets_per_feature: int = 3
    noise_windows: int = 40
    decoy_windows: int = 1
    blank_windows: int = 4
    # per feature: target ends just past the monoisotope, partners only in the right surround
    edge_windows: int = 0
    single_class_weight: float = 0.5
    seed: int = 0


def label_window(window: ScanWindow, point_labels: np.ndarray, single_class_weight: float = 0.5) -> ScanWindow:
    t = window.target
    labels = np.zeros(len(t.mask), dtype=np.int64)
    labels[t.mask] = point_labels[t.index[t.mask]]
    window.labels = labels
    window.weights = class_weights(labels, t.mask, single_class_weight)
    return window


def _partial_scan(rng, s_lo: int, s_hi: int, geom: WindowGeometry) -> int:
    a, b = s_hi - geom.rt_scans + 1, s_lo
    return int(rng.integers(min(a, b), max(a, b) + 1))


def detecting_origins(m: LcmsMap, truth: GroundTruth, geom: WindowGeometry,
                      config: SampleConfig) -> list[tuple[str, tuple[int, float]]]:
    """Window origins: per feature one left-aligned, several partial and optional m/z-edge
    placements, plus decoy-centred, noise-only and blank windows."""
    rng = np.random.default_rng(config.seed)
    out = []
    for f in truth.features:
        s_lo = m.scan_at_rt(f.rt_ranges[0][0])
        s_hi = m.scan_at_rt(f.rt_ranges[0][1])
        out.append(("aligned", (s_lo, round(f.mono_mz - 0.01, 4))))
        for _ in range(config.offsets_per_feature - 1):
            s0 = _partial_scan(rng, s_lo, s_hi, geom)
            mz0 = float(rng.uniform(f.mono_mz - geom.mz_span + 0.05, f.isotope_mz[-1] - 0.05))
            out.append(("partial", (s0, round(mz0, 4))))
        gap = min(f.isotope_mz[1] - f.mono_mz if f.num_isotopes > 1 else 1.0 / f.charge, geom.mz_span)
        for _ in range(config.edge_windows):
            mz0 = f.mono_mz - geom.mz_span + float(rng.uniform(0.01, gap - 0.01))
            out.append(("edge", (s_lo, round(mz0, 4))))
    for d in truth.decoys:
        s_mid = m.scan_at_rt(d.peak_rt)
        for _ in range(config.decoy_windows):
            s0 = int(rng.integers(s_mid - geom.rt_scans + 3, s_mid - 1))
            mz0 = float(rng.uniform(d.mono_mz - geom.mz_span + 0.1, d.mono_mz - 0.05))
            out.append(("decoy", (s0, round(mz0, 4))))
    if m.num_points:
        feats = [(m.scan_at_rt(f.rt_ranges[0][0]), m.scan_at_rt(f.rt_ranges[0][1]), f.mono_mz, f.isotope_mz[-1])
                 for f in truth.features]
        found, tries = 0, 0
        while found < config.noise_windows and tries < 50 * max(config.noise_windows, 1):
            tries += 1
            s0 = int(rng.integers(0, max(m.num_scans - geom.rt_scans, 1)))
            mz0 = round(float(rng.uniform(m.mz_min, m.mz_max - geom.mz_span)), 4)
            clash = any(a < s0 + geom.rt_scans and b >= s0 and lo < mz0 + geom.mz_span and hi >= mz0
                        for a, b, lo, hi in feats)
            if not clash:
                out.append(("noise", (s0, mz0)))
                found += 1
    for k in range(config.blank_windows):
        out.append(("blank", (0, round(max(m.mz_max, 0.0) + 10.0 + 4 * k, 4))))
    return out


def make_detecting_samples(m: LcmsMap, truth: GroundTruth, geom: WindowGeometry,
                           config: SampleConfig | None = None) -> list[ScanWindow]:
    """Labelled windows with surrounds; ``m`` must already be intensity-scaled."""
    config = config or SampleConfig()
    labels = label_points(m, truth)
    out = []
    for kind, origin in detecting_origins(m, truth, geom, config):
        w = label_window(cut_window(m, origin, geom), labels, config.single_class_weight)
        w.kind = kind
        out.append(w)
    return out


def windows_from_features(m: LcmsMap, truth: GroundTruth, geom: WindowGeometry, features,
                          offsets: int = 2, seed: int = 0, single_class_weight: float = 0.5) -> list[ScanWindow]:
    """Windows around the given detected features (e.g. unmatched emissions), labelled from truth."""
    rng = np.random.default_rng(seed)
    labels = label_points(m, truth)
    out = []
    for f in features:
        s_lo = m.scan_at_rt(f.isotopes[0][1])
        s_hi = m.scan_at_rt(f.isotopes[0][2])
        origins = [(s_lo, round(f.mono_mz - 0.01, 4))]
        for _ in range(offsets - 1):
            s0 = _partial_scan(rng, s_lo, s_hi, geom)
            mz0 = float(rng.uniform(f.mono_mz - geom.mz_span + 0.05, f.isotopes[-1][0] - 0.05))
            origins.append((s0, round(mz0, 4)))
        for o in origins:
            w = label_window(cut_window(m, o, geom), labels, single_class_weight)
            w.kind = "harvest"
            out.append(w)
    return out


def stack_windows(ws: Sequence[ScanWindow]):
    """Batch arrays, trimmed to the largest region in the batch (points are packed first)."""
    n = max(1, max(max([w.target.count] + [r.count for r in w.surround_list()]) for w in ws))
    target = np.stack([w.target.points[:n] for w in ws])
    tmask = np.stack([w.target.mask[:n] for w in ws])
    sur = np.stack([np.stack([r.points[:n] for r in w.surround_list()]) for w in ws])
    smask = np.stack([np.stack([r.mask[:n] for r in w.surround_list()]) for w in ws])
    labels = np.stack([w.labels[:n] for w in ws])
    weights = np.stack([w.weights[:n] for w in ws])
    return target, tmask, sur, smask, labels, weights


# -- IsoGrouping samples ------------------------------------------------------------

@dataclass
class GroupSample:
    frames: list[Frame]
    charge: int
    label: int


def make_grouping_samples(m: LcmsMap, truth: GroundTruth, noise_sequences: int = 40,
                          seed: int = 0, trim_copies: int = 0, max_trim: int = 2) -> list[GroupSample]:
    """Positive sequences starting at each monoisotope (alone and followed by another
    feature's isotopes), continuation sequences for long features, shifted sequences
    (label 0) and noise sequences (label 0).

    A shifted sequence starts one frame early, on a noise trace.  Suffixes of a feature are
    not used as zero samples: under a monotone envelope they look exactly like a complete
    shorter feature.

    ``trim_copies`` extra positives per feature cut each isotope with 0..``max_trim`` scans
    removed from either end of its RT range, since detected traces rarely reproduce the
    planted range exactly.  They are appended after all other samples.
    """
    rng = np.random.default_rng(seed)
    out = []
    all_frames = [[frame_from_trace_profile(m, mz, a, b) for mz, (a, b) in zip(f.isotope_mz, f.rt_ranges)]
                  for f in truth.features]
    for fi, f in enumerate(truth.features):
        frames = all_frames[fi]
        k = len(frames)
        out.append(GroupSample(_pad(frames), f.charge, group_label(k)))
        if k < GROUP_SIZE and len(all_frames) > 1:
            # followed by another feature's isotopes, as when chaining runs two features together
            other = int(rng.integers(len(all_frames) - 1))
            other += other >= fi
            out.append(GroupSample(_pad(frames + all_frames[other]), f.charge, group_label(k)))
        for start in range(GROUP_SIZE - 1, k - 1, GROUP_SIZE - 1):
            out.append(GroupSample(_pad(frames[start:]), f.charge, group_label(k - start)))
        # shifted: the sequence begins one frame before the monoisotope
        out.append(GroupSample(_pad([_noise_frame(m, rng)] + frames), f.charge, 0))
    decoy_frames = [frame_from_trace_profile(m, mz, a, b)
                    for d in truth.decoys for mz, (a, b) in zip(d.isotope_mz, d.rt_ranges)]
    for d in truth.decoys:
        fr = [frame_from_trace_profile(m, mz, a, b) for mz, (a, b) in zip(d.isotope_mz, d.rt_ranges)]
        out.append(GroupSample(_pad(fr), int(rng.integers(1, 4)), 0))
    for _ in range(noise_sequences):
        n = int(rng.integers(1, GROUP_SIZE + 1))
        fr = [_noise_frame(m, rng) for _ in range(n)]
        if decoy_frames and rng.random() < 0.5:
            fr[0] = decoy_frames[int(rng.integers(len(decoy_frames)))]
        out.append(GroupSample(_pad(fr), int(rng.integers(1, 5)), 0))
    for _ in range(trim_copies):
        for f in truth.features:
            frames = []
            for mz, (a, b) in zip(f.isotope_mz, f.rt_ranges):
                lo, hi = m.scan_at_rt(a), m.scan_at_rt(b)
                cut_lo, cut_hi = (int(x) for x in rng.integers(0, max_trim + 1, size=2))
                lo2, hi2 = lo + cut_lo, hi - cut_hi
                if hi2 < lo2:
                    lo2 = hi2 = (lo + hi) // 2
                frames.append(make_isotope(m, mz, lo2, hi2).frame)
            out.append(GroupSample(_pad(frames), f.charge, group_label(len(frames))))
    return out


def _pad(frames: list[Frame]) -> list[Frame]:
    frames = list(frames[:GROUP_SIZE])
    return frames + [blank_frame() for _ in range(GROUP_SIZE - len(frames))]


def _noise_frame(m: LcmsMap, rng) -> Frame:
    """A frame cut at a random map point, spanning three scans."""
    if m.num_points == 0:
        return blank_frame()
    i = int(rng.integers(m.num_points))
    s = int(m.scan_index[i])
    return frame_from_trace_profile(m, float(m.mz[i]), float(m.rts[max(s - 1, 0)]),
                                    float(m.rts[min(s + 1, m.num_scans - 1)]))


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    best_loss_state: dict
    best_sensitivity_state: dict
    history: list[dict] = field(default_factory=list)


def sensitivity(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float | None]:
    out = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float(np.mean(pred[sel] == c)) if sel.any() else None)
    return out


class _Task:
    """Batching, loss and evaluation for one network."""

    def __init__(self, module: str, net, samples, batch: int, train_rng):
        self.module, self.net, self.samples, self.batch = module, net, samples, batch
        self.rng = train_rng

    def loss(self, chunk, train: bool):
        if self.module == "detecting":
            target, tmask, sur, smask, labels, weights = stack_windows(chunk)
            logits = self.net.forward(target, tmask, sur, smask)
            loss = T.weighted_softmax_cross_entropy(logits, labels, weights)
            # average over real points, independent of how far the batch is padded
            loss = T.mul(loss, np.asarray(tmask.size / max(int(tmask.sum()), 1), dtype=logits.data.dtype))
            return loss, logits, labels, tmask
        frames, aucs, charges, labels = self.net.stack(chunk)
        logits = self.net.forward(frames, aucs, charges, train=train, rng=self.rng)
        weights = np.ones(len(labels))
        return T.weighted_softmax_cross_entropy(logits, labels, weights), logits, labels, None

    def evaluate(self, samples):
        total, n, preds, labs = 0.0, 0, [], []
        with no_grad():
            for i in range(0, len(samples), max(self.batch, 16)):
                chunk = samples[i:i + max(self.batch, 16)]
                loss, logits, labels, mask = self.loss(chunk, train=False)
                total += float(loss.data) * len(chunk)
                n += len(chunk)
                p = logits.data.argmax(axis=-1)
                if mask is not None:
                    preds.append(p[mask])
                    labs.append(labels[mask])
                else:
                    preds.append(p)
                    labs.append(labels)
        if not n:
            return float("nan"), []
        nc = NUM_CLASSES if self.module == "detecting" else 5
        return total / n, sensitivity(np.concatenate(preds), np.concatenate(labs), nc)


def train(module: str, net, train_samples, val_samples, config: TrainingConfig,
          epochs: int | None = None, lr: float | None = None, metrics: IO[str] | None = None) -> TrainResult:
    """Minibatch training with per-epoch shuffling, plateau halving and early stopping.

    Validation runs every ``config.validate_every`` samples; the best-loss and
    best-mean-sensitivity parameter states are kept.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    epochs = config.epochs if epochs is None else epochs
    if module == "detecting":
        kind, batch = "nadam", config.detecting_batch
        lr = config.detecting_lr if lr is None else lr
    elif module == "grouping":
        kind, batch = "adagrad", config.grouping_batch
        lr = config.grouping_lr if lr is None else lr
    else:
        raise ValueError(f"unknown module {module!r}")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(kind, net.params, lr)
    task = _Task(module, net, train_samples, batch, rng)
    val = val_samples or []
    init = snapshot(net.params)
    result = TrainResult(init, init)
    best_loss, best_sens = math.inf, -math.inf
    plateau_best, plateau_epochs, stale_epochs = math.inf, 0, 0
    seen, step = 0, 0
    next_val = config.validate_every

    def validate(epoch):
        nonlocal best_loss, best_sens
        vl, sens = task.evaluate(val) if val else (float("nan"), [])
        rec = {"step": step, "epoch": epoch, "samples": seen, "loss": last_loss, "val_loss": vl,
               "lr": opt.lr, "sensitivity": sens}
        result.history.append(rec)
        if metrics is not None:
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
        if val:
            if vl < best_loss:
                best_loss = vl
                result.best_loss_state = snapshot(net.params)
            known = [s for s in sens if s is not None]
            ms = float(np.mean(known)) if known else -math.inf
            if ms > best_sens:
                best_sens = ms
                result.best_sensitivity_state = snapshot(net.params)
        return vl

    last_loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        for i in range(0, len(order), batch):
            chunk = [train_samples[j] for j in order[i:i + batch]]
            opt.zero_grad()
            loss, *_ = task.loss(chunk, train=True)
            last_loss = float(loss.data)
            if not np.isfinite(last_loss):
                raise DivergenceError(f"{module} loss diverged at step {step} (epoch {epoch}, lr {opt.lr})")
            loss.backward()
            opt.step()
            step += 1
            seen += len(chunk)
            if seen >= next_val:
                next_val += config.validate_every
                validate(epoch)
        vl = validate(epoch)
        if not val:
            vl = last_loss
        if vl < plateau_best - config.plateau_delta:
            plateau_best, plateau_epochs, stale_epochs = vl, 0, 0
        else:
            plateau_epochs += 1
            stale_epochs += 1
            if plateau_epochs >= config.plateau_patience:
                opt.halve_lr()
                plateau_epochs = 0
            if stale_epochs >= config.early_stop_patience:
                log.info("%s: early stop after epoch %d", module, epoch)
                break
    if not val:
        result.best_loss_state = result.best_sensitivity_state = snapshot(net.params)
    return result


def fine_tune(module: str, net, samples, val_samples, config: TrainingConfig,
              epochs: int | None = None, keep: str = "loss", metrics=None) -> TrainResult | None:
    """Resume from the network's current state at the fine-tune learning rate."""
    if not samples:
        return None
    res = train(module, net, samples, val_samples, config,
                epochs=config.fine_tune_epochs if epochs is None else epochs,
                lr=config.fine_tune_lr, metrics=metrics)
    restore(net.params, res.best_loss_state if keep == "loss" else res.best_sensitivity_state)
    return res
