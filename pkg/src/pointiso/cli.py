"""Command-line entry point: ``pointiso <command> ...``.

Every command reads and writes files only.  A ``--config FILE`` of ``key = value`` lines
supplies any flag of the chosen command (keys are flag names, dashes or underscores);
flags given on the command line win.  ``POINTISO_THREADS`` sets the default number of
m/z sections scanned in parallel.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detecting import DetectingConfig, IsoDetectingNet
from .evaluation import (confusion_and_sensitivity, decoy_origin_emissions, detection_by_charge,
                         intensity_correlation, match_features)
from .features import read_feature_table, write_feature_table
from .grouping import GroupingConfig, IsoGroupingNet
from .lcms import Ms1ParseError, NoSignalError, WindowGeometry, read_ms1_file, scale_intensities, write_ms1_file
from .optim import snapshot
from .pipeline import CheckpointMismatchError, PipelineConfig, load_network, run_pipeline, save_network
from .synth import InfeasibleDensityError, SynthConfig, generate_map, read_truth_tsv, write_truth_tsv
from .training import (DivergenceError, SampleConfig, TrainingConfig, fine_tune, make_detecting_samples,
                       make_grouping_samples, train, windows_from_features)

THREADS_ENV = "POINTISO_THREADS"
log = logging.getLogger("pointiso")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- argument groups ------------------------------------------------------------------

def _training_flags(p):
    d = TrainingConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--detecting-batch", type=int, default=d.detecting_batch)
    g.add_argument("--grouping-batch", type=int, default=d.grouping_batch)
    g.add_argument("--detecting-lr", type=float, default=d.detecting_lr)
    g.add_argument("--grouping-lr", type=float, default=d.grouping_lr)
    g.add_argument("--plateau-patience", type=int, default=d.plateau_patience)
    g.add_argument("--plateau-delta", type=float, default=d.plateau_delta)
    g.add_argument("--early-stop-patience", type=int, default=d.early_stop_patience)
    g.add_argument("--validate-every", type=int, default=d.validate_every)
    g.add_argument("--fine-tune-lr", type=float, default=d.fine_tune_lr)
    g.add_argument("--fine-tune-epochs", type=int, default=d.fine_tune_epochs)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--metrics", help="JSON-lines metrics history output")


def _training_config(a) -> TrainingConfig:
    return TrainingConfig(
        detecting_batch=a.detecting_batch, grouping_batch=a.grouping_batch, detecting_lr=a.detecting_lr,
        grouping_lr=a.grouping_lr, plateau_patience=a.plateau_patience, plateau_delta=a.plateau_delta,
        early_stop_patience=a.early_stop_patience, validate_every=a.validate_every,
        fine_tune_lr=a.fine_tune_lr, fine_tune_epochs=a.fine_tune_epochs, epochs=a.epochs, seed=a.seed)


def _data_flags(p, val: bool = True):
    p.add_argument("--map", action="append", required=True, help=".ms1 map (repeatable)")
    p.add_argument("--truth", action="append", required=True, help="truth TSV, one per --map")
    if val:
        p.add_argument("--val-map", action="append", default=[])
        p.add_argument("--val-truth", action="append", default=[])


def _geometry_flags(p):
    d = WindowGeometry()
    p.add_argument("--mz-span", type=float, default=d.mz_span)
    p.add_argument("--rt-scans", type=int, default=d.rt_scans)
    p.add_argument("--max-points", type=int, default=d.max_points)


def _geometry(a) -> WindowGeometry:
    return WindowGeometry(mz_span=a.mz_span, rt_scans=a.rt_scans, max_points=a.max_points)


def _sample_flags(p):
    d = SampleConfig()
    p.add_argument("--offsets-per-feature", type=int, default=d.offsets_per_feature)
    p.add_argument("--noise-windows", type=int, default=d.noise_windows)
    p.add_argument("--blank-windows", type=int, default=d.blank_windows)
    p.add_argument("--decoy-windows", type=int, default=d.decoy_windows)
    p.add_argument("--edge-windows", type=int, default=d.edge_windows)
    p.add_argument("--single-class-weight", type=float, default=d.single_class_weight)


def _default_sections() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pointiso", description="LC-MS peptide feature detection with point-cloud segmentation.")
    ap.add_argument("--config", help="key = value file supplying flags of the command")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic map and its ground truth")
    d = SynthConfig()
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--features", type=int, default=d.n_features)
    p.add_argument("--decoys", type=int, default=d.n_decoys)
    p.add_argument("--shadow-weight", type=float, default=d.decoy_mix["shadow"],
                   help="relative frequency of weak shifted copies among decoys")
    p.add_argument("--noise-density", type=float, default=d.noise_density)
    p.add_argument("--scans", type=int, default=d.num_scans)
    p.add_argument("--mz-min", type=float, default=d.mz_range[0])
    p.add_argument("--mz-max", type=float, default=d.mz_range[1])
    p.set_defaults(func=cmd_generate)

    for name, func in (("train-detecting", cmd_train_detecting), ("train-grouping", cmd_train_grouping)):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} network")
        _data_flags(p)
        _training_flags(p)
        p.add_argument("--out", required=True, help="checkpoint output")
        p.add_argument("--init", help="start from this checkpoint")
        p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
        if name == "train-detecting":
            _geometry_flags(p)
            _sample_flags(p)
        else:
            p.add_argument("--noise-sequences", type=int, default=40)
            p.add_argument("--trim-copies", type=int, default=0, help="extra positives with trimmed RT ranges")
        p.set_defaults(func=func)

    p = sub.add_parser("fine-tune", help="resume training on misclassified samples at the fine-tune rate")
    p.add_argument("--module", choices=("detecting", "grouping"), required=True)
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--features", action="append", default=[],
                   help="detect output for each --map; unmatched emissions are harvested (detecting)")
    p.add_argument("--val-features", action="append", default=[])
    p.add_argument("--keep", choices=("loss", "sensitivity"), default="loss")
    _training_flags(p)
    _geometry_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("detect", help="run the full pipeline on a map")
    p.add_argument("--map", required=True)
    p.add_argument("--detecting", required=True)
    p.add_argument("--grouping", required=True)
    p.add_argument("--out", required=True, help="feature table TSV")
    p.add_argument("--meta", help="run metadata JSON")
    p.add_argument("--sections", type=int, default=None, help=f"parallel m/z sections (default ${THREADS_ENV} or 1)")
    p.add_argument("--no-surrounds", action="store_true", help="zero the surround regions")
    _geometry_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="match a feature table against ground truth")
    p.add_argument("--features", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--tol-mz", type=float, default=0.01)
    p.add_argument("--tol-rt", type=float, default=0.2)
    p.add_argument("--ignore-charge", action="store_true")
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correlate", help="Pearson r of matched feature intensities")
    p.add_argument("--features", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--truth", help="planted AUC as the second reading")
    g.add_argument("--other", help="a second feature table as the second reading")
    p.add_argument("--tol-mz", type=float, default=0.01)
    p.add_argument("--tol-rt", type=float, default=0.2)
    p.set_defaults(func=cmd_correlate)
    return ap


# -- config file --------------------------------------------------------------------

def read_config(path: str) -> list[tuple[str, str]]:
    items = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            items.append((k.replace("_", "-"), v))
    return items


def _config_argv(items, sub: argparse.ArgumentParser) -> list[str]:
    flags = {}
    for act in sub._actions:
        for opt in act.option_strings:
            if opt.startswith("--"):
                flags[opt[2:]] = act
    out = []
    for k, v in items:
        act = flags.get(k)
        if act is None:
            raise UsageError(f"config key {k!r} is not a flag of this command")
        if act.nargs == 0:
            if v.lower() in ("1", "true", "yes", "on"):
                out.append(f"--{k}")
            elif v.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {k!r} expects true/false")
        elif act.__class__.__name__ == "_AppendAction":
            out += [x for item in v.split(",") if item.strip() for x in (f"--{k}", item.strip())]
        else:
            out += [f"--{k}", v]
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
        pos = next((i for i, t in enumerate(argv) if t in subs.choices), None)
        if pos is not None:
            try:
                items = read_config(known.config)
            except OSError as e:
                raise UsageError(f"cannot read config: {e}") from e
            argv = argv[:pos + 1] + _config_argv(items, subs.choices[argv[pos]]) + argv[pos + 1:]
    return ap.parse_args(argv)


# -- commands -----------------------------------------------------------------------

def _load_pairs(maps, truths):
    if len(maps) != len(truths):
        raise UsageError("give one --truth per --map")
    out = []
    for mp, tp in zip(maps, truths):
        m = read_ms1_file(mp)
        with open(tp) as fh:
            out.append((m, read_truth_tsv(fh)))
    return out


def cmd_generate(a) -> int:
    mix = dict(SynthConfig().decoy_mix, shadow=a.shadow_weight)
    cfg = SynthConfig(mz_range=(a.mz_min, a.mz_max), num_scans=a.scans, n_features=a.features,
                      n_decoys=a.decoys, decoy_mix=mix, noise_density=a.noise_density, seed=a.seed)
    m, truth = generate_map(cfg)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ms1_file(m, out / "map.ms1")
    with open(out / "truth.tsv", "w") as fh:
        write_truth_tsv(truth, fh)
    print(json.dumps({"points": m.num_points, "scans": m.num_scans, "features": len(truth.features),
                      "decoys": len(truth.decoys)}))
    return 0


def _open_metrics(a):
    return open(a.metrics, "w") if getattr(a, "metrics", None) else None


def _train_cmd(a, module: str) -> int:
    cfg = _training_config(a)
    pairs = [(scale_intensities(m), t) for m, t in _load_pairs(a.map, a.truth)]
    vals = [(scale_intensities(m), t) for m, t in _load_pairs(a.val_map, a.val_truth)]
    if module == "detecting":
        geom = _geometry(a)
        sc = SampleConfig(offsets_per_feature=a.offsets_per_feature, noise_windows=a.noise_windows,
                          decoy_windows=a.decoy_windows, blank_windows=a.blank_windows,
                          edge_windows=a.edge_windows, single_class_weight=a.single_class_weight, seed=a.seed)
        tr = [w for i, (m, t) in enumerate(pairs) for w in make_detecting_samples(m, t, geom, replace(sc, seed=a.seed + i))]
        va = [w for i, (m, t) in enumerate(vals) for w in make_detecting_samples(m, t, geom, replace(sc, seed=a.seed + 1000 + i))]
        net = load_network(open(a.init), "detecting") if a.init else IsoDetectingNet(
            DetectingConfig(mz_span=geom.mz_span, rt_scans=geom.rt_scans, dtype=a.dtype, seed=a.seed))
    else:
        def seqs(m, t, seed):
            return make_grouping_samples(m, t, a.noise_sequences, seed, a.trim_copies)
        tr = [g for i, (m, t) in enumerate(pairs) for g in seqs(m, t, a.seed + i)]
        va = [g for i, (m, t) in enumerate(vals) for g in seqs(m, t, a.seed + 1000 + i)]
        net = load_network(open(a.init), "grouping") if a.init else IsoGroupingNet(GroupingConfig(dtype=a.dtype, seed=a.seed))
    metrics = _open_metrics(a)
    try:
        res = train(module, net, tr, va, cfg, metrics=metrics)
    finally:
        if metrics:
            metrics.close()
    from .optim import restore
    restore(net.params, res.best_loss_state)
    with open(a.out, "w") as fh:
        save_network(net, fh, {"samples": len(tr)})
    last = res.history[-1] if res.history else {}
    print(json.dumps({"samples": len(tr), "val_samples": len(va), "last": last}))
    return 0


def cmd_train_detecting(a) -> int:
    return _train_cmd(a, "detecting")


def cmd_train_grouping(a) -> int:
    return _train_cmd(a, "grouping")


def _harvest_detecting(pairs, feature_files, geom, seed):
    if len(feature_files) != len(pairs):
        raise UsageError("give one --features table per --map when fine-tuning the detecting network")
    out = []
    for k, ((m, t), fp) in enumerate(zip(pairs, feature_files)):
        with open(fp) as fh:
            feats = read_feature_table(fh)
        rep = match_features(feats, t.features)
        out += windows_from_features(scale_intensities(m), t, geom, [feats[i] for i in rep.unmatched_detected],
                                     seed=seed + k)
    return out


def _misclassified_sequences(net, pairs, seed):
    out = []
    for k, (m, t) in enumerate(pairs):
        seqs = make_grouping_samples(scale_intensities(m), t, seed=seed + k)
        if not seqs:
            continue
        frames, aucs, charges, labels = net.stack(seqs)
        from .tensor import no_grad
        with no_grad():
            pred = net.forward(frames, aucs, charges).data.argmax(axis=-1)
        out += [s for s, p in zip(seqs, pred) if p != s.label]
    return out


def cmd_fine_tune(a) -> int:
    cfg = _training_config(a)
    with open(a.checkpoint) as fh:
        net = load_network(fh, a.module)
    pairs = _load_pairs(a.map, a.truth)
    vals = _load_pairs(a.val_map, a.val_truth)
    if a.module == "detecting":
        geom = _geometry(a)
        samples = _harvest_detecting(pairs, a.features, geom, a.seed)
        val = _harvest_detecting(vals, a.val_features, geom, a.seed + 1000) if vals else []
    else:
        samples = _misclassified_sequences(net, pairs, a.seed)
        val = _misclassified_sequences(net, vals, a.seed + 1000) if vals else []
    before = snapshot(net.params)
    metrics = _open_metrics(a)
    try:
        res = fine_tune(a.module, net, samples, val, cfg, keep=a.keep, metrics=metrics)
    finally:
        if metrics:
            metrics.close()
    with open(a.out, "w") as fh:
        save_network(net, fh, {"fine_tune_samples": len(samples)})
    changed = any(not np.array_equal(before[k], p.data) for k, p in net.params.items())
    print(json.dumps({"samples": len(samples), "ran": res is not None, "changed": changed}))
    return 0


def cmd_detect(a) -> int:
    sections = a.sections if a.sections is not None else _default_sections()
    if sections < 1:
        raise UsageError("--sections must be at least 1")
    with open(a.detecting) as fh:
        det = load_network(fh, "detecting")
    with open(a.grouping) as fh:
        grp = load_network(fh, "grouping")
    m = read_ms1_file(a.map)
    cfg = PipelineConfig(geometry=_geometry(a), sections=sections, use_surrounds=not a.no_surrounds)
    feats, meta = run_pipeline(m, det, grp, cfg)
    with open(a.out, "w") as fh:
        write_feature_table(feats, fh)
    if a.meta:
        with open(a.meta, "w") as fh:
            json.dump(meta, fh, indent=2)
    print(json.dumps({k: v for k, v in meta.items() if k != "timings_s"}))
    return 0


def cmd_evaluate(a) -> int:
    with open(a.features) as fh:
        feats = read_feature_table(fh)
    with open(a.truth) as fh:
        truth = read_truth_tsv(fh)
    rep = match_features(feats, truth.features, a.tol_mz, a.tol_rt, require_charge=not a.ignore_charge)
    # charge confusion over matched pairs when charges are not required to agree
    mat, sens = confusion_and_sensitivity([feats[i].charge for i, _ in rep.pairs],
                                          [truth.features[j].charge for _, j in rep.pairs], 10)
    report = {
        "truth": rep.total_truth,
        "emitted": len(feats),
        "matched": rep.matched,
        "detection_pct": rep.detection_pct,
        "detection_pct_by_charge": {z: detection_by_charge(rep, truth.features, (z,))
                                    for z in range(1, 10) if any(f.charge == z for f in truth.features)},
        "false_emission_pct": rep.false_emission_pct(len(feats)),
        "decoy_origin_emissions": len(decoy_origin_emissions(feats, rep, truth.decoys)),
        "charge_sensitivity": [None if np.isnan(x) else float(x) for x in sens],
    }
    text = json.dumps(report, indent=2)
    if a.out:
        Path(a.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_correlate(a) -> int:
    with open(a.features) as fh:
        feats = read_feature_table(fh)
    if a.truth:
        with open(a.truth) as fh:
            ref = read_truth_tsv(fh).features
        second = [f.auc for f in ref]
    else:
        with open(a.other) as fh:
            ref = read_feature_table(fh)
        second = [f.intensity_auc for f in ref]
    rep = match_features(feats, ref, a.tol_mz, a.tol_rt)
    r = intensity_correlation([feats[i].intensity_auc for i, _ in rep.pairs], [second[j] for _, j in rep.pairs])
    print(json.dumps({"pairs": rep.matched, "pearson_r": r}))
    return 0


DATA_ERRORS = (Ms1ParseError, NoSignalError, CheckpointMismatchError, InfeasibleDensityError,
               DivergenceError, ValueError, KeyError, OSError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"pointiso: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pointiso: error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"pointiso: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
