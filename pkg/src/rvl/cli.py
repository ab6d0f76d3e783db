"""Experiment pipeline driver.

One subcommand per stage: synthesize a paired dataset, train contrastive
backbones, extract calibrated self-labels, train the radio-only localiser,
evaluate methods side by side, run ablation sweeps, and run the classical
detection baseline.  Configuration is a JSON file with one section per
subsystem; every run writes a config snapshot next to its outputs so it can
be replayed.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from rvl import baselines, dataset, localiser, metrics, radio, scene, selflabel, ssl

SPLIT_SEED = 0   # the 80:20 split is a property of the dataset, not the run
HIST_BINS = 32


class ConfigError(Exception):
    """Invalid or missing configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config plumbing


_SECTION_CLASSES = {
    "scene": scene.SceneConfig,
    "radio": radio.RadioConfig,
    "camera": scene.CameraModel,
    "ssl": ssl.SslConfig,
    "localiser": localiser.LocaliserConfig,
    "cfar": baselines.CfarConfig,
}

_PLAIN_DEFAULTS = {
    "synth": {"n_pairs": 64, "mask_pad": 5, "image_noise": 0.0},
    "split": {"train_fraction": 0.8},
    "train_backbone": {"dataset": None},
    "self_label": {"dataset": None, "backbone": None, "n_calibration": 16},
    "train_localiser": {"dataset": None, "labels": None, "source": "labels"},
    "eval": {"dataset": None, "localisers": {}, "baselines": []},
    "baseline": {"dataset": None},
    "sweep": {"kind": None, "grid": [], "n_pairs": 128, "mask_pad": 5,
              "n_calibration": 16},
}

_SEEDED_SECTIONS = {"ssl", "localiser"}   # CLI --seed overrides these


def load_config(path) -> dict:
    """Parse and schema-check the whole file, including sections the
    current command does not use, so typos fail fast."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    known = set(_SECTION_CLASSES) | set(_PLAIN_DEFAULTS) | {"command", "seed"}
    for key in cfg:
        if key not in known:
            raise ConfigError(f"unknown config section {key!r}")
    for name, section in cfg.items():
        if name in ("command", "seed"):
            continue   # replay metadata from a snapshot
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a JSON object")
        if name in _SECTION_CLASSES:
            allowed = {f.name for f in dataclasses.fields(_SECTION_CLASSES[name])}
        else:
            allowed = set(_PLAIN_DEFAULTS[name])
        for key in section:
            if key not in allowed:
                raise ConfigError(f"unknown field {name}.{key}")
    return cfg


def build_section(cfg: dict, name: str, seed: int | None = None):
    """Instantiate the dataclass for one config section with validation."""
    section = {k: tuple(v) if isinstance(v, list) else v
               for k, v in cfg.get(name, {}).items()}
    if seed is not None and name in _SEEDED_SECTIONS:
        section["seed"] = seed
    try:
        return _SECTION_CLASSES[name](**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name} config: {e}")


def plain_section(cfg: dict, name: str) -> dict:
    merged = dict(_PLAIN_DEFAULTS[name])
    merged.update(cfg.get(name, {}))
    return merged


def require_path(value, field: str) -> Path:
    if not value:
        raise ConfigError(f"missing required field {field}")
    path = Path(value)
    if not path.exists():
        raise RuntimeError(f"{field} does not exist: {path} "
                           f"(run the producing stage first)")
    return path


def snapshot_config(cfg: dict, command: str, out: Path, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "config.json"
    if marker.exists():
        print(f"warning: overwriting previous outputs in {out}", file=sys.stderr)
    snap = dict(cfg)
    snap["command"] = command
    snap["seed"] = seed
    marker.write_text(json.dumps(snap, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# shared stage helpers


def load_pairs(root: Path) -> list[dataset.RadioVisualPair]:
    ids = dataset.read_index(root)
    return [dataset.read_pair(root, i) for i in ids]


def split_pairs(pairs, train_fraction: float):
    ids = [p.id for p in pairs]
    train_ids, val_ids = dataset.make_splits(
        ids, dataset.SplitSpec(train_fraction=train_fraction, seed=SPLIT_SEED))
    by_id = {p.id: p for p in pairs}
    return ([by_id[i] for i in train_ids], [by_id[i] for i in val_ids])


def _labels_for_pairs(model, pairs, rcfg, n_calibration: int):
    """Uncalibrated attention labels plus the calibration fitted on the
    first n_calibration pairs."""
    labels = [selflabel.self_coordinates(model, p, rcfg) for p in pairs]
    refs = [(labels[i], pairs[i].gt) for i in range(min(n_calibration, len(pairs)))]
    cal = selflabel.calibrate(refs)
    return labels, cal


# ---------------------------------------------------------------------------
# stages


def run_synth(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "synth")
    if params["n_pairs"] < 1:
        raise ConfigError(f"synth.n_pairs must be >= 1, got {params['n_pairs']}")
    scfg = build_section(cfg, "scene")
    rcfg = build_section(cfg, "radio")
    cam = build_section(cfg, "camera")
    pairs = dataset.synthesize_pairs(
        params["n_pairs"], seed, scfg, cam, rcfg,
        mask_pad=params["mask_pad"], image_noise=params["image_noise"])
    root = out / "pairs"
    root.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        dataset.write_pair(p, root)
    dataset.write_index(root, [p.id for p in pairs])
    snapshot_config(cfg, "synth", out, seed)
    print(f"wrote {len(pairs)} pairs to {root}")


def run_train_backbone(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "train_backbone")
    data_dir = require_path(params["dataset"], "train_backbone.dataset") / "pairs"
    if not data_dir.exists():
        raise RuntimeError(f"no pairs directory under {params['dataset']}")
    split = plain_section(cfg, "split")
    ssl_cfg = build_section(cfg, "ssl", seed=seed)

    pairs = load_pairs(data_dir)
    train_pairs, _ = split_pairs(pairs, split["train_fraction"])
    model, curve = ssl.train_backbone(ssl_cfg, pairs,
                                      train_ids=[p.id for p in train_pairs])
    bdir = out / "backbone"
    bdir.mkdir(parents=True, exist_ok=True)
    ssl.save_ssl_model(model, bdir)
    ssl.write_loss_curve(curve, bdir / "loss_curve.csv")
    snapshot_config(cfg, "train-backbone", out, seed)
    print(f"trained {ssl_cfg.flavour} backbone: "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} steps")


def run_self_label(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "self_label")
    data_dir = require_path(params["dataset"], "self_label.dataset") / "pairs"
    bdir = require_path(params["backbone"], "self_label.backbone") / "backbone"
    if not bdir.exists():
        raise RuntimeError(f"no backbone directory under {params['backbone']}")
    if params["n_calibration"] < 10:
        raise ConfigError("self_label.n_calibration must be >= 10")
    split = plain_section(cfg, "split")
    rcfg = build_section(cfg, "radio")

    model = ssl.load_ssl_model(bdir)
    pairs = load_pairs(data_dir)
    train_pairs, val_pairs = split_pairs(pairs, split["train_fraction"])
    labels, cal = _labels_for_pairs(model, train_pairs, rcfg,
                                    params["n_calibration"])
    all_labels = [selflabel.apply_calibration(lab, cal, rcfg) for lab in labels]
    all_labels += [selflabel.apply_calibration(
        selflabel.self_coordinates(model, p, rcfg), cal, rcfg)
        for p in val_pairs]
    out.mkdir(parents=True, exist_ok=True)
    selflabel.write_labels_csv(all_labels, out / "labels.csv")
    (out / "calibration.json").write_text(json.dumps({
        "range_offset": cal.range_offset,
        "azimuth_offset": cal.azimuth_offset,
        "n_cal": cal.n_cal}))
    snapshot_config(cfg, "self-label", out, seed)
    print(f"wrote {len(all_labels)} self-labels "
          f"(offsets {cal.range_offset:+.3f} m, {cal.azimuth_offset:+.3f} deg)")


def run_train_localiser(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "train_localiser")
    if params["source"] not in ("labels", "groundtruth"):
        raise ConfigError(f"train_localiser.source must be labels or "
                          f"groundtruth, got {params['source']!r}")
    data_dir = require_path(params["dataset"], "train_localiser.dataset") / "pairs"
    split = plain_section(cfg, "split")
    loc_cfg = build_section(cfg, "localiser", seed=seed)
    rcfg = build_section(cfg, "radio")

    pairs = load_pairs(data_dir)
    train_pairs, _ = split_pairs(pairs, split["train_fraction"])
    if params["source"] == "groundtruth":
        records = [(p.heatmap, (p.gt.range_m, p.gt.azimuth_deg))
                   for p in train_pairs]
    else:
        labels_path = require_path(params["labels"], "train_localiser.labels")
        labels = selflabel.read_labels_csv(labels_path)
        records = selflabel.build_loc_dataset(train_pairs, labels)
    model, curve = localiser.train_localiser(records, rcfg, loc_cfg)
    ldir = out / "localiser"
    ldir.mkdir(parents=True, exist_ok=True)
    localiser.save_localiser(model, ldir)
    ssl.write_loss_curve(curve, ldir / "loss_curve.csv")
    snapshot_config(cfg, "train-localiser", out, seed)
    print(f"trained localiser on {len(records)} records: "
          f"loss {curve[0]:.5f} -> {curve[-1]:.5f}")


def _deviation_columns(gt_ranges, gt_azimuths, est_ranges, est_azimuths,
                       rcfg) -> tuple[float, float, float, float]:
    lo, hi = rcfg.range_window
    d_w_range = metrics.wasserstein_1d(gt_ranges, est_ranges)
    d_w_angle = metrics.wasserstein_1d(gt_azimuths, est_azimuths)
    d_kl = metrics.kl_div(
        metrics.Histogram.from_samples(gt_ranges, HIST_BINS, lo, hi),
        metrics.Histogram.from_samples(est_ranges, HIST_BINS, lo, hi))
    try:
        mi = metrics.mutual_info(gt_ranges, est_ranges, HIST_BINS)
    except ValueError:
        mi = 0.0   # collapsed predictions carry no information
    return d_w_range, d_w_angle, d_kl, mi


def _method_report_row(name, gts, ests, errors, rcfg) -> metrics.ReportRow:
    stats = metrics.ErrorStats.from_errors(errors)
    d_w_range, d_w_angle, d_kl, mi = _deviation_columns(
        [g.range_m for g in gts], [g.azimuth_deg for g in gts],
        [e[0] for e in ests], [e[1] for e in ests], rcfg)
    return metrics.ReportRow(method=name, p50=stats.p50, p90=stats.p90,
                             d_w_range=d_w_range, d_w_angle=d_w_angle,
                             d_kl=d_kl, mi=mi)


def run_eval(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "eval")
    known_baselines = ("cfar_genie", "fusion_teacher")
    for b in params["baselines"]:
        if b not in known_baselines:
            raise ConfigError(f"eval.baselines entries must be in "
                              f"{known_baselines}, got {b!r}")
    if not params["localisers"] and not params["baselines"]:
        raise ConfigError("eval needs at least one localiser or baseline")
    data_dir = require_path(params["dataset"], "eval.dataset") / "pairs"
    split = plain_section(cfg, "split")
    rcfg = build_section(cfg, "radio")
    cfar_cfg = build_section(cfg, "cfar")
    cam = build_section(cfg, "camera")

    pairs = load_pairs(data_dir)
    _, val_pairs = split_pairs(pairs, split["train_fraction"])
    span = rcfg.range_window[1] - rcfg.range_window[0]
    rows = []

    for name, run_dir in params["localisers"].items():
        ldir = require_path(run_dir, f"eval.localisers.{name}") / "localiser"
        model = localiser.load_localiser(ldir)
        ests, errors = [], []
        for p in val_pairs:
            rng, az = localiser.predict(model, rcfg, p.heatmap)
            ests.append((rng, az))
            errors.append(metrics.planar_error(p.gt.range_m, p.gt.azimuth_deg,
                                               rng, az))
        rows.append(_method_report_row(name, [p.gt for p in val_pairs],
                                       ests, errors, rcfg))

    for b in params["baselines"]:
        gts, ests, errors, n_miss = [], [], [], 0
        for p in val_pairs:
            dets = baselines.detection_chain(p.heatmap, cfar_cfg, rcfg)
            if b == "cfar_genie":
                try:
                    d = baselines.genie_select(dets, p.gt)
                except baselines.NoDetections:
                    n_miss += 1
                    continue
                est = (d.range_m, d.azimuth_deg)
            else:
                lab = baselines.fusion_teacher(p.id, p.gt.bbox, dets,
                                               p.heatmap, cam, rcfg)
                est = (lab.range_est, lab.azimuth_est)
            gts.append(p.gt)
            ests.append(est)
            errors.append(metrics.planar_error(p.gt.range_m, p.gt.azimuth_deg,
                                               est[0], est[1]))
        rows.append(_method_report_row(
            b, gts, ests, metrics.penalized_errors(errors, n_miss, span), rcfg))

    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(rows, out / "report.csv")
    snapshot_config(cfg, "eval", out, seed)
    for r in rows:
        print(f"{r.method}: p50={r.p50:.3f} m p90={r.p90:.3f} m "
              f"D_W_range={r.d_w_range:.4f} D_W_angle={r.d_w_angle:.4f} "
              f"D_KL={r.d_kl:.4f} MI={r.mi:.4f}")


def run_baseline(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "baseline")
    data_dir = require_path(params["dataset"], "baseline.dataset") / "pairs"
    rcfg = build_section(cfg, "radio")
    cfar_cfg = build_section(cfg, "cfar")
    cam = build_section(cfg, "camera")

    pairs = load_pairs(data_dir)
    det_rows, labels = [], []
    for p in pairs:
        dets = baselines.detection_chain(p.heatmap, cfar_cfg, rcfg)
        det_rows.extend((p.id, d) for d in dets)
        labels.append(baselines.fusion_teacher(p.id, p.gt.bbox, dets,
                                               p.heatmap, cam, rcfg))
    out.mkdir(parents=True, exist_ok=True)
    baselines.write_detections(det_rows, out / "detections.csv")
    selflabel.write_labels_csv(labels, out / "labels.csv")
    snapshot_config(cfg, "baseline", out, seed)
    print(f"{len(det_rows)} detections over {len(pairs)} pairs; "
          f"wrote fusion-teacher labels")


# ---------------------------------------------------------------------------
# sweeps


SWEEP_KINDS = ("mask_offset", "label_density", "dimensionality", "mask_noise")
YOLO_SIGMA_PX = 0.25    # detector-emulation defaults, calibrated so boxes
YOLO_SIZE_JITTER = 0.1  # score IoU ~ 0.94 against clean ones (see tests)


def _selflabel_point(pairs, ssl_cfg, rcfg, n_calibration, train_fraction):
    """Train a backbone and score calibrated self-labels on the val split."""
    train_pairs, val_pairs = split_pairs(pairs, train_fraction)
    model, _ = ssl.train_backbone(ssl_cfg, pairs,
                                  train_ids=[p.id for p in train_pairs])
    labels, cal = _labels_for_pairs(model, train_pairs, rcfg, n_calibration)
    gts, ests, errors = [], [], []
    for p in val_pairs:
        lab = selflabel.apply_calibration(
            selflabel.self_coordinates(model, p, rcfg), cal, rcfg)
        gts.append(p.gt)
        ests.append((lab.range_est, lab.azimuth_est))
        errors.append(metrics.planar_error(p.gt.range_m, p.gt.azimuth_deg,
                                           lab.range_est, lab.azimuth_est))
    return gts, ests, errors


def _sweep_row(setting, gts, ests, errors, rcfg):
    stats = metrics.ErrorStats.from_errors(errors)
    d_w_range, d_w_angle, _, _ = _deviation_columns(
        [g.range_m for g in gts], [g.azimuth_deg for g in gts],
        [e[0] for e in ests], [e[1] for e in ests], rcfg)
    return [setting, stats.p50, stats.p90, d_w_range, d_w_angle]


def run_sweep(cfg: dict, out: Path, seed: int) -> None:
    params = plain_section(cfg, "sweep")
    kind = params["kind"]
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep.kind must be one of {SWEEP_KINDS}, "
                          f"got {kind!r}")
    grid = params["grid"]
    if not grid:
        raise ConfigError("sweep.grid must be a nonempty list")
    scfg = build_section(cfg, "scene")
    rcfg = build_section(cfg, "radio")
    cam = build_section(cfg, "camera")
    split = plain_section(cfg, "split")
    frac = split["train_fraction"]
    n_cal = params["n_calibration"]

    rows = []
    for idx, setting in enumerate(grid):
        point_seed = seed + 1000 * idx
        ssl_cfg = build_section(cfg, "ssl", seed=point_seed)
        if kind == "mask_offset":
            pad = params["mask_pad"] + int(setting)
            if pad < 0:
                raise ConfigError(f"sweep mask offset {setting} shrinks the "
                                  f"pad below zero")
            pairs = dataset.synthesize_pairs(params["n_pairs"], point_seed,
                                             scfg, cam, rcfg, mask_pad=pad)
            gts, ests, errors = _selflabel_point(pairs, ssl_cfg, rcfg,
                                                 n_cal, frac)
        elif kind == "dimensionality":
            ssl_cfg = dataclasses.replace(ssl_cfg, channels=int(setting))
            pairs = dataset.synthesize_pairs(params["n_pairs"], point_seed,
                                             scfg, cam, rcfg,
                                             mask_pad=params["mask_pad"])
            gts, ests, errors = _selflabel_point(pairs, ssl_cfg, rcfg,
                                                 n_cal, frac)
        elif kind == "mask_noise":
            sigma = float(setting)
            pairs = dataset.synthesize_pairs(params["n_pairs"], point_seed,
                                             scfg, cam, rcfg,
                                             mask_pad=params["mask_pad"])
            if sigma > 0:
                pairs = dataset.with_jittered_masks(
                    pairs, sigma, YOLO_SIZE_JITTER, params["mask_pad"],
                    seed=point_seed + 17)
            gts, ests, errors = _selflabel_point(pairs, ssl_cfg, rcfg,
                                                 n_cal, frac)
        else:   # label_density
            n_labels = int(setting)
            pairs = dataset.synthesize_pairs(params["n_pairs"], point_seed,
                                             scfg, cam, rcfg,
                                             mask_pad=params["mask_pad"])
            train_pairs, val_pairs = split_pairs(pairs, frac)
            if n_labels < 2 or n_labels > len(train_pairs):
                raise ConfigError(
                    f"label_density setting {n_labels} outside "
                    f"[2, {len(train_pairs)}]")
            loc_cfg = build_section(cfg, "localiser", seed=point_seed)
            records = [(p.heatmap, (p.gt.range_m, p.gt.azimuth_deg))
                       for p in train_pairs[:n_labels]]
            model, _ = localiser.train_localiser(records, rcfg, loc_cfg)
            gts, ests, errors = [], [], []
            for p in val_pairs:
                rng, az = localiser.predict(model, rcfg, p.heatmap)
                gts.append(p.gt)
                ests.append((rng, az))
                errors.append(metrics.planar_error(
                    p.gt.range_m, p.gt.azimuth_deg, rng, az))
        rows.append(_sweep_row(setting, gts, ests, errors, rcfg))

    out.mkdir(parents=True, exist_ok=True)
    import csv as _csv
    with open(out / "sweep.csv", "w", newline="") as f:
        wr = _csv.writer(f)
        wr.writerow(["setting", "p50", "p90", "D_W_range", "D_W_angle"])
        for row in rows:
            wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    snapshot_config(cfg, "sweep", out, seed)
    for row in rows:
        print(f"{kind}={row[0]}: p50={row[1]:.3f} m p90={row[2]:.3f} m "
              f"D_W_range={row[3]:.4f} D_W_angle={row[4]:.4f}")


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "synth": run_synth,
    "train-backbone": run_train_backbone,
    "self-label": run_self_label,
    "train-localiser": run_train_localiser,
    "eval": run_eval,
    "sweep": run_sweep,
    "baseline": run_baseline,
}


def _seed_arg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rvl",
        description="radio-visual self-labelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_seed_arg, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _COMMANDS[args.command](cfg, Path(args.out), args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
