"""Command-line pipeline: synth -> train -> uq -> eval -> report.

Configuration is layered: built-in defaults, then a flat ``key = value``
config file (``#`` comments), then command-line flags. Every command
writes the fully resolved configuration next to its outputs, and all CSV
artifacts are byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, uncertainty
from .checkpoint import load_checkpoint
from .data import generate_synthetic, load_dataset, save_dataset, split
from .nca import predict
from .training import TrainConfig, train
from .uncertainty import METHODS, UncertaintyConfig

DEFAULTS: dict[str, object] = {
    # model + training
    "seed": 0,
    "num_channels": 64,
    "hidden_size": 128,
    "fire_rate": 0.5,
    "learning_rate": 1e-3,
    "weight_decay": 1e-2,
    "epochs": 50,
    "batch_size": 2,
    "t_min": 32,
    "t_max": 64,
    "grad_clip": None,
    "early_stop_val_dice": None,
    # uncertainty
    "sigma": 0.02,
    "relax_steps": 12,
    "rollout_steps": 64,
    "window": 8,
    "stoptime_samples": 8,
    "band_radius": 2,
    "threshold": 0.5,
    # evaluation
    "failure_dice_threshold": 0.8,
    "coverage": 0.9,
    # data
    "synth_n": 300,
    "synth_size": "64x64",
    "ratios": "0.7,0.15,0.15",
    "split": "test",
    "workers": min(4, os.cpu_count() or 1),
}

METHOD_ORDER = tuple(METHODS)  # fixed ordering for CSV output


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = _parse_value(value)
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = value
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    (out_dir / "config_resolved.txt").write_text("\n".join(lines) + "\n")


def _parse_size(text) -> tuple[int, int]:
    parts = str(text).lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


def _parse_ratios(text) -> tuple[float, float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"ratios must have three parts, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    dataset = generate_synthetic(int(cfg["synth_n"]), _parse_size(cfg["synth_size"]),
                                 int(cfg["seed"]))
    dataset = split(dataset, _parse_ratios(cfg["ratios"]), int(cfg["seed"]))
    manifest = save_dataset(dataset, out)
    write_resolved_config(cfg, out)
    sizes = {name: len(idx) for name, idx in dataset.splits.items()}
    print(f"wrote {len(dataset)} samples to {out} (splits: {sizes}), manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    dataset = load_dataset(args.data)
    config = TrainConfig(
        learning_rate=float(cfg["learning_rate"]),
        weight_decay=float(cfg["weight_decay"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        t_min=int(cfg["t_min"]),
        t_max=int(cfg["t_max"]),
        seed=int(cfg["seed"]),
        num_channels=int(cfg["num_channels"]),
        hidden_size=int(cfg["hidden_size"]),
        fire_rate=float(cfg["fire_rate"]),
        grad_clip=None if cfg["grad_clip"] is None else float(cfg["grad_clip"]),
        early_stop_val_dice=(None if cfg["early_stop_val_dice"] is None
                             else float(cfg["early_stop_val_dice"])),
    )
    write_resolved_config(cfg, out)
    result = train(dataset, config, out, progress=print)
    print(f"best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch}; "
          f"checkpoints in {out}")
    return 0


def _uq_config(cfg: dict) -> UncertaintyConfig:
    return UncertaintyConfig(
        sigma=float(cfg["sigma"]),
        relax_steps=int(cfg["relax_steps"]),
        rollout_steps=int(cfg["rollout_steps"]),
        window=int(cfg["window"]),
        stoptime_samples=int(cfg["stoptime_samples"]),
        t_min=int(cfg["t_min"]),
        t_max=int(cfg["t_max"]),
        band_radius=int(cfg["band_radius"]),
        threshold=float(cfg["threshold"]),
    )


def _dump_map(path: Path, pixel_map: np.ndarray) -> None:
    h, w = pixel_map.shape
    rows = [f"{h} {w}"]
    rows += [" ".join(f"{v:.8g}" for v in row) for row in pixel_map]
    path.write_text("\n".join(rows) + "\n")


def cmd_uq(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    samples = dataset.subset(str(cfg["split"])) if dataset.splits else dataset.samples
    samples = sorted(samples, key=lambda s: s.id)
    methods = METHOD_ORDER if args.method == "all" else (args.method,)
    for name in methods:
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r} (choose from {', '.join(METHODS)})")
    uq_cfg = _uq_config(cfg)
    seed = int(cfg["seed"])
    maps_dir = out / "maps"
    if args.dump_maps:
        maps_dir.mkdir(parents=True, exist_ok=True)

    def score_image(index: int):
        sample = samples[index]
        rng = np.random.default_rng([seed, 999, index])
        _, pred = predict(params, sample.image, uq_cfg.rollout_steps, rng)
        image_dice = metrics.dice(pred.mask, sample.mask)
        rows, failures = [], []
        for m_idx, name in enumerate(METHOD_ORDER):
            if name not in methods:
                continue
            try:
                report = METHODS[name](params, sample.image, [seed, m_idx, index], uq_cfg)
            except Exception as exc:  # noqa: BLE001 - enumerate per-item failures
                failures.append(f"{sample.id}/{name}: {exc}")
                continue
            rows.append((sample.id, name, report.u, image_dice, report.band_mean,
                         report.band_p95, int(report.fallback)))
            if args.dump_maps and report.pixel_map is not None:
                _dump_map(maps_dir / f"{sample.id}__{name}.pfg", report.pixel_map)
        return rows, failures

    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    workers = max(1, int(cfg["workers"]))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(score_image, range(len(samples))))

    all_failures = [f for _, failures in results for f in failures]
    scores_path = out / "scores.csv"
    with open(scores_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "method", "u", "dice", "band_mean",
                         "band_p95", "fallback_flag"])
        for rows, _ in results:
            for image_id, name, u, d, bmean, bp95, flag in rows:
                writer.writerow([image_id, name, _fmt(u), _fmt(d),
                                 "" if bmean is None else _fmt(bmean),
                                 "" if bp95 is None else _fmt(bp95), flag])
    print(f"wrote {scores_path}")
    if all_failures:
        for failure in all_failures:
            print(f"failed: {failure}", file=sys.stderr)
        return 1
    return 0


def _read_scores(path: Path) -> dict[str, list[metrics.EvalRecord]]:
    by_method: dict[str, list[metrics.EvalRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            record = metrics.EvalRecord(image_id=row["image_id"],
                                        dice=float(row["dice"]), u=float(row["u"]))
            by_method.setdefault(row["method"], []).append(record)
    if not by_method:
        raise ValueError(f"{path}: no score rows")
    return by_method


def _risk_coverage_svg(curve: list[tuple[float, float]], title: str) -> str:
    width, height = 640, 480
    left, right, top, bottom = 70, 20, 40, 50
    px = lambda c: left + c * (width - left - right)
    py = lambda r: top + (1.0 - r) * (height - top - bottom)
    points = " ".join(f"{px(c):.2f},{py(r):.2f}" for c, r in curve)
    ticks = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        ticks.append(f'<text x="{px(frac):.0f}" y="{height - bottom + 20}" '
                     f'font-size="12" text-anchor="middle">{frac:g}</text>')
        ticks.append(f'<text x="{left - 8}" y="{py(frac):.0f}" font-size="12" '
                     f'text-anchor="end" dominant-baseline="middle">{frac:g}</text>')
    return f"""<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">
<rect width="{width}" height="{height}" fill="white"/>
<text x="{width / 2}" y="24" font-size="16" text-anchor="middle">{title}</text>
<line x1="{left}" y1="{py(0)}" x2="{width - right}" y2="{py(0)}" stroke="black"/>
<line x1="{left}" y1="{py(0)}" x2="{left}" y2="{top}" stroke="black"/>
<text x="{(left + width - right) / 2}" y="{height - 12}" font-size="13" text-anchor="middle">coverage</text>
<text x="18" y="{(top + height - bottom) / 2}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {(top + height - bottom) / 2})">risk (1 - Dice)</text>
{chr(10).join(ticks)}
<polyline points="{points}" fill="none" stroke="#c0392b" stroke-width="2"/>
</svg>
"""


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    by_method = _read_scores(Path(args.scores))
    threshold = float(cfg["failure_dice_threshold"])
    coverage = float(cfg["coverage"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "delta_dice_at_90", "aurc", "auroc", "auprc",
                         "failure_threshold", "n_images", "n_failures"])
        for method in sorted(by_method):
            records = by_method[method]
            curve = metrics.risk_coverage_curve(records)
            n_failures = int(metrics.failure_labels(records, threshold).sum())
            writer.writerow([
                method,
                _fmt(metrics.delta_dice_at(records, coverage)),
                _fmt(metrics.aurc(records)),
                _fmt(metrics.auroc(records, threshold)),
                _fmt(metrics.auprc(records, threshold)),
                _fmt(threshold), len(records), n_failures,
            ])
            with open(out / f"risk_coverage_{method}.csv", "w", newline="") as curve_fh:
                curve_writer = csv.writer(curve_fh)
                curve_writer.writerow(["coverage", "risk"])
                for cov, risk in curve:
                    curve_writer.writerow([_fmt(cov), _fmt(risk)])
            (out / f"risk_coverage_{method}.svg").write_text(
                _risk_coverage_svg(curve, f"risk-coverage: {method}"))
    print(f"wrote {summary_path}")
    return 0


def _mean_std(values: list[float]) -> tuple[float, float]:
    if len(values) < 2:
        return (values[0], 0.0)
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


def cmd_report(args) -> int:
    runs: list[tuple[str, Path]] = []
    for item in args.inputs:
        if "=" in item:
            label, _, path = item.partition("=")
        else:
            label, path = Path(item).parent.name, item
        runs.append((label, Path(path)))
    metric_names = ("delta_dice_at_90", "aurc", "auroc", "auprc")
    grouped: dict[tuple[str, str], dict[str, list[float]]] = {}
    for label, path in runs:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cell = grouped.setdefault((label, row["method"]),
                                          {m: [] for m in metric_names})
                for m in metric_names:
                    if row[m] != "undefined":
                        cell[m].append(float(row[m]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["dataset", "method", "n_runs"]
    for m in metric_names:
        header += [f"{m}_mean", f"{m}_std"]
    table_rows = []
    for (label, method) in sorted(grouped):
        cell = grouped[(label, method)]
        n_runs = max(len(v) for v in cell.values())
        row = [label, method, str(n_runs)]
        for m in metric_names:
            if cell[m]:
                mean, std = _mean_std(cell[m])
                row += [_fmt(mean), _fmt(std)]
            else:
                row += ["undefined", "undefined"]
        table_rows.append(row)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(table_rows)
    widths = [max(len(str(r[i])) for r in [header] + table_rows) for i in range(len(header))]
    text_lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths))
                  for row in [header] + table_rows]
    text = "\n".join(text_lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncauq",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    _add_common(p)
    p.add_argument("--synth-n", "--n", dest="synth_n", type=int)
    p.add_argument("--synth-size", "--size", dest="synth_size")
    p.add_argument("--ratios")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the segmentation automaton")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--num-channels", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--fire-rate", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--early-stop-val-dice", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("uq", help="score per-image uncertainty")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="all",
                   choices=sorted(METHODS) + ["all"])
    p.add_argument("--rollout-steps", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--relax-steps", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stoptime-samples", type=int)
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--band-radius", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--split")
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-maps", action="store_true",
                   help="also write per-pixel maps as portable float grids")
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("eval", help="selective prediction + failure detection metrics")
    _add_common(p)
    p.add_argument("--scores", required=True, help="scores.csv from the uq command")
    p.add_argument("--failure-dice-threshold", type=float)
    p.add_argument("--coverage", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval summaries (mean +/- std)")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+", metavar="LABEL=SUMMARY_CSV",
                   help="summary.csv paths, optionally prefixed with a dataset label")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
