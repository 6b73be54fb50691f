"""Command-line entry point: ``revprop {gen-data,train,eval,profile}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from revprop.config import ConfigError, RunConfig, load_config
from revprop.data import (
    NormalizationStats,
    compute_normalization,
    downsample_blockmean,
    evaluate_rmse,
    extract_patches,
    generate_synthetic_subject,
    normalize_pairs,
    read_volume,
    split_train_validation,
    stack_pairs,
    stitch,
    tile_corners,
    write_volume,
)
from revprop.engine import profile_step
from revprop.network import build, predict
from revprop.ops import shuffle_array
from revprop.stats import wilcoxon_signed_rank
from revprop.tensor import Tensor
from revprop.trainer import (
    PatchSet,
    TrainingDiverged,
    read_model,
    train_multi_seed,
    write_model,
)

PROFILE_COLUMNS = ("mode", "n_blocks", "peak_activation_elements", "parameter_elements",
                   "fwd_ops", "bwd_ops", "wall_time_ms")
SUBJECT_COLUMNS = ("model", "subject", "rmse_interior", "rmse_exterior", "rmse_total")
SUMMARY_COLUMNS = ("model", "subjects", "rmse_interior", "rmse_exterior", "rmse_total")


class CommandError(RuntimeError):
    pass


def worker_threads() -> int:
    raw = os.environ.get("REVPROP_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise CommandError(f"REVPROP_THREADS must be an integer, got {raw!r}") from None


def write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in columns})
    write_text(path, buf.getvalue())


def prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.resolved.txt", cfg.dumps())
    return out


def subject_paths(data_dir: Path, i: int):
    return data_dir / f"subject_{i:03d}_hr.rvol", data_dir / f"subject_{i:03d}_lr.rvol"


def load_subject(cfg: RunConfig, i: int):
    hr_path, lr_path = subject_paths(cfg.data_path, i)
    if not hr_path.exists() or not lr_path.exists():
        raise CommandError(f"missing data for subject {i} in {cfg.data_path}; run gen-data first")
    return read_volume(hr_path), read_volume(lr_path)


# gen-data

def _make_subject(cfg: RunConfig, i: int):
    hr = generate_synthetic_subject([cfg.seed, i], cfg.subject_extent, cfg.input_channels,
                                    cfg.n_bumps)
    return hr, downsample_blockmean(hr, cfg.upsampling_rate)


def cmd_gen_data(cfg: RunConfig) -> int:
    data_dir = cfg.data_path
    data_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".gen-", dir=data_dir.parent))
    moved = []
    try:
        def job(i):
            hr, lr = _make_subject(cfg, i)
            hr_path, lr_path = subject_paths(staging, i)
            write_volume(hr_path, hr)
            write_volume(lr_path, lr)
            return hr_path.name, lr_path.name

        with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
            names = list(pool.map(job, range(cfg.subjects)))
        manifest = {
            "subjects": cfg.subjects,
            "train_subjects": cfg.train_subjects,
            "test_subjects": cfg.test_subjects,
            "extent": cfg.subject_extent,
            "upsampling_rate": cfg.upsampling_rate,
            "seed": cfg.seed,
            "files": [list(n) for n in names],
        }
        write_json(staging / "manifest.json", manifest)
        data_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(staging.iterdir()):
            os.replace(f, data_dir / f.name)
            moved.append(data_dir / f.name)
    except BaseException:
        for f in moved:
            f.unlink(missing_ok=True)
        raise
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    prepare_out(cfg)
    print(f"wrote {cfg.subjects} subject pairs to {data_dir}")
    return 0


# train

def build_patch_sets(cfg: RunConfig, spec):
    pairs = []
    for i in range(cfg.train_subjects):
        hr, lr = load_subject(cfg, i)
        if lr.channels != spec.input_channels:
            raise CommandError(
                f"subject {i} has {lr.channels} channels, network expects {spec.input_channels}"
            )
        pairs += extract_patches(lr, hr, cfg.patches_per_subject, seed=[cfg.seed, i],
                                 patch=spec.input_extent, margin=spec.footprint_margin(),
                                 r=spec.upsampling_rate, subject=i)
    train_pairs, val_pairs = split_train_validation(pairs, cfg.train_fraction, cfg.seed)
    stats = compute_normalization(train_pairs, spec.upsampling_rate)
    train_set = PatchSet(*stack_pairs(normalize_pairs(train_pairs, stats)))
    val_set = PatchSet(*stack_pairs(normalize_pairs(val_pairs, stats)))
    return train_set, val_set, stats


def cmd_train(cfg: RunConfig, model_path=None) -> int:
    if cfg.train_subjects < 1:
        raise CommandError("no training subjects: subjects must exceed test_subjects")
    spec = cfg.network_spec()
    train_set, val_set, stats = build_patch_sets(cfg, spec)
    out = prepare_out(cfg)
    seeds = [cfg.seed + j for j in range(cfg.n_seeds)]
    try:
        records, best, params = train_multi_seed(spec, train_set, val_set, cfg.protocol(),
                                                 seeds, threads=worker_threads())
    except TrainingDiverged as exc:
        rec = exc.record
        write_text(out / f"train_seed{rec.seed}.jsonl", rec.to_jsonl(wall_time=False))
        raise CommandError(
            f"training diverged (seed {rec.seed}, epoch {len(rec.epochs)}): non-finite loss"
        ) from None
    for rec in records:
        write_text(out / f"train_seed{rec.seed}.jsonl", rec.to_jsonl(wall_time=False))
        write_json(out / f"train_seed{rec.seed}.summary.json", rec.summary())
        write_json(out / f"timing_seed{rec.seed}.json",
                   {"seed": rec.seed, "epoch_wall_time_s": [e.wall_time_s for e in rec.epochs]})
    model_path = Path(model_path) if model_path else out / "model.rvpm"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    write_model(model_path, spec, params)
    write_json(Path(str(model_path) + ".norm.json"), {
        "normalization": stats.to_dict(),
        "train_subjects": cfg.train_subjects,
        "train_patches": len(train_set),
        "validation_patches": len(val_set),
    })
    write_json(out / "selection.json", {
        "seeds": seeds,
        "best_seed": records[best].seed,
        "best_val_rmse": records[best].best_val_rmse,
        "model": str(model_path),
    })
    if cfg.figures:
        from revprop.plotting import plot_training
        plot_training(records, out / "training.png")
    print(f"seed {records[best].seed} selected, validation RMSE "
          f"{records[best].best_val_rmse:.6g}; model written to {model_path}")
    return 0


# eval

def predict_volume(params, spec, stats: NormalizationStats, lr, stride: int) -> np.ndarray:
    """Patch-wise inference over the whole LR grid, stitched at HR."""
    r = spec.upsampling_rate
    m = spec.footprint_margin()
    p = spec.input_extent
    fp = p - 2 * m
    x = np.pad(stats.normalize_lr(lr.data), ((0, 0),) + ((m, m),) * 3)
    axes = [tile_corners(e, fp, stride) for e in lr.extents]
    preds = []
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                patch = Tensor(x[:, a:a + p, b:b + p, c:c + p], dtype=spec.dtype)
                out = predict(params, spec, patch).numpy().astype(np.float64)
                preds.append(((a, b, c), shuffle_array(stats.denormalize_hr_target(out), r)))
    return stitch(preds, tuple(r * e for e in lr.extents), r)


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"model file not found: {path}")
    spec, params = read_model(path)
    side = Path(str(path) + ".norm.json")
    if not side.exists():
        raise CommandError(f"normalization sidecar not found: {side}")
    stats = NormalizationStats.from_dict(json.loads(side.read_text(encoding="utf-8"))["normalization"])
    return spec, params, stats


def _check_compat(spec, stats, hr, lr, label, i):
    r = spec.upsampling_rate
    if lr.channels != spec.input_channels:
        raise CommandError(f"{label}: channel mismatch, model expects {spec.input_channels} "
                           f"but subject {i} has {lr.channels}")
    if stats.r != r or tuple(r * e for e in lr.extents) != hr.extents:
        raise CommandError(f"{label}: extent mismatch, LR {lr.extents} x r={r} != HR {hr.extents}")
    fp = spec.input_extent - 2 * spec.footprint_margin()
    if min(lr.extents) < fp:
        raise CommandError(f"{label}: footprint mismatch, LR extents {lr.extents} "
                           f"smaller than the {fp}^3 output footprint")


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    a = np.asarray(vals)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _fmt(mean, std):
    return "" if mean is None else f"{mean:.6g} ± {std:.6g}"


def cmd_eval(cfg: RunConfig, models) -> int:
    if not models:
        raise CommandError("eval needs at least one --model PATH (or 'truth')")
    subjects = list(range(cfg.train_subjects, cfg.subjects))
    if not subjects:
        raise CommandError("no test subjects configured")
    volumes = {i: load_subject(cfg, i) for i in subjects}
    loaded = []
    for m in models:
        label = "truth" if m == "truth" else Path(m).stem
        while label in [l for l, _ in loaded]:
            label += "'"
        loaded.append((label, None if m == "truth" else _load_model(m)))
    out = prepare_out(cfg)
    rows = []
    for label, model in loaded:
        for i in subjects:
            hr, lr = volumes[i]
            if model is None:
                pred = hr.data
            else:
                spec, params, stats = model
                _check_compat(spec, stats, hr, lr, label, i)
                pred = predict_volume(params, spec, stats, lr, cfg.eval_stride)
            res = evaluate_rmse(pred, hr.data, hr.mask, cfg.interior_margin)
            rows.append({"model": label, "subject": i, "rmse_interior": res["interior"],
                         "rmse_exterior": res["exterior"], "rmse_total": res["total"]})
    summary, metrics = [], {"subjects": subjects, "interior_margin": cfg.interior_margin,
                            "models": {}}
    for label, _ in loaded:
        sel = [r for r in rows if r["model"] == label]
        row = {"model": label, "subjects": len(sel)}
        mm = {}
        for col in SUMMARY_COLUMNS[2:]:
            mean, std = _mean_std([r[col] for r in sel])
            row[col] = _fmt(mean, std)
            mm[col] = {"mean": mean, "std": std, "per_subject": [r[col] for r in sel]}
        summary.append(row)
        metrics["models"][label] = mm
    write_csv(out / "eval_subjects.csv", SUBJECT_COLUMNS, rows)
    write_csv(out / "eval_summary.csv", SUMMARY_COLUMNS, summary)
    if len(loaded) == 2:
        (la, _), (lb, _) = loaded
        pairs = [(ra["rmse_total"], rb["rmse_total"])
                 for ra, rb in zip([r for r in rows if r["model"] == la],
                                   [r for r in rows if r["model"] == lb])
                 if ra["rmse_total"] is not None and rb["rmse_total"] is not None]
        result = {"a": la, "b": lb, "metric": "rmse_total", "n_pairs": len(pairs)}
        try:
            w = wilcoxon_signed_rank([p[0] for p in pairs], [p[1] for p in pairs])
            result.update({"W": w.W, "p_two_sided": w.p_two_sided, "n": w.n})
        except ValueError as exc:
            result.update({"W": None, "p_two_sided": None, "n": 0, "reason": str(exc)})
        write_json(out / "wilcoxon.json", result)
        metrics["wilcoxon"] = result
    write_json(out / "metrics.json", metrics)
    if cfg.figures:
        from revprop.plotting import plot_eval
        plot_eval(rows, out / "eval.png")
    for row in summary:
        print(f"{row['model']}: total RMSE {row['rmse_total']} over {row['subjects']} subjects")
    return 0


# profile

def profile_rows(cfg: RunConfig):
    modes, blocks = cfg.profile_matrix()
    rows = []
    warmed = False
    for n in blocks:
        spec = cfg.network_spec(n)
        params = build(spec, cfg.seed)
        rng = np.random.default_rng([cfg.seed, n])
        x = Tensor(rng.standard_normal(spec.input_shape()), dtype=spec.dtype)
        t = Tensor(rng.standard_normal(spec.output_shape()), dtype=spec.dtype)
        if not warmed:
            profile_step(params, spec, x, t, modes[0])  # compile kernels before timing
            warmed = True
        for mode in modes:
            res = profile_step(params, spec, x, t, mode)
            rows.append({
                "mode": mode, "n_blocks": n,
                "peak_activation_elements": res.peak_elements,
                "parameter_elements": res.parameter_elements,
                "fwd_ops": res.fwd_ops, "bwd_ops": res.bwd_ops,
                "wall_time_ms": round(res.wall_time_ms, 3),
            })
    return rows


def profile_summary(rows) -> dict:
    by = {(r["mode"], r["n_blocks"]): r for r in rows}
    ratios = {}
    for (mode, n), r in sorted(by.items(), key=lambda kv: kv[0][1]):
        if mode == "naive" and ("efficient", n) in by:
            e = by[("efficient", n)]
            ratios[str(n)] = {
                "naive_over_efficient_peak": r["peak_activation_elements"] / e["peak_activation_elements"],
                "efficient_over_naive_fwd_ops": e["fwd_ops"] / r["fwd_ops"],
            }
    eff = [r["peak_activation_elements"] for r in rows if r["mode"] == "efficient" and r["n_blocks"] > 0]
    return {
        "per_n": ratios,
        "efficient_peak_spread": (max(eff) / min(eff) - 1.0) if eff else None,
    }


def cmd_profile(cfg: RunConfig) -> int:
    rows = profile_rows(cfg)
    out = prepare_out(cfg)
    write_text(out / "profile.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    write_csv(out / "profile.csv", PROFILE_COLUMNS, rows)
    write_json(out / "profile_summary.json", profile_summary(rows))
    if cfg.figures:
        from revprop.plotting import plot_profile
        plot_profile(rows, out / "profile.png")
    for r in rows:
        print(f"{r['mode']:>9} N={r['n_blocks']}: peak {r['peak_activation_elements']} elements, "
              f"{r['fwd_ops']} fwd / {r['bwd_ops']} bwd convs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--model", action="append", default=[], metavar="PATH",
                        help="model file; repeat to compare two models in eval "
                             "('truth' evaluates the ground truth)")
    p = argparse.ArgumentParser(prog="revprop", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic HR/LR subject pairs")
    sub.add_parser("train", parents=[common], help="train a model on the training subjects")
    sub.add_parser("eval", parents=[common], help="evaluate models on the test subjects")
    sub.add_parser("profile", parents=[common], help="memory/compute profile of one step")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_dir=args.out, seed=args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            if len(args.model) > 1:
                raise CommandError("train takes at most one --model output path")
            return cmd_train(cfg, args.model[0] if args.model else None)
        if args.command == "eval":
            return cmd_eval(cfg, args.model)
        return cmd_profile(cfg)
    except (CommandError, ConfigError, OSError, ValueError) as exc:
        print(f"revprop {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
