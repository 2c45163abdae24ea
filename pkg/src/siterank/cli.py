"""Command-line orchestration: ingest -> rank -> train -> predict -> report.

Commands emit plot-ready CSV/JSON data files, never rendered images. Every
run that writes outputs finishes by writing a manifest; its presence means
the run completed. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from siterank import checkpoint as ckpt
from siterank.dataset import (
    DatasetError,
    ObjectiveSpec,
    default_spec,
    load_dataset,
    orient_and_scale,
    parse_sites,
    save_dataset,
    truncate_dedup,
)
from siterank.predictor.lookup import PredictorError, build_lookup
from siterank.predictor.metrics import evaluate
from siterank.predictor.model import (
    PredictorConfig,
    assemble_samples,
    config_grid,
    load_predictor,
    save_predictor,
    train_predictor,
)
from siterank.predictor.network import TrainConfig, TrainingDivergedError
from siterank.ranking import RankingError, RankResult, parse_length_range, run_sweep

CHECKPOINT_DIR_ENV = "SITERANK_CHECKPOINT_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad invocation: missing files, malformed flags."""


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    args: argparse.Namespace,
    outputs: dict[str, Path],
    fingerprint: str = "",
    seed: int | None = None,
    started: float | None = None,
    volatile: tuple[str, ...] = (),
    canonical_hashes: dict[str, str] | None = None,
) -> Path:
    """Write manifest.json last; hashes of non-volatile outputs double as the idempotence fingerprint."""
    hashes = dict(canonical_hashes or {})
    for name, path in outputs.items():
        if name not in volatile and name not in hashes:
            hashes[name] = _sha256_file(path)
    manifest = {
        "command": command,
        "args": vars_safe(args),
        "dataset_fingerprint": fingerprint,
        "seed": seed,
        "started_utc": started,
        "finished_utc": time.time(),
        "outputs": {name: str(path) for name, path in outputs.items()},
        "output_hashes": hashes,
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def vars_safe(args: argparse.Namespace) -> dict:
    return {k: str(v) for k, v in vars(args).items() if k != "func"}


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------- ingest


def cmd_ingest(args) -> int:
    started = time.time()
    csv_path = _require_file(args.csv, "--csv")
    if args.spec is not None:
        spec = ObjectiveSpec.from_json_file(_require_file(args.spec, "--spec"))
    else:
        spec = default_spec()
    out = _out_dir(args.out)

    table = parse_sites(csv_path, spec, validate_coords=args.validate_bounds)
    deduped, aliases = truncate_dedup(table, precision=args.precision)
    removed_ids = set(aliases.removed_ids())
    removed_records = [r for r in table.records if r.registry_id in removed_ids]
    matrix = orient_and_scale(deduped)

    dataset_path = out / "scaled_dataset.json"
    save_dataset(dataset_path, deduped, matrix, aliases, removed_records)
    aliases_path = out / "aliases.json"
    with open(aliases_path, "w", encoding="utf-8") as fh:
        json.dump(aliases.to_json_dict(), fh, indent=2)

    print(f"parsed {table.n} sites, kept {deduped.n} after dedup ({aliases.n_removed()} aliases)")
    print(f"scaled matrix: {matrix.n} x {matrix.m}, fingerprint {matrix.fingerprint()[:12]}")
    _write_manifest(
        out,
        "ingest",
        args,
        {"scaled_dataset": dataset_path, "aliases": aliases_path},
        fingerprint=matrix.fingerprint(),
        started=started,
    )
    return EXIT_OK


# ------------------------------------------------------------------ rank


def _write_scores_csv(path: Path, result: RankResult, meta_index: dict[str, dict]) -> None:
    order = sorted(range(len(result.site_ids)), key=lambda i: (-result.metric[i], result.site_ids[i]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "site_type", "state_fips", "county_fips", "longitude", "latitude", "sr", "metric"])
        for i in order:
            sid = result.site_ids[i]
            meta = meta_index.get(sid, {})
            writer.writerow(
                [
                    sid,
                    meta.get("site_type", ""),
                    meta.get("state_fips", ""),
                    meta.get("county_fips", ""),
                    meta.get("longitude", ""),
                    meta.get("latitude", ""),
                    _fmt(result.summed_ratio[i]),
                    _fmt(result.metric[i]),
                ]
            )


def _write_contributions_csv(path: Path, result: RankResult, meta_index: dict[str, dict]) -> None:
    m = result.importance.shape[1]
    order = sorted(range(len(result.site_ids)), key=lambda i: (-result.metric[i], result.site_ids[i]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "site_type", "sr", "metric", *[f"sc_{j + 1}" for j in range(m)]])
        for i in order:
            sid = result.site_ids[i]
            meta = meta_index.get(sid, {})
            writer.writerow(
                [
                    sid,
                    meta.get("site_type", ""),
                    _fmt(result.summed_ratio[i]),
                    _fmt(result.metric[i]),
                    *[_fmt(v) for v in result.importance[i]],
                ]
            )


def _write_nr_series_csv(path: Path, result: RankResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "s", "nr"])
        for i, sid in enumerate(result.site_ids):
            for s in range(1, result.obs_by_length.shape[0] + 1):
                writer.writerow([sid, s, _fmt(result.obs_by_length[s - 1, i])])


def _write_variance_csv(path: Path, result: RankResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "variance"])
        for s in range(1, result.variance.shape[0] + 1):
            writer.writerow([s, _fmt(result.variance[s - 1])])


def _write_timings_csv(path: Path, result: RankResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "elapsed_seconds"])
        for s in range(1, result.elapsed_by_length.shape[0] + 1):
            writer.writerow([s, _fmt(result.elapsed_by_length[s - 1])])


def cmd_rank(args) -> int:
    started = time.time()
    dataset_path = _require_file(args.dataset, "--dataset")
    bundle = load_dataset(dataset_path)
    matrix = bundle.matrix
    out = _out_dir(args.out)

    checkpoint_dir = args.checkpoint_dir or os.environ.get(CHECKPOINT_DIR_ENV) or None
    lengths = parse_length_range(args.lengths, matrix.m)

    result = run_sweep(
        matrix,
        s_range=lengths,
        checkpoint_dir=checkpoint_dir,
        workers=args.workers,
        chunk=args.chunk,
        checkpoint_stride=args.stride,
        aliases=bundle.aliases,
        log_fn=lambda msg: print(msg),
    )
    if result is None:
        print("requested lengths complete; remaining lengths still pending, no final result yet")
        return EXIT_OK

    meta_index = bundle.site_meta_index()
    outputs: dict[str, Path] = {
        "scores": out / "scores.csv",
        "contributions": out / "contributions.csv",
        "nr_series": out / "nr_series.csv",
        "variance": out / "variance.csv",
        "result": out / "result.json",
        "timings": out / "timings.csv",
    }
    _write_scores_csv(outputs["scores"], result, meta_index)
    _write_contributions_csv(outputs["contributions"], result, meta_index)
    _write_nr_series_csv(outputs["nr_series"], result)
    _write_variance_csv(outputs["variance"], result)
    with open(outputs["result"], "wb") as fh:
        fh.write(result.canonical_bytes())
    _write_timings_csv(outputs["timings"], result)

    best = int(np.argmax(result.metric))
    print(f"ranked {len(result.site_ids)} sites; top site {result.site_ids[best]} metric {result.metric[best]:.4f}")
    _write_manifest(
        out,
        "rank",
        args,
        outputs,
        fingerprint=matrix.fingerprint(),
        started=started,
        volatile=("timings",),
    )
    return EXIT_OK


# ----------------------------------------------------------------- train


def cmd_train(args) -> int:
    started = time.time()
    if args.grid:
        for entry in config_grid():
            print(json.dumps(entry))
        return EXIT_OK

    dataset_path = _require_file(args.dataset, "--dataset")
    result_path = _require_file(args.result, "--result")
    bundle = load_dataset(dataset_path)
    with open(result_path, "r", encoding="utf-8") as fh:
        result = RankResult.from_json_dict(json.load(fh))
    out = _out_dir(args.out)

    samples = assemble_samples(bundle.table, result)
    hidden1 = tuple(int(x) for x in args.hidden1.split(",") if x)
    hidden2 = tuple(int(x) for x in args.hidden2.split(",") if x)
    config = PredictorConfig(
        mode=args.mode,
        hidden1=hidden1,
        hidden2=hidden2,
        test_fraction=args.test_fraction,
        neighbors=args.neighbors,
        train=TrainConfig(
            learning_rate=args.learning_rate,
            lr_decay=args.lr_decay,
            batch_size=args.batch_size,
            epochs=args.epochs,
            patience=args.patience if args.patience > 0 else None,
            seed=args.seed,
        ),
    )
    lookup = build_lookup(bundle.table, bundle.matrix.spec, neighbors=args.neighbors) if args.mode == "lookup" else None
    predictor, history, split = train_predictor(samples, bundle.matrix.spec, config, lookup=lookup)

    train_idx = np.asarray(split["train_idx"], dtype=int)
    test_idx = np.asarray(split["test_idx"], dtype=int)
    _, score_all, imp_all = predictor.predict_batch(samples.x)
    y2_pred = np.concatenate([score_all[:, None], imp_all], axis=1)
    m_train = evaluate(samples.y2[train_idx], y2_pred[train_idx])
    m_test = evaluate(samples.y2[test_idx], y2_pred[test_idx])

    outputs: dict[str, Path] = {"model": out / "model.npz", "history": out / "history.csv", "metrics": out / "metrics.json"}
    save_predictor(outputs["model"], predictor)
    with open(outputs["history"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted({k for rec in history.epochs for k in rec})
        writer.writerow(keys)
        for rec in history.epochs:
            writer.writerow([rec.get(k, "") for k in keys])
    metrics_payload = {
        "mode": args.mode,
        "score_train": m_train.__dict__,
        "score_test": m_test.__dict__,
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "n_train": int(train_idx.size),
        "n_test": int(test_idx.size),
    }
    with open(outputs["metrics"], "w", encoding="utf-8") as fh:
        json.dump(metrics_payload, fh, indent=2)

    print(f"trained {args.mode} predictor on {train_idx.size} sites ({test_idx.size} held out)")
    print(f"score+importance R2: train {m_train.r2:.5f}, test {m_test.r2:.5f}")
    _write_manifest(
        out,
        "train",
        args,
        outputs,
        fingerprint=bundle.matrix.fingerprint(),
        seed=args.seed,
        started=started,
    )
    return EXIT_OK


# --------------------------------------------------------------- predict


def cmd_predict(args) -> int:
    model_path = _require_file(args.model, "--model")
    predictor = load_predictor(model_path)
    x = [args.lon, args.lat, args.county_fips, args.state_fips]
    objectives, score, importance = predictor.predict(x)
    names = predictor.spec.names
    payload = {
        "input": {"longitude": args.lon, "latitude": args.lat, "county_fips": args.county_fips, "state_fips": args.state_fips},
        "objectives": {name: float(v) for name, v in zip(names, objectives)},
        "score": float(score),
        "importance": {name: float(v) for name, v in zip(names, importance)},
    }
    print(json.dumps(payload, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- report


def cmd_report_top(args) -> int:
    scores_path = _require_file(args.scores, "--scores")
    with open(scores_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "site_id" not in reader.fieldnames or "metric" not in reader.fieldnames:
            raise UsageError("--scores file must have site_id and metric columns")
        rows = list(reader)
    rows.sort(key=lambda r: -float(r["metric"]))
    fields = reader.fieldnames
    print(",".join(fields))
    for row in rows[: args.n]:
        print(",".join(row[f] for f in fields))
    return EXIT_OK


def cmd_report_curves(args) -> int:
    result_path = _require_file(args.result, "--result")
    with open(result_path, "r", encoding="utf-8") as fh:
        result = RankResult.from_json_dict(json.load(fh))
    order = sorted(range(len(result.site_ids)), key=lambda i: (-result.metric[i], result.site_ids[i]))[: args.top]
    lines = ["site_id,s,nr"]
    for i in order:
        for s in range(1, result.obs_by_length.shape[0] + 1):
            lines.append(f"{result.site_ids[i]},{s},{_fmt(result.obs_by_length[s - 1, i])}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(order)} sites x {result.obs_by_length.shape[0]} lengths to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


# ----------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siterank",
        description="Site ranking by exhaustive multi-objective Pareto-front accumulation, with location-based predictors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a site CSV, dedup by truncated coordinates, orient and scale")
    p.add_argument("--csv", required=True, help="input CSV with header row")
    p.add_argument("--spec", default=None, help="objective spec JSON (default: built-in 22-objective spec)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--precision", type=float, default=0.01, help="coordinate truncation grid in degrees")
    p.add_argument("--validate-bounds", action="store_true", help="reject coordinates outside the contiguous US")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rank", help="run the subset sweep and emit scores, contributions, and series data")
    p.add_argument("--dataset", required=True, help="scaled_dataset.json from ingest")
    p.add_argument("--out", required=True)
    p.add_argument("--lengths", default="all", help="combination lengths, e.g. '1-4' or '2,3,5' or 'all'")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--checkpoint-dir", default=None, help=f"checkpoint directory (or ${CHECKPOINT_DIR_ENV})")
    p.add_argument("--chunk", type=int, default=64, help="combinations per work unit (fixed merge grouping)")
    p.add_argument("--stride", type=int, default=100_000, help="combinations between checkpoint saves")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("train", help="fit a location-based predictor on sweep results")
    p.add_argument("--dataset", default=None, help="scaled_dataset.json from ingest")
    p.add_argument("--result", default=None, help="result.json from rank")
    p.add_argument("--out", default="model_out")
    p.add_argument("--mode", choices=("lookup", "twostage"), default="lookup")
    p.add_argument("--hidden1", default="32,32", help="objective-stage hidden sizes, comma separated")
    p.add_argument("--hidden2", default="32,32", help="score-stage hidden sizes, comma separated")
    p.add_argument("--learning-rate", type=float, default=2e-4)
    p.add_argument("--lr-decay", type=float, default=0.92, help="per-epoch learning-rate multiplier")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--patience", type=int, default=25, help="early stopping patience in epochs; 0 disables")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--neighbors", type=int, default=3, help="nearest sites used by the interpolator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", action="store_true", help="print the hyperparameter grid and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict objectives, score, and importances at a location")
    p.add_argument("--model", required=True, help="model.npz from train")
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--county-fips", type=int, required=True)
    p.add_argument("--state-fips", type=int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summaries over rank outputs")
    rsub = p.add_subparsers(dest="report_command", required=True)
    rt = rsub.add_parser("top", help="print the top-n sites by metric")
    rt.add_argument("--scores", required=True, help="scores CSV (site_id and metric columns required)")
    rt.add_argument("--n", type=int, default=20)
    rt.set_defaults(func=cmd_report_top)
    rc = rsub.add_parser("curves", help="emit per-length front-mass series for the top sites")
    rc.add_argument("--result", required=True, help="result.json from rank")
    rc.add_argument("--top", type=int, default=20)
    rc.add_argument("--out", default=None, help="write CSV here instead of stdout")
    rc.set_defaults(func=cmd_report_curves)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK
    except (DatasetError, RankingError, PredictorError, ckpt.CheckpointError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
