"""Batch command-line entry points wiring the pipeline together:
featurize, train, predict, calibrate, evaluate, gradcheck.

Exit code 0 on success, nonzero with a diagnostic on stderr otherwise.
Output files are written to a temp file and renamed, so failures never
leave partial artifacts. The SQA_SEED environment variable overrides
the configured training seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import evaluation as ev
from . import frontend as fe
from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cnn import ConvBaseline, CnnConfig, init_cnn_params
from .gradcheck import DEFAULT_TOLERANCE, run_suite
from .manifest import Manifest, ManifestError, format_summary, load_manifest, summarize
from .quality import TASKS
from .training import TrainConfig, TrainingError, fit, make_sample
from .transformer import ModelConfig, ModelError, SpectrogramTransformer, init_params


class CliError(Exception):
    pass


# ------------------------------------------------------------- utilities


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config_file(path) -> dict[str, str]:
    """Flat key=value text config; '#' starts a comment line."""
    out: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}: line {i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_MODEL_KEYS = {
    "embed_dim": int,
    "patch_size": int,
    "patch_stride_time": int,
    "patch_stride_freq": int,
    "n_layers": int,
    "n_heads": int,
    "mlp_ratio": float,
    "max_duration_s": float,
    "n_mels": int,
    "frame_hop_s": float,
}
_CNN_KEYS = {
    "channels": lambda s: tuple(int(c) for c in s.split(",")),
    "pool": lambda s: tuple(int(c) for c in s.split(",")),
    "kernel": int,
    "max_duration_s": float,
    "n_mels": int,
    "frame_hop_s": float,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "max_epochs": int,
    "early_stop_patience": int,
    "lr_patience": int,
    "batch_size": int,
    "seed": int,
}


def _pick(config: dict[str, str], keys: dict) -> dict:
    out = {}
    for key, conv in keys.items():
        if key in config:
            try:
                out[key] = conv(config[key])
            except ValueError as exc:
                raise CliError(f"config key {key}: {exc}") from exc
    return out


def build_model(kind: str, config: dict[str, str], seed: int = 0):
    if kind == "ast":
        return SpectrogramTransformer(ModelConfig(**_pick(config, _MODEL_KEYS)), seed=seed)
    if kind == "cnn":
        return ConvBaseline(CnnConfig(**_pick(config, _CNN_KEYS)), seed=seed)
    raise CliError(f"unknown model kind {kind!r}")


def build_train_config(kind: str, config: dict[str, str]) -> TrainConfig:
    picked = _pick(config, _TRAIN_KEYS)
    if kind == "ast":
        picked.setdefault("learning_rate", 1e-6)
    env_seed = os.environ.get("SQA_SEED")
    if env_seed is not None:
        picked["seed"] = int(env_seed)
    return TrainConfig(**picked)


def feature_path(features_dir: Path, sample_id: str) -> Path:
    return features_dir / f"{sample_id}.feat"


def features_for_entry(entry, features_dir: Path | None) -> np.ndarray:
    if features_dir is not None:
        return fe.load_features(feature_path(features_dir, entry.sample_id))
    clip = fe.decode_wav(entry.audio)
    return fe.log_mel_spectrogram(clip).values


def build_samples(model, entries, features_dir: Path | None) -> list[tr.TrainSample]:
    samples = []
    for entry in entries:
        values = features_for_entry(entry, features_dir)
        samples.append(make_sample(model.prepare(values), entry.scores))
    return samples


# ------------------------------------------------------------ subcommands


def cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    print(format_summary(summarize(manifest)), end="")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def compute(entry):
        clip = fe.decode_wav(entry.audio)
        return entry.sample_id, fe.log_mel_spectrogram(clip).values

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            computed = list(pool.map(compute, manifest.entries))
    else:
        computed = [compute(e) for e in manifest.entries]

    if args.normalize:
        mean, std = fe.corpus_normalization([v for _, v in computed])
        computed = [(sid, (v - mean) / std) for sid, v in computed]
        _atomic_write_text(out_dir / "normalization.txt", f"mean={mean!r}\nstd={std!r}\n")

    for sample_id, values in computed:
        fe.save_features(feature_path(out_dir, sample_id), values)
    print(f"featurized {len(computed)} clips -> {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = load_config_file(args.config) if args.config else {}
    train_config = build_train_config(args.model, config)
    model = build_model(args.model, config, seed=train_config.seed)

    manifest = load_manifest(args.manifest, require_audio=args.features is None)
    features_dir = Path(args.features) if args.features else None
    train_entries = manifest.split_entries("train")
    if not train_entries:
        raise CliError("manifest has no train-split entries")
    val_entries = manifest.split_entries("val")
    if not val_entries:
        print("note: manifest has no val split; validating on the training set")
        val_entries = train_entries

    train_samples = build_samples(model, train_entries, features_dir)
    val_samples = build_samples(model, val_entries, features_dir)

    history_path = Path(args.history) if args.history else Path(str(args.out) + ".history.csv")
    result = fit(model, train_samples, val_samples, train_config, history_path=history_path)

    echo = model.config_echo()
    echo.update(
        {
            "train.learning_rate": repr(train_config.learning_rate),
            "train.max_epochs": str(train_config.max_epochs),
            "train.early_stop_patience": str(train_config.early_stop_patience),
            "train.lr_patience": str(train_config.lr_patience),
            "train.batch_size": str(train_config.batch_size),
            "train.seed": str(train_config.seed),
            "train.best_epoch": str(result.best_epoch),
        }
    )
    save_checkpoint(args.out, model.kind, echo, result.params)
    print(
        f"trained {model.kind}: {result.epochs_run} epochs, "
        f"best epoch {result.best_epoch} (monitor {result.best_monitor:.4f}) -> {args.out}"
    )
    return 0


def load_model(path):
    kind, echo, tensors = load_checkpoint(path)
    if kind == "ast":
        config = SpectrogramTransformer.config_from_echo(echo)
        model = SpectrogramTransformer(config, params=init_params(config, seed=0))
    elif kind == "cnn":
        config = ConvBaseline.config_from_echo(echo)
        model = ConvBaseline(config, params=init_cnn_params(config, seed=0))
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    for name, param in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != param.data.shape:
            raise CheckpointError(
                f"tensor {name!r} shape {tensors[name].shape} != expected {param.data.shape}"
            )
        param.data = tensors[name]
    return model


def cmd_predict(args) -> int:
    model = load_model(args.ckpt)
    features_dir = Path(args.features) if args.features else None
    manifest = load_manifest(args.manifest, require_audio=features_dir is None)

    def score(entry):
        values = features_for_entry(entry, features_dir)
        return ev.PredictionRow(
            sample_id=entry.sample_id,
            language=entry.language,
            provenance=entry.provenance,
            pred=model.predict_scores(values),
            label=entry.scores,
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(score, manifest.entries))
    else:
        rows = [score(e) for e in manifest.entries]

    out = Path(args.out)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=out.name, suffix=".tmp")
    os.close(fd)
    try:
        ev.write_predictions(tmp, rows)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    print(f"predicted {len(rows)} clips -> {out}")
    return 0


def _join_labels(rows: list[ev.PredictionRow], labels_manifest: Manifest) -> list[ev.PredictionRow]:
    by_id = {e.sample_id: e for e in labels_manifest.entries}
    joined = []
    for row in rows:
        entry = by_id.get(row.sample_id)
        if entry is None:
            raise CliError(f"prediction {row.sample_id!r} not present in the labels manifest")
        joined.append(
            ev.PredictionRow(row.sample_id, entry.language, entry.provenance, row.pred, entry.scores)
        )
    return joined


def cmd_calibrate(args) -> int:
    rows = _join_labels(ev.read_predictions(args.pred), load_manifest(args.labels, require_audio=False))
    dims = [d.strip() for d in args.dims.split(",")]
    for dim in dims:
        if dim not in TASKS:
            raise CliError(f"unknown dimension {dim!r}; choose from {TASKS}")
    if args.group != "language":
        raise CliError("only --group language is supported")

    groups: dict[str, list[ev.PredictionRow]] = {}
    for row in rows:
        groups.setdefault(row.language, []).append(row)

    maps: dict[tuple[str, str], cal.CalibrationMap] = {}
    for group, members in sorted(groups.items()):
        for dim in dims:
            pairs = [
                (r.pred.get(dim), r.label.get(dim))
                for r in members
                if r.pred.present(dim) and r.label.present(dim)
            ]
            if len(pairs) < 4:
                raise CliError(
                    f"group {group!r} dim {dim!r}: {len(pairs)} labeled samples, need >= 4"
                )
            pred = np.array([p for p, _ in pairs])
            subj = np.array([s for _, s in pairs])
            maps[(group, dim)] = cal.fit_calibration(pred, subj)

    out = Path(args.out)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=out.name, suffix=".tmp")
    os.close(fd)
    try:
        cal.save_calibration_maps(tmp, maps)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    print(f"fit {len(maps)} calibration map(s) -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = _join_labels(ev.read_predictions(args.pred), load_manifest(args.labels, require_audio=False))
    if args.provenance != "both":
        rows = [r for r in rows if r.provenance == args.provenance]
    if not rows:
        raise CliError("no samples left to evaluate")

    if args.calibration:
        maps = cal.load_calibration_maps(args.calibration)
        calibrated = []
        for row in rows:
            pred = row.pred.as_dict()
            for dim in TASKS:
                mapping = maps.get((row.language, dim))
                if mapping is not None and pred.get(dim) is not None:
                    pred[dim] = float(cal.apply_calibration(mapping, [pred[dim]])[0])
            calibrated.append(
                ev.PredictionRow(row.sample_id, row.language, row.provenance,
                                 type(row.pred).from_dict(pred), row.label)
            )
        rows = calibrated

    pcc_report, rmse_report = ev.evaluate(
        [r.pred for r in rows],
        [r.label for r in rows],
        [r.language for r in rows],
        reference=args.reference,
    )
    text = ev.render_report(pcc_report, args.format) + "\n" + ev.render_report(rmse_report, args.format)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        _atomic_write_text(Path(args.out), text)
        print(f"evaluated {len(rows)} samples -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:>18}: max relative error {err:.3e}")
    print(f"{'overall':>18}: max relative error {worst:.3e} (tolerance {DEFAULT_TOLERANCE:.0e})")
    return 0 if worst < DEFAULT_TOLERANCE else 1


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqatk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="compute log-mel feature caches for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for .feat files")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--normalize", action="store_true", help="apply corpus mean/var normalization")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a scorer on the manifest's train/val splits")
    p.add_argument("--model", choices=("ast", "cnn"), required=True)
    p.add_argument("--config", help="key=value text config (model + training keys)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--features", help="feature cache directory from `featurize`")
    p.add_argument("--history", help="training history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score every clip in a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--features", help="feature cache directory from `featurize`")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="fit per-group cubic score calibration")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True, help="labels manifest")
    p.add_argument("--group", default="language")
    p.add_argument("--dims", default="mos", help="comma-separated dimensions (default: mos)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="per-language PCC/RMSE tables with range rows")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True, help="labels manifest")
    p.add_argument("--calibration", help="calibration map file from `calibrate`")
    p.add_argument("--reference", default="ENG")
    p.add_argument("--provenance", choices=("subjective", "objective", "both"), default="both")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", required=True, help="report path, or - for stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ManifestError, ModelError, TrainingError, CheckpointError,
            cal.CalibrationError, ev.MetricError, fe.AudioError, fe.FeatureError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
