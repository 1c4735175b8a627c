"""Command-line entry point.

Subcommands: synth, train, evaluate, report, gradcheck, export-spectrograms.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 invariant or
training failure.  Flags override a ``--config`` JSON file, which overrides
built-in defaults.  Outputs embed a config fingerprint, never timestamps, so
identical invocations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from sleepfuse import dsp, fusion, synthgen
from sleepfuse.encoders import EncoderConfig, load_external_embeddings
from sleepfuse.errors import ConfigError, DataError, InvariantError, SleepfuseError
from sleepfuse.experiment import (
    Hyperparameters,
    evaluate,
    extract_all_features,
    plan_folds,
    render_report,
    run_crossval,
    sweep,
)
from sleepfuse.ingest import load_and_segment, read_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    data errors, so remap to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _setting(args, config: dict, name: str, default):
    """Flag > config file > default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _mel_config(args, config: dict) -> dsp.MelConfig:
    return dsp.MelConfig(
        target_rate_hz=int(_setting(args, config, "mel-rate", 16_000)),
        n_mels=int(_setting(args, config, "mel-bins", 128)),
        window_length_s=float(_setting(args, config, "mel-window-s", 0.025)),
        hop_length_s=float(_setting(args, config, "mel-hop-s", 0.010)),
        fft_size=_setting(args, config, "mel-fft", None),
        f_min_hz=float(_setting(args, config, "mel-fmin", 0.0)),
        f_max_hz=float(_setting(args, config, "mel-fmax", 8000.0)),
    )


def _encoder_config(args, config: dict) -> EncoderConfig:
    return EncoderConfig(
        model_dim=int(_setting(args, config, "model-dim", 32)),
        head_count=int(_setting(args, config, "heads", 4)),
        block_count=int(_setting(args, config, "blocks", 2)),
        embedding_dim=int(_setting(args, config, "embedding-dim", 64)),
        audio_patch_frames=int(_setting(args, config, "audio-patch-frames", 100)),
        video_frame_stride=int(_setting(args, config, "video-stride", 10)),
    )


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = _load_config_file(args.config)
    patients = int(_setting(args, config, "patients", 0))
    if patients < 1:
        raise ConfigError("--patients must be a positive integer")
    noise = float(_setting(args, config, "noise", 0.3))
    seed = int(_setting(args, config, "seed", 0))
    profile_name = _setting(args, config, "profile", "default")
    if profile_name == "default":
        profile = synthgen.default_profile(noise_level=noise, seed=seed)
    elif profile_name == "complementary":
        profile = synthgen.complementary_profile(noise_level=noise, seed=seed)
    else:
        raise ConfigError(f"unknown profile {profile_name!r}")
    manifest = synthgen.generate_cohort(
        patients,
        profile,
        seed=seed,
        out_dir=args.out,
        epochs_per_patient=int(_setting(args, config, "epochs-per-patient", 780)),
        rate512_fraction=float(
            _setting(args, config, "rate512-fraction", synthgen.DEFAULT_RATE512_FRACTION)
        ),
    )
    print(f"wrote cohort manifest: {manifest}")
    return EXIT_OK


def _load_stores(args):
    eog_store = psm_store = None
    if getattr(args, "eog_embeddings", None):
        eog_store = load_external_embeddings(args.eog_embeddings)
        if eog_store.modality != "eog_audio":
            raise ConfigError(
                f"{args.eog_embeddings} holds {eog_store.modality} embeddings, "
                "expected eog_audio"
            )
    if getattr(args, "psm_embeddings", None):
        psm_store = load_external_embeddings(args.psm_embeddings)
        if psm_store.modality != "psm_video":
            raise ConfigError(
                f"{args.psm_embeddings} holds {psm_store.modality} embeddings, "
                "expected psm_video"
            )
    return eog_store, psm_store


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    mode = _setting(args, config, "mode", "fused")
    regime = _setting(args, config, "regime", "fine_tune")
    lr_grid = [float(v) for v in _setting(args, config, "lr", [1.4e-7])]
    wd_grid = [float(v) for v in _setting(args, config, "wd", [0.005])]
    epochs_grid = [int(v) for v in _setting(args, config, "epochs", [6])]
    batch = int(_setting(args, config, "batch", 12))
    seed = int(_setting(args, config, "seed", 0))
    fold_seed = int(_setting(args, config, "fold-seed", 0))
    folds = int(_setting(args, config, "folds", 5))
    threads = int(_setting(args, config, "threads", os.cpu_count() or 1))

    # consistency before I/O: the combination is invalid regardless of content
    if regime == "fine_tune" and (args.eog_embeddings or args.psm_embeddings):
        raise ConfigError(
            "--regime fine_tune cannot be combined with external embeddings; "
            "the external path supports linear_probe only"
        )
    eog_store, psm_store = _load_stores(args)

    mel_cfg = _mel_config(args, config)
    encoder_cfg = _encoder_config(args, config)
    out_dir = Path(args.out).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = read_manifest(Path(args.data).resolve())
    records, load_report = load_and_segment(manifest)
    if load_report.total_dropped:
        logger.warning("dropped %d epoch(s) during load", load_report.total_dropped)
    plan = plan_folds(sorted({r.patient_id for r in records}), k=folds, seed=fold_seed)

    base_hp = Hyperparameters(
        initial_lr=lr_grid[0],
        weight_decay=wd_grid[0],
        batch_size=batch,
        epochs=epochs_grid[0],
        seed=seed,
        mode=mode,
        regime=regime,
    )
    kwargs = dict(
        encoder_cfg=encoder_cfg,
        mel_cfg=mel_cfg,
        eog_store=eog_store,
        psm_store=psm_store,
        threads=threads,
    )
    swept = len(lr_grid) * len(wd_grid) * len(epochs_grid) > 1
    if swept:
        best, all_results = sweep(
            records, base_hp, plan, lr_grid, wd_grid, epochs_grid, **kwargs
        )
        result = best
    else:
        result = run_crossval(records, base_hp, plan, **kwargs)
        all_results = [result]

    doc = result.to_report_doc(label=args.label)
    if swept:
        doc["sweep"] = [
            {
                "initial_lr": r.config["initial_lr"],
                "weight_decay": r.config["weight_decay"],
                "epochs": r.config["epochs"],
                "mean_accuracy": r.mean_accuracy,
                "mean_macro_f1": r.mean_macro_f1,
                "fingerprint": r.fingerprint,
            }
            for r in all_results
        ]
    _write_json(out_dir / "report.json", doc)
    text = render_report([doc], include_reference=not args.no_reference)
    (out_dir / "report.txt").write_text(text)
    for i, model in enumerate(result.models):
        meta = fusion.model_meta(model, encoder_cfg, mel_cfg, result.fingerprint)
        fusion.save_model(out_dir / f"fold{i}.ckpt", model, meta)
    print(text)
    print(f"report: {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    eog_store, psm_store = _load_stores(args)
    model, meta = fusion.load_model(
        Path(args.checkpoint).resolve(), eog_store=eog_store, psm_store=psm_store
    )
    mel_cfg = dsp.MelConfig(**meta["mel"])
    encoder_cfg = EncoderConfig(**meta["encoder"])
    manifest = read_manifest(Path(args.data).resolve())
    records, _ = load_and_segment(manifest)
    if not records:
        raise DataError("no epochs to evaluate")
    hp = Hyperparameters(mode=meta["mode"], regime=meta["regime"])
    features = extract_all_features(
        records, hp, encoder_cfg, mel_cfg, eog_store, psm_store,
        threads=int(args.threads or os.cpu_count() or 1),
    )
    report = evaluate(model, sorted(features.values(), key=lambda f: f.key))
    doc = {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "config_hash": meta.get("config_hash"),
        **report.to_dict(),
    }
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    docs = []
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"report file not found: {p}")
        try:
            docs.append(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: invalid report JSON ({exc})") from exc
    if args.format == "json":
        out = json.dumps(docs, indent=2, sort_keys=True) + "\n"
    else:
        out = render_report(docs, include_reference=not args.no_reference)
    if args.out:
        Path(args.out).write_text(out)
    print(out, end="" if out.endswith("\n") else "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from sleepfuse.nn.gradcheck import run_gradcheck_suite

    results = run_gradcheck_suite(
        seeds=args.seeds, tolerance=args.tolerance, corrupt=args.corrupt
    )
    failed = False
    for case, worst in sorted(results.items()):
        status = "ok" if worst <= args.tolerance else "FAIL"
        if worst > args.tolerance:
            failed = True
        print(f"{case:<16} max relative error {worst:.3e}  [{status}]")
    if failed:
        raise InvariantError("gradient check failed")
    return EXIT_OK


def cmd_export_spectrograms(args) -> int:
    config = _load_config_file(args.config)
    mel_cfg = _mel_config(args, config)
    manifest = read_manifest(Path(args.data).resolve())
    records, _ = load_and_segment(manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    limit = args.limit if args.limit and args.limit > 0 else len(records)
    written = 0
    for epoch in records:
        if written >= limit:
            break
        spec = dsp.log_mel_spectrogram(
            epoch.eog.astype(np.float64), epoch.native_eog_rate_hz, mel_cfg
        )
        name = f"{epoch.patient_id}_{epoch.epoch_index:05d}.melspec"
        dsp.write_spectrogram(out_dir / name, spec)
        written += 1
    print(f"wrote {written} spectrogram dump(s) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring


def _add_mel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mel-rate", type=int, help="spectrogram target sample rate (Hz)")
    p.add_argument("--mel-bins", type=int, help="number of mel bins")
    p.add_argument("--mel-window-s", type=float, help="STFT window length (s)")
    p.add_argument("--mel-hop-s", type=float, help="STFT hop length (s)")
    p.add_argument("--mel-fft", type=int, help="FFT size (default: next pow2 of window)")
    p.add_argument("--mel-fmin", type=float, help="lowest mel filter frequency (Hz)")
    p.add_argument("--mel-fmax", type=float, help="highest mel filter frequency (Hz)")


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model-dim", type=int, help="transformer width")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--blocks", type=int, help="transformer blocks")
    p.add_argument("--embedding-dim", type=int, help="per-modality embedding size")
    p.add_argument("--audio-patch-frames", type=int, help="mel frames per audio token")
    p.add_argument("--video-stride", type=int, help="PSM frame subsampling stride")


def build_parser() -> _Parser:
    parser = _Parser(prog="sleepfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, help="number of patients (required)")
    p.add_argument("--epochs-per-patient", type=int, help="30 s epochs per patient (default 780)")
    p.add_argument("--seed", type=int, help="generator seed (default 0)")
    p.add_argument("--noise", type=float, help="noise level (default 0.3)")
    p.add_argument("--profile", choices=["default", "complementary"], help="signature profile")
    p.add_argument("--rate512-fraction", type=float, help="fraction of 512 Hz patients")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="patient-grouped cross-validated training")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["fused", "eog_only", "psm_only"])
    p.add_argument("--regime", choices=["linear_probe", "fine_tune"])
    p.add_argument("--lr", type=float, nargs="+", help="learning rate(s); >1 value sweeps")
    p.add_argument("--wd", type=float, nargs="+", help="weight decay value(s)")
    p.add_argument("--epochs", type=int, nargs="+", help="training epoch count(s)")
    p.add_argument("--batch", type=int, help="mini-batch size (default 12)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--fold-seed", type=int, help="fold assignment seed (default 0)")
    p.add_argument("--folds", type=int, help="number of folds (default 5)")
    p.add_argument("--eog-embeddings", help="SFEB exchange file for the EOG modality")
    p.add_argument("--psm-embeddings", help="SFEB exchange file for the PSM modality")
    p.add_argument("--threads", type=int, help="fold/feature parallelism (1 = serial)")
    p.add_argument("--label", help="report row label")
    p.add_argument("--no-reference", action="store_true", help="omit published reference rows")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_mel_flags(p)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--eog-embeddings", help="SFEB exchange file for the EOG modality")
    p.add_argument("--psm-embeddings", help="SFEB exchange file for the PSM modality")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="write the evaluation JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render comparison tables from report JSON files")
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.add_argument("--no-reference", action="store_true", help="omit published reference rows")
    p.add_argument("--out", help="also write the output here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20, help="random seeds per op (default 20)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", help="negative-control hook: double the analytic "
                   "gradients of the named case and expect failure")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-spectrograms", help="dump log-mel spectrograms as flat binaries")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--limit", type=int, help="cap the number of dumped epochs")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_mel_flags(p)
    p.set_defaults(func=cmd_export_spectrograms)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except SleepfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
