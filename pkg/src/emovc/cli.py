"""Command-line entry point.

One subcommand per pipeline stage: ``prepare`` (manifest validation and
splits), ``train-vc``, ``train-emo-stage1``, ``train-emo-stage2``,
``convert``, ``eval``, ``diagnose-leakage``, and ``embed``.  Every run
writes a ``run.json`` provenance record (config hash, seed, checkpoint
lineage) with no timestamps, so reruns with identical inputs reproduce
identical artifacts.

Exit codes: 0 success, 1 runtime failure, 2 usage/unknown subcommand,
3 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .audio_frontend import (
    FrontendError,
    MelConfig,
    extract_f0,
    load_and_resample,
    mel_spectrogram,
    normalize_f0,
)
from .data_ingest import (
    parse_manifest,
    split_records,
    write_split_assignments,
)
from .diagnostics import run_leakage_diagnostic
from .emotion_embedder import (
    extract_embedding,
    load_extractor,
    train_stage1_emotion_conversion,
    train_stage2_classifier,
)
from .evaluation import (
    EvalAdapters,
    evaluate_pairs,
    load_conversion_results,
    train_svm_classifier,
    utterance_features,
    write_report_csv,
    write_report_json,
)
from .losses import LossError
from .networks import model_from_checkpoint
from .vc_trainer import (
    ConfigError,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    run_training,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


# --------------------------------------------------------------------------
# config documents and provenance


def load_config_file(path: str | Path) -> dict:
    """Parse a JSON or YAML config document into a plain dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
    else:
        import yaml

        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML config: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    return doc


def build_configs(
    config_path: str | Path | None, seed: int | None, overrides: dict | None = None
) -> tuple[TrainConfig, MelConfig]:
    """TrainConfig + MelConfig from an optional config file plus overrides."""
    doc = load_config_file(config_path) if config_path else {}
    unknown = set(doc) - {"train", "mel"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    train_doc = dict(doc.get("train", {}))
    if seed is not None:
        train_doc["seed"] = seed
    for key, value in (overrides or {}).items():
        train_doc[key] = value
    try:
        cfg = config_from_dict(train_doc)
    except LossError as exc:
        raise ConfigError(str(exc)) from exc

    mel_doc = doc.get("mel", {})
    try:
        mel_cfg = MelConfig(**mel_doc)
    except TypeError as exc:
        raise ConfigError(f"invalid mel config: {exc}") from exc
    return cfg, mel_cfg


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()


def write_provenance(
    out_dir: str | Path,
    command: str,
    seed: int | None,
    config_payload: dict,
    lineage: dict,
    outputs: list[str],
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": "emovc",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": _config_hash(config_payload),
        "config": config_payload,
        "checkpoint_lineage": lineage,
        "outputs": sorted(outputs),
    }
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# subcommand handlers


def _cmd_prepare(args) -> int:
    records = parse_manifest(args.manifest)
    if not records:
        print("manifest is empty; nothing to prepare")
        return EXIT_OK
    seed = args.seed if args.seed is not None else 0
    records = split_records(records, seed)
    splits_path = write_split_assignments(records, args.manifest)
    counts = {name: 0 for name in ("train", "val", "test")}
    for rec in records:
        counts[rec.split] += 1
    speakers = sorted({rec.speaker.label for rec in records})
    print(
        f"{len(records)} utterances, {len(speakers)} speakers; "
        f"splits train={counts['train']} val={counts['val']} test={counts['test']}"
    )
    out_dir = args.out or Path(args.manifest).parent
    write_provenance(
        out_dir,
        "prepare",
        seed,
        {"manifest": str(args.manifest)},
        {},
        [str(splits_path)],
    )
    return EXIT_OK


def _train_command(args, command: str) -> int:
    overrides: dict = {}
    if command == "train-vc" and args.ablate:
        if "style" in args.ablate:
            overrides["style_loss_mode"] = "vanilla"
    cfg, mel_cfg = build_configs(args.config, args.seed, overrides)
    if command == "train-vc" and args.ablate and "demo" in args.ablate:
        from dataclasses import replace

        cfg = replace(cfg, weights=replace(cfg.weights, demo=0.0))
    if args.out is None:
        raise ConfigError(f"{command} requires --out")

    if command == "train-vc":
        ckpts = run_training(
            args.manifest, cfg, args.out, mel_cfg=mel_cfg, resume_from=args.resume
        )
    else:
        ckpts = train_stage1_emotion_conversion(args.manifest, cfg, args.out, mel_cfg=mel_cfg)

    write_provenance(
        args.out,
        command,
        cfg.seed,
        {"train": config_to_dict(cfg), "mel": asdict(mel_cfg)},
        {
            "resume_from": str(args.resume) if getattr(args, "resume", None) else None,
            "final": str(ckpts.final),
        },
        [str(ckpts.final), str(ckpts.log_path), *(str(p) for p in ckpts.periodic)],
    )
    print(f"final checkpoint: {ckpts.final}")
    return EXIT_OK


def _cmd_train_stage2(args) -> int:
    cfg, _ = build_configs(args.config, args.seed)
    if args.out is None:
        raise ConfigError("train-emo-stage2 requires --out")
    out_dir = Path(args.out)
    extractor_path = out_dir / "c_emo.pt"
    train_stage2_classifier(args.stage1, args.manifest, cfg, out_path=extractor_path)
    write_provenance(
        out_dir,
        "train-emo-stage2",
        cfg.seed,
        {"train": config_to_dict(cfg)},
        {"stage1": str(args.stage1), "extractor": str(extractor_path)},
        [str(extractor_path)],
    )
    print(f"emotion extractor: {extractor_path}")
    return EXIT_OK


def _resolve_domain(label: str, domain_labels: tuple[str, ...], num_domains: int) -> int:
    if label in domain_labels:
        return domain_labels.index(label)
    if label.isdigit() and int(label) < num_domains:
        return int(label)
    known = ", ".join(domain_labels) if domain_labels else f"indices 0..{num_domains - 1}"
    raise ConfigError(f"unknown target speaker {label!r}; known: {known}")


def _cmd_convert(args) -> int:
    model, mel_cfg, _, _ = model_from_checkpoint(args.ckpt)
    model.eval()
    seed = args.seed if args.seed is not None else 0
    domain = _resolve_domain(args.target_speaker, model.arch.domain_labels, model.arch.num_domains)

    wave = load_and_resample(args.src)
    mel = mel_spectrogram(wave, mel_cfg).values.astype(np.float32)
    contour = extract_f0(wave, mel_cfg)
    if mel.shape[0] < model.arch.min_frames:
        raise FrontendError(
            f"source too short: {mel.shape[0]} frames < minimum {model.arch.min_frames}"
        )
    f0n = normalize_f0(contour).astype(np.float32)

    with torch.no_grad():
        if args.ref:
            ref_wave = load_and_resample(args.ref)
            ref_mel = mel_spectrogram(ref_wave, mel_cfg).values.astype(np.float32)
            style = model.style_encode(torch.from_numpy(ref_mel).unsqueeze(0), domain)
        else:
            gen = torch.Generator().manual_seed(seed)
            z = torch.randn(1, model.arch.latent_dim, generator=gen)
            style = model.map_style(z, domain)
        converted = model.generate(
            torch.from_numpy(mel).unsqueeze(0),
            torch.from_numpy(f0n).unsqueeze(0),
            style,
        )

    out_path = Path(args.out) if args.out else Path(f"{Path(args.src).stem}_converted.npz")
    if out_path.suffix != ".npz":
        out_path = out_path / f"{Path(args.src).stem}_converted.npz"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        out_path,
        converted_mel=converted.squeeze(0).numpy().astype(np.float32),
        source_mel=mel,
        source_f0_hz=contour.hz,
        source_voiced=contour.voiced,
    )
    write_provenance(
        out_path.parent,
        "convert",
        seed,
        {
            "ckpt": str(args.ckpt),
            "src": str(args.src),
            "target_speaker": args.target_speaker,
            "ref": str(args.ref) if args.ref else None,
        },
        {"generator": str(args.ckpt)},
        [str(out_path)],
    )
    print(f"converted mel: {out_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    results = load_conversion_results(args.pairs)
    adapters = EvalAdapters()
    if args.emo_ckpt:
        adapters.emotion_extractor = load_extractor(args.emo_ckpt)

    labeled = [
        r for r in results if r.source_emotion is not None and r.source_mel is not None
    ]
    classes = {r.source_emotion for r in labeled}
    if len(classes) >= 2 and all(
        sum(1 for r in labeled if r.source_emotion == c) >= 2 for c in classes
    ):
        feats = np.stack(
            [utterance_features(r.source_mel, r.source_f0) for r in labeled]
        )
        adapters.svm = train_svm_classifier(feats, [r.source_emotion for r in labeled])
    else:
        logger.info("not enough labeled sources to fit the emotion classifier; skipping")

    report = evaluate_pairs(results, adapters)
    out_json = Path(args.out) if args.out else Path(args.pairs) / "report.json"
    if out_json.suffix != ".json":
        out_json = out_json / "report.json"
    write_report_json(report, out_json)
    out_csv = out_json.with_suffix(".csv")
    write_report_csv(report, out_csv)
    write_provenance(
        out_json.parent,
        "eval",
        args.seed,
        {"pairs": str(args.pairs), "emo_ckpt": str(args.emo_ckpt) if args.emo_ckpt else None},
        {"emotion_extractor": str(args.emo_ckpt) if args.emo_ckpt else None},
        [str(out_json), str(out_csv)],
    )
    all_group = report.groups["All"]
    print(f"evaluated {all_group['count']} pairs -> {out_json}")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    if args.out is None:
        raise ConfigError("diagnose-leakage requires --out")
    seed = args.seed if args.seed is not None else 0
    scores = run_leakage_diagnostic(
        args.ckpt, args.manifest, args.out, seed=seed, perplexity=args.perplexity
    )
    write_provenance(
        args.out,
        "diagnose-leakage",
        seed,
        {"ckpt": str(args.ckpt), "manifest": str(args.manifest), "perplexity": args.perplexity},
        {"style_encoder": str(args.ckpt)},
        ["embeddings.json", "layout.csv", "scatter.svg", "leakage.json"],
    )
    print(
        f"by_emotion={scores['by_emotion']:.4f} by_speaker={scores['by_speaker']:.4f} "
        f"leakage={'YES' if scores['leakage_flag'] else 'no'}"
    )
    return EXIT_OK


def _load_mel_input(path: Path, mel_cfg: MelConfig) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if path.suffix == ".npz":
        data = np.load(path, allow_pickle=False)
        for key in ("mel", "converted_mel", "values"):
            if key in data:
                return data[key]
        raise ConfigError(f"{path}: no mel array under keys mel/converted_mel/values")
    wave = load_and_resample(path)
    return mel_spectrogram(wave, mel_cfg).values


def _cmd_embed(args) -> int:
    clf = load_extractor(args.ckpt)
    mel = _load_mel_input(Path(args.infile), clf.mel_cfg)
    vec = extract_embedding(mel.astype(np.float32), clf)
    out_path = Path(args.out) if args.out else Path(args.infile).with_suffix(".vec.json")
    if out_path.suffix != ".json":
        out_path = out_path / (Path(args.infile).stem + ".vec.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps([float(v) for v in vec]) + "\n", encoding="utf-8")
    write_provenance(
        out_path.parent,
        "embed",
        args.seed,
        {"ckpt": str(args.ckpt), "infile": str(args.infile)},
        {"emotion_extractor": str(args.ckpt)},
        [str(out_path)],
    )
    print(f"embedding ({len(vec)} values): {out_path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="JSON/YAML config file")
    common.add_argument("--out", default=None, help="output file or directory")

    parser = argparse.ArgumentParser(
        prog="emovc",
        description="Emotion-preserving any-to-many voice conversion toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"emovc {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("prepare", parents=[common], help="validate a manifest and write splits")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train-vc", parents=[common], help="train the conversion networks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ablate", action="append", choices=["demo", "style"], default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser(
        "train-emo-stage1", parents=[common], help="stage I: emotion-domain conversion training"
    )
    p.add_argument("--manifest", required=True)

    p = sub.add_parser(
        "train-emo-stage2", parents=[common], help="stage II: train the classification head"
    )
    p.add_argument("--stage1", required=True, help="stage-I checkpoint")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("convert", parents=[common], help="convert one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--target-speaker", required=True)
    p.add_argument("--ref", default=None, help="reference utterance for the style encoder")

    p = sub.add_parser("eval", parents=[common], help="score a directory of conversions")
    p.add_argument("--pairs", required=True)
    p.add_argument("--emo-ckpt", default=None, help="emotion extractor checkpoint")

    p = sub.add_parser(
        "diagnose-leakage", parents=[common], help="emotion-leakage analysis of style embeddings"
    )
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--perplexity", type=float, default=15.0)

    p = sub.add_parser("embed", parents=[common], help="extract one emotion embedding")
    p.add_argument("--ckpt", required=True, help="emotion extractor checkpoint")
    p.add_argument("--in", dest="infile", required=True, help="wav/flac/npy/npz input")

    return parser


_HANDLERS = {
    "prepare": _cmd_prepare,
    "train-vc": lambda args: _train_command(args, "train-vc"),
    "train-emo-stage1": lambda args: _train_command(args, "train-emo-stage1"),
    "train-emo-stage2": _cmd_train_stage2,
    "convert": _cmd_convert,
    "eval": _cmd_eval,
    "diagnose-leakage": _cmd_diagnose,
    "embed": _cmd_embed,
}


def dispatch(argv: list[str]) -> int:
    """Route one invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # categorized runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
