"""Command-line surface: featurize, make-toy, train, decode, score, corrupt,
count-params.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np
import torch

from .audio_frontend import FrameRateMode, build_mel_filterbank, extract_features
from .checkpoint import load_model, save_checkpoint
from .container import read_container, write_container
from .corruption import OverlapSpec, mix_at_snr, splice_overlap, synth_babble
from .decoding import beam_decode, format_nbest
from .errors import (
    AvsrError,
    DataError,
    ImpossibleAlignment,
    IncompatibleCheckpoint,
    InvalidLabel,
    NonFiniteGradient,
    NonFiniteLoss,
)
from .ingest import FeaturizeSettings, example_from_entry, examples_from_manifest
from .manifest import UtteranceManifest, load_manifest, resolve_path, write_manifest
from .model import (
    FULL_SCALE_BUDGET,
    AvsrModel,
    GraphemeInventory,
    ModalitySwitch,
    ModelConfig,
    count_parameters,
    full_scale_config,
)
from .toy import ToyTaskSpec, generate_corpus
from .training import DropoutPolicy, LrSchedule, TrainConfig, train
from .video_frontend import VideoFrontendConfig
from .wavio import read_wav, write_wav

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3

SWITCH_NAMES = {
    "audio": ModalitySwitch.AUDIO_ONLY,
    "video": ModalitySwitch.VIDEO_ONLY,
    "audio+video": ModalitySwitch.BOTH,
}


def _atomic_write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_json(path: str) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _require(config: Dict, field: str, where: str):
    if field not in config:
        raise DataError(f"{where}: missing required field {field!r}")
    return config[field]


def _inventory_from_name(name: str) -> GraphemeInventory:
    if name == "full":
        return GraphemeInventory.full_scale()
    return GraphemeInventory.toy(name)


# ---------------------------------------------------------------- make-toy


def cmd_make_toy(args) -> int:
    raw = _load_json(args.config)
    fields = dict(raw)
    fields.pop("config_version", None)
    if "fps" in fields:
        fields["fps"] = Fraction(str(fields["fps"]))
    for key in ("audio_ambiguous_pairs", "video_ambiguous_pairs"):
        if key in fields:
            fields[key] = tuple(tuple(p) for p in fields[key])
    try:
        spec = ToyTaskSpec(**fields)
    except TypeError as exc:
        raise DataError(f"{args.config}: {exc}") from exc
    train_utts, heldout_utts = generate_corpus(spec)

    out = args.output
    entries = []
    for split, utts in (("train", train_utts), ("heldout", heldout_utts)):
        for utt in utts:
            wav_rel = os.path.join("audio", f"{utt.utt_id}.wav")
            vid_rel = os.path.join("video", f"{utt.utt_id}.avtc")
            write_wav(os.path.join(out, wav_rel), utt.waveform)
            write_container(
                os.path.join(out, vid_rel),
                {
                    "frames": np.round(utt.video.frames * 255.0).astype(np.uint8),
                    "fps": np.array(
                        [utt.video.fps.numerator, utt.video.fps.denominator],
                        dtype=np.float64,
                    ),
                },
            )
            entries.append(
                UtteranceManifest(
                    utt_id=utt.utt_id,
                    audio_path=wav_rel,
                    transcript=utt.transcript,
                    split=split,
                    video_path=vid_rel,
                    video_fps=utt.video.fps,
                )
            )
    write_manifest(os.path.join(out, "manifest.jsonl"), entries)
    _atomic_write_text(
        os.path.join(out, "toy_spec.json"), json.dumps(raw, indent=2) + "\n"
    )
    print(f"wrote {len(entries)} utterances to {out}")
    return 0


# ---------------------------------------------------------------- featurize


def cmd_featurize(args) -> int:
    entries = load_manifest(args.manifest)
    if not entries:
        print("warning: empty manifest, nothing to do", file=sys.stderr)
        return 0
    settings = FeaturizeSettings(
        mode_kind=args.mode,
        num_mel_filters=args.num_filters,
        low_hz=args.low_hz,
        high_hz=args.high_hz,
    )
    fb = build_mel_filterbank(
        num_filters=args.num_filters, low_hz=args.low_hz, high_hz=args.high_hz
    )
    os.makedirs(args.output, exist_ok=True)

    def process(entry):
        try:
            ex = example_from_entry(entry, args.manifest, settings, fb)
            tensors = {
                "audio_features": ex.audio_features.astype(np.float32),
            }
            if ex.thumbnails is not None:
                tensors["video_frames"] = np.round(ex.thumbnails * 255).astype(np.uint8)
                tensors["fps"] = np.array(
                    [entry.video_fps.numerator, entry.video_fps.denominator],
                    dtype=np.float64,
                )
            write_container(os.path.join(args.output, f"{entry.utt_id}.avtc"), tensors)
            video_frames = ex.num_video_frames if ex.num_video_frames else ""
            return (entry.utt_id, ex.audio_features.shape[0], video_frames, "")
        except AvsrError as exc:
            return (entry.utt_id, "", "", str(exc))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(process, entries))

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["utt_id", "audio_frames", "video_frames", "error"])
    writer.writerows(rows)
    _atomic_write_text(os.path.join(args.output, "featurize_report.csv"), buf.getvalue())

    failures = [r for r in rows if r[3]]
    synced = [r for r in rows if not r[3] and r[2] != ""]
    if synced:
        deltas = [abs(r[1] - r[2]) for r in synced]
        print(
            f"featurized {len(rows) - len(failures)}/{len(rows)} utterances "
            f"(mode={args.mode}); max |audio-video| frame delta {max(deltas)}"
        )
    else:
        print(f"featurized {len(rows) - len(failures)}/{len(rows)} utterances (mode={args.mode})")
    for utt_id, _, _, err in failures:
        print(f"error: {utt_id}: {err}", file=sys.stderr)
    return DATA_ERROR if failures and len(failures) == len(rows) else 0


# ---------------------------------------------------------------- train


def _model_config_from_dict(raw: Dict, vocab_size: int, where: str) -> ModelConfig:
    fields = dict(raw)
    video = fields.pop("video", None)
    video_cfg = None
    if video is not None:
        video_cfg = VideoFrontendConfig(
            block_channels=tuple(video["block_channels"]),
            gn_groups=video.get("gn_groups", 32),
            in_channels=video.get("in_channels", 3),
            input_size=video.get("input_size", 128),
        )
    try:
        return ModelConfig(vocab_size=vocab_size, video=video_cfg, **fields)
    except TypeError as exc:
        raise DataError(f"{where}: bad model section ({exc})") from exc


def _train_config_from_dict(raw: Dict, where: str) -> TrainConfig:
    fields = dict(raw)
    schedule = LrSchedule(**fields.pop("schedule", {}))
    dropout = DropoutPolicy(**fields.pop("dropout", {}))
    switch_name = fields.pop("train_switch", "audio+video")
    if switch_name not in SWITCH_NAMES:
        raise DataError(f"{where}: unknown train_switch {switch_name!r}")
    if "multistyle_range_db" in fields:
        fields["multistyle_range_db"] = tuple(fields["multistyle_range_db"])
    try:
        return TrainConfig(
            schedule=schedule,
            dropout=dropout,
            train_switch=SWITCH_NAMES[switch_name],
            **fields,
        )
    except TypeError as exc:
        raise DataError(f"{where}: bad train section ({exc})") from exc


def cmd_train(args) -> int:
    config = _load_json(args.config)
    where = args.config
    manifest_path = resolve_path(where, _require(config, "manifest", where))
    features_raw = config.get("features", {})
    settings = FeaturizeSettings(
        mode_kind=features_raw.get("mode", "variable"),
        num_mel_filters=features_raw.get("num_mel_filters", 80),
        low_hz=features_raw.get("low_hz", 125.0),
        high_hz=features_raw.get("high_hz", 7500.0),
    )
    inventory = _inventory_from_name(_require(config, "inventory", where))
    model_cfg = _model_config_from_dict(
        _require(config, "model", where), inventory.size, where
    )
    train_cfg = _train_config_from_dict(_require(config, "train", where), where)

    entries = load_manifest(manifest_path)
    fb = build_mel_filterbank(
        num_filters=settings.num_mel_filters,
        low_hz=settings.low_hz,
        high_hz=settings.high_hz,
    )
    train_entries = [e for e in entries if e.split == "train"]
    held_entries = [e for e in entries if e.split == "heldout"]
    train_examples, errors = examples_from_manifest(
        train_entries, manifest_path, settings, fb, inventory
    )
    held_examples, held_errors = examples_from_manifest(
        held_entries, manifest_path, settings, fb, inventory
    )
    for utt_id, err in errors + held_errors:
        print(f"error: {utt_id}: {err}", file=sys.stderr)
    if not train_examples:
        raise DataError("no usable training utterances")

    model = AvsrModel(model_cfg, seed=train_cfg.seed)
    featurize_fn = None
    if train_cfg.multistyle_p > 0:
        mode = settings.mode_for(
            train_entries[0].video_fps if train_entries else None
        )

        def featurize_fn(wave, nvf):
            fs = extract_features(wave, mode, fb=fb, num_video_frames=nvf)
            return fs.frames.astype(np.float32)

    result = train(
        model, train_examples, held_examples, train_cfg, inventory,
        featurize_fn=featurize_fn,
    )
    model.load_state_dict(result.best_state)

    os.makedirs(args.output, exist_ok=True)
    extra = {
        "inventory": list(inventory.symbols),
        "features": {
            "mode": settings.mode_kind,
            "num_mel_filters": settings.num_mel_filters,
            "low_hz": settings.low_hz,
            "high_hz": settings.high_hz,
        },
        "best_step": result.best_step,
        "best_heldout_wer": result.best_wer,
    }
    save_checkpoint(os.path.join(args.output, "checkpoint.ckpt"), model, extra)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss", "lr", "heldout_wer"])
    for row in result.metrics:
        writer.writerow(
            [row.step, f"{row.loss:.6f}", f"{row.lr:.8f}",
             "" if row.heldout_wer is None else f"{row.heldout_wer:.3f}"]
        )
    _atomic_write_text(os.path.join(args.output, "metrics.csv"), buf.getvalue())
    _atomic_write_text(
        os.path.join(args.output, "config.json"), json.dumps(config, indent=2) + "\n"
    )
    print(
        f"trained {train_cfg.steps} steps; best heldout WER "
        f"{result.best_wer:.2f} at step {result.best_step}"
    )
    return 0


# ---------------------------------------------------------------- decode


def cmd_decode(args) -> int:
    model, extra = load_model(args.checkpoint)
    if "inventory" not in extra:
        raise IncompatibleCheckpoint(f"{args.checkpoint}: missing inventory metadata")
    inventory = GraphemeInventory(tuple(extra["inventory"]))
    feats_meta = extra.get("features", {})
    settings = FeaturizeSettings(
        mode_kind=feats_meta.get("mode", "variable"),
        num_mel_filters=feats_meta.get("num_mel_filters", 80),
        low_hz=feats_meta.get("low_hz", 125.0),
        high_hz=feats_meta.get("high_hz", 7500.0),
    )
    fb = build_mel_filterbank(
        num_filters=settings.num_mel_filters,
        low_hz=settings.low_hz,
        high_hz=settings.high_hz,
    )
    entries = load_manifest(args.manifest)
    if args.split != "all":
        entries = [e for e in entries if e.split == args.split]
    if not entries:
        print("warning: no utterances selected", file=sys.stderr)
        return 0
    switch = SWITCH_NAMES[args.eval_mode]
    examples, errors = examples_from_manifest(
        entries, args.manifest, settings, fb, inventory=None
    )
    nbest_lines: List[str] = []
    hyp_lines: List[str] = []
    dtype = model.config.torch_dtype()
    for ex in examples:
        audio = torch.tensor(ex.audio_features[None], dtype=dtype)
        thumbs = (
            torch.tensor(ex.thumbnails[None], dtype=dtype)
            if ex.thumbnails is not None and switch.video_on
            else None
        )
        features = model.forward_features(audio, thumbs, switch)
        enc = model.encode(features, switch)[0]
        results = beam_decode(
            enc, model, beam_width=args.beam,
            max_symbols_per_frame=args.max_symbols,
        )
        nbest_lines.extend(format_nbest(ex.utt_id, results, inventory))
        hyp_lines.append(f"{ex.utt_id}\t{inventory.decode(results[0].labels)}")
    for utt_id, err in errors:
        print(f"error: {utt_id}: {err}", file=sys.stderr)
    os.makedirs(args.output, exist_ok=True)
    _atomic_write_text(os.path.join(args.output, "nbest.tsv"), "\n".join(nbest_lines) + "\n")
    _atomic_write_text(os.path.join(args.output, "hyps.tsv"), "\n".join(hyp_lines) + "\n")
    print(f"decoded {len(examples)} utterances with beam {args.beam}")
    return DATA_ERROR if errors and not examples else 0


# ---------------------------------------------------------------- score


def _read_hyp_file(path: str) -> Dict[str, str]:
    hyps: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            hyps[parts[0]] = parts[1] if len(parts) > 1 else ""
    return hyps


def cmd_score(args) -> int:
    from .scoring import score_corpus

    entries = load_manifest(args.refs, check_paths=False)
    refs = {e.utt_id: e.transcript for e in entries}
    grid: Dict[str, Dict[str, str]] = {}
    mode_order: List[str] = []
    for spec in args.hyp:
        try:
            mode, condition, path = spec.split(":", 2)
        except ValueError:
            raise DataError(f"--hyp must be MODE:CONDITION:PATH, got {spec!r}")
        hyps = _read_hyp_file(path)
        missing = sorted(set(hyps) - set(refs))
        if missing:
            raise DataError(f"{path}: unknown utt_ids {missing[:5]}")
        utt_ids = sorted(hyps)
        report = score_corpus(
            [refs[u] for u in utt_ids], [hyps[u] for u in utt_ids], ci_seed=args.seed
        )
        cell = f"{report.wer:.1f}"
        if report.ci_halfwidth_95 is not None:
            cell += f" ± {report.ci_halfwidth_95:.1f}"
        grid.setdefault(condition, {})[mode] = cell
        if mode not in mode_order:
            mode_order.append(mode)
        print(f"{condition} / {mode}: WER {cell} ({report.num_ref_words} ref words)")

    preferred = [m for m in ("A", "A+V", "V") if m in mode_order]
    modes = preferred + [m for m in mode_order if m not in preferred]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["condition"] + modes)
    for condition, cells in grid.items():
        writer.writerow([condition] + [cells.get(m, "") for m in modes])
    _atomic_write_text(args.output, buf.getvalue())
    print(f"wrote score grid to {args.output}")
    return 0


# ---------------------------------------------------------------- corrupt


def cmd_corrupt(args) -> int:
    entries = load_manifest(args.manifest)
    if not entries:
        print("warning: empty manifest", file=sys.stderr)
        return 0
    rng = np.random.default_rng(args.seed)
    os.makedirs(os.path.join(args.output, "audio"), exist_ok=True)
    noise_pool: List = []
    if args.noise_pool:
        noise_pool = [
            read_wav(os.path.join(args.noise_pool, name))
            for name in sorted(os.listdir(args.noise_pool))
            if name.endswith(".wav")
        ]
        if not noise_pool:
            raise DataError(f"{args.noise_pool}: no .wav files")

    waves = {
        e.utt_id: read_wav(resolve_path(args.manifest, e.audio_path)) for e in entries
    }
    new_entries: List[UtteranceManifest] = []
    records: List[Dict] = []
    for entry in entries:
        wave = waves[entry.utt_id]
        record: Dict = {"utt_id": entry.utt_id, "kind": args.kind}
        if args.kind == "babble":
            if noise_pool:
                noise = noise_pool[rng.integers(0, len(noise_pool))]
            else:
                noise = synth_babble(wave.duration, rng)
            mixed = mix_at_snr(wave, noise, args.snr_db)
            out_wave = mixed.waveform
            record.update(
                snr_db=args.snr_db,
                gain=mixed.noise_gain,
                clip_rescale=mixed.rescale,
            )
        else:  # overlap
            others = [e.utt_id for e in entries if e.utt_id != entry.utt_id]
            source = entry.utt_id if not others else others[rng.integers(0, len(others))]
            position = args.position
            if position == "random":
                position = "begin" if rng.random() < 0.5 else "end"
            spliced = splice_overlap(
                wave, waves[source], OverlapSpec(position, args.duration)
            )
            out_wave = spliced.waveform
            record.update(
                position=position,
                duration_s=args.duration,
                gain=spliced.gain,
                competing_utt=source,
            )
        wav_rel = os.path.join("audio", f"{entry.utt_id}.wav")
        write_wav(os.path.join(args.output, wav_rel), out_wave)
        records.append(record)
        new_entries.append(
            UtteranceManifest(
                utt_id=entry.utt_id,
                audio_path=wav_rel,
                transcript=entry.transcript,
                split=entry.split,
                video_path=(
                    os.path.abspath(resolve_path(args.manifest, entry.video_path))
                    if entry.video_path
                    else None
                ),
                video_fps=entry.video_fps,
            )
        )
    write_manifest(os.path.join(args.output, "manifest.jsonl"), new_entries)
    _atomic_write_text(
        os.path.join(args.output, "corruption_manifest.jsonl"),
        "\n".join(json.dumps(r) for r in records) + "\n",
    )
    print(f"corrupted {len(entries)} utterances ({args.kind}) into {args.output}")
    return 0


# ---------------------------------------------------------------- count-params


def cmd_count_params(args) -> int:
    if args.config:
        raw = _load_json(args.config)
        inventory = _inventory_from_name(raw.get("inventory", "full"))
        config = _model_config_from_dict(raw["model"], inventory.size, args.config)
        reference = None
    else:
        config = full_scale_config()
        reference = FULL_SCALE_BUDGET
    rows = count_parameters(config)
    mismatches = 0
    print(f"{'Name':<16} {'Kernel Shape':<26} {'#Parameters':>12} {'Display':>9}")
    for row in rows:
        line = f"{row.name:<16} {row.kernel_shape:<26} {row.count:>12,} {row.display:>9}"
        if reference is not None:
            expected = reference.get(row.name)
            if expected is None:
                line += "  (unexpected row)"
                mismatches += 1
            elif expected != row.display:
                line += f"  DIFF vs {expected}"
                mismatches += 1
            else:
                line += "  ok"
        print(line)
    if reference is not None:
        missing = set(reference) - {r.name for r in rows}
        for name in sorted(missing):
            print(f"{name:<16} missing row, expected {reference[name]}")
            mismatches += 1
        print(f"{mismatches} diff rows")
        return 0 if mismatches == 0 else NUMERIC_ERROR
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avsr",
        description="Audio-visual transducer speech recognition, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic A/V corpus")
    p.add_argument("--config", required=True, help="toy task spec JSON")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("featurize", help="extract stacked log-mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=["fixed", "variable"], default="fixed")
    p.add_argument("--num-filters", type=int, default=80)
    p.add_argument("--low-hz", type=float, default=125.0)
    p.add_argument("--high-hz", type=float, default=7500.0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-decode a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-symbols", type=int, default=10)
    p.add_argument("--split", choices=["train", "heldout", "test", "all"], default="all")
    p.add_argument(
        "--eval-mode", choices=list(SWITCH_NAMES), default="audio+video"
    )
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER grids from hypothesis files")
    p.add_argument("--refs", required=True, help="manifest with reference transcripts")
    p.add_argument(
        "--hyp", action="append", required=True,
        help="MODE:CONDITION:path of utt_id<TAB>text lines",
    )
    p.add_argument("--output", required=True, help="grid CSV path")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("corrupt", help="write corrupted copies of a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kind", choices=["babble", "overlap"], required=True)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--position", choices=["begin", "end", "random"], default="random")
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--noise-pool", help="directory of noise WAVs (else synthetic babble)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("count-params", help="parameter ledger for a model config")
    p.add_argument("--config", help="JSON with model section (default: full scale)")
    p.set_defaults(func=cmd_count_params)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (NonFiniteLoss, NonFiniteGradient, ImpossibleAlignment) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (AvsrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
