"""Command-line entry point: ``autotune <subcommand> ...``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime errors, which are reported as a single line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dsp, plots
from .audio_io import AudioBuffer, AudioError, read_wav, write_wav
from .baseline import snap_correction, track_f0
from .dataset import (
    AnnotationError,
    PreparedSong,
    load_annotations,
    load_boundaries,
    mix_stems,
    prepare_song,
    split_corpus,
    vocal_segments,
)
from .dsp import ACCOMP_CQT, VOCAL_CQT, CqtParams, FeatureMatrix
from .nn import (
    CheckpointError,
    DivergenceError,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    self_check,
)
from .trainer import TrainConfig, evaluate, train, write_metrics_csv
from .tuner import (
    constant_runs,
    predict_corrections,
    read_corrections_csv,
    render_corrected,
    smooth_per_note,
    write_corrections_csv,
)

log = logging.getLogger("autotune")

GRADCHECK_TOLERANCE = 1e-4
MANIFEST = "manifest.json"
SONGS_DIR = "songs"
ACCOMP_STEMS = ("bass", "drums", "other")


class UsageError(Exception):
    """Bad arguments or configuration; exit status 2."""


# ---------------------------------------------------------------- config

def _cqt_from(d: dict, default: CqtParams) -> CqtParams:
    unknown = set(d) - {f.name for f in fields(CqtParams)}
    if unknown:
        raise UsageError(f"unknown CQT keys: {', '.join(sorted(unknown))}")
    return replace(default, **d)


@dataclass
class RunConfig:
    vocal_cqt: CqtParams = VOCAL_CQT
    accomp_cqt: CqtParams = ACCOMP_CQT
    hidden_sizes: tuple = (128, 128)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    seed: int = 0
    convention: str = "correction"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls()
        if "vocal_cqt" in d:
            cfg.vocal_cqt = _cqt_from(d["vocal_cqt"], VOCAL_CQT)
        if "accomp_cqt" in d:
            cfg.accomp_cqt = _cqt_from(d["accomp_cqt"], ACCOMP_CQT)
        if "hidden_sizes" in d:
            cfg.hidden_sizes = tuple(int(h) for h in d["hidden_sizes"])
        if "train" in d:
            tr = dict(d["train"])
            unknown = set(tr) - {f.name for f in fields(TrainConfig)}
            if unknown:
                raise UsageError(f"unknown train keys: {', '.join(sorted(unknown))}")
            if "seq_len_range" in tr:
                tr["seq_len_range"] = tuple(tr["seq_len_range"])
            cfg.train = TrainConfig(**tr)
        for key in ("manifest", "seed", "convention"):
            if key in d:
                setattr(cfg, key, d[key])
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        try:
            return cls.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "vocal_cqt": vars(self.vocal_cqt).copy(),
            "accomp_cqt": vars(self.accomp_cqt).copy(),
            "hidden_sizes": list(self.hidden_sizes),
            "train": self.train.to_dict(),
            "manifest": self.manifest,
            "seed": self.seed,
            "convention": self.convention,
        }

    def resolved(self) -> "RunConfig":
        """Copy whose train section carries the top-level seed and convention."""
        cfg = replace(self, train=replace(self.train, seed=int(self.seed), convention=self.convention))
        return cfg

    def validate(self) -> None:
        try:
            self.vocal_cqt.validate()
            self.accomp_cqt.validate()
            self.model_config()
            self.resolved().train.validate()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        if self.vocal_cqt.hop != self.accomp_cqt.hop or self.vocal_cqt.sample_rate != self.accomp_cqt.sample_rate:
            raise UsageError("vocal and accompaniment CQTs must share hop and sample rate")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocal_cqt.n_bins + self.accomp_cqt.n_bins, self.hidden_sizes)

    def hash(self) -> str:
        """Digest of every setting that changes what a trained model means at inference."""
        key = {
            "vocal_cqt": vars(self.vocal_cqt),
            "accomp_cqt": vars(self.accomp_cqt),
            "hidden_sizes": list(self.hidden_sizes),
            "seq_len": self.train.seq_len,
            "stride": self.train.stride,
            "convention": self.convention,
        }
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def config_sidecar(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".json")


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "checkpoint", None) and config_sidecar(args.checkpoint).exists():
        cfg = RunConfig.load(config_sidecar(args.checkpoint))
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "convention", None):
        cfg.convention = args.convention
    if getattr(args, "hidden", None):
        cfg.hidden_sizes = args.hidden
    overrides = {k: getattr(args, k) for k in ("seq_len", "lr", "max_steps", "eval_interval")
                 if getattr(args, k, None) is not None}
    if overrides:
        cfg.train = replace(cfg.train, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers

def _threads() -> int:
    raw = os.environ.get("AUTOTUNE_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AUTOTUNE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"AUTOTUNE_THREADS must be a positive integer, got {raw!r}")
    return n


def _song_stems(song_dir: Path) -> dict:
    stems = {"vocals": song_dir / "vocals.wav"}
    if (song_dir / "accompaniment.wav").exists():
        stems["accompaniment"] = song_dir / "accompaniment.wav"
    else:
        for name in ACCOMP_STEMS:
            stems[name] = song_dir / f"{name}.wav"
    missing = [str(p) for p in stems.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing stems: {', '.join(missing)}")
    return stems


def _accompaniment(stems: dict) -> AudioBuffer:
    if "accompaniment" in stems:
        return read_wav(stems["accompaniment"])
    return mix_stems(*(read_wav(stems[name]) for name in ACCOMP_STEMS))


def _prepare_one(job) -> tuple[str, int, int]:
    song_id, stems, regions, boundaries, out_dir, cfg_dict = job
    cfg = RunConfig.from_dict(cfg_dict)
    song = prepare_song(song_id, read_wav(stems["vocals"]), _accompaniment(stems), regions, boundaries,
                        vocal_params=cfg.vocal_cqt, accomp_params=cfg.accomp_cqt)
    song.save(out_dir)
    return song_id, song.n_frames, len(song.segments)


def _load_manifest(corpus) -> tuple[Path, dict]:
    root = Path(corpus)
    path = root / MANIFEST if root.is_dir() else root
    try:
        return path.parent, json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc.strerror}") from None


def _corpus_songs(corpus, which: str) -> list[PreparedSong]:
    root, manifest = _load_manifest(corpus)
    by_id = {s["song_id"]: s for s in manifest["songs"]}
    split = manifest.get("split")
    if which == "all" or split is None:
        ids = list(by_id)
    else:
        ids = split[which]
    return [PreparedSong.load(root / by_id[i]["cache"]) for i in ids]


def _corpus_path(args, cfg: RunConfig):
    corpus = args.corpus or cfg.manifest
    if not corpus:
        raise UsageError("no corpus given (use --corpus or the config's manifest)")
    return corpus


def _song_features(args, cfg: RunConfig):
    """Stacked features, segments and vocals for ``predict``."""
    if args.song_dir:
        song = PreparedSong.load(args.song_dir)
        return song.stacked(), song.segments
    if not (args.vocals and args.accompaniment):
        raise UsageError("predict needs --song-dir or both --vocals and --accompaniment")
    vocals = read_wav(args.vocals)
    accomp = read_wav(args.accompaniment)
    rate = cfg.vocal_cqt.sample_rate
    if vocals.sample_rate != rate:
        vocals = dsp.resample(vocals, rate)
    if accomp.sample_rate != rate:
        accomp = dsp.resample(accomp, rate)
    if len(vocals) != len(accomp):
        raise dsp.AlignmentError(f"vocals have {len(vocals)} samples, accompaniment {len(accomp)}")
    voc = dsp.cqt_magnitude(vocals, cfg.vocal_cqt)
    acc = dsp.cqt_magnitude(accomp, cfg.accomp_cqt)
    ref = float(max(voc.max(initial=0.0), acc.max(initial=0.0)))
    feats = dsp.stack_features(
        FeatureMatrix(dsp.compress_db(voc, ref), cfg.vocal_cqt.hop, rate),
        FeatureMatrix(dsp.compress_db(acc, ref), cfg.accomp_cqt.hop, rate),
    )
    return feats, vocal_segments(vocals, feats.n_frames)


def _load_matching_checkpoint(path, cfg: RunConfig):
    ckpt = load_checkpoint(path)
    if ckpt.config_hash != cfg.hash():
        raise CheckpointError(
            f"{path} was trained under config {ckpt.config_hash or '<none>'}, current config is {cfg.hash()}; "
            "pass the training config with --config"
        )
    return ckpt


# ---------------------------------------------------------------- subcommands

def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    stems_root = Path(args.stems)
    if not stems_root.is_dir():
        raise FileNotFoundError(f"stems directory {stems_root} does not exist")
    song_dirs = sorted(p for p in stems_root.iterdir() if p.is_dir())
    regions = {}
    if args.annotations:
        for r in load_annotations(args.annotations):
            regions.setdefault(r.song_id, []).append(r)
    boundaries = load_boundaries(args.boundaries) if args.boundaries else {}
    out = Path(args.out)
    (out / SONGS_DIR).mkdir(parents=True, exist_ok=True)

    jobs, entries = [], []
    for d in song_dirs:
        song_id = d.name
        if args.annotations and song_id not in regions:
            log.warning("%s: no annotated regions, skipped", song_id)
            continue
        stems = _song_stems(d)
        cache = Path(SONGS_DIR) / song_id
        jobs.append((song_id, stems, regions.get(song_id), boundaries.get(song_id), out / cache, cfg.to_dict()))
        entries.append({"song_id": song_id, "stems": {k: str(v.resolve()) for k, v in stems.items()}, "cache": str(cache)})
    if not jobs:
        raise ValueError(f"no songs to prepare under {stems_root}")
    if not 0 <= args.n_test < len(jobs):
        raise UsageError(f"--n-test {args.n_test} must be below the number of songs ({len(jobs)})")

    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_prepare_one, jobs))
    else:
        results = [_prepare_one(j) for j in jobs]
    for entry, (_, n_frames, n_segments) in zip(entries, results):
        entry["n_frames"] = n_frames
        entry["n_segments"] = n_segments

    manifest_path = out / MANIFEST
    manifest_path.write_text(json.dumps({"songs": entries, "config_hash": cfg.hash()}, indent=2) + "\n")
    split_corpus([e["song_id"] for e in entries], args.n_test, cfg.seed, manifest_path)
    print(f"prepared {len(entries)} songs into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    songs = _corpus_songs(_corpus_path(args, cfg), "train")
    if not songs:
        raise ValueError("the corpus has no training songs")
    run = cfg.resolved()
    ckpt_path = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else ckpt_path.with_name(ckpt_path.stem + "_metrics.csv")
    try:
        result = train(songs, cfg.model_config(), run.train, config_hash=cfg.hash())
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, ckpt_path)
            config_sidecar(ckpt_path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        raise
    save_checkpoint(result.checkpoint, ckpt_path)
    config_sidecar(ckpt_path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    write_metrics_csv(result.metrics, metrics_path)
    plots.plot_metrics(result.metrics, plots.figure_path(metrics_path))
    best = min(r.val_rmse_cents for r in result.metrics)
    print(f"stopped at step {result.metrics[-1].step} ({result.stop_reason}); "
          f"best validation RMSE {best:.2f} cents at step {result.checkpoint.train_step}")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    ckpt = _load_matching_checkpoint(args.checkpoint, cfg)
    feats, segments = _song_features(args, cfg)
    track = predict_corrections(ckpt.model, feats, cfg.train.seq_len, cfg.train.stride, segments,
                                single_precision=args.single_precision)
    write_corrections_csv(track, args.out, feats.sample_rate)
    plots.plot_corrections(track, plots.figure_path(args.out), feats.sample_rate, title="predicted corrections")
    return 0


def cmd_apply(args) -> int:
    track = read_corrections_csv(args.corrections)
    vocals = read_wav(args.vocals)
    if vocals.sample_rate != dsp.CANONICAL_RATE:
        vocals = dsp.resample(vocals, dsp.CANONICAL_RATE)
    expected = dsp.n_frames_for(len(vocals), track.hop)
    if len(track) != expected:
        raise dsp.AlignmentError(f"corrections have {len(track)} frames, vocals need {expected}")
    if args.raw:
        segments = constant_runs(track)
    else:
        segments = [s for s in vocal_segments(vocals, len(track)) if track.voiced[s.start_frame:s.end_frame].any()]
        track = smooth_per_note(track, segments)
    out = render_corrected(vocals, track, segments)
    if args.accompaniment:
        accomp = read_wav(args.accompaniment)
        if accomp.sample_rate != out.sample_rate:
            accomp = dsp.resample(accomp, out.sample_rate)
        if len(accomp) != len(out):
            raise dsp.AlignmentError(f"accompaniment has {len(accomp)} samples, vocals {len(out)}")
        mix = out.samples + accomp.samples
        peak = float(np.max(np.abs(mix), initial=0.0))
        out = AudioBuffer(mix / peak if peak > 1.0 else mix, out.sample_rate)
    else:
        peak = float(np.max(np.abs(out.samples), initial=0.0))
        if peak > 1.0:
            log.warning("rendered vocals peak at %.3f, scaled to full scale", peak)
            out = AudioBuffer(out.samples / peak, out.sample_rate)
    write_wav(out, args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ckpt = _load_matching_checkpoint(args.checkpoint, cfg)
    songs = _corpus_songs(_corpus_path(args, cfg), args.split)
    metrics = evaluate(ckpt.model, songs, cfg.train.seq_len, cfg.train.stride, cfg.seed, cfg.convention)
    metrics["songs"] = len(songs)
    metrics["split"] = args.split
    print(json.dumps(metrics))
    return 0


def cmd_baseline(args) -> int:
    vocals = read_wav(args.vocals)
    if vocals.sample_rate != dsp.CANONICAL_RATE:
        vocals = dsp.resample(vocals, dsp.CANONICAL_RATE)
    track = snap_correction(track_f0(vocals))
    write_corrections_csv(track, args.out, vocals.sample_rate)
    plots.plot_corrections(track, plots.figure_path(args.out), vocals.sample_rate, title="snap-to-note corrections")
    return 0


def cmd_gradcheck(args) -> int:
    err = self_check(args.seed, args.layers, args.hidden_size, args.input_dim, args.frames, epsilon=args.epsilon)
    print(f"max relative error {err:.3e}")
    return 0 if err < GRADCHECK_TOLERANCE else 1


# ---------------------------------------------------------------- parser

def _hidden_list(text: str) -> tuple:
    try:
        sizes = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return sizes


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autotune", description="Learned continuous pitch correction for karaoke vocals.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--convention", choices=("correction", "detune"))
        return sp

    sp = with_config(sub.add_parser("prepare", help="stems + annotations -> feature caches + manifest"))
    sp.add_argument("--stems", required=True, help="directory with one sub-directory of WAV stems per song")
    sp.add_argument("--annotations", help="CSV song_id,start_sec,end_sec of monophonic regions")
    sp.add_argument("--boundaries", help="CSV song_id,frame_index of note boundaries")
    sp.add_argument("--n-test", type=int, default=0, dest="n_test")
    sp.add_argument("--out", required=True, help="corpus directory")
    sp.set_defaults(func=cmd_prepare)

    sp = with_config(sub.add_parser("train", help="corpus -> checkpoint + metrics CSV"))
    sp.add_argument("--corpus", help="corpus directory or manifest file")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics CSV (default: next to the checkpoint)")
    sp.add_argument("--hidden", type=_hidden_list, help="hidden sizes, e.g. 64,64")
    sp.add_argument("--seq-len", type=int, dest="seq_len")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--max-steps", type=int, dest="max_steps")
    sp.add_argument("--eval-interval", type=int, dest="eval_interval")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("predict", help="checkpoint + song -> corrections CSV"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--song-dir", dest="song_dir", help="prepared song directory")
    sp.add_argument("--vocals")
    sp.add_argument("--accompaniment")
    sp.add_argument("--single-precision", action="store_true", dest="single_precision")
    sp.add_argument("--out", required=True, help="corrections CSV")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("apply", help="corrections + vocals -> corrected WAV")
    sp.add_argument("--corrections", required=True)
    sp.add_argument("--vocals", required=True)
    sp.add_argument("--accompaniment", help="remix the corrected vocals with this track")
    sp.add_argument("--raw", action="store_true", help="render frame-wise values without per-note medians")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_apply)

    sp = with_config(sub.add_parser("eval", help="checkpoint + corpus split -> metrics JSON on stdout"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="vocals -> snap-to-note corrections CSV")
    sp.add_argument("--vocals", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("gradcheck", help="check BPTT gradients against finite differences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--hidden-size", type=int, default=8, dest="hidden_size")
    sp.add_argument("--input-dim", type=int, default=12, dest="input_dim")
    sp.add_argument("--frames", type=int, default=5)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)
    return p


RUNTIME_ERRORS = (OSError, AudioError, AnnotationError, CheckpointError, DivergenceError, ValueError, KeyError,
                  RuntimeError)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"autotune: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"autotune: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
