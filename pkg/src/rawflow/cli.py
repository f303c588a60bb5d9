"""Command-line entry point: preprocess, train, generate, evaluate, curate, gradcheck.

Exit codes: 0 success, 1 numeric or verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from . import config as config_mod
from . import flowmatch as fm
from .audio_io import LiftConfig, amplitude_lift, read_wav, rms, write_wav
from .conditioning import FeatureConfig, make_bundle, read_event_manifest, stack_bundles, t2a
from .curator import FilterRules, balance_categories, category_histogram, curate, format_records, read_source_manifest
from .errors import NumericError, RawflowError, VersionError
from .evalkit import CentroidPosteriorClassifier, MelStatsEmbedder, MetricReport, frechet_distance, gaussian_stats
from .evalkit import inception_score, paired_kl
from .gradcheck import run_gradcheck
from .model import load_checkpoint, param_shapes, save_checkpoint
from .sampling import generate_grids, grid_to_waveform, save_spectrogram_png
from .trainer import make_toy_dataset, prepare_dataset, train

log = logging.getLogger("rawflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.rfw"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# preprocess ----------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    buf = read_wav(args.input)
    before = rms(buf)
    if args.no_rms:
        out = buf.with_samples(args.scale * np.clip(buf.samples, -1.0, 1.0))
    else:
        out = amplitude_lift(buf, LiftConfig(args.r_star, args.scale))
    write_wav(out, args.output, sample_format=args.format)
    sidecar = Path(args.output).with_suffix(".json")
    sidecar.write_text(json.dumps({"rms_before": before, "rms_after": rms(out)}, indent=2) + "\n")
    print(f"{args.output}: rms {before:.6f} -> {rms(out):.6f}")
    return EXIT_OK


# train -------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    run = config_mod.load(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dump(run))

    items = make_toy_dataset(run.data, seed=run.train.seed)
    lift = LiftConfig()
    data = prepare_dataset(items, run.model.D, run.features, lift)
    t0 = time.perf_counter()
    state, losses = train(run.model, run.train, data, log_path=out / "loss.csv")
    elapsed = time.perf_counter() - t0

    tensors = {f"live/{k}": v for k, v in state.params.items()}
    tensors.update({f"ema/{k}": v for k, v in state.ema.items()})
    meta = {
        "features": dataclasses.asdict(run.features),
        "data": dataclasses.asdict(run.data),
        "train": dataclasses.asdict(run.train),
        "lift": dataclasses.asdict(lift),
        "num_samples": run.data.num_samples,
        "sample_rate": run.data.sample_rate,
        "steps": state.step,
    }
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(ckpt, run.model, tensors, meta)
    digest = file_sha256(ckpt)
    (out / "checkpoint.sha256").write_text(digest + "\n")
    head = float(np.mean(losses[:10])) if losses else float("nan")
    tail = float(np.mean(losses[-100:])) if losses else float("nan")
    print(f"steps {state.step} time {elapsed:.1f}s loss first10 {head:.4f} last100 {tail:.4f}")
    print(f"checkpoint {ckpt} sha256 {digest}")
    return EXIT_OK


# generate -------------------------------------------------------------------------------------


def load_generator(path, weights: str = "ema", expect=None):
    """(model config, parameter dict, meta) from a training checkpoint."""
    cfg, tensors, meta = load_checkpoint(path, expect)
    prefix = f"{weights}/"
    params = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    shapes = param_shapes(cfg)
    if set(params) != set(shapes) or any(params[k].shape != tuple(s) for k, s in shapes.items()):
        raise VersionError(f"{path}: {weights} tensors do not match the stored model config")
    return cfg, params, meta


def cmd_generate(args) -> int:
    expect = None
    if args.config is not None or args.set:
        expect = config_mod.load(args.config, args.set or []).model
    cfg, params, meta = load_generator(args.checkpoint, args.weights, expect)
    features = FeatureConfig(**meta["features"])
    num_samples, sr = int(meta["num_samples"]), int(meta["sample_rate"])
    s_a = float(meta.get("lift", {}).get("s_a", LiftConfig().s_a))
    specs = read_event_manifest(args.manifest, default_clip_len=num_samples / sr)
    if not specs:
        raise RawflowError(f"{args.manifest}: no rows")
    bundles = [make_bundle(s, features) for s in specs]
    if args.mode == "t2a":
        bundles = [t2a(b) for b in bundles]
    sampler = fm.SamplerConfig(steps=args.steps, cfg_scale=args.cfg)
    grids = generate_grids(params, cfg, stack_bundles(bundles), num_samples, sampler, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = None if args.no_normalize else args.target_lufs
    for i, (spec, g) in enumerate(zip(specs, grids)):
        buf = grid_to_waveform(g, num_samples, sr, s_a, target)
        stem = out / f"{i:04d}_class{spec.class_id}"
        write_wav(buf, stem.with_suffix(".wav"))
        save_spectrogram_png(buf, stem.with_suffix(".png"))
    print(f"wrote {len(specs)} clips to {out}")
    return EXIT_OK


# evaluate ---------------------------------------------------------------------------------------


def _load_dir(path):
    files = sorted(Path(path).glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"{path}: no .wav files")
    bufs = [read_wav(f) for f in files]
    lengths = {len(b) for b in bufs}
    rates = {b.sample_rate for b in bufs}
    if len(lengths) != 1 or len(rates) != 1:
        raise RawflowError(f"{path}: clips must share one length and sample rate")
    return files, np.stack([b.samples for b in bufs]), rates.pop()


def _read_labels(path) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            name, label = line.split()
            out[name] = label
    return out


def cmd_evaluate(args) -> int:
    gen_files, gen, sr_g = _load_dir(args.gen_dir)
    ref_files, ref, sr_r = _load_dir(args.ref_dir)
    if sr_g != sr_r or gen.shape[1] != ref.shape[1]:
        raise RawflowError("generated and reference clips differ in length or sample rate")
    if len(gen_files) != len(ref_files):
        raise RawflowError(
            f"paired KL needs equal counts: {len(gen_files)} generated vs {len(ref_files)} reference"
        )
    embedder = MelStatsEmbedder(sample_rate=sr_r).fit(ref)
    e_ref, e_gen = embedder.transform(ref), embedder.transform(gen)
    fd = frechet_distance(gaussian_stats(e_gen), gaussian_stats(e_ref))

    if args.labels is not None:
        table = _read_labels(args.labels)
        y = np.array([table[f.name] for f in ref_files])
        clf_name = "centroid(labels)"
    else:
        k = min(args.classes, len(ref_files))
        y = KMeans(n_clusters=k, n_init=10, random_state=args.seed).fit_predict(e_ref)
        clf_name = f"centroid(kmeans k={k})"
    if np.unique(y).size < 2:
        kl = is_ = None
    else:
        clf = CentroidPosteriorClassifier().fit(e_ref, y)
        p_gen, p_ref = clf.predict_proba(e_gen), clf.predict_proba(e_ref)
        kl, is_ = paired_kl(p_gen, p_ref), inception_score(p_gen)
    report = MetricReport(fd, kl, is_, "mel", clf_name, len(gen_files), len(ref_files))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# curate ---------------------------------------------------------------------------------------


def _parse_histogram(text: str) -> dict:
    out = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        out[k.strip()] = float(v)
    return out


def cmd_curate(args) -> int:
    entries = read_source_manifest(args.manifest)
    sources = [(str(p), read_wav(p), label) for p, label in entries]
    rules = FilterRules(args.max_silence, args.silence_threshold)
    records = curate(sources, rules, args.clip_len, args.augment)
    if args.target_total is not None:
        kept = [r for r in records if r.accepted]
        ref = _parse_histogram(args.reference) if args.reference else {k: 1.0 for k in category_histogram(kept)}
        chosen = balance_categories(kept, ref, args.target_total, np.random.default_rng(args.seed))
        keep_ids = {id(r) for r in chosen}
        records = [r if not r.accepted or id(r) in keep_ids else r.rejected("balance") for r in records]
    text = format_records(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    n_ok = sum(r.accepted for r in records)
    print(f"accepted {n_ok} of {len(records)} clips", file=sys.stderr)
    return EXIT_OK


# gradcheck --------------------------------------------------------------------------------------


def _inject(grads):
    # negative control: a 5% error on one tensor must fail the check
    grads = dict(grads)
    grads["out.conv_w"] = grads["out.conv_w"] * 1.05
    return grads


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(per_tensor=args.per_tensor, seed=args.seed, loss_mode=args.loss_mode,
                           grad_hook=_inject if args.inject_error else None)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_FAIL


# wiring ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rawflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="mono, RMS-normalize, clamp and scale one WAV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--r-star", type=float, default=0.33)
    p.add_argument("--scale", type=float, default=3.0)
    p.add_argument("--no-rms", action="store_true", help="skip RMS normalization (clamp and scale only)")
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the toy model; writes checkpoint and loss CSV")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample one clip per event-manifest row")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg", type=float, default=4.5)
    p.add_argument("--mode", choices=("vt2a", "t2a"), default="vt2a")
    p.add_argument("--weights", choices=("ema", "live"), default="ema")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-lufs", type=float, default=-23.0)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--config", help="expected model config; a mismatch with the checkpoint is an error")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FD / paired KL / IS between two WAV folders")
    p.add_argument("gen_dir")
    p.add_argument("ref_dir")
    p.add_argument("--embedder", choices=("mel",), default="mel")
    p.add_argument("--classes", type=int, default=4, help="pseudo-label clusters when --labels is absent")
    p.add_argument("--labels", help="'<ref file name> <label>' lines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curate", help="segment, filter and balance a source manifest")
    p.add_argument("manifest")
    p.add_argument("--clip-len", type=float, default=8.0)
    p.add_argument("--augment", action="store_true", help="two overlapping chunks at 0 s and 1 s")
    p.add_argument("--max-silence", type=float, default=0.8)
    p.add_argument("--silence-threshold", type=float, default=1e-3)
    p.add_argument("--target-total", type=int)
    p.add_argument("--reference", help="target histogram, e.g. 'dog=3,cat=1' (default uniform)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy model's gradients")
    p.add_argument("--dims", choices=("toy",), default="toy")
    p.add_argument("--per-tensor", type=int, default=16, help="coordinates per tensor, 0 = all")
    p.add_argument("--loss-mode", choices=fm.LOSS_MODES, default="v_loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (RawflowError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
