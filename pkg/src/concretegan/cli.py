"""Command-line entry points: train, generate, evaluate, analyze-codes.

Exit codes: 0 success, 2 invalid configuration or input, 3 training halted on
a non-finite value, 4 incompatible checkpoint version.  Diagnostics go to
stderr; stdout carries one JSON object naming the manifest and output paths.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .corpus import read_corpus, write_corpus
from .manifest import RunManifest, sidecar_path
from .nn import NonFiniteError
from .trainer import (
    CheckpointVersionError,
    ConfigError,
    TrainingConfig,
    export_codes,
    generate_samples,
    init_state,
    load_checkpoint,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_HALT, EXIT_VERSION = 0, 2, 3, 4
SEED_ENV = "CONCRETEGAN_SEED"

log = logging.getLogger("concretegan")


class UsageError(Exception):
    pass


def _seed(arg: int | None, default: int | None = None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def _command_line(argv) -> str:
    return "concretegan " + " ".join(shlex.quote(a) for a in argv)


def _emit(manifest: RunManifest | dict, outputs: dict) -> None:
    m = manifest.to_dict() if isinstance(manifest, RunManifest) else manifest
    print(json.dumps({"manifest": m, "outputs": {k: str(v) for k, v in outputs.items()}}, sort_keys=True))


def _write_with_manifest(path: Path, manifest: RunManifest) -> Path:
    side = sidecar_path(path)
    manifest.write(side)
    return side


# ---------------------------------------------------------------------------


def cmd_train(args, argv) -> int:
    overrides = {}
    if args.config is not None:
        cfg = TrainingConfig.from_json(args.config)
    elif args.resume is None:
        raise UsageError("train needs --config (or --resume)")
    else:
        cfg = None
    seed = _seed(args.seed)

    if args.resume is not None:
        state = load_checkpoint(args.resume)
        if cfg is not None and cfg.config_hash != state.config.config_hash:
            raise ConfigError([
                f"config hash {cfg.config_hash} does not match checkpoint config hash {state.config.config_hash}"
            ])
        if cfg is not None:
            overrides = {k: getattr(cfg, k) for k in ("max_iterations", "checkpoint_every", "eval_every", "log_every")}
        if seed is not None and seed != state.config.seed:
            log.warning("ignoring seed %d on resume; the checkpoint's generator state continues the run", seed)
        state.config = state.config.replace(**overrides)
        origin = state.manifest
        state.manifest = origin.derive(
            command=_command_line(argv),
            resumed_from={"checkpoint": str(Path(args.resume).resolve()), "iteration": state.iteration,
                          "manifest": origin.to_dict()},
        )
        out = Path(args.out) if args.out else Path(args.resume).resolve().parent
    else:
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        out = Path(args.out) if args.out else Path("runs") / f"{cfg.mode}-{cfg.config_hash}-s{cfg.seed}"
        state = init_state(cfg)
        state.manifest = state.manifest.derive(command=_command_line(argv))
    out.mkdir(parents=True, exist_ok=True)

    outputs = {"out_dir": out}
    if args.resume is None:
        data = out / "data"
        data.mkdir(exist_ok=True)
        for split, sents in (("train", state.dataset.train), ("test", state.dataset.test)):
            p = data / f"{split}.txt"
            write_corpus(p, sents)
            _write_with_manifest(p, state.manifest)
            outputs[f"{split}_corpus"] = p
        vocab_path = out / "vocab.tsv"
        state.vocab.save(vocab_path)
        _write_with_manifest(vocab_path, state.manifest)
        (out / "config.json").write_text(json.dumps(state.config.to_dict(), indent=2, sort_keys=True) + "\n")

    log.info("training %s from iteration %d to %d into %s", state.config.mode, state.iteration,
             state.config.max_iterations, out)
    try:
        train(state, out_dir=out)
    except NonFiniteError as e:
        log.error("halted: %s (checkpoint %s)", e, out / "halt.ckpt")
        _emit(state.manifest, {**outputs, "halt_checkpoint": out / "halt.ckpt"})
        return EXIT_HALT
    final = out / "final.ckpt"
    _write_with_manifest(final, state.manifest.derive(checkpoint=str(final.resolve())))
    log_path = out / "train_log.jsonl"
    _write_with_manifest(log_path, state.manifest)
    state.manifest.derive(checkpoint=str(final.resolve())).write(out / "manifest.json")
    outputs.update(checkpoint=final, log=log_path)
    _emit(state.manifest.derive(checkpoint=str(final.resolve())), outputs)
    return EXIT_OK


def cmd_generate(args, argv) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    state = load_checkpoint(args.checkpoint)
    seed = _seed(args.seed, 0)
    sents = generate_samples(state, args.n, seed, args.decoding)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, sents)
    manifest = state.manifest.derive(
        checkpoint=str(Path(args.checkpoint).resolve()),
        command=_command_line(argv),
        extra={"n": args.n, "sample_seed": seed, "decoding": args.decoding, "iteration": state.iteration},
    )
    _write_with_manifest(out, manifest)
    _emit(manifest, {"samples": out})
    return EXIT_OK


def _read_nonempty(path: str, keep_blank: bool = False) -> list[str]:
    try:
        sents = read_corpus(path, keep_blank)
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    if not sents:
        raise UsageError(f"{path}: empty corpus")
    return sents


def _upstream_manifest(path: str | Path) -> dict | None:
    side = sidecar_path(path)
    return json.loads(side.read_text()) if side.exists() else None


def cmd_evaluate(args, argv) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.aggregate:
        try:
            reports = [metrics.MetricReport.load(p) for p in args.aggregate]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise UsageError(f"cannot read report: {e}") from None
        report = metrics.aggregate_reports(reports)
        upstream = {"aggregated": [str(Path(p).resolve()) for p in args.aggregate]}
    else:
        if not (args.generated and args.reference):
            raise UsageError("evaluate needs --generated and --reference, or --aggregate")
        gen, ref = _read_nonempty(args.generated, keep_blank=True), _read_nonempty(args.reference)
        try:
            embedder = metrics.get_embedder(args.embedder)
        except (ValueError, OSError) as e:
            raise UsageError(str(e)) from None
        codes = None
        if args.codes:
            codes = (np.load(Path(args.codes) / "encoder_codes.npy"), np.load(Path(args.codes) / "generator_codes.npy"))
        upstream = _upstream_manifest(args.generated) or {}
        seeds = [upstream["seed"]] if "seed" in upstream else []
        report = metrics.evaluate_run(gen, ref, embedder, codes=codes, seeds=seeds)
    manifest = RunManifest(
        config_hash=upstream.get("config_hash", "n/a") if not args.aggregate else "aggregate",
        seed=upstream.get("seed", -1) if not args.aggregate else -1,
        mode=upstream.get("mode", "n/a") if not args.aggregate else "aggregate",
        datasets=upstream.get("datasets", {}) if not args.aggregate else {},
        checkpoint=upstream.get("checkpoint") if not args.aggregate else None,
        command=_command_line(argv),
        extra={"upstream": upstream, "embedder_id": report.embedder_id},
    )
    report.manifest = manifest.to_dict()
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    _emit(manifest, {"report": out})
    return EXIT_OK


def _pca_2d(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # joint principal axes so both projections share a coordinate frame
    x = np.vstack([a, b])
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    # fix the sign of each axis for reproducible plots
    axes = axes * np.where(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)] < 0, -1.0, 1.0)[:, None]
    proj = centered @ axes.T
    return proj[: len(a)], proj[len(a) :]


def cmd_analyze_codes(args, argv) -> int:
    state = load_checkpoint(args.checkpoint)
    corpus = _read_nonempty(args.corpus)
    if not 2 <= args.n <= len(corpus):
        raise UsageError(f"--n must lie in 2..{len(corpus)} (corpus size)")
    if state.config.mode == "mle":
        raise UsageError("an MLE checkpoint has no encoder or code generator")
    seed = _seed(args.seed, 0)
    codes = export_codes(state, corpus, args.n, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = state.manifest.derive(
        checkpoint=str(Path(args.checkpoint).resolve()),
        command=_command_line(argv),
        extra={**codes["meta"], "corpus": str(Path(args.corpus).resolve())},
    )
    paths = {"encoder_codes": out / "encoder_codes.npy", "generator_codes": out / "generator_codes.npy"}
    np.save(paths["encoder_codes"], codes["encoder"])
    np.save(paths["generator_codes"], codes["generator"])
    pa, pb = _pca_2d(codes["encoder"], codes["generator"])
    paths["pca_encoder"] = out / "pca_encoder.tsv"
    paths["pca_generator"] = out / "pca_generator.tsv"
    np.savetxt(paths["pca_encoder"], pa, delimiter="\t", header="pc1\tpc2 (encoder codes, joint PCA)")
    np.savetxt(paths["pca_generator"], pb, delimiter="\t", header="pc1\tpc2 (generator codes, joint PCA)")
    fd = {
        "code_fd": metrics.code_space_fd(codes["encoder"], codes["generator"]),
        "sanity_code_fd_encoder_vs_itself": metrics.code_space_fd(codes["encoder"], codes["encoder"]),
        "n": args.n,
        "width": int(codes["encoder"].shape[1]),
        "manifest": manifest.to_dict(),
    }
    paths["code_fd"] = out / "code_fd.json"
    paths["code_fd"].write_text(json.dumps(fd, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for key, p in paths.items():
        if key != "code_fd":
            _write_with_manifest(p, manifest)
    _emit(manifest, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="concretegan", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", help="JSON document with TrainingConfig fields")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int, help=f"overrides the config seed (fallback: ${SEED_ENV})")
    t.add_argument("--out", help="run directory (default runs/<mode>-<hash>-s<seed>)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample sentences from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, help=f"sampling seed (fallback: ${SEED_ENV}, then 0)")
    g.add_argument("--out", required=True)
    g.add_argument("--decoding", choices=("sample", "greedy"), default="sample")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="BLEU, backward BLEU and FD of generated text against a reference")
    e.add_argument("--generated")
    e.add_argument("--reference")
    e.add_argument("--embedder", default="hashed-bow", help="hashed-bow, a registered name, or file:PATH")
    e.add_argument("--codes", help="analyze-codes output directory; adds code-space FD")
    e.add_argument("--aggregate", nargs="+", metavar="REPORT", help="mean/std over existing reports")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze-codes", help="export encoder and generator codes, PCA projection, code FD")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze_codes)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args, argv)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except CheckpointVersionError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except NonFiniteError as e:
        print(f"halted: {e}", file=sys.stderr)
        return EXIT_HALT
    except (UsageError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
