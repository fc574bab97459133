#!/usr/bin/env python3
"""The command-line pipeline end to end: train, generate, evaluate, analyze-codes.

Each step prints one JSON line (manifest plus output paths) on stdout; every
artifact gets a ``.manifest.json`` sidecar or an embedded manifest.
"""
import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path


def run(*argv):
    out = subprocess.run([sys.executable, "-m", "concretegan", *map(str, argv)], capture_output=True, text=True)
    if out.returncode:
        sys.exit(f"{argv[0]} failed ({out.returncode}):\n{out.stderr}")
    return json.loads(out.stdout)["outputs"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--workdir", help="keep artifacts here instead of a temporary directory")
    args = p.parse_args()

    work = Path(args.workdir or tempfile.mkdtemp(prefix="concretegan-"))
    cfg = {"grammar": "svo", "n_train": 2000, "n_test": 200, "max_len": 12, "emb_dim": 64, "hidden": 64,
           "max_iterations": args.iterations, "checkpoint_every": args.iterations,
           "lr_code_generator": 3e-4, "noise_sigma0": 0.05}
    (work / "config.json").write_text(json.dumps(cfg, indent=2))

    trained = run("train", "--config", work / "config.json", "--out", work / "run")
    print("trained:", trained["checkpoint"])
    run("generate", "--checkpoint", trained["checkpoint"], "--n", 200, "--seed", 7, "--out", work / "samples.txt")
    codes = run("analyze-codes", "--checkpoint", trained["checkpoint"], "--corpus", trained["test_corpus"],
                "--n", 200, "--out", work / "codes")
    report = run("evaluate", "--generated", work / "samples.txt", "--reference", trained["test_corpus"],
                 "--codes", work / "codes", "--out", work / "report.json")["report"]

    r = json.loads(Path(report).read_text())
    print("BLEU:", {k: round(v, 3) for k, v in r["bleu"].items()})
    print("B-BLEU:", {k: round(v, 3) for k, v in r["b_bleu"].items()})
    print(f"FD ({r['embedder_id']}): {r['fd']:.4f}   code-space FD: {r['code_fd']:.4f}")
    print("code FD file:", codes["code_fd"])
    print("artifacts in", work)


if __name__ == "__main__":
    main()
