#!/usr/bin/env python3
"""Train ConcreteGAN, its text-discriminator-free ablation (ARAE*) and an MLE
language model on the same synthetic corpus, then score all three.

The default budget finishes in a few minutes; ``--desk`` uses the
acceptance-suite configuration (5000 iterations per model).
"""
import argparse
import json
import time
from pathlib import Path

from concretegan.metrics import code_space_fd, corpus_bleu
from concretegan.trainer import (
    TrainingConfig,
    export_codes,
    generate_samples,
    heldout_perplexity,
    init_state,
    reconstruction_accuracy,
    train,
)

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk_svo.json"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--desk", action="store_true", help="full desk-scale budget")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    base = json.loads(DESK.read_text())
    if not args.desk:
        base.update(max_iterations=args.iterations, n_train=3000, n_test=300)

    for mode in ("concretegan", "arae_star", "mle"):
        cfg = TrainingConfig.from_dict({**base, "mode": mode, "seed": args.seed})
        state = init_state(cfg)
        start = time.monotonic()
        train(state, callback=lambda s, r: s.iteration % 200 or print(f"  [{mode}] iter {s.iteration}: L_rec {r['L_rec']:.3f}"))
        test, oracle = state.dataset.test, state.dataset.oracle
        samples = generate_samples(state, len(test), seed=1)
        inlang = sum(map(oracle.in_language, samples)) / len(samples)
        line = f"{mode:>11}: {time.monotonic() - start:5.0f}s  in-language {inlang:.3f}  BLEU-4 {corpus_bleu(samples, test, 4)[4]:.3f}"
        if mode == "mle":
            line += f"  perplexity {heldout_perplexity(state, test):.3f} (oracle {oracle.perplexity():.3f})"
        else:
            codes = export_codes(state, test, len(test), seed=1)
            line += f"  reconstruction {reconstruction_accuracy(state, test):.3f}"
            line += f"  code-FD {code_space_fd(codes['encoder'], codes['generator']):.4f}"
        print(line)
        print("   e.g.", " | ".join(samples[:3]))


if __name__ == "__main__":
    main()
