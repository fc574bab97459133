#!/usr/bin/env python3
"""BLEU, backward BLEU and Frechet distance on corpora small enough to check by eye."""
import math

import numpy as np

from concretegan.corpus import synth_corpus
from concretegan.metrics import (
    EmbeddingStats,
    HashedBagEmbedder,
    backward_bleu,
    corpus_bleu,
    evaluate_run,
    frechet_distance,
)


def main():
    # "the cat" against "the cat sat": both precisions are 1, brevity penalty exp(1 - 3/2)
    b = corpus_bleu(["the cat"], ["the cat sat"], max_n=2)
    print(f"BLEU-2('the cat' | 'the cat sat') = {b[2]:.6f}  (e^-0.5 = {math.exp(-0.5):.6f})")

    # quality against diversity: a collapsed generator scores well on BLEU, badly on backward BLEU
    corpus, _ = synth_corpus("svo", 600, seed=0)
    ref, train = corpus[:300], corpus[300:]
    # a generator stuck on one real sentence: every n-gram is found in the references
    collapsed = [max(ref, key=len)] * 300
    for name, gen in (("held-out real", train), ("collapsed", collapsed)):
        fwd, bwd = corpus_bleu(gen, ref, 4), backward_bleu(gen, ref, 4)
        print(f"{name:>14}: BLEU-4 {fwd[4]:.3f}  B-BLEU-4 {bwd[4]:.3f}")

    # Frechet distance between two Gaussians has a closed form when covariances are diagonal
    a = EmbeddingStats(np.zeros(3), np.diag([1.0, 2.0, 3.0]), 100)
    b = EmbeddingStats(np.ones(3), np.diag([4.0, 2.0, 0.5]), 100)
    closed = 3 + sum(v1 + v2 - 2 * math.sqrt(v1 * v2) for v1, v2 in ((1, 4), (2, 2), (3, 0.5)))
    print(f"FD = {frechet_distance(a, b):.10f}, closed form {closed:.10f}")

    report = evaluate_run(collapsed, ref, HashedBagEmbedder(), seeds=[0])
    print(f"collapsed generator, sentence-space FD ({report.embedder_id}) = {report.fd:.4f}")


if __name__ == "__main__":
    main()
