"""Adversarial training on discrete text: GRU step discriminator and REINFORCE.

The discriminator scores every prefix: d_t = sigmoid(head(h_t)) where h_t is
its GRU state after reading x_1..x_t.  Rewards are discounted sums of those
scores, R_t = sum_{s>=t} gamma^(s-t) d_s.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import (
    ArchConfig,
    batch_tensors,
    length_mask,
    sample_ids,
    sequence_log_probs,
)
from .corpus import SequenceBatch, TokenSequence
from .nn import (
    AdamState,
    ComponentParams,
    adam_update,
    clip_gradients,
    grad,
    gru_unroll,
    init_gru,
    init_linear,
    linear,
    uniform_,
)


def init_text_discriminator(arch: ArchConfig, gen: torch.Generator, dtype=torch.float32) -> ComponentParams:
    t = {"emb": uniform_((arch.vocab_size, arch.emb_dim), gen, dtype)}
    t.update(init_gru("gru.", arch.emb_dim, arch.hidden, gen, dtype))
    t.update(init_linear("head.", arch.hidden, 1, gen, dtype))
    return ComponentParams("text_discriminator", t)


def step_logits(ids: torch.Tensor, rho: ComponentParams) -> torch.Tensor:
    """Pre-sigmoid discriminator outputs for every prefix, shape (N, T)."""
    emb = rho["emb"][ids]
    h0 = emb.new_zeros(ids.shape[0], rho["gru.W_z"].shape[1])
    return linear(gru_unroll(emb, h0, rho, "gru."), rho, "head.").squeeze(-1)


def disc_step_scores(x: TokenSequence | SequenceBatch, rho: ComponentParams) -> np.ndarray | torch.Tensor:
    """Per-step scores in (0, 1).

    A single sequence gives a 1-D array of its length; a batch gives an (N, T)
    tensor whose padded cells are meaningless.
    """
    if isinstance(x, TokenSequence):
        if len(x) == 0:
            raise ValueError("cannot score an empty sequence")
        with torch.no_grad():
            ids = torch.tensor([x.ids], dtype=torch.long)
            return torch.sigmoid(step_logits(ids, rho))[0].double().numpy()
    ids, lengths = batch_tensors(x)
    if (lengths < 1).any():
        raise ValueError("cannot score an empty sequence")
    return torch.sigmoid(step_logits(ids, rho))


def disc_loss(real: SequenceBatch, fake: SequenceBatch, rho: ComponentParams) -> torch.Tensor:
    """Mean over real tokens of -log d plus mean over fake tokens of -log(1 - d)."""
    terms = []
    for batch, sign in ((real, 1.0), (fake, -1.0)):
        ids, lengths = batch_tensors(batch)
        logits = step_logits(ids, rho)
        mask = length_mask(lengths, ids.shape[1], logits.dtype)
        # -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
        terms.append((F.softplus(-sign * logits) * mask).sum() / mask.sum())
    return terms[0] + terms[1]


def rewards(scores: Sequence[float] | np.ndarray, gamma: float) -> np.ndarray:
    """Discounted returns R_t = d_t + gamma * R_{t+1}, R_T = d_T."""
    _check_gamma(gamma)
    d = np.asarray(scores, dtype=np.float64)
    out = np.empty_like(d)
    acc = 0.0
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + gamma * acc
        out[t] = acc
    return out


def batch_rewards(scores: torch.Tensor, mask: torch.Tensor, gamma: float) -> torch.Tensor:
    """Row-wise :func:`rewards` over an (N, T) score matrix; padded cells get 0."""
    _check_gamma(gamma)
    d = scores * mask
    out = torch.zeros_like(d)
    acc = torch.zeros_like(d[:, 0])
    for t in range(d.shape[1] - 1, -1, -1):
        acc = d[:, t] + gamma * acc
        out[:, t] = acc
    return out * mask


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"discount factor must satisfy 0 < gamma < 1, got {gamma}")


def reinforce_loss(token_logp: torch.Tensor, returns: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Surrogate whose negative gradient is sum_n sum_t grad log p(x_t) R_t.

    Scaled by the constant 1 / (N * width) rather than by the sampled token
    count, which would depend on the trajectory and bias the estimator.
    """
    n, width = token_logp.shape
    return -(token_logp * returns.detach() * mask).sum() / (n * width)


def reinforce_update(
    z_fake: torch.Tensor,
    psi: ComponentParams,
    rho: ComponentParams,
    gamma: float,
    opt_psi: AdamState,
    lr: float,
    max_len: int,
    gen: torch.Generator,
    clip_norm: float = 5.0,
    baseline: bool = False,
    samples: SequenceBatch | None = None,
) -> dict[str, float]:
    """One policy-gradient step of the decoder on codes ``z_fake`` (held fixed).

    Sequences are sampled from the decoder unless ``samples`` is given; the
    discriminator only provides rewards and is not updated.
    """
    z_fake = z_fake.detach()
    if samples is None:
        samples = sample_ids(z_fake, psi, max_len, greedy=False, gen=gen)
    ids, lengths = batch_tensors(samples)
    with torch.no_grad():
        scores = torch.sigmoid(step_logits(ids, rho)).to(z_fake.dtype)
    mask = length_mask(lengths, ids.shape[1], z_fake.dtype)
    returns = batch_rewards(scores, mask, gamma)
    if baseline:
        returns = (returns - (returns * mask).sum() / mask.sum()) * mask
    loss, g = grad(lambda p: reinforce_loss(sequence_log_probs(z_fake, ids, p), returns, mask), psi)
    g = clip_gradients(g, clip_norm)
    adam_update(psi, g, lr, opt_psi)
    return {
        "L_pg": loss.item(),
        "mean_reward": float((scores * mask).sum() / mask.sum()),
        "mean_gen_length": float(lengths.double().mean()),
    }
