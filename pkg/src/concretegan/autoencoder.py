"""GRU text autoencoder: encoder to unit-norm codes, conditional GRU decoder.

Decoder wiring (all switchable through :class:`ArchConfig`):

* the code initializes the decoder hidden state and is concatenated to every
  step's input (``z_concat``);
* the step input is ``emb(prev_token) + feedback(prev_logits)``, a linear
  residual path from the previous step's pre-softmax output
  (``residual_feedback``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import BOS, EOS, PAD, SequenceBatch, TokenSequence
from .nn import (
    ComponentParams,
    gru_input_projections,
    gru_step_split,
    init_gru,
    init_linear,
    uniform_,
)


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int
    emb_dim: int = 300
    hidden: int = 300
    noise_dim: int = 100
    mlp_layers: int = 2
    leaky_slope: float = 0.2
    z_concat: bool = True
    residual_feedback: bool = True
    tied_output: bool = False  # recorded for checkpoints; tying is not implemented

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    """Std of the Gaussian noise added to encoder codes at iteration k."""

    sigma0: float = 0.2
    decay: float = 0.995
    interval: int = 100

    def __call__(self, k: int) -> float:
        if k < 0:
            raise ValueError("iteration must be >= 0")
        return self.sigma0 * self.decay ** (k // self.interval)


def batch_tensors(batch: SequenceBatch) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(batch.ids, dtype=torch.long), torch.as_tensor(batch.lengths, dtype=torch.long)


def length_mask(lengths: torch.Tensor, width: int, dtype=torch.float64) -> torch.Tensor:
    return (torch.arange(width)[None, :] < lengths[:, None]).to(dtype)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def init_encoder(arch: ArchConfig, gen: torch.Generator, dtype=torch.float32) -> ComponentParams:
    t = {"emb": uniform_((arch.vocab_size, arch.emb_dim), gen, dtype)}
    t.update(init_gru("gru.", arch.emb_dim, arch.hidden, gen, dtype))
    return ComponentParams("encoder", t)


def encode(
    batch: SequenceBatch,
    phi: ComponentParams,
    k: int = 0,
    train_mode: bool = False,
    schedule: NoiseSchedule | None = None,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Codes (N, hidden): last real-token GRU state, l2-normalized, then noised in train mode."""
    ids, lengths = batch_tensors(batch)
    if (lengths < 1).any():
        raise ValueError("encode: batch contains an all-PAD row")
    emb = phi["emb"][ids]
    hidden = phi["gru.W_z"].shape[1]
    h0 = emb.new_zeros(ids.shape[0], hidden)
    states = _gru_run(emb, h0, phi, lengths)
    z = states / states.norm(dim=1, keepdim=True).clamp_min(1e-12)
    if train_mode:
        sigma = (schedule or NoiseSchedule())(k)
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z


def _gru_run(x: torch.Tensor, h0: torch.Tensor, params, lengths: torch.Tensor) -> torch.Tensor:
    # only as many steps as the longest row; returns the state at each row's last real token
    xz, xr, xh = gru_input_projections(x, params, "gru.")
    h = h0
    last = torch.zeros_like(h0)
    for t in range(int(lengths.max())):
        h = gru_step_split(xz[:, t], xr[:, t], xh[:, t], h, params, "gru.")
        last = torch.where((lengths - 1 == t)[:, None], h, last)
    return last


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def init_decoder(arch: ArchConfig, gen: torch.Generator, dtype=torch.float32) -> ComponentParams:
    in_dim = arch.emb_dim + (arch.hidden if arch.z_concat else 0)
    t = {"emb": uniform_((arch.vocab_size, arch.emb_dim), gen, dtype)}
    t.update(init_gru("gru.", in_dim, arch.hidden, gen, dtype))
    t.update(init_linear("out.", arch.hidden, arch.vocab_size, gen, dtype))
    if arch.residual_feedback:
        t.update(init_linear("fb.", arch.vocab_size, arch.emb_dim, gen, dtype, gain=0.1))
    return ComponentParams("decoder", t)


class _DecoderCell:
    """Holds per-sequence constants (code projections) for step-by-step decoding."""

    def __init__(self, z: torch.Tensor, psi: ComponentParams):
        self.psi = psi
        emb_dim = psi["emb"].shape[1]
        hidden = psi["gru.W_z"].shape[1]
        in_dim = psi["gru.W_z"].shape[0] - hidden
        if z.shape[-1] != hidden:
            raise ValueError(f"code width {z.shape[-1]} != decoder hidden {hidden}")
        self.emb_dim = emb_dim
        self.concat = in_dim == emb_dim + hidden
        self.feedback = "fb.W" in psi
        if self.concat:
            self.zproj = tuple(z @ psi[f"gru.W_{g}"][emb_dim:in_dim] for g in ("z", "r", "h"))
        self.h = z
        self.prev_logits = None

    def step(self, prev_tokens: torch.Tensor) -> torch.Tensor:
        psi = self.psi
        x = psi["emb"][prev_tokens]
        if self.feedback and self.prev_logits is not None:
            x = x + self.prev_logits @ psi["fb.W"] + psi["fb.b"]
        proj = [x @ psi[f"gru.W_{g}"][: self.emb_dim] for g in ("z", "r", "h")]
        if self.concat:
            proj = [p + zp for p, zp in zip(proj, self.zproj)]
        self.h = gru_step_split(*proj, self.h, psi, "gru.")
        logits = self.h @ psi["out.W"] + psi["out.b"]
        self.prev_logits = logits
        return logits


def decode_teacher_forced(z: torch.Tensor, batch: SequenceBatch | torch.Tensor, psi: ComponentParams) -> torch.Tensor:
    """Per-step log-probabilities (N, T, V); step t consumes gold token t-1 (BOS at t=0)."""
    ids = batch_tensors(batch)[0] if isinstance(batch, SequenceBatch) else batch
    n, width = ids.shape
    if z.shape[0] != n:
        raise ValueError(f"{z.shape[0]} codes for a batch of {n} sequences")
    cell = _DecoderCell(z, psi)
    prev = torch.full((n,), BOS, dtype=torch.long)
    out = []
    for t in range(width):
        out.append(cell.step(prev))
        prev = ids[:, t]
    return F.log_softmax(torch.stack(out, dim=1), dim=-1)


def sequence_log_probs(z: torch.Tensor, ids: torch.Tensor, psi: ComponentParams) -> torch.Tensor:
    """log p(ids[:, t] | ids[:, <t], z) for every position, shape (N, T)."""
    logp = decode_teacher_forced(z, ids, psi)
    return logp.gather(2, ids.unsqueeze(-1)).squeeze(-1)


def reconstruction_loss(
    batch: SequenceBatch,
    phi: ComponentParams,
    psi: ComponentParams,
    k: int = 0,
    train_mode: bool = True,
    schedule: NoiseSchedule | None = None,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Encode the batch (noised in train mode) and return the decoder's mean token NLL."""
    z = encode(batch, phi, k, train_mode, schedule, gen)
    return token_nll(batch, z, psi)


def token_nll(batch: SequenceBatch, z: torch.Tensor, psi: ComponentParams) -> torch.Tensor:
    """Mean negative log-likelihood per real token of the batch given its codes."""
    ids, lengths = batch_tensors(batch)
    token_logp = sequence_log_probs(z, ids, psi)
    mask = length_mask(lengths, ids.shape[1], token_logp.dtype)
    return -(token_logp * mask).sum() / mask.sum()


@torch.no_grad()
def sample_ids(
    z: torch.Tensor, psi: ComponentParams, max_len: int, greedy: bool = False, gen: torch.Generator | None = None
) -> SequenceBatch:
    """Autoregressive generation from BOS until EOS or ``max_len`` tokens."""
    n = z.shape[0]
    cell = _DecoderCell(z, psi)
    prev = torch.full((n,), BOS, dtype=torch.long)
    ids = torch.full((n, max_len), PAD, dtype=torch.long)
    lengths = torch.full((n,), max_len, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    for t in range(max_len):
        logits = cell.step(prev)
        if greedy:
            tok = logits.argmax(dim=-1)
        else:
            probs = torch.softmax(logits.double(), dim=-1)
            tok = torch.multinomial(probs, 1, generator=gen).squeeze(1)
        tok = torch.where(done, torch.full_like(tok, PAD), tok)
        ids[:, t] = tok
        newly = (tok == EOS) & ~done
        lengths = torch.where(newly, torch.full_like(lengths, t + 1), lengths)
        done = done | newly
        prev = tok
        if bool(done.all()):
            break
    return SequenceBatch(ids.numpy(), lengths.numpy())


def decode_free_running(
    z: torch.Tensor, psi: ComponentParams, max_len: int, mode: str = "sample", seed: int | None = 0
) -> list[TokenSequence]:
    if mode not in ("sample", "greedy"):
        raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    gen = None
    if mode == "sample":
        gen = torch.Generator().manual_seed(int(seed or 0))
    return sample_ids(z, psi, max_len, greedy=(mode == "greedy"), gen=gen).sequences()


def load_embedding_file(path, vocab, dim: int = 300) -> tuple[np.ndarray, int]:
    """Read ``token v1 ... v_dim`` lines; returns (matrix rows for the vocab, hits)."""
    table = np.zeros((len(vocab), dim))
    hits = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1 or parts[0] not in vocab:
                continue
            table[vocab.token_to_id[parts[0]]] = np.asarray(parts[1:], dtype=np.float64)
            hits += 1
    return table, hits
