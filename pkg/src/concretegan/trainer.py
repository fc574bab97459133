"""Training orchestration: one iteration = reconstruction, code GAN, text GAN.

Modes
-----
``concretegan``  all three steps every iteration.
``arae_star``    the text discriminator is detached: steps 1 and 2 only.
``mle``          the decoder alone, trained by teacher forcing with a zero code.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import code_gan, text_gan
from .autoencoder import (
    ArchConfig,
    NoiseSchedule,
    batch_tensors,
    encode,
    init_decoder,
    init_encoder,
    length_mask,
    load_embedding_file,
    reconstruction_loss,
    sample_ids,
    sequence_log_probs,
)
from .corpus import (
    GrammarOracle,
    SequenceBatch,
    Vocabulary,
    build_vocab,
    corpus_digest,
    decode_ids,
    encode_sentence,
    epoch_order,
    get_grammar,
    read_corpus,
    synth_corpus,
)
from .manifest import RunManifest
from .nn import (
    AdamState,
    ComponentParams,
    NonFiniteError,
    adam_update,
    clip_gradients,
    grad,
    grad_many,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("concretegan", "arae_star", "mle")
COMPONENTS = ("encoder", "decoder", "code_generator", "code_discriminator", "text_discriminator")
OPTIMIZERS = ("encoder", "decoder", "code_generator", "code_discriminator", "text_discriminator", "policy")

# fields that do not change what a run computes, so resuming may alter them
_UNHASHED = {"max_iterations", "checkpoint_every", "eval_every", "log_every", "seed"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


class CheckpointVersionError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    mode: str = "concretegan"
    max_iterations: int = 200_000
    batch_size: int = 64
    lr_ae: float = 1e-3
    lr_code_generator: float = 5e-6
    lr_code_discriminator: float = 5e-3
    lr_text_discriminator: float = 5e-3
    lr_policy: float = 1e-3
    gp_lambda: float = 10.0
    n_critic: int = 5
    gamma: float = 0.95
    reward_baseline: bool = False
    noise_sigma0: float = 0.2
    noise_decay: float = 0.995
    noise_interval: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    max_len: int = 15
    vocab_size: int | None = None
    emb_dim: int = 300
    hidden: int = 300
    noise_dim: int = 100
    mlp_layers: int = 2
    leaky_slope: float = 0.2
    z_concat: bool = True
    residual_feedback: bool = True
    tied_output: bool = False
    dtype: str = "float32"
    train_path: str | None = None
    test_path: str | None = None
    grammar: str | None = None
    n_train: int = 10_000
    n_test: int = 1_000
    data_seed: int = 1234
    embedding_path: str | None = None
    checkpoint_every: int = 1000
    eval_every: int = 1000
    log_every: int = 1

    def validate(self) -> "TrainingConfig":
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        for name in ("lr_ae", "lr_code_generator", "lr_code_discriminator", "lr_text_discriminator", "lr_policy",
                     "clip_norm", "noise_decay"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be > 0")
        for name in ("batch_size", "n_critic", "noise_interval", "emb_dim", "hidden", "noise_dim", "n_train",
                     "checkpoint_every", "eval_every", "log_every"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                problems.append(f"{name}: must be an integer >= 1")
        if not (isinstance(self.max_iterations, int) and self.max_iterations >= 0):
            problems.append("max_iterations: must be an integer >= 0")
        if self.mlp_layers < 0:
            problems.append("mlp_layers: must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            problems.append("gamma: must satisfy 0 < gamma < 1")
        if self.gp_lambda < 0:
            problems.append("gp_lambda: must be >= 0")
        if self.noise_sigma0 < 0:
            problems.append("noise_sigma0: must be >= 0")
        if self.max_len < 2:
            problems.append("max_len: must be >= 2")
        if self.vocab_size is not None and self.vocab_size < 1:
            problems.append("vocab_size: must be >= 1 or null")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype: must be 'float32' or 'float64'")
        if self.tied_output:
            problems.append("tied_output: tied output embeddings are not supported")
        if (self.grammar is None) == (self.train_path is None):
            problems.append("data: give exactly one of 'grammar' or 'train_path'")
        if self.grammar is not None:
            try:
                get_grammar(self.grammar)
            except ValueError as e:
                problems.append(f"grammar: {e}")
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError([str(e)]) from None
        return cfg.validate()

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainingConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as e:
            raise ConfigError([f"config file is not valid JSON: {e}"]) from None
        if not isinstance(d, dict):
            raise ConfigError(["config must be a JSON object"])
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes).validate()

    @property
    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.noise_sigma0, self.noise_decay, self.noise_interval)


@dataclass
class Dataset:
    train: list[str]
    test: list[str]
    oracle: GrammarOracle | None = None

    @property
    def ids(self) -> dict:
        return {"train": corpus_digest(self.train), "test": corpus_digest(self.test)}


def load_dataset(config: TrainingConfig) -> Dataset:
    if config.grammar is not None:
        sents, oracle = synth_corpus(config.grammar, config.n_train + config.n_test, config.data_seed)
        return Dataset(sents[: config.n_train], sents[config.n_train :], oracle)
    train = read_corpus(config.train_path)
    test = read_corpus(config.test_path) if config.test_path else []
    return Dataset(train, test)


@dataclass
class TrainState:
    config: TrainingConfig
    vocab: Vocabulary
    arch: ArchConfig
    params: dict[str, ComponentParams]
    opt: dict[str, AdamState]
    gen: torch.Generator
    iteration: int = 0
    epoch: int = 0
    cursor: int = 0
    manifest: RunManifest | None = None
    _train: list | None = field(default=None, repr=False)
    _dataset: Dataset | None = field(default=None, repr=False)

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.config)
        return self._dataset

    @property
    def train_ids(self) -> list:
        if self._train is None:
            self._train = [encode_sentence(s, self.vocab, self.config.max_len) for s in self.dataset.train]
        return self._train

    def digests(self) -> dict[str, str]:
        return {name: p.digest() for name, p in self.params.items()}

    def next_batch(self) -> SequenceBatch:
        """Fixed-size batches walking deterministic per-epoch permutations."""
        n, size = len(self.train_ids), self.config.batch_size
        if size > n:
            warnings.warn(f"batch size {size} exceeds corpus size {n}; using the whole corpus")
            size = n
        if self.cursor + size > n:
            self.epoch += 1
            self.cursor = 0
        order = epoch_order(n, self.config.seed, self.epoch)
        rows = [self.train_ids[i] for i in order[self.cursor : self.cursor + size]]
        self.cursor += size
        return SequenceBatch.from_sequences(rows)


def init_state(config: TrainingConfig, dataset: Dataset | None = None) -> TrainState:
    """Fresh parameters and optimizer states; the vocabulary comes from the training split."""
    config.validate()
    dataset = dataset or load_dataset(config)
    vocab = build_vocab(dataset.train, config.vocab_size)
    arch = ArchConfig(
        vocab_size=len(vocab),
        emb_dim=config.emb_dim,
        hidden=config.hidden,
        noise_dim=config.noise_dim,
        mlp_layers=config.mlp_layers,
        leaky_slope=config.leaky_slope,
        z_concat=config.z_concat,
        residual_feedback=config.residual_feedback,
        tied_output=config.tied_output,
    )
    gen = torch.Generator().manual_seed(config.seed)
    dt = config.torch_dtype
    params = {
        "encoder": init_encoder(arch, gen, dt),
        "decoder": init_decoder(arch, gen, dt),
        "code_generator": code_gan.init_code_generator(arch, gen, dt),
        "code_discriminator": code_gan.init_code_discriminator(arch, gen, dt),
        "text_discriminator": text_gan.init_text_discriminator(arch, gen, dt),
    }
    if config.embedding_path:
        table, hits = load_embedding_file(config.embedding_path, vocab, config.emb_dim)
        log.info("pretrained embeddings: %d of %d vocabulary entries found", hits, len(vocab))
        found = torch.as_tensor(np.abs(table).sum(axis=1) > 0)
        for name in ("encoder", "decoder"):
            emb = params[name]["emb"].detach().clone()
            emb[found] = torch.as_tensor(table, dtype=dt)[found]
            params[name] = ComponentParams(name, {**params[name].tensors, "emb": emb})
    state = TrainState(config, vocab, arch, params, {k: AdamState() for k in OPTIMIZERS}, gen)
    state._dataset = dataset
    state.manifest = RunManifest(
        config_hash=config.config_hash,
        seed=config.seed,
        mode=config.mode,
        datasets=dataset.ids | ({"grammar": config.grammar} if config.grammar else {}),
    )
    return state


# ---------------------------------------------------------------------------
# the three steps
# ---------------------------------------------------------------------------


def autoencoder_step(state: TrainState, batch: SequenceBatch) -> dict[str, float]:
    """Reconstruction update of encoder and decoder (jointly clipped)."""
    cfg = state.config
    phi, psi = state.params["encoder"], state.params["decoder"]
    loss = reconstruction_loss(batch, phi, psi, state.iteration, True, cfg.noise_schedule, state.gen)
    g_phi, g_psi = clip_gradients(grad_many(loss, [phi, psi]), cfg.clip_norm)
    adam_update(phi, g_phi, cfg.lr_ae, state.opt["encoder"])
    adam_update(psi, g_psi, cfg.lr_ae, state.opt["decoder"])
    return {"L_rec": loss.item()}


def mle_step(state: TrainState, batch: SequenceBatch) -> dict[str, float]:
    """Teacher-forced likelihood update of the decoder alone, conditioned on a zero code."""
    cfg = state.config
    psi = state.params["decoder"]
    z = torch.zeros(batch.size, cfg.hidden, dtype=cfg.torch_dtype)
    ids, lengths = batch_tensors(batch)

    def nll(p):
        logp = sequence_log_probs(z, ids, p)
        mask = length_mask(lengths, ids.shape[1], logp.dtype)
        return -(logp * mask).sum() / mask.sum()

    loss, g = grad(nll, psi)
    adam_update(psi, clip_gradients(g, cfg.clip_norm), cfg.lr_ae, state.opt["decoder"])
    return {"L_rec": loss.item()}


def code_space_step(state: TrainState, batch: SequenceBatch) -> dict[str, float]:
    cfg = state.config
    with torch.no_grad():
        z_real = encode(batch, state.params["encoder"], state.iteration, train_mode=False)
    stats = code_gan.code_gan_step(
        z_real,
        state.params["code_generator"],
        state.params["code_discriminator"],
        state.opt["code_generator"],
        state.opt["code_discriminator"],
        cfg.lr_code_generator,
        cfg.lr_code_discriminator,
        code_gan.GanPenaltyConfig(cfg.gp_lambda, cfg.n_critic),
        state.gen,
        cfg.leaky_slope,
    )
    return {"L_omega": stats["L_omega"], "L_theta": stats["L_theta"], "penalty": stats["penalty"]}


def text_space_step(state: TrainState, batch: SequenceBatch) -> dict[str, float]:
    """Discriminator update on real vs generated text, then one policy-gradient decoder update."""
    cfg = state.config
    psi, rho = state.params["decoder"], state.params["text_discriminator"]
    with torch.no_grad():
        mu = code_gan.sample_noise(batch.size, cfg.noise_dim, state.gen, cfg.torch_dtype)
        z_fake = code_gan.generate_code(mu, state.params["code_generator"], cfg.leaky_slope)
    fake = sample_ids(z_fake, psi, cfg.max_len, greedy=False, gen=state.gen)
    loss_rho, g = grad(lambda r: text_gan.disc_loss(batch, fake, r), rho)
    adam_update(rho, clip_gradients(g, cfg.clip_norm), cfg.lr_text_discriminator, state.opt["text_discriminator"])
    pg = text_gan.reinforce_update(
        z_fake, psi, rho, cfg.gamma, state.opt["policy"], cfg.lr_policy, cfg.max_len, state.gen,
        clip_norm=cfg.clip_norm, baseline=cfg.reward_baseline, samples=fake,
    )
    return {"L_rho": loss_rho.item(), "mean_reward": pg["mean_reward"], "mean_gen_length": pg["mean_gen_length"]}


def train_iteration(state: TrainState) -> dict:
    """Run one iteration in the configured mode; returns the log record."""
    cfg = state.config
    k = state.iteration
    batch = state.next_batch()
    record: dict = {"iter": k + 1}
    try:
        if cfg.mode == "mle":
            record.update(mle_step(state, batch))
        else:
            record.update(autoencoder_step(state, batch))
            record.update(code_space_step(state, batch))
            if cfg.mode == "concretegan":
                record.update(text_space_step(state, batch))
            record["sigma"] = cfg.noise_schedule(k)
    except NonFiniteError as e:
        raise NonFiniteError(e.component, e.what, k + 1) from e
    for key, val in record.items():
        if isinstance(val, float) and not math.isfinite(val):
            raise NonFiniteError(key, "scalar", k + 1)
    state.iteration = k + 1
    return record


def train(
    state: TrainState,
    n_iterations: int | None = None,
    out_dir: str | Path | None = None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Iterate, appending one JSON line per iteration to ``out_dir/train_log.jsonl``.

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` iterations and at
    the end.  A non-finite value writes ``halt.ckpt`` and re-raises.
    """
    cfg = state.config
    target = cfg.max_iterations if n_iterations is None else state.iteration + n_iterations
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a", encoding="utf-8")
    try:
        while state.iteration < target:
            try:
                record = train_iteration(state)
            except NonFiniteError:
                if out is not None:
                    save_checkpoint(state, out / "halt.ckpt")
                raise
            if log_fh is not None and state.iteration % cfg.log_every == 0:
                log_fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(state, record)
            if out is not None and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"iter_{state.iteration:07d}.ckpt")
        if out is not None:
            save_checkpoint(state, out / "final.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    manifest = (state.manifest or RunManifest(state.config.config_hash, state.config.seed, state.config.mode))
    manifest = manifest.derive(checkpoint=str(path.resolve()))
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash,
        "arch": state.arch.to_dict(),
        "vocab": state.vocab.words,
        "vocab_max_size": state.vocab.max_size,
        "params": {name: p.state_dict() for name, p in state.params.items()},
        "opt": {name: o.state_dict() for name, o in state.opt.items()},
        "iteration": state.iteration,
        "epoch": state.epoch,
        "cursor": state.cursor,
        "rng": state.gen.get_state(),
        "manifest": json.dumps(manifest.to_dict()),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    try:
        payload = torch.load(Path(path), weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointVersionError(f"{path}: not a readable checkpoint ({e})") from None
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    config = TrainingConfig.from_dict(payload["config"])
    vocab = Vocabulary(payload["vocab"], max_size=payload["vocab_max_size"])
    arch = ArchConfig(**payload["arch"])
    params = {name: ComponentParams(name, t) for name, t in payload["params"].items()}
    opt = {name: AdamState.from_state_dict(o) for name, o in payload["opt"].items()}
    gen = torch.Generator()
    gen.set_state(payload["rng"])
    state = TrainState(config, vocab, arch, params, opt, gen, payload["iteration"], payload["epoch"], payload["cursor"])
    state.manifest = RunManifest.from_dict(json.loads(payload["manifest"]))
    return state


# ---------------------------------------------------------------------------
# inference-time helpers
# ---------------------------------------------------------------------------


def _chunks(n: int, size: int = 256):
    for start in range(0, n, size):
        yield start, min(size, n - start)


def generate_samples(state: TrainState, n: int, seed: int, decoding: str = "sample") -> list[str]:
    """Sentences from noise -> code generator -> decoder (zero code in MLE mode)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    cfg = state.config
    gen = torch.Generator().manual_seed(seed)
    out: list[str] = []
    for _, size in _chunks(n):
        with torch.no_grad():
            if cfg.mode == "mle":
                z = torch.zeros(size, cfg.hidden, dtype=cfg.torch_dtype)
            else:
                mu = code_gan.sample_noise(size, cfg.noise_dim, gen, cfg.torch_dtype)
                z = code_gan.generate_code(mu, state.params["code_generator"], cfg.leaky_slope)
        batch = sample_ids(z, state.params["decoder"], cfg.max_len, greedy=(decoding == "greedy"), gen=gen)
        out.extend(decode_ids(row[:length], state.vocab) for row, length in zip(batch.ids, batch.lengths))
    return out


def encode_sentences(state: TrainState, sentences: list[str]) -> torch.Tensor:
    """Clean (noise-free) encoder codes, one row per sentence."""
    rows = []
    for start, size in _chunks(len(sentences)):
        seqs = [encode_sentence(s, state.vocab, state.config.max_len) for s in sentences[start : start + size]]
        with torch.no_grad():
            rows.append(encode(SequenceBatch.from_sequences(seqs), state.params["encoder"], train_mode=False))
    return torch.cat(rows) if rows else torch.zeros(0, state.config.hidden)


def export_codes(state: TrainState, sentences: list[str], n: int, seed: int = 0) -> dict:
    """Encoder codes of the first ``n`` sentences and ``n`` code-generator outputs."""
    if n > len(sentences):
        raise ValueError(f"asked for {n} encoder codes from {len(sentences)} sentences")
    cfg = state.config
    enc = encode_sentences(state, sentences[:n]).double().numpy()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mu = code_gan.sample_noise(n, cfg.noise_dim, gen, cfg.torch_dtype)
        fake = code_gan.generate_code(mu, state.params["code_generator"], cfg.leaky_slope).double().numpy()
    return {
        "encoder": enc,
        "generator": fake,
        "meta": {"n": n, "seed": seed, "iteration": state.iteration, "mode": cfg.mode, "width": cfg.hidden},
    }


def reconstruction_accuracy(state: TrainState, sentences: list[str]) -> float:
    """Fraction of sentences reproduced exactly by greedy decoding of their clean codes."""
    hits = 0
    for start, size in _chunks(len(sentences)):
        chunk = sentences[start : start + size]
        seqs = [encode_sentence(s, state.vocab, state.config.max_len) for s in chunk]
        batch = SequenceBatch.from_sequences(seqs)
        with torch.no_grad():
            z = encode(batch, state.params["encoder"], train_mode=False)
        out = sample_ids(z, state.params["decoder"], state.config.max_len, greedy=True)
        for seq, row, length in zip(seqs, out.ids, out.lengths):
            hits += tuple(int(t) for t in row[:length]) == seq.ids
    return hits / max(len(sentences), 1)


def heldout_perplexity(state: TrainState, sentences: list[str]) -> float:
    """Per-token perplexity (EOS counted) of the unconditional decoder, as in MLE mode."""
    total, count = 0.0, 0
    cfg = state.config
    for start, size in _chunks(len(sentences)):
        seqs = [encode_sentence(s, state.vocab, cfg.max_len) for s in sentences[start : start + size]]
        batch = SequenceBatch.from_sequences(seqs)
        ids, lengths = batch_tensors(batch)
        with torch.no_grad():
            z = torch.zeros(size, cfg.hidden, dtype=cfg.torch_dtype)
            logp = sequence_log_probs(z, ids, state.params["decoder"]).double()
        mask = length_mask(lengths, ids.shape[1])
        total -= float((logp * mask).sum())
        count += int(mask.sum())
    return math.exp(total / count)
