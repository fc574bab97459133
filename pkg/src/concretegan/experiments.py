"""Desk-scale study harness: mode comparisons, corpus-size sweeps, paired ablations.

An experiment is a JSON document::

    {
      "name": "sweep",
      "base_config": {"grammar": "svo", "max_len": 12, "hidden": 128, ...},
      "cells": [{"mode": "concretegan", "overrides": {}, "seeds": [0, 1]},
                {"mode": "arae_star", "seeds": [0, 1]}],
      "sizes": [1000, 10000],
      "metrics": ["bleu", "b_bleu", "fd", "code_fd", "in_language", "perplexity"],
      "embedder": "hashed-bow",
      "n_samples": null
    }

Each (mode, size, seed) cell trains from scratch, so a cell's numbers depend
only on its own configuration.  Corpus splits depend on the grammar, the
sizes and ``data_seed``, never on the cell seed, so every mode sees
byte-identical data.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import metrics
from .trainer import (
    TrainingConfig,
    export_codes,
    generate_samples,
    heldout_perplexity,
    init_state,
    load_dataset,
    train,
)

log = logging.getLogger(__name__)

ALL_METRICS = ("bleu", "b_bleu", "fd", "code_fd", "in_language", "perplexity")
BLEU_ORDERS = (2, 3, 4, 5)


@dataclass
class Cell:
    mode: str
    seeds: list[int]
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    name: str
    base_config: dict
    cells: list[Cell]
    sizes: list[int] = field(default_factory=list)
    metrics: list[str] = field(default_factory=lambda: list(ALL_METRICS))
    embedder: str = "hashed-bow"
    n_samples: int | None = None

    def __post_init__(self):
        self.cells = [c if isinstance(c, Cell) else Cell(**c) for c in self.cells]
        problems = []
        for c in self.cells:
            if len(c.seeds) < 2:
                problems.append(f"cell {c.mode}: needs at least 2 seeds")
            if "seed" in c.overrides or "mode" in c.overrides:
                problems.append(f"cell {c.mode}: set seeds and mode on the cell, not in overrides")
            if any(k in c.overrides for k in ("vocab_size", "data_seed", "grammar", "train_path", "n_test")):
                problems.append(f"cell {c.mode}: data and vocabulary settings must be shared across cells")
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            problems.append(f"unknown metrics {sorted(unknown)}")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_for(self, cell: Cell, seed: int, size: int | None = None) -> TrainingConfig:
        d = {**self.base_config, **cell.overrides, "mode": cell.mode, "seed": seed}
        if size is not None:
            d["n_train"] = size
        return TrainingConfig.from_dict(d)


def run_cell(config: TrainingConfig, out_dir: str | Path, spec: ExperimentSpec) -> dict:
    """Train one cell, evaluate it, and write its MetricReport (with manifest)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_state(config)
    train(state, out_dir=out)
    test = state.dataset.test
    n = spec.n_samples or len(test)
    samples = generate_samples(state, n, seed=config.seed)
    (out / "samples.txt").write_text("".join(s + "\n" for s in samples), encoding="utf-8")

    wanted = set(spec.metrics)
    codes = None
    if "code_fd" in wanted and config.mode != "mle":
        c = export_codes(state, test, min(len(test), n), seed=config.seed)
        codes = (c["encoder"], c["generator"])
    embedder = metrics.get_embedder(spec.embedder) if "fd" in wanted else None
    report = metrics.evaluate_run(samples, test, embedder, codes=codes, seeds=[config.seed], orders=BLEU_ORDERS)
    report.manifest = state.manifest.derive(checkpoint=str((out / "final.ckpt").resolve())).to_dict()
    report_path = out / "report.json"
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")

    row = {"mode": config.mode, "size": config.n_train, "seed": config.seed}
    if "bleu" in wanted:
        row.update({f"bleu_{n}": report.bleu[n] for n in BLEU_ORDERS})
    if "b_bleu" in wanted:
        row.update({f"b_bleu_{n}": report.b_bleu[n] for n in BLEU_ORDERS})
    if "fd" in wanted:
        row["fd"] = report.fd
    if "code_fd" in wanted:
        row["code_fd"] = report.code_fd
    oracle = state.dataset.oracle
    if "in_language" in wanted and oracle is not None:
        row["in_language"] = sum(oracle.in_language(s) for s in samples) / max(len(samples), 1)
    if "perplexity" in wanted and config.mode == "mle":
        row["perplexity"] = heldout_perplexity(state, test)
        if oracle is not None:
            row["oracle_perplexity"] = oracle.perplexity()
            row["perplexity_gap"] = abs(row["perplexity"] / row["oracle_perplexity"] - 1.0)
    ids = state.dataset.ids
    row.update(train_digest=ids["train"], test_digest=ids["test"], config_hash=config.config_hash,
               report=str(report_path), manifest=json.dumps(report.manifest, sort_keys=True))
    return row


def write_table(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    columns: list[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    # keep the manifest last so the numeric columns stay readable
    if "manifest" in columns:
        columns.remove("manifest")
        columns.append("manifest")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    return path


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_size_sweep(spec: ExperimentSpec, out_dir: str | Path) -> list[dict]:
    """One row per (mode, size, seed); table written to ``out_dir/<name>_sweep.csv``."""
    if len(spec.sizes) < 2:
        raise ValueError("a size sweep needs at least two corpus sizes")
    out = Path(out_dir)
    rows = []
    for size in spec.sizes:
        for cell in spec.cells:
            for seed in cell.seeds:
                cfg = spec.config_for(cell, seed, size)
                log.info("cell mode=%s size=%d seed=%d", cell.mode, size, seed)
                rows.append(run_cell(cfg, out / f"{cell.mode}-n{size}-s{seed}", spec))
    write_table(rows, out / f"{spec.name}_sweep.csv")
    return rows


def sign_test(a: list[float], b: list[float], lower_is_better: bool = False) -> dict:
    """Paired two-sided sign test of "a beats b"; ties are dropped."""
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if lower_is_better:
        diffs = -diffs
    wins, losses = int((diffs > 0).sum()), int((diffs < 0).sum())
    n = wins + losses
    p = binomtest(wins, n, 0.5).pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "ties": len(diffs) - n, "p_value": float(p)}


_LOWER_IS_BETTER = {"fd", "code_fd", "perplexity", "perplexity_gap"}


def paired_summary(rows: list[dict], mode_a: str, mode_b: str) -> dict:
    """Sign tests of ``mode_a`` against ``mode_b`` for every shared numeric column, paired by seed."""
    by = {(r["mode"], int(r["seed"])): r for r in rows}
    seeds = sorted({s for (m, s) in by if m == mode_a} & {s for (m, s) in by if m == mode_b})
    out = {"pair": [mode_a, mode_b], "seeds": seeds, "metrics": {}}
    if not seeds:
        return out
    skip = {"mode", "size", "seed", "report", "manifest", "train_digest", "test_digest", "config_hash"}
    keys = [k for k in by[(mode_a, seeds[0])] if k not in skip and k in by[(mode_b, seeds[0])]]
    for k in keys:
        try:
            a = [float(by[(mode_a, s)][k]) for s in seeds]
            b = [float(by[(mode_b, s)][k]) for s in seeds]
        except (TypeError, ValueError):
            continue
        out["metrics"][k] = {"a": a, "b": b, **sign_test(a, b, lower_is_better=k in _LOWER_IS_BETTER)}
    return out


def run_ablation(spec: ExperimentSpec, out_dir: str | Path) -> dict:
    """Modes side by side on identical data and seeds, with paired sign tests.

    Uses the first entry of ``sizes`` as the corpus size when given.
    """
    modes = [c.mode for c in spec.cells]
    seed_sets = {tuple(sorted(c.seeds)) for c in spec.cells}
    if len(seed_sets) != 1:
        raise ValueError("ablation cells must share the same seeds")
    out = Path(out_dir)
    size = spec.sizes[0] if spec.sizes else None
    rows = []
    for cell in spec.cells:
        for seed in cell.seeds:
            cfg = spec.config_for(cell, seed, size)
            log.info("ablation cell mode=%s seed=%d", cell.mode, seed)
            rows.append(run_cell(cfg, out / f"{cell.mode}-s{seed}", spec))
    write_table(rows, out / f"{spec.name}_ablation.csv")
    summaries = [paired_summary(rows, a, b) for i, a in enumerate(modes) for b in modes[i + 1 :]]
    split = {(r["train_digest"], r["test_digest"]) for r in rows}
    result = {"rows": rows, "comparisons": summaries, "shared_split": len(split) == 1}
    (out / f"{spec.name}_ablation_summary.json").write_text(
        json.dumps({"comparisons": summaries, "shared_split": result["shared_split"], "spec": spec.to_dict()},
                   indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return result


def shared_split_digests(spec: ExperimentSpec, size: int | None = None) -> set[tuple[str, str]]:
    """Split digests every cell would consume, computed without training."""
    out = set()
    for cell in spec.cells:
        ids = load_dataset(spec.config_for(cell, cell.seeds[0], size)).ids
        out.add((ids["train"], ids["test"]))
    return out
