"""Ablation sweeps: run the full pipeline per (axis value, seed), emit CSV.

Each cell trains a quantizer and an S2ST model from the shared corpus with
one varied parameter, evaluates on the test split, and contributes exactly
one CSV row. Cell failures are recorded in-row (status column) and never
abort the sweep, so the row count is always |values| x |seeds|.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass, field, replace

from . import harness
from .corpus import load_frontend, load_grammar, load_split
from .evaluation import EvalReport, evaluate_model
from .harness import ConfigError, TrainConfig
from .quantizer import QUANTIZER_KINDS, VqConfig
from .translator import ModelConfig

AXES = ("stride", "codebook_size", "quantizer_kind", "encoder_init")
SUPPORTED_VALUES = {
    "stride": (2, 4, 8, 16),
    "codebook_size": (128, 512, 1024, 8192),
    "quantizer_kind": QUANTIZER_KINDS,
    "encoder_init": ("scratch", "pretrained"),
}

CSV_COLUMNS = ("axis", "value", "seed", "status", "token_accuracy",
               "sequence_exact_match", "code_prediction_accuracy", "spec_l1",
               "codebook_entropy", "truncation_rate", "wall_clock_s")


@dataclass
class SweepSpec:
    axis: str
    values: list
    seeds: list
    corpus_dir: str
    quantizer_train: TrainConfig = field(default_factory=TrainConfig)
    s2st_train: TrainConfig = field(default_factory=TrainConfig)
    pretrain_train: TrainConfig = field(default_factory=TrainConfig)
    vq_base: VqConfig = field(default_factory=VqConfig)
    model_base: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"sweep.axis '{self.axis}' not in {AXES}")
        allowed = SUPPORTED_VALUES[self.axis]
        for v in self.values:
            if v not in allowed:
                raise ConfigError(
                    f"sweep value {v!r} unsupported for axis '{self.axis}'; "
                    f"allowed: {allowed}")
        if not self.values:
            raise ConfigError("sweep.values must be non-empty")
        if not self.seeds:
            raise ConfigError("sweep.seeds must be non-empty")


def _cell_configs(spec: SweepSpec, value, seed: int):
    vq = replace(spec.vq_base)
    model = replace(spec.model_base)
    pretrain = False
    if spec.axis == "stride":
        vq = replace(vq, stride=value)
        model = replace(model, stride=value)
    elif spec.axis == "codebook_size":
        vq = replace(vq, codebook_size=value)
        model = replace(model, codebook_size=value)
    elif spec.axis == "quantizer_kind":
        vq = replace(vq, quantizer_kind=value)
    else:
        pretrain = value == "pretrained"
    q_train = replace(spec.quantizer_train, seed=seed)
    s_train = replace(spec.s2st_train, seed=seed)
    p_train = replace(spec.pretrain_train, seed=seed)
    return vq, model, q_train, s_train, p_train, pretrain


def run_cell(spec: SweepSpec, value, seed: int, cell_dir: str) -> EvalReport:
    """Full pipeline for one sweep cell; returns the test-split report."""
    vq, model_cfg, q_train, s_train, p_train, pretrain = _cell_configs(spec, value, seed)
    os.makedirs(cell_dir, exist_ok=True)
    q_dir = os.path.join(cell_dir, "quantizer")
    q_result = harness.run_training("quantizer", q_dir, spec.corpus_dir,
                                    q_train, vq_config=vq)
    encoder_init = None
    if pretrain:
        p_dir = os.path.join(cell_dir, "pretrain")
        harness.run_training("encoder_pretrain", p_dir, spec.corpus_dir, p_train,
                             model_config=model_cfg,
                             quantizer_path=q_result["checkpoint"])
        encoder_init = os.path.join(p_dir, "checkpoint.ckpt")
    s_dir = os.path.join(cell_dir, "s2st")
    s_result = harness.run_training("s2st", s_dir, spec.corpus_dir, s_train,
                                    model_config=model_cfg,
                                    quantizer_path=q_result["checkpoint"],
                                    encoder_init_path=encoder_init)
    pairs = load_split(spec.corpus_dir, "test")
    grammar = load_grammar(spec.corpus_dir)
    frontend = load_frontend(spec.corpus_dir)
    return evaluate_model(s_result["model"], s_result["quantizer"], pairs,
                          grammar, frontend, split="test")


def run_sweep(spec: SweepSpec, out_dir: str) -> str:
    """All cells; returns the CSV path. One row per (value, seed), always."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    rows = []
    for value in spec.values:
        for seed in spec.seeds:
            cell_dir = os.path.join(out_dir, f"cell_{spec.axis}_{value}_seed{seed}")
            started = time.monotonic()
            row = {"axis": spec.axis, "value": value, "seed": seed}
            try:
                report = run_cell(spec, value, seed, cell_dir)
                row["status"] = "ok"
                for fld in ("token_accuracy", "sequence_exact_match",
                            "code_prediction_accuracy", "spec_l1",
                            "codebook_entropy", "truncation_rate"):
                    row[fld] = getattr(report, fld)
            except Exception as e:  # cell failures are data, not crashes
                row["status"] = f"error: {type(e).__name__}: {e}"
                for fld in CSV_COLUMNS:
                    row.setdefault(fld, "")
            row["wall_clock_s"] = round(time.monotonic() - started, 3)
            rows.append(row)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return csv_path


def load_sweep_rows(csv_path: str) -> list[dict]:
    with open(csv_path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
