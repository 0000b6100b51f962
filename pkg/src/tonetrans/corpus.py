"""On-disk corpus layout: per-utterance tensor files plus a JSONL manifest.

Directory contents:
    manifest.jsonl   one record per utterance (id, seed, tokens, paths, split)
    grammar.json     the generating grammar
    frontend.json    feature extraction parameters
    utt??????.src.ten / utt??????.tgt.ten   spectrogram tensors

Splits are assigned by index (18 mod 20 -> dev, 19 mod 20 -> test, else
train) so they are stable across regenerations of any corpus size.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import tensorio
from .features import ChannelStats, FrontendConfig, Spectrogram
from .grammar import ToyGrammar, ToyUtterancePair, generate_pair

SPLITS = ("train", "dev", "test")


def split_of_index(index: int) -> str:
    r = index % 20
    if r == 18:
        return "dev"
    if r == 19:
        return "test"
    return "train"


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_corpus(out_dir: str, grammar: ToyGrammar, count: int, seed: int,
                 cfg: FrontendConfig | None = None) -> list[dict]:
    """Generate and persist ``count`` pairs; returns the manifest records."""
    if count < 1:
        raise ValueError(f"write_corpus: count must be >= 1, got {count}")
    if cfg is None:
        cfg = FrontendConfig()
    os.makedirs(out_dir, exist_ok=True)
    tensorio.atomic_write_bytes(
        os.path.join(out_dir, "grammar.json"), grammar.to_json().encode())
    tensorio.atomic_write_bytes(
        os.path.join(out_dir, "frontend.json"),
        _dump_json(dataclasses.asdict(cfg)).encode())
    records = []
    lines = []
    for i in range(count):
        pair = generate_pair(grammar, cfg, seed, i)
        uid = f"utt{i:06d}"
        src_path = f"{uid}.src.ten"
        tgt_path = f"{uid}.tgt.ten"
        tensorio.save_array(os.path.join(out_dir, src_path), pair.source.frames)
        tensorio.save_array(os.path.join(out_dir, tgt_path), pair.target.frames)
        rec = {
            "id": uid,
            "seed": pair.seed,
            "generator_seed": seed,
            "source_tokens": list(pair.source_tokens),
            "target_tokens": list(pair.target_tokens),
            "source_path": src_path,
            "target_path": tgt_path,
            "split": split_of_index(i),
        }
        records.append(rec)
        lines.append(_dump_json(rec))
    tensorio.atomic_write_bytes(
        os.path.join(out_dir, "manifest.jsonl"), ("\n".join(lines) + "\n").encode())
    return records


def load_manifest(corpus_dir: str) -> list[dict]:
    path = os.path.join(corpus_dir, "manifest.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.jsonl in {corpus_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_grammar(corpus_dir: str) -> ToyGrammar:
    with open(os.path.join(corpus_dir, "grammar.json"), "r", encoding="utf-8") as f:
        return ToyGrammar.from_json(f.read())


def load_frontend(corpus_dir: str) -> FrontendConfig:
    with open(os.path.join(corpus_dir, "frontend.json"), "r", encoding="utf-8") as f:
        return FrontendConfig(**json.load(f))


def load_pair(corpus_dir: str, record: dict, cfg: FrontendConfig) -> ToyUtterancePair:
    src = tensorio.load_array(os.path.join(corpus_dir, record["source_path"]))
    tgt = tensorio.load_array(os.path.join(corpus_dir, record["target_path"]))
    return ToyUtterancePair(
        source=Spectrogram(src, cfg.frame_rate_hz),
        target=Spectrogram(tgt, cfg.frame_rate_hz),
        source_tokens=tuple(record["source_tokens"]),
        target_tokens=tuple(record["target_tokens"]),
        seed=record["seed"],
    )


def load_split(corpus_dir: str, split: str) -> list[ToyUtterancePair]:
    if split not in SPLITS:
        raise ValueError(f"unknown split '{split}', expected one of {SPLITS}")
    cfg = load_frontend(corpus_dir)
    records = [r for r in load_manifest(corpus_dir) if r["split"] == split]
    if not records:
        raise ValueError(f"split '{split}' is empty in {corpus_dir}")
    return [load_pair(corpus_dir, r, cfg) for r in records]


def save_channel_stats(path: str, stats: ChannelStats) -> None:
    tensorio.atomic_write_bytes(path, _dump_json(stats.to_dict()).encode())


def load_channel_stats(path: str) -> ChannelStats:
    with open(path, "r", encoding="utf-8") as f:
        return ChannelStats.from_dict(json.load(f))
