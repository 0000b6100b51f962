"""Metrics: oracle transcription, edit-distance accuracy, model evaluation.

The transcription oracle matches clean token templates against a raw
log-mel spectrogram by sliding normalized cross-correlation, then picks
non-overlapping peaks greedily by score. It replaces an ASR model: the toy
grammar's templates are known exactly, so transcription is a calibration
question, not a modeling one. The calibration gate (token recovery on clean
generator output) must pass before any model scores are trusted.

Correlation is referenced to the frontend's silence floor, not the window
mean: log-mel silence is a large constant, and mean-centered correlation is
dominated by that shared background, so badly misaligned windows still score
high. Subtracting the floor makes silence contribute exactly zero and ties
the score to actual template overlap. Threshold calibrated on clean
generator output (true peaks >= 0.989, spurious accepts start near 0.85).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import (LOG_FLOOR, FrontendConfig, Spectrogram,
                       channel_denormalize, channel_normalize)
from .grammar import ToyGrammar, render_clean_token_spectrogram
from .quantizer import QuantizerModel, codebook_utilization, quantize_frames
from .translator import TextlessModel, decode_linguistic_teacher_forced, encode_speech, infer

CORRELATION_THRESHOLD = 0.9
OVERLAP_TOLERANCE = 0.25  # fraction of the shorter template allowed to overlap


@lru_cache(maxsize=8)
def _clean_templates(grammar: ToyGrammar, cfg: FrontendConfig, side: str):
    templates = grammar.target_templates if side == "target" else grammar.source_templates
    return tuple(render_clean_token_spectrogram(t, cfg) for t in templates)


def transcribe_toy(spec, grammar: ToyGrammar, cfg: FrontendConfig,
                   side: str = "target",
                   threshold: float = CORRELATION_THRESHOLD) -> list[int]:
    """Token ids in time order; empty list when nothing clears the threshold."""
    frames = spec.frames if isinstance(spec, Spectrogram) else np.asarray(spec)
    if frames.ndim != 2 or frames.shape[0] == 0:
        return []
    t_total = frames.shape[0]
    floor = np.log(LOG_FLOOR)
    candidates = []  # (score, start, token, length)
    for token, tpl in enumerate(_clean_templates(grammar, cfg, side)):
        ti = tpl.shape[0]
        if ti > t_total:
            continue
        windows = sliding_window_view(frames, (ti, frames.shape[1]))[:, 0]
        flat = windows.reshape(windows.shape[0], -1) - floor
        denom = np.linalg.norm(flat, axis=1)
        p = tpl.reshape(-1) - floor
        p_norm = np.linalg.norm(p)
        if p_norm < 1e-8:
            continue
        safe = np.maximum(denom, 1e-8)
        scores = (flat @ p) / (safe * p_norm)
        scores[denom < 1e-8] = 0.0  # all-silence windows never match
        for start in np.nonzero(scores >= threshold)[0]:
            candidates.append((float(scores[start]), int(start), token, ti))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    picked = []
    for score, start, token, ti in candidates:
        end = start + ti
        clash = False
        for _, s2, _, t2 in picked:
            e2 = s2 + t2
            overlap = min(end, e2) - max(start, s2)
            if overlap > OVERLAP_TOLERANCE * min(ti, t2):
                clash = True
                break
        if not clash:
            picked.append((score, start, token, ti))
    picked.sort(key=lambda c: c[1])
    return [token for _, _, token, _ in picked]


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def token_accuracy(hyp, ref) -> float:
    """1 - normalized edit distance; two empty sequences score 1.0."""
    hyp, ref = list(hyp), list(ref)
    longest = max(len(hyp), len(ref))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(hyp, ref) / longest


def sequence_exact_match(hyp, ref) -> bool:
    return list(hyp) == list(ref)


@dataclass
class EvalReport:
    split: str
    num_utterances: int
    token_accuracy: float
    sequence_exact_match: float
    code_prediction_accuracy: float
    spec_l1: float
    codebook_entropy: float
    truncation_rate: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def spec_l1_metric(hyp_frames: np.ndarray, ref_frames: np.ndarray) -> float:
    """Mean |hyp - ref| over the overlapping prefix; empty hyp scores the
    reference's mean magnitude (the empty prediction is maximally wrong)."""
    hyp_frames = np.asarray(hyp_frames)
    ref_frames = np.asarray(ref_frames)
    if hyp_frames.shape[0] == 0 or ref_frames.shape[0] == 0:
        return float(np.abs(ref_frames).mean()) if ref_frames.size else 0.0
    overlap = min(hyp_frames.shape[0], ref_frames.shape[0])
    return float(np.abs(hyp_frames[:overlap] - ref_frames[:overlap]).mean())


def code_prediction_accuracy(model: TextlessModel, q: QuantizerModel,
                             src_norm: np.ndarray, codes: np.ndarray) -> tuple[int, int]:
    """Teacher-forced top-1 hits over codes + EOS for one utterance."""
    enc_out, enc_valid = encode_speech(model, src_norm[None])
    logits = decode_linguistic_teacher_forced(model, enc_out, enc_valid, codes[None])
    labels = np.concatenate([codes, [model.cfg.eos_id]])
    pred = np.argmax(logits.data[0], axis=-1)
    return int((pred == labels).sum()), int(labels.size)


def evaluate_model(model: TextlessModel, q: QuantizerModel, pairs,
                   grammar: ToyGrammar, frontend: FrontendConfig,
                   split: str = "test") -> EvalReport:
    """Run inference on every pair and aggregate all report metrics."""
    if model.source_stats is None:
        raise ValueError("evaluate_model: model has no source channel stats")
    if q.stats is None:
        raise ValueError("evaluate_model: quantizer has no channel stats")
    if model.cfg.stride != q.cfg.stride:
        raise ValueError(
            f"evaluate_model: model stride {model.cfg.stride} != quantizer "
            f"stride {q.cfg.stride}")
    tok_accs = []
    exact = 0
    truncated = 0
    l1s = []
    code_hits = 0
    code_total = 0
    all_ids = []
    for pair in pairs:
        src_n = channel_normalize(pair.source.frames, model.source_stats)
        result = infer(model, src_n)
        truncated += int(result.truncated)
        if result.frames.shape[0] > 0:
            raw = channel_denormalize(result.frames, q.stats)
            hyp = transcribe_toy(raw, grammar, frontend, side="target")
        else:
            hyp = []
        tok_accs.append(token_accuracy(hyp, pair.target_tokens))
        exact += int(sequence_exact_match(hyp, pair.target_tokens))

        tgt_n = channel_normalize(pair.target.frames, q.stats)
        m = tgt_n.shape[0] // q.cfg.stride
        tgt_n = tgt_n[:m * q.cfg.stride]
        l1s.append(spec_l1_metric(result.frames, tgt_n))
        codes = quantize_frames(q, tgt_n).code_ids
        all_ids.append(codes)
        hits, total = code_prediction_accuracy(model, q, src_n, codes)
        code_hits += hits
        code_total += total
    entropy = codebook_utilization(np.concatenate(all_ids), q.cfg.codebook_size)["entropy"]
    n = len(pairs)
    return EvalReport(
        split=split,
        num_utterances=n,
        token_accuracy=float(np.mean(tok_accs)),
        sequence_exact_match=exact / n,
        code_prediction_accuracy=code_hits / max(code_total, 1),
        spec_l1=float(np.mean(l1s)),
        codebook_entropy=entropy,
        truncation_rate=truncated / n,
    )


def calibrate_transcriber(pairs, grammar: ToyGrammar, frontend: FrontendConfig) -> dict:
    """Token recovery of the oracle on clean generator output, both sides.

    Returns pooled recovery rates; the gate for trusting downstream scores
    is recovery >= 0.99.
    """
    stats = {}
    pooled_edit = 0
    pooled_len = 0
    for side in ("source", "target"):
        edits = 0
        total = 0
        for pair in pairs:
            spec = pair.source if side == "source" else pair.target
            ref = pair.source_tokens if side == "source" else pair.target_tokens
            hyp = transcribe_toy(spec, grammar, frontend, side=side)
            edits += levenshtein(hyp, ref)
            total += max(len(hyp), len(ref))
        stats[f"{side}_recovery"] = 1.0 - edits / max(total, 1)
        pooled_edit += edits
        pooled_len += total
    stats["token_recovery"] = 1.0 - pooled_edit / max(pooled_len, 1)
    return stats
