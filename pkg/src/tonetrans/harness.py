"""Deterministic training: staging, batching, seeding, checkpoints, metrics.

Every source of randomness in a run derives from ``SeedSequence([seed,
step])``, so a killed run resumed from its last checkpoint replays the exact
remaining trajectory, and two runs with the same config produce byte-identical
metric logs. Metric records carry no timestamps for the same reason.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn, translator
from .corpus import load_split
from .features import ChannelStats, compute_channel_stats, channel_normalize, stack_frames
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step, lr_schedule
from .quantizer import (QuantizerModel, VqConfig, quantize_frames,
                        quantizer_batch_loss, seed_codebook_from_data)
from .tensor import NonFiniteError, Tensor, gradient_of
from .tensorio import atomic_write_bytes
from .translator import ModelConfig, TextlessModel

STAGES = ("quantizer", "encoder_pretrain", "s2st")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; maps to CLI exit code 2."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 500
    eval_every: int = 50
    precision: str = "float64"
    # encoder pretraining only
    mask_fraction: float = 0.4
    mask_span: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.warmup_steps > self.steps:
            raise ConfigError(
                f"train.warmup_steps ({self.warmup_steps}) must be <= steps ({self.steps})")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"train.precision must be float64 or float32")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError(
                f"train.mask_fraction must be in (0, 1), got {self.mask_fraction}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MetricLog:
    """Append-only {step, name, value} records, persisted as JSON lines."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []
        self._last_step: dict[str, int] = {}

    def log(self, step: int, name: str, value: float) -> None:
        prev = self._last_step.get(name, -1)
        if step < prev:
            raise ValueError(f"metric '{name}' stepped backwards: {prev} -> {step}")
        self._last_step[name] = step
        self.records.append({"step": int(step), "name": name, "value": float(value)})

    def flush(self) -> None:
        if self.path is None:
            return
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":"))
                 for r in self.records]
        atomic_write_bytes(self.path, ("\n".join(lines) + "\n").encode()
                           if lines else b"")


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


class BucketSampler:
    """Length-sorted fixed buckets; each draw picks one bucket uniformly."""

    def __init__(self, lengths: list[int], batch_size: int):
        order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
        self.buckets = [order[i:i + batch_size]
                        for i in range(0, len(order), batch_size)]

    def sample(self, rng: np.random.Generator) -> list[int]:
        return self.buckets[int(rng.integers(len(self.buckets)))]


# ---------------------------------------------------------------------------
# batch assembly


def batch_quantizer(items: list[dict], idxs: list[int], stride: int):
    m_max = max(items[i]["stacked"].shape[0] for i in idxs)
    b = len(idxs)
    w = items[idxs[0]]["stacked"].shape[1]
    d = items[idxs[0]]["frames"].shape[1]
    stacked = np.zeros((b, m_max, w))
    frames = np.zeros((b, m_max * stride, d))
    pos_mask = np.zeros((b, m_max))
    for row, i in enumerate(idxs):
        m = items[i]["stacked"].shape[0]
        stacked[row, :m] = items[i]["stacked"]
        frames[row, :m * stride] = items[i]["frames"]
        pos_mask[row, :m] = 1.0
    return stacked, frames, pos_mask


def batch_s2st(items: list[dict], idxs: list[int], pad_id: int, stride: int) -> dict:
    b = len(idxs)
    ts_max = max(items[i]["src"].shape[0] for i in idxs)
    l_max = max(items[i]["codes"].shape[0] for i in idxs)
    d = items[idxs[0]]["src"].shape[1]
    src = np.zeros((b, ts_max, d))
    src_lens = np.zeros(b, dtype=np.int64)
    codes = np.full((b, l_max), pad_id, dtype=np.int64)
    code_lens = np.zeros(b, dtype=np.int64)
    tgt = np.zeros((b, l_max * stride, d))
    for row, i in enumerate(idxs):
        it = items[i]
        ts, l = it["src"].shape[0], it["codes"].shape[0]
        src[row, :ts] = it["src"]
        src_lens[row] = ts
        codes[row, :l] = it["codes"]
        code_lens[row] = l
        tgt[row, :l * stride] = it["tgt_frames"]
    return {"src": src, "src_lens": src_lens, "codes": codes,
            "code_lens": code_lens, "tgt_frames": tgt}


def batch_pretrain(items: list[dict], idxs: list[int], rng: np.random.Generator,
                   mask_fraction: float, mask_span: int) -> dict:
    b = len(idxs)
    t_max = max(items[i]["frames"].shape[0] for i in idxs)
    d = items[idxs[0]]["frames"].shape[1]
    m_max = translator.subsampled_length(t_max)
    src = np.zeros((b, t_max, d))
    src_lens = np.zeros(b, dtype=np.int64)
    target_ids = np.zeros((b, m_max), dtype=np.int64)
    loss_mask = np.zeros((b, m_max))
    sub = translator.SUBSAMPLE
    for row, i in enumerate(idxs):
        frames = items[i]["frames"]
        ids = items[i]["ids"]
        t = frames.shape[0]
        m_codes = ids.shape[0]
        src[row, :t] = frames
        src_lens[row] = t
        target_ids[row, :m_codes] = ids
        n_spans = max(1, int(round(mask_fraction * m_codes / mask_span)))
        starts = rng.integers(0, max(m_codes - mask_span + 1, 1), size=n_spans)
        masked = np.zeros(m_codes, dtype=bool)
        for s0 in starts:
            masked[s0:s0 + mask_span] = True
        for j in np.nonzero(masked)[0]:
            src[row, j * sub:(j + 1) * sub] = 0.0
        loss_mask[row, :m_codes] = masked.astype(float)
    return {"src": src, "src_lens": src_lens, "target_ids": target_ids,
            "loss_mask": loss_mask}


# ---------------------------------------------------------------------------
# item preparation


def prepare_quantizer_items(pairs, stride: int, stats: ChannelStats) -> list[dict]:
    items = []
    for pair in pairs:
        frames_n = channel_normalize(pair.target.frames, stats)
        m = frames_n.shape[0] // stride
        if m < 1:
            continue
        frames_n = frames_n[:m * stride]
        items.append({"stacked": stack_frames(frames_n, stride),
                      "frames": frames_n, "len": m})
    if not items:
        raise ConfigError("quantizer stage: no usable training utterances")
    return items


def prepare_s2st_items(pairs, q: QuantizerModel, src_stats: ChannelStats) -> list[dict]:
    if q.stats is None:
        raise ConfigError("s2st stage: quantizer checkpoint lacks channel stats")
    items = []
    for pair in pairs:
        tgt_n = channel_normalize(pair.target.frames, q.stats)
        m = tgt_n.shape[0] // q.cfg.stride
        if m < 1:
            continue
        codes = quantize_frames(q, tgt_n[:m * q.cfg.stride]).code_ids
        items.append({
            "src": channel_normalize(pair.source.frames, src_stats),
            "codes": codes,
            "tgt_frames": tgt_n[:m * q.cfg.stride],
            "len": int(codes.shape[0]),
        })
    if not items:
        raise ConfigError("s2st stage: no usable training utterances")
    return items


def prepare_pretrain_items(pairs, q: QuantizerModel, stats: ChannelStats) -> list[dict]:
    items = []
    for pair in pairs:
        for spec in (pair.source, pair.target):
            frames_n = channel_normalize(spec.frames, stats)
            if frames_n.shape[0] < q.cfg.stride:
                continue
            ids = quantize_frames(q, frames_n).code_ids
            items.append({"frames": frames_n, "ids": ids, "len": frames_n.shape[0]})
    if not items:
        raise ConfigError("encoder_pretrain stage: no usable utterances")
    return items


# ---------------------------------------------------------------------------
# checkpoint payloads


def _adam_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in state.m.items():
        out[f"adam/m/{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam/v/{name}"] = arr
    return out


def _restore_adam(params: dict[str, Tensor], tensors: dict[str, np.ndarray],
                  t: int) -> AdamState:
    state = AdamState.for_params(params)
    state.t = t
    for name in params:
        state.m[name] = np.array(tensors[f"adam/m/{name}"])
        state.v[name] = np.array(tensors[f"adam/v/{name}"])
    return state


def save_quantizer_checkpoint(path: str, q: QuantizerModel, step: int,
                              adam: AdamState | None = None,
                              train_config: TrainConfig | None = None) -> None:
    config = {
        "kind": "quantizer",
        "vq_config": q.cfg.to_dict(),
        "d_mel": q.d_mel,
        "step": step,
        "adam_t": adam.t if adam else 0,
        "channel_stats": q.stats.to_dict() if q.stats else None,
        "train_config": train_config.to_dict() if train_config else None,
    }
    tensors = {name: p.data for name, p in q.parameters().items()}
    if adam is not None:
        tensors.update(_adam_tensors(adam))
    save_checkpoint(path, config, tensors)


def load_quantizer_checkpoint(path: str) -> tuple[QuantizerModel, dict, dict[str, np.ndarray]]:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "quantizer":
        raise ConfigError(f"{path}: not a quantizer checkpoint (kind={config.get('kind')})")
    cfg = VqConfig(**config["vq_config"])
    q = QuantizerModel(cfg, config["d_mel"], seed=0)
    nn.load_parameters(q.parameters(), tensors)
    if config.get("channel_stats"):
        q.stats = ChannelStats.from_dict(config["channel_stats"])
    return q, config, tensors


def save_model_checkpoint(path: str, m: TextlessModel, step: int,
                          adam: AdamState | None = None,
                          train_config: TrainConfig | None = None,
                          kind: str = "s2st_model",
                          extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    config = {
        "kind": kind,
        "model_config": m.cfg.to_dict(),
        "step": step,
        "adam_t": adam.t if adam else 0,
        "channel_stats_source": m.source_stats.to_dict() if m.source_stats else None,
        "train_config": train_config.to_dict() if train_config else None,
    }
    if kind == "s2st_model":
        tensors = {name: p.data for name, p in m.parameters().items()}
    else:
        tensors = {name: p.data for name, p in m.encoder_parameters().items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    if adam is not None:
        tensors.update(_adam_tensors(adam))
    save_checkpoint(path, config, tensors)


def load_model_checkpoint(path: str) -> tuple[TextlessModel, dict, dict[str, np.ndarray]]:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "s2st_model":
        raise ConfigError(f"{path}: not a model checkpoint (kind={config.get('kind')})")
    cfg = ModelConfig(**config["model_config"])
    m = TextlessModel(cfg, seed=0)
    nn.load_parameters(m.parameters(), tensors)
    if config.get("channel_stats_source"):
        m.source_stats = ChannelStats.from_dict(config["channel_stats_source"])
    return m, config, tensors


# ---------------------------------------------------------------------------
# the loop


def _training_loop(tcfg: TrainConfig, start_step: int, step_fn, metric_log: MetricLog,
                   checkpoint_fn=None) -> list[float]:
    """Run steps start_step+1 .. tcfg.steps; returns the total-loss history."""
    history = []
    for step in range(start_step + 1, tcfg.steps + 1):
        rng = step_rng(tcfg.seed, step)
        lr = lr_schedule(step, tcfg.learning_rate, tcfg.warmup_steps)
        try:
            metrics = step_fn(step, rng, lr)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step}: {e}") from None
        total = metrics["loss/total"]
        if not np.isfinite(total):
            raise NonFiniteError(f"step {step}: non-finite loss {total}")
        history.append(total)
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            metric_log.log(step, "lr", lr)
            for name, value in metrics.items():
                metric_log.log(step, name, value)
            metric_log.flush()
        if checkpoint_fn is not None and (
                step % tcfg.checkpoint_every == 0 or step == tcfg.steps):
            checkpoint_fn(step)
    metric_log.flush()
    return history


def _grad_step(params: dict[str, Tensor], total: Tensor, adam: AdamState,
               lr: float) -> float:
    grads = gradient_of(total, params)
    adam_step(params, grads, adam, lr)
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# stages


def run_training(stage: str, out_dir: str, corpus_dir: str,
                 train_config: TrainConfig,
                 vq_config: VqConfig | None = None,
                 model_config: ModelConfig | None = None,
                 quantizer_path: str | None = None,
                 encoder_init_path: str | None = None,
                 init_synth_from_vqvae: bool = False,
                 resume: bool = False) -> dict:
    """Train one stage; writes checkpoint.ckpt and metrics.jsonl under out_dir."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}', expected one of {STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    metric_log = MetricLog(os.path.join(out_dir, "metrics.jsonl"))
    pairs = load_split(corpus_dir, "train")

    if stage == "quantizer":
        result = _run_quantizer_stage(pairs, vq_config or VqConfig(), train_config,
                                      ckpt_path, metric_log, resume)
    elif stage == "encoder_pretrain":
        if quantizer_path is None:
            raise ConfigError("encoder_pretrain stage requires a quantizer checkpoint")
        result = _run_pretrain_stage(pairs, quantizer_path,
                                     model_config or ModelConfig(), train_config,
                                     ckpt_path, metric_log, resume)
    else:
        if quantizer_path is None:
            raise ConfigError("s2st stage requires a quantizer checkpoint (--quantizer)")
        result = _run_s2st_stage(pairs, quantizer_path, encoder_init_path,
                                 init_synth_from_vqvae,
                                 model_config or ModelConfig(), train_config,
                                 ckpt_path, metric_log, resume)
    result["checkpoint"] = ckpt_path
    result["metrics"] = metric_log.path
    return result


def _run_quantizer_stage(pairs, cfg: VqConfig, tcfg: TrainConfig, ckpt_path: str,
                         metric_log: MetricLog, resume: bool) -> dict:
    d_mel = pairs[0].target.num_channels
    start_step = 0
    if resume and os.path.exists(ckpt_path):
        q, stored, tensors = load_quantizer_checkpoint(ckpt_path)
        if stored["vq_config"] != cfg.to_dict():
            raise ConfigError("resume: stored vq_config differs from requested config")
        start_step = stored["step"]
        adam = _restore_adam(q.trainable_parameters(), tensors, stored["adam_t"])
    else:
        q = QuantizerModel(cfg, d_mel, seed=tcfg.seed)
        q.stats = compute_channel_stats((p.target.frames for p in pairs), split="train")
        if q.codebook.learned:
            seed_items = prepare_quantizer_items(pairs, cfg.stride, q.stats)
            rows = np.concatenate([it["stacked"] for it in seed_items], axis=0)
            seed_codebook_from_data(
                q, rows, np.random.default_rng(np.random.SeedSequence([tcfg.seed, 404])))
        adam = AdamState.for_params(q.trainable_parameters())
    items = prepare_quantizer_items(pairs, cfg.stride, q.stats)
    sampler = BucketSampler([it["len"] for it in items], tcfg.batch_size)
    trainable = q.trainable_parameters()

    def step_fn(step, rng, lr):
        idxs = sampler.sample(rng)
        stacked, frames, pos_mask = batch_quantizer(items, idxs, cfg.stride)
        total, breakdown, _ids = quantizer_batch_loss(q, stacked, frames, pos_mask)
        gnorm = _grad_step(trainable, total, adam, lr)
        return {"loss/total": breakdown.total,
                "loss/reconstruction": breakdown.reconstruction,
                "loss/codebook": breakdown.codebook_term,
                "loss/commitment": breakdown.commitment_term,
                "grad_norm": gnorm}

    def checkpoint_fn(step):
        save_quantizer_checkpoint(ckpt_path, q, step, adam, tcfg)

    history = _training_loop(tcfg, start_step, step_fn, metric_log, checkpoint_fn)
    return {"stage": "quantizer", "steps": tcfg.steps, "loss_history": history,
            "model": q}


def _run_pretrain_stage(pairs, quantizer_path: str, mcfg: ModelConfig,
                        tcfg: TrainConfig, ckpt_path: str, metric_log: MetricLog,
                        resume: bool) -> dict:
    q, _, _ = load_quantizer_checkpoint(quantizer_path)
    if q.cfg.stride != translator.SUBSAMPLE:
        raise ConfigError(
            f"encoder_pretrain: quantizer stride {q.cfg.stride} must equal the "
            f"encoder subsampling factor {translator.SUBSAMPLE}")
    if mcfg.codebook_size != q.cfg.codebook_size:
        raise ConfigError(
            f"encoder_pretrain: model codebook_size {mcfg.codebook_size} != "
            f"quantizer {q.cfg.codebook_size}")
    frames_iter = [s.frames for p in pairs for s in (p.source, p.target)]
    stats = compute_channel_stats(frames_iter, split="train")
    q_local = q
    q_local.stats = None  # items are already normalized
    items = prepare_pretrain_items(pairs, q_local, stats)
    sampler = BucketSampler([it["len"] for it in items], tcfg.batch_size)

    rng0 = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 303]))
    model = TextlessModel(mcfg, seed=tcfg.seed)
    head = nn.Linear(mcfg.enc_width, q.cfg.codebook_size, rng0)
    params = dict(model.encoder_parameters())
    params.update({f"pretrain_head/{k}": v for k, v in head.parameters().items()})
    start_step = 0
    if resume and os.path.exists(ckpt_path):
        stored_cfg, tensors = load_checkpoint(ckpt_path)
        if stored_cfg.get("kind") != "encoder_pretrain":
            raise ConfigError(f"{ckpt_path}: not an encoder_pretrain checkpoint")
        nn.load_parameters(params, tensors)
        start_step = stored_cfg["step"]
        adam = _restore_adam(params, tensors, stored_cfg["adam_t"])
    else:
        adam = AdamState.for_params(params)

    def step_fn(step, rng, lr):
        idxs = sampler.sample(rng)
        batch = batch_pretrain(items, idxs, rng, tcfg.mask_fraction, tcfg.mask_span)
        ce, acc = translator.masked_pretrain_loss(model, head, batch)
        gnorm = _grad_step(params, ce, adam, lr)
        return {"loss/total": ce.item(), "masked_accuracy": acc, "grad_norm": gnorm}

    def checkpoint_fn(step):
        head_tensors = {f"pretrain_head/{k}": v.data
                        for k, v in head.parameters().items()}
        save_model_checkpoint(ckpt_path, model, step, adam, tcfg,
                              kind="encoder_pretrain", extra_tensors=head_tensors)

    history = _training_loop(tcfg, start_step, step_fn, metric_log, checkpoint_fn)
    return {"stage": "encoder_pretrain", "steps": tcfg.steps,
            "loss_history": history, "model": model}


def load_encoder_init(path: str, model: TextlessModel) -> None:
    """Copy pretrained encoder tensors into a model, shape-checked."""
    config, tensors = load_checkpoint(path)
    if config.get("kind") not in ("encoder_pretrain", "s2st_model"):
        raise ConfigError(f"{path}: kind '{config.get('kind')}' has no encoder to load")
    nn.load_parameters(model.encoder_parameters(), tensors)


def _run_s2st_stage(pairs, quantizer_path: str, encoder_init_path: str | None,
                    init_synth: bool, mcfg: ModelConfig, tcfg: TrainConfig,
                    ckpt_path: str, metric_log: MetricLog, resume: bool) -> dict:
    q, q_config, _ = load_quantizer_checkpoint(quantizer_path)
    if mcfg.stride != q.cfg.stride:
        raise ConfigError(
            f"s2st: model stride {mcfg.stride} != quantizer stride {q.cfg.stride}")
    if mcfg.codebook_size != q.cfg.codebook_size:
        raise ConfigError(
            f"s2st: model codebook_size {mcfg.codebook_size} != quantizer "
            f"{q.cfg.codebook_size}")
    if mcfg.d_mel != q.d_mel:
        raise ConfigError(f"s2st: model d_mel {mcfg.d_mel} != quantizer {q.d_mel}")

    start_step = 0
    if resume and os.path.exists(ckpt_path):
        model, stored, tensors = load_model_checkpoint(ckpt_path)
        start_step = stored["step"]
        adam = _restore_adam(model.trainable_parameters(), tensors, stored["adam_t"])
    else:
        model = TextlessModel(mcfg, seed=tcfg.seed)
        model.source_stats = compute_channel_stats(
            (p.source.frames for p in pairs), split="train")
        if encoder_init_path is not None:
            load_encoder_init(encoder_init_path, model)
        if init_synth:
            translator.init_synthesizer_from_vqvae(model, q)
        adam = AdamState.for_params(model.trainable_parameters())

    items = prepare_s2st_items(pairs, q, model.source_stats)
    sampler = BucketSampler([it["len"] for it in items], tcfg.batch_size)
    trainable = model.trainable_parameters()

    def step_fn(step, rng, lr):
        idxs = sampler.sample(rng)
        batch = batch_s2st(items, idxs, mcfg.pad_id, mcfg.stride)
        total, parts, _logits = translator.forward_training(model, batch)
        gnorm = _grad_step(trainable, total, adam, lr)
        return {"loss/total": parts.total, "loss/code_ce": parts.code_ce,
                "loss/spec_l1": parts.spec_l1, "grad_norm": gnorm}

    def checkpoint_fn(step):
        save_model_checkpoint(ckpt_path, model, step, adam, tcfg)

    history = _training_loop(tcfg, start_step, step_fn, metric_log, checkpoint_fn)
    return {"stage": "s2st", "steps": tcfg.steps, "loss_history": history,
            "model": model, "quantizer": q}
