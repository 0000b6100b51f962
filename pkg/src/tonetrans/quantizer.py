"""Speech quantizers: codebook lookup, VQ objective, encoder variants, decoder.

Three encoder kinds share one codebook/decoder skeleton:
  random       frozen Xavier projection + frozen Gaussian codebook; only the
               reconstruction decoder trains
  linear       the same projection and codebook, but trainable
  transformer  non-causal transformer encoder in place of the projection

Selection: nearest codeword after l2-normalizing both the latent and every
codebook row, ties to the lowest index. Objective: reconstruction L1 plus
alpha * d(sg[latent], code) + beta * d(latent, sg[code]) where d is mean
squared Euclidean distance between normalized vectors (a ``literal_norm``
flag switches to the unsquared distance). The decoder consumes the
normalized codewords; with the straight-through estimator enabled the
reconstruction gradient is copied onto the encoder latents.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .features import ChannelStats, Spectrogram, channel_normalize, stack_frames
from .tensor import ShapeError, Tensor, default_dtype

QUANTIZER_KINDS = ("random", "linear", "transformer")


@dataclass
class VqConfig:
    alpha: float = 1.0
    beta: float = 0.25
    stride: int = 4
    codebook_size: int = 512
    latent_dim: int = 64
    quantizer_kind: str = "random"
    literal_norm: bool = False
    straight_through: bool = True
    # decoder / transformer-encoder profile (desk scale; full preset below)
    width: int = 64
    depth: int = 4
    heads: int = 4
    d_ff: int = 128

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.quantizer_kind not in QUANTIZER_KINDS:
            raise ValueError(
                f"quantizer_kind '{self.quantizer_kind}' not in {QUANTIZER_KINDS}")

    @classmethod
    def full_scale_preset(cls, **overrides) -> "VqConfig":
        """Full-scale profile: 256-wide, 12-layer stacks."""
        base = dict(width=256, depth=12, heads=8, d_ff=1024)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossBreakdown:
    reconstruction: float
    codebook_term: float
    commitment_term: float
    total: float

    def recompose(self, alpha: float, beta: float) -> float:
        return (self.reconstruction + alpha * self.codebook_term) + beta * self.commitment_term


@dataclass
class Codebook:
    vectors: Tensor  # (n, k)
    learned: bool

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class QuantizationResult:
    code_ids: np.ndarray          # (M,) int64
    quantized: np.ndarray         # (M, k) normalized codewords
    losses: LossBreakdown | None = None


def _l2n_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.where(norms < eps, 1.0, norms)


class QuantizerModel:
    """Encoder + codebook + reconstruction decoder for one feature geometry."""

    def __init__(self, cfg: VqConfig, d_mel: int, seed: int):
        self.cfg = cfg
        self.d_mel = d_mel
        self.stats: ChannelStats | None = None
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        w_in = d_mel * cfg.stride
        k = cfg.latent_dim

        frozen = cfg.quantizer_kind == "random"
        if cfg.quantizer_kind in ("random", "linear"):
            a = nn.xavier_uniform(rng, w_in, k)
            self.proj = Tensor(a, requires_grad=not frozen)
            self.enc_in = None
            self.enc_stack = None
            self.enc_out = None
        else:
            self.proj = None
            self.enc_in = nn.Linear(w_in, cfg.width, rng)
            self.enc_stack = nn.TransformerStack(cfg.depth, cfg.width, cfg.heads, cfg.d_ff, rng)
            self.enc_out = nn.Linear(cfg.width, k, rng)

        vecs = rng.standard_normal((cfg.codebook_size, k)).astype(default_dtype())
        self.codebook = Codebook(Tensor(vecs, requires_grad=not frozen), learned=not frozen)

        self.dec_in = nn.Linear(k, cfg.width, rng)
        self.dec_stack = nn.TransformerStack(cfg.depth, cfg.width, cfg.heads, cfg.d_ff, rng)
        kernel = nn.xavier_uniform(rng, cfg.width, cfg.stride * d_mel,
                                   shape=(cfg.stride, cfg.width, d_mel))
        self.out_kernel = Tensor(kernel, requires_grad=True)
        self.out_bias = Tensor(np.zeros(d_mel, dtype=default_dtype()), requires_grad=True)

    @property
    def input_width(self) -> int:
        return self.d_mel * self.cfg.stride

    def encoder_parameters(self) -> dict[str, Tensor]:
        if self.proj is not None:
            return {"encoder/A": self.proj}
        out = {f"encoder/in_proj.{k}": v for k, v in self.enc_in.parameters().items()}
        out.update({f"encoder/stack.{k}": v for k, v in self.enc_stack.parameters().items()})
        out.update({f"encoder/out_proj.{k}": v for k, v in self.enc_out.parameters().items()})
        return out

    def decoder_parameters(self) -> dict[str, Tensor]:
        out = {f"decoder/in_proj.{k}": v for k, v in self.dec_in.parameters().items()}
        out.update({f"decoder/stack.{k}": v for k, v in self.dec_stack.parameters().items()})
        out["decoder/out.kernel"] = self.out_kernel
        out["decoder/out.bias"] = self.out_bias
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder_parameters()
        out["codebook/vectors"] = self.codebook.vectors
        out.update(self.decoder_parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}


def init_quantizer(cfg: VqConfig, d_mel: int, seed: int) -> QuantizerModel:
    return QuantizerModel(cfg, d_mel, seed)


def init_random_quantizer(cfg: VqConfig, d_mel: int, seed: int) -> QuantizerModel:
    if cfg.quantizer_kind != "random":
        raise ValueError(f"expected quantizer_kind 'random', got '{cfg.quantizer_kind}'")
    return QuantizerModel(cfg, d_mel, seed)


def encode_latents(q: QuantizerModel, stacked, pos_mask: np.ndarray | None = None) -> Tensor:
    """(..., M, d*s) stacked frames -> (..., M, k) latents."""
    x = stacked if isinstance(stacked, Tensor) else Tensor(np.asarray(stacked))
    if x.shape[-1] != q.input_width:
        raise ShapeError(
            f"encode_latents: input width {x.shape[-1]} != d*s = {q.input_width}")
    if q.proj is not None:
        return ops.matmul(x, q.proj)
    h = q.enc_in(x)
    h = nn.add_position_encoding(h, x.shape[-2], q.cfg.width)
    mask = nn.padding_mask(pos_mask) if pos_mask is not None else None
    h = q.enc_stack(h, self_mask=mask)
    return q.enc_out(h)


def nearest_code(latent: np.ndarray, codebook) -> int:
    """Index of the nearest codeword after l2-normalizing both sides.

    Ties resolve to the lowest index (argmin picks the first occurrence).
    """
    vecs = codebook.vectors.data if isinstance(codebook, Codebook) else np.asarray(codebook)
    latent = np.asarray(latent)
    if latent.ndim != 1 or latent.shape[0] != vecs.shape[1]:
        raise ShapeError(
            f"nearest_code: latent shape {latent.shape} vs codebook {vecs.shape}")
    ln = _l2n_rows(latent[None, :])[0]
    cn = _l2n_rows(vecs)
    diff = cn - ln
    return int(np.argmin((diff * diff).sum(axis=1)))


def bulk_nearest_codes(latents: np.ndarray, codebook, chunk: int = 65536) -> np.ndarray:
    """Vectorized nearest-code ids for (M, k) latents.

    Uses the unit-sphere identity ||u-v||^2 = 2 - 2 u.v, so the argmin of
    distance becomes an argmax of dot products; ties again resolve to the
    lowest index. Chunked to bound memory on large code streams.
    """
    vecs = codebook.vectors.data if isinstance(codebook, Codebook) else np.asarray(codebook)
    latents = np.asarray(latents)
    if latents.ndim != 2 or latents.shape[1] != vecs.shape[1]:
        raise ShapeError(
            f"bulk_nearest_codes: latents {latents.shape} vs codebook {vecs.shape}")
    cn = _l2n_rows(vecs)
    out = np.empty(latents.shape[0], dtype=np.int64)
    for start in range(0, latents.shape[0], chunk):
        ln = _l2n_rows(latents[start:start + chunk])
        out[start:start + chunk] = np.argmax(ln @ cn.T, axis=1)
    return out


def normalized_codebook(q: QuantizerModel) -> Tensor:
    return ops.l2_normalize(q.codebook.vectors)


def seed_codebook_from_data(q: QuantizerModel, stacked_rows: np.ndarray,
                            rng: np.random.Generator) -> None:
    """Re-initialize a learned codebook from encodings of real input patches.

    Code assignment compares directions on the unit sphere, and codebook rows
    receive gradient only when selected, so rows that start far from the data
    cloud stay dead forever. Seeding rows at observed encoder outputs (plus a
    small jitter so repeated patches can still specialize) makes most of the
    codebook reachable from step one. No effect on frozen codebooks.
    """
    if not q.codebook.learned:
        return
    stacked_rows = np.asarray(stacked_rows)
    if stacked_rows.ndim != 2 or stacked_rows.shape[1] != q.input_width:
        raise ShapeError(
            f"seed_codebook_from_data: rows {stacked_rows.shape} vs d*s = {q.input_width}")
    n = q.cfg.codebook_size
    picks = rng.integers(0, stacked_rows.shape[0], size=n)
    latents = encode_latents(q, stacked_rows[picks][None, :, :]).data[0]
    scale = np.mean(np.linalg.norm(latents, axis=1))
    noise = rng.standard_normal(latents.shape) * (0.01 * max(scale, 1e-8))
    q.codebook.vectors.data[...] = latents + noise


def _mean_distance(u: Tensor, v: Tensor, pos_mask: np.ndarray | None,
                   literal_norm: bool) -> Tensor:
    """Mean over positions of squared (default) or plain Euclidean distance."""
    diff = ops.sub(u, v)
    per_pos = ops.sum_axis(ops.mul(diff, diff), axis=-1)
    if literal_norm:
        per_pos = ops.sqrt(per_pos)
    if pos_mask is None:
        return ops.mean_all(per_pos)
    mask = np.asarray(pos_mask, dtype=u.dtype)
    count = float(mask.sum())
    if count <= 0:
        raise ShapeError("_mean_distance: mask selects no positions")
    return ops.scale(ops.sum_all(ops.mul(per_pos, mask)), 1.0 / count)


def vq_loss(x, latents: Tensor, quantized: Tensor, reconstruction: Tensor,
            cfg: VqConfig, pos_mask: np.ndarray | None = None,
            frame_mask: np.ndarray | None = None) -> tuple[LossBreakdown, Tensor]:
    """Total objective and its terms.

    ``x``/``reconstruction``: (..., T, d) frames; ``latents``: raw encoder
    outputs (..., M, k); ``quantized``: the selected normalized codewords as
    a graph tensor (so the alpha term reaches the codebook). Stop-gradients
    route alpha to the codebook only and beta to the encoder only.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if reconstruction.shape != x.shape:
        raise ShapeError(
            f"vq_loss: reconstruction {reconstruction.shape} != input {x.shape}")
    recon = ops.mean_abs_error(reconstruction, x, mask=frame_mask)
    latents_n = ops.l2_normalize(latents)
    cb_term = _mean_distance(ops.stop_gradient(latents_n), quantized,
                             pos_mask, cfg.literal_norm)
    commit_term = _mean_distance(latents_n, ops.stop_gradient(quantized),
                                 pos_mask, cfg.literal_norm)
    total = ops.add(ops.add(recon, ops.scale(cb_term, cfg.alpha)),
                    ops.scale(commit_term, cfg.beta))
    breakdown = LossBreakdown(recon.item(), cb_term.item(), commit_term.item(), total.item())
    return breakdown, total


def decode_codes_graph(q: QuantizerModel, code_vectors: Tensor,
                       pos_mask: np.ndarray | None = None) -> Tensor:
    """(..., M, k) codeword vectors -> (..., M*s, d) frames, differentiable."""
    h = q.dec_in(code_vectors)
    h = nn.add_position_encoding(h, code_vectors.shape[-2], q.cfg.width)
    mask = nn.padding_mask(pos_mask) if pos_mask is not None else None
    h = q.dec_stack(h, self_mask=mask)
    y = ops.conv_transpose_1d(h, q.out_kernel, q.cfg.stride)
    return ops.add(y, q.out_bias)


def decode_codes(q: QuantizerModel, code_ids: np.ndarray) -> np.ndarray:
    """Code ids -> (len(ids)*s, d) frames in the normalized feature space."""
    ids = np.asarray(code_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError(f"decode_codes: need a non-empty 1-d id sequence, got {ids.shape}")
    if ids.min() < 0 or ids.max() >= q.codebook.size:
        raise ShapeError(
            f"decode_codes: id outside [0, {q.codebook.size})")
    vecs = _l2n_rows(q.codebook.vectors.data)[ids]
    return decode_codes_graph(q, Tensor(vecs)).data


def quantize_frames(q: QuantizerModel, frames_normalized: np.ndarray) -> QuantizationResult:
    """Stack -> encode -> nearest code, on already channel-normalized frames."""
    stacked = stack_frames(frames_normalized, q.cfg.stride)
    latents = encode_latents(q, stacked).data
    ids = bulk_nearest_codes(latents, q.codebook)
    quantized = _l2n_rows(q.codebook.vectors.data)[ids]
    return QuantizationResult(code_ids=ids, quantized=quantized)


def quantize_utterance(q: QuantizerModel, spec: Spectrogram) -> QuantizationResult:
    """Quantize a raw spectrogram, applying the model's channel stats if set."""
    frames = spec.frames if isinstance(spec, Spectrogram) else np.asarray(spec)
    if frames.shape[-1] != q.d_mel:
        raise ShapeError(f"quantize_utterance: {frames.shape[-1]} channels, model wants {q.d_mel}")
    if frames.shape[0] < q.cfg.stride:
        raise ShapeError(
            f"quantize_utterance: {frames.shape[0]} frames < stride {q.cfg.stride}")
    if q.stats is not None:
        frames = channel_normalize(frames, q.stats)
    return quantize_frames(q, frames)


def quantizer_batch_loss(q: QuantizerModel, stacked: np.ndarray, frames: np.ndarray,
                         pos_mask: np.ndarray | None = None):
    """One training forward pass over a padded batch.

    ``stacked``: (B, M, d*s); ``frames``: (B, M*s, d) reconstruction target;
    ``pos_mask``: (B, M) 1 for real positions. Returns (total, breakdown, ids).
    """
    latents = encode_latents(q, Tensor(np.asarray(stacked)), pos_mask)
    k = q.cfg.latent_dim
    ids = bulk_nearest_codes(latents.data.reshape(-1, k), q.codebook)
    ids = ids.reshape(latents.shape[:-1])
    quantized = ops.embedding_lookup(normalized_codebook(q), ids)
    if q.cfg.straight_through and q.cfg.quantizer_kind != "random":
        dec_in = ops.straight_through(ops.l2_normalize(latents), quantized)
    else:
        dec_in = quantized
    recon = decode_codes_graph(q, dec_in, pos_mask)
    frame_mask = None
    if pos_mask is not None:
        frame_mask = np.repeat(np.asarray(pos_mask), q.cfg.stride, axis=-1)
    breakdown, total = vq_loss(frames, latents, quantized, recon, q.cfg,
                               pos_mask=pos_mask, frame_mask=frame_mask)
    return total, breakdown, ids


def codebook_utilization(code_ids: np.ndarray, codebook_size: int) -> dict:
    """Histogram, empirical entropy (nats), and perplexity of a code stream."""
    ids = np.asarray(code_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError("codebook_utilization: empty code stream")
    counts = np.bincount(ids, minlength=codebook_size)
    p = counts / ids.size
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return {"histogram": counts, "entropy": entropy, "perplexity": float(np.exp(entropy))}


def train_quantizer(corpus_dir: str, cfg: VqConfig, train_cfg, out_dir: str,
                    resume: bool = False):
    """Convenience wrapper over the training harness quantizer stage."""
    from . import harness

    return harness.run_training("quantizer", out_dir=out_dir, corpus_dir=corpus_dir,
                                vq_config=cfg, train_config=train_cfg, resume=resume)
