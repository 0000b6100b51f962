"""Direct speech-to-speech translation model.

Three components over channel-normalized log-mel frames:
  encoder      two stride-2 patchify projections (x4 time subsampling) plus a
               non-causal transformer over the subsampled sequence
  decoder      causal transformer with cross-attention that autoregressively
               predicts target-side quantizer code ids (vocabulary n + BOS/
               EOS/PAD)
  synthesizer  non-autoregressive transformer over the decoder's hidden
               states followed by a stride-s transposed convolution to frames

The synthesizer's transformer and output kernel are shape-compatible with
the quantizer's reconstruction decoder, so a trained quantizer can seed them
(``init_synthesizer_from_vqvae``); only the input projection differs and is
always freshly initialized.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .features import ChannelStats
from .quantizer import QuantizerModel
from .tensor import ShapeError, Tensor, default_dtype


@dataclass
class ModelConfig:
    stride: int = 4
    codebook_size: int = 512
    d_mel: int = 80
    enc_width: int = 128
    enc_depth: int = 4
    enc_heads: int = 4
    enc_ff: int = 256
    dec_width: int = 128
    dec_depth: int = 4
    dec_heads: int = 4
    dec_ff: int = 256
    syn_width: int = 64
    syn_depth: int = 4
    syn_heads: int = 4
    syn_ff: int = 128
    lambda_spec: float = 1.0
    decode: str = "greedy"
    beam_width: int = 4
    max_decode_len: int = 64

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.lambda_spec < 0:
            raise ValueError("lambda_spec must be >= 0")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")
        if self.decode not in ("greedy", "beam"):
            raise ValueError(f"decode must be 'greedy' or 'beam', got '{self.decode}'")

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + 3

    @property
    def bos_id(self) -> int:
        return self.codebook_size

    @property
    def eos_id(self) -> int:
        return self.codebook_size + 1

    @property
    def pad_id(self) -> int:
        return self.codebook_size + 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class InferResult:
    code_ids: np.ndarray   # (M,) emitted codes, specials excluded
    frames: np.ndarray     # (M*s, d) synthesized frames, normalized space
    truncated: bool        # hit max_decode_len without EOS


SUBSAMPLE = 4  # two stride-2 patchify stages


def subsampled_length(t: int) -> int:
    return -(-t // SUBSAMPLE)  # ceil(t / 4)


class TextlessModel:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.source_stats: ChannelStats | None = None
        rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
        d = cfg.d_mel
        self.sub1 = nn.Linear(2 * d, cfg.enc_width, rng)
        self.sub2 = nn.Linear(2 * cfg.enc_width, cfg.enc_width, rng)
        self.enc_stack = nn.TransformerStack(cfg.enc_depth, cfg.enc_width,
                                             cfg.enc_heads, cfg.enc_ff, rng)
        if cfg.enc_width != cfg.dec_width:
            self.enc_to_dec = nn.Linear(cfg.enc_width, cfg.dec_width, rng)
        else:
            self.enc_to_dec = None
        scale = 1.0 / np.sqrt(cfg.dec_width)
        self.embed = Tensor(
            (rng.standard_normal((cfg.vocab_size, cfg.dec_width)) * scale
             ).astype(default_dtype()),
            requires_grad=True)
        self.dec_stack = nn.TransformerStack(cfg.dec_depth, cfg.dec_width,
                                             cfg.dec_heads, cfg.dec_ff, rng, cross=True)
        self.logits_proj = nn.Linear(cfg.dec_width, cfg.vocab_size, rng)
        self.syn_in = nn.Linear(cfg.dec_width, cfg.syn_width, rng)
        self.syn_stack = nn.TransformerStack(cfg.syn_depth, cfg.syn_width,
                                             cfg.syn_heads, cfg.syn_ff, rng)
        kernel = nn.xavier_uniform(rng, cfg.syn_width, cfg.stride * d,
                                   shape=(cfg.stride, cfg.syn_width, d))
        self.syn_kernel = Tensor(kernel, requires_grad=True)
        self.syn_bias = Tensor(np.zeros(d, dtype=default_dtype()), requires_grad=True)

    def encoder_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder/sub1.{k}": v for k, v in self.sub1.parameters().items()}
        out.update({f"encoder/sub2.{k}": v for k, v in self.sub2.parameters().items()})
        out.update({f"encoder/stack.{k}": v for k, v in self.enc_stack.parameters().items()})
        return out

    def decoder_parameters(self) -> dict[str, Tensor]:
        out = {"decoder/embed": self.embed}
        if self.enc_to_dec is not None:
            out.update({f"decoder/enc_to_dec.{k}": v
                        for k, v in self.enc_to_dec.parameters().items()})
        out.update({f"decoder/stack.{k}": v for k, v in self.dec_stack.parameters().items()})
        out.update({f"decoder/logits.{k}": v for k, v in self.logits_proj.parameters().items()})
        return out

    def synthesizer_parameters(self) -> dict[str, Tensor]:
        out = {f"synthesizer/in_proj.{k}": v for k, v in self.syn_in.parameters().items()}
        out.update({f"synthesizer/stack.{k}": v
                    for k, v in self.syn_stack.parameters().items()})
        out["synthesizer/out.kernel"] = self.syn_kernel
        out["synthesizer/out.bias"] = self.syn_bias
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder_parameters()
        out.update(self.decoder_parameters())
        out.update(self.synthesizer_parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}


def _patchify(x: Tensor, proj: nn.Linear) -> Tensor:
    """Stack frame pairs and project: (..., T, c) -> (..., ceil(T/2), width)."""
    t = x.shape[-2]
    t2 = t + (t % 2)
    if t2 != t:
        x = ops.pad_axis(x, -2, t2)
    x = ops.reshape(x, x.shape[:-2] + (t2 // 2, 2 * x.shape[-1]))
    return ops.relu(proj(x))


def encode_speech(m: TextlessModel, frames, lengths: np.ndarray | None = None):
    """(B, T, d) frames -> ((B, ceil(T/4), enc_width) tensor, (B, ceil(T/4)) validity)."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if x.ndim != 3 or x.shape[-1] != m.cfg.d_mel:
        raise ShapeError(f"encode_speech: expected (B, T, {m.cfg.d_mel}), got {x.shape}")
    b, t = x.shape[0], x.shape[1]
    if t < 1:
        raise ShapeError("encode_speech: empty sequence")
    if lengths is None:
        lengths = np.full(b, t, dtype=np.int64)
    h = _patchify(x, m.sub1)
    h = _patchify(h, m.sub2)
    m_out = h.shape[-2]
    valid = (np.arange(m_out)[None, :]
             < np.array([subsampled_length(int(l)) for l in lengths])[:, None])
    valid = valid.astype(np.float64)
    h = nn.add_position_encoding(h, m_out, m.cfg.enc_width)
    h = m.enc_stack(h, self_mask=nn.padding_mask(valid))
    return h, valid


def decoder_hidden_states(m: TextlessModel, ids_in: np.ndarray, enc_out: Tensor,
                          enc_valid: np.ndarray,
                          dec_valid: np.ndarray | None = None) -> Tensor:
    """Teacher-forced decoder states for (B, L) input ids (BOS-prefixed)."""
    ids_in = np.asarray(ids_in, dtype=np.int64)
    if ids_in.ndim != 2:
        raise ShapeError(f"decoder_hidden_states: ids must be (B, L), got {ids_in.shape}")
    if ids_in.min() < 0 or ids_in.max() >= m.cfg.vocab_size:
        raise ShapeError(
            f"decoder_hidden_states: id outside vocabulary [0, {m.cfg.vocab_size})")
    b, length = ids_in.shape
    x = ops.embedding_lookup(m.embed, ids_in)
    x = nn.add_position_encoding(x, length, m.cfg.dec_width)
    self_mask = nn.causal_mask(length)[None, None, :, :]
    if dec_valid is not None:
        self_mask = self_mask + nn.padding_mask(dec_valid)
    memory = enc_out if m.enc_to_dec is None else m.enc_to_dec(enc_out)
    return m.dec_stack(x, memory=memory, self_mask=self_mask,
                       cross_mask=nn.padding_mask(enc_valid))


def decode_linguistic_teacher_forced(m: TextlessModel, enc_out: Tensor,
                                     enc_valid: np.ndarray,
                                     target_codes: np.ndarray) -> Tensor:
    """Logits (B, len+1, n+3) for BOS-prefixed codes; labels are codes + EOS."""
    codes = np.asarray(target_codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.size and codes.max() >= m.cfg.codebook_size:
        raise ShapeError(
            f"decode_linguistic_teacher_forced: code id >= n = {m.cfg.codebook_size}")
    b = codes.shape[0]
    bos = np.full((b, 1), m.cfg.bos_id, dtype=np.int64)
    ids_in = np.concatenate([bos, codes], axis=1)
    h = decoder_hidden_states(m, ids_in, enc_out, enc_valid)
    return m.logits_proj(h)


def synthesize_core(m: TextlessModel, embedded: Tensor,
                    pos_mask: np.ndarray | None = None) -> Tensor:
    """Position encoding + synthesizer stack + stride-s upsampling head."""
    h = nn.add_position_encoding(embedded, embedded.shape[-2], m.cfg.syn_width)
    mask = nn.padding_mask(pos_mask) if pos_mask is not None else None
    h = m.syn_stack(h, self_mask=mask)
    y = ops.conv_transpose_1d(h, m.syn_kernel, m.cfg.stride)
    return ops.add(y, m.syn_bias)


def synthesize(m: TextlessModel, decoder_hidden: Tensor,
               pos_mask: np.ndarray | None = None) -> Tensor:
    """(B, M, dec_width) decoder states -> (B, M*s, d) frames, one pass."""
    if decoder_hidden.shape[-2] < 1:
        raise ShapeError("synthesize: need at least one decoder state")
    return synthesize_core(m, m.syn_in(decoder_hidden), pos_mask)


def init_synthesizer_from_vqvae(m: TextlessModel, q: QuantizerModel) -> None:
    """Copy the quantizer decoder's transformer and output kernel into the
    synthesizer. The input projection stays fresh (its input is decoder
    hidden states, not codewords). On any shape mismatch the model is left
    untouched and the error lists every offending tensor."""
    src: dict[str, Tensor] = {f"stack.{k}": v for k, v in q.dec_stack.parameters().items()}
    src["out.kernel"] = q.out_kernel
    src["out.bias"] = q.out_bias
    dst: dict[str, Tensor] = {f"stack.{k}": v for k, v in m.syn_stack.parameters().items()}
    dst["out.kernel"] = m.syn_kernel
    dst["out.bias"] = m.syn_bias
    if set(src) != set(dst):
        raise ValueError(
            "synthesizer/decoder structure mismatch: "
            f"only in quantizer {sorted(set(src) - set(dst))}, "
            f"only in synthesizer {sorted(set(dst) - set(src))}")
    bad = [f"{name}: {src[name].shape} vs {dst[name].shape}"
           for name in sorted(src) if src[name].shape != dst[name].shape]
    if bad:
        raise ValueError("init_synthesizer_from_vqvae shape mismatch: " + "; ".join(bad))
    for name in src:
        dst[name].data[...] = src[name].data


@dataclass
class S2stLossParts:
    code_ce: float
    spec_l1: float
    total: float


def forward_training(m: TextlessModel, batch: dict) -> tuple[Tensor, S2stLossParts, Tensor]:
    """Teacher-forced losses over a padded batch.

    batch keys:
      src          (B, Ts, d) normalized source frames, zero-padded
      src_lens     (B,) true frame counts
      codes        (B, L) target code ids, PAD beyond each true length
      code_lens    (B,) true code counts
      tgt_frames   (B, L*s, d) normalized target frames, zero-padded
    Returns (total loss tensor, float parts, logits tensor).
    """
    cfg = m.cfg
    codes = np.asarray(batch["codes"], dtype=np.int64)
    code_lens = np.asarray(batch["code_lens"], dtype=np.int64)
    b, l = codes.shape
    enc_out, enc_valid = encode_speech(m, batch["src"], batch["src_lens"])

    pos = np.arange(l)[None, :]
    code_valid = (pos < code_lens[:, None]).astype(np.float64)
    safe_codes = np.where(code_valid > 0, codes, 0)
    bos = np.full((b, 1), cfg.bos_id, dtype=np.int64)
    ids_in = np.concatenate([bos, safe_codes], axis=1)
    in_valid = np.concatenate([np.ones((b, 1)), code_valid], axis=1)

    h = decoder_hidden_states(m, ids_in, enc_out, enc_valid, dec_valid=in_valid)
    logits = m.logits_proj(h)

    # labels: the codes then EOS; positions past each EOS are masked out
    labels = np.full((b, l + 1), cfg.pad_id, dtype=np.int64)
    labels[:, :l] = np.where(code_valid > 0, codes, cfg.pad_id)
    labels[np.arange(b), code_lens] = cfg.eos_id
    label_mask = (np.arange(l + 1)[None, :] <= code_lens[:, None]).astype(np.float64)
    safe_labels = np.where(label_mask > 0, labels, 0)
    code_ce = ops.cross_entropy(logits, safe_labels, mask=label_mask)

    # hidden state at input position t emitted code t+1; synthesizer gets
    # the emitters of codes 1..L
    emit_h = ops.slice_axis(h, -2, 0, l)
    frames_hat = synthesize(m, emit_h, pos_mask=code_valid)
    frame_mask = np.repeat(code_valid, cfg.stride, axis=-1)
    spec_l1 = ops.mean_abs_error(frames_hat, Tensor(np.asarray(batch["tgt_frames"])),
                                 mask=frame_mask)
    total = ops.add(code_ce, ops.scale(spec_l1, cfg.lambda_spec))
    parts = S2stLossParts(code_ce.item(), spec_l1.item(), total.item())
    return total, parts, logits


def infer(m: TextlessModel, source_frames: np.ndarray) -> InferResult:
    """Greedy decode from BOS, then synthesize the emitted positions."""
    frames = np.asarray(source_frames)
    if frames.ndim != 2:
        raise ShapeError(f"infer: expected (T, d) source frames, got {frames.shape}")
    cfg = m.cfg
    enc_out, enc_valid = encode_speech(m, frames[None, :, :])
    codes: list[int] = []
    truncated = True
    for _ in range(cfg.max_decode_len):
        ids_in = np.array([[cfg.bos_id] + codes], dtype=np.int64)
        h = decoder_hidden_states(m, ids_in, enc_out, enc_valid)
        logits = m.logits_proj(ops.slice_axis(h, -2, ids_in.shape[1] - 1, ids_in.shape[1]))
        row = logits.data[0, 0].copy()
        row[cfg.bos_id] = -np.inf
        row[cfg.pad_id] = -np.inf
        nxt = int(np.argmax(row))
        if nxt == cfg.eos_id:
            truncated = False
            break
        codes.append(nxt)
    if not codes:
        return InferResult(np.zeros(0, dtype=np.int64),
                           np.zeros((0, cfg.d_mel)), truncated)
    ids_in = np.array([[cfg.bos_id] + codes], dtype=np.int64)
    h = decoder_hidden_states(m, ids_in, enc_out, enc_valid)
    emit_h = ops.slice_axis(h, -2, 0, len(codes))
    out = synthesize(m, emit_h)
    return InferResult(np.array(codes, dtype=np.int64), out.data[0], truncated)


def masked_pretrain_loss(m: TextlessModel, head: nn.Linear, batch: dict):
    """Masked code prediction: CE of the random quantizer's ids at masked
    subsampled positions only.

    batch keys: src (B, T, d) with masked spans zeroed, src_lens (B,),
    target_ids (B, M) aligned to subsampled positions, loss_mask (B, M)
    selecting masked-and-valid positions.
    """
    enc_out, _ = encode_speech(m, batch["src"], batch["src_lens"])
    m_out = enc_out.shape[-2]
    target_ids = np.asarray(batch["target_ids"], dtype=np.int64)
    loss_mask = np.asarray(batch["loss_mask"], dtype=np.float64)
    if target_ids.shape[1] < m_out:
        pad = m_out - target_ids.shape[1]
        target_ids = np.pad(target_ids, ((0, 0), (0, pad)))
        loss_mask = np.pad(loss_mask, ((0, 0), (0, pad)))
    logits = head(enc_out)
    ce = ops.cross_entropy(logits, target_ids[:, :m_out], mask=loss_mask[:, :m_out])
    pred = np.argmax(logits.data, axis=-1)
    sel = loss_mask[:, :m_out] > 0
    acc = float((pred[sel] == target_ids[:, :m_out][sel]).mean()) if sel.any() else 0.0
    return ce, acc
