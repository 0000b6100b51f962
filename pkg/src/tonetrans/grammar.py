"""Procedural parallel-speech corpus.

Each token in the toy grammar is a multi-harmonic tone template; an utterance
is a token sequence rendered to a waveform with per-occurrence duration and
amplitude jitter, separated by silent gaps. A deterministic mapping (token
permutation plus an optional reordering rule) produces the target-side token
sequence, so source and target spectrograms form a parallel pair with known
ground truth. Target templates are shorter than source templates, so the two
sides systematically disagree in length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .features import FrontendConfig, Spectrogram, log_mel_spectrogram

FADE_S = 0.010  # cosine fade in/out per token, avoids spectral splatter
PEAK_AMP = 0.1


@dataclass(frozen=True)
class TokenTemplate:
    """One vocabulary entry: fundamental plus relative harmonic amplitudes."""

    f0_hz: float
    harmonic_amps: tuple[float, ...]
    base_duration_s: float


@dataclass(frozen=True)
class ToyGrammar:
    source_templates: tuple[TokenTemplate, ...]
    target_templates: tuple[TokenTemplate, ...]
    mapping: tuple[int, ...]  # source token id -> target token id
    reorder_rule: str = "swap_adjacent"  # or "none"
    min_len: int = 2
    max_len: int = 4
    gap_s: float = 0.05
    lead_s: float = 0.04
    amp_jitter: float = 0.08
    dur_jitter: float = 0.10

    def __post_init__(self):
        if not self.source_templates or not self.target_templates:
            raise ValueError("grammar vocabularies must be non-empty")
        if len(self.mapping) != len(self.source_templates):
            raise ValueError("mapping length must equal source vocabulary size")
        if any(t < 0 or t >= len(self.target_templates) for t in self.mapping):
            raise ValueError("mapping targets outside target vocabulary")
        if self.reorder_rule not in ("none", "swap_adjacent"):
            raise ValueError(f"unknown reorder rule '{self.reorder_rule}'")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")

    @property
    def source_vocab(self) -> int:
        return len(self.source_templates)

    @property
    def target_vocab(self) -> int:
        return len(self.target_templates)

    def map_tokens(self, source_tokens) -> tuple[int, ...]:
        """Apply the token mapping, then the reordering rule."""
        mapped = [self.mapping[t] for t in source_tokens]
        if self.reorder_rule == "swap_adjacent":
            for i in range(0, len(mapped) - 1, 2):
                mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
        return tuple(mapped)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ToyGrammar":
        d = json.loads(text)
        for side in ("source_templates", "target_templates"):
            d[side] = tuple(
                TokenTemplate(t["f0_hz"], tuple(t["harmonic_amps"]), t["base_duration_s"])
                for t in d[side]
            )
        d["mapping"] = tuple(d["mapping"])
        return cls(**d)


@dataclass
class ToyUtterancePair:
    source: Spectrogram
    target: Spectrogram
    source_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    seed: int


def _make_templates(rng: np.random.Generator, vocab: int, base_duration_s: float,
                    f0_lo: float, f0_hi: float, num_harmonics: int) -> tuple[TokenTemplate, ...]:
    # geometric f0 spacing keeps adjacent tokens separated on the mel axis
    ratios = np.geomspace(f0_lo, f0_hi, vocab)
    templates = []
    for i in range(vocab):
        amps = rng.uniform(0.25, 1.0, size=num_harmonics)
        amps[0] = 1.0
        templates.append(TokenTemplate(float(ratios[i]), tuple(float(a) for a in amps),
                                       base_duration_s))
    return tuple(templates)


def default_grammar(vocab: int = 20, seed: int = 1234,
                    reorder_rule: str = "swap_adjacent") -> ToyGrammar:
    """20-token grammar: distinct tones both sides, permuted mapping, swap rule."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    source = _make_templates(rng, vocab, base_duration_s=0.14,
                             f0_lo=250.0, f0_hi=2400.0, num_harmonics=4)
    target = _make_templates(rng, vocab, base_duration_s=0.11,
                             f0_lo=300.0, f0_hi=2800.0, num_harmonics=4)
    mapping = tuple(int(t) for t in rng.permutation(vocab))
    return ToyGrammar(source, target, mapping, reorder_rule=reorder_rule)


def render_token(template: TokenTemplate, sample_rate: int,
                 dur_scale: float = 1.0, amp_scale: float = 1.0) -> np.ndarray:
    """Sum of harmonics with a cosine fade at both ends."""
    n = max(int(round(template.base_duration_s * dur_scale * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    wave = np.zeros(n)
    for h, amp in enumerate(template.harmonic_amps, start=1):
        f = template.f0_hz * h
        if f >= sample_rate / 2:
            break
        wave += amp * np.sin(2.0 * np.pi * f * t)
    wave *= PEAK_AMP * amp_scale / max(sum(template.harmonic_amps), 1e-9)
    fade = min(int(FADE_S * sample_rate), n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        wave[:fade] *= ramp
        wave[-fade:] *= ramp[::-1]
    return wave


def render_sequence(templates, tokens, rng: np.random.Generator,
                    grammar: ToyGrammar, cfg: FrontendConfig) -> np.ndarray:
    """Tokens -> waveform with jitter and inter-token gaps."""
    gap = np.zeros(int(grammar.gap_s * cfg.sample_rate))
    lead = np.zeros(int(grammar.lead_s * cfg.sample_rate))
    pieces = [lead]
    for i, tok in enumerate(tokens):
        dur_scale = 1.0 + rng.uniform(-grammar.dur_jitter, grammar.dur_jitter)
        amp_scale = 1.0 + rng.uniform(-grammar.amp_jitter, grammar.amp_jitter)
        pieces.append(render_token(templates[tok], cfg.sample_rate, dur_scale, amp_scale))
        if i < len(tokens) - 1:
            pieces.append(gap)
    pieces.append(lead)
    return np.concatenate(pieces)


def render_clean_token_spectrogram(template: TokenTemplate,
                                   cfg: FrontendConfig) -> np.ndarray:
    """Jitter-free template spectrogram, used by the transcription oracle."""
    wave = render_token(template, cfg.sample_rate)
    if wave.size < cfg.window:
        wave = np.pad(wave, (0, cfg.window - wave.size))
    return log_mel_spectrogram(wave, cfg).frames


def generate_pair(grammar: ToyGrammar, cfg: FrontendConfig,
                  global_seed: int, index: int) -> ToyUtterancePair:
    """Deterministic function of (grammar, frontend, global_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([global_seed, index]))
    length = int(rng.integers(grammar.min_len, grammar.max_len + 1))
    source_tokens = tuple(int(t) for t in rng.integers(0, grammar.source_vocab, size=length))
    target_tokens = grammar.map_tokens(source_tokens)
    src_wave = render_sequence(grammar.source_templates, source_tokens, rng, grammar, cfg)
    tgt_wave = render_sequence(grammar.target_templates, target_tokens, rng, grammar, cfg)
    return ToyUtterancePair(
        source=log_mel_spectrogram(src_wave, cfg),
        target=log_mel_spectrogram(tgt_wave, cfg),
        source_tokens=source_tokens,
        target_tokens=target_tokens,
        seed=index,
    )


def generate_toy_corpus(grammar: ToyGrammar, count: int, seed: int,
                        cfg: FrontendConfig | None = None) -> list[ToyUtterancePair]:
    """Deterministic corpus; pair i depends only on (grammar, cfg, seed, i)."""
    if count < 1:
        raise ValueError(f"generate_toy_corpus: count must be >= 1, got {count}")
    if cfg is None:
        cfg = FrontendConfig()
    return [generate_pair(grammar, cfg, seed, i) for i in range(count)]
