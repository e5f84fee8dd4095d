"""Phoneme-embedding extractors.

Three interchangeable variants produce phoneme posterior sequences:

  audio_only     -- VGG conv front end + BLSTM encoder on FBK+delta features
  av_vgg         -- FC fusion of audio+visual rows, then the same VGG+BLSTM
  av_transformer -- FC fusion mapped to model dim, pre-norm transformer encoder

All share a location-aware-attention LSTM decoder with a CTC head on the
encoder outputs; training interpolates both losses.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .blocks import (FusionLayer, LocationAwareAttention, TransformerEncoder,
                     VggExtractor, length_mask)
from .ctc import ctc_loss_batch

AUDIO_DIM = 160
VISUAL_DIM = 20
VARIANTS = ("audio_only", "av_vgg", "av_transformer")


@dataclass
class EncoderConfig:
    variant: str = "audio_only"
    audio_dim: int = AUDIO_DIM
    visual_dim: int = VISUAL_DIM
    vgg_channels: tuple[int, ...] = (8, 16)
    blstm_layers: int = 2
    blstm_units: int = 128
    attn_dim: int = 128
    attn_conv_channels: int = 10
    attn_conv_kernel: int = 15
    dec_lstm_layers: int = 1
    dec_lstm_units: int = 256
    emb_dim: int = 64
    transformer_blocks: int = 4
    transformer_dim: int = 256
    transformer_heads: int = 4
    transformer_ffn: int = 1024
    ctc_weight: float = 0.3

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")

    @classmethod
    def desk_scale(cls, variant: str = "audio_only", **overrides) -> "EncoderConfig":
        return cls(variant=variant, **overrides)

    @classmethod
    def paper_scale(cls, variant: str = "audio_only", **overrides) -> "EncoderConfig":
        """Published-architecture profile (6-layer VGG, 5x512 BLSTM, 2x1024 LSTM)."""
        base = dict(
            vgg_channels=(64, 128, 128), blstm_layers=5, blstm_units=512,
            attn_dim=512, attn_conv_kernel=201, dec_lstm_layers=2,
            dec_lstm_units=1024, emb_dim=512, transformer_blocks=12,
            transformer_dim=768, transformer_heads=12, transformer_ffn=3072,
        )
        base.update(overrides)
        return cls(variant=variant, **base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["vgg_channels"] = list(self.vgg_channels)
        return d

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        obj = dict(obj)
        obj["vgg_channels"] = tuple(obj["vgg_channels"])
        return EncoderConfig(**obj)


@dataclass
class PhonemeEmbedding:
    """Row-stochastic posterior matrix over the inventory plus end-of-sequence."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError("PhonemeEmbedding must be 2-D")
        if np.any(self.rows < 0):
            raise ValueError("posteriors must be non-negative")
        sums = self.rows.sum(axis=1)
        if self.rows.shape[0] and np.max(np.abs(sums - 1.0)) > 1e-4:
            raise ValueError("posterior rows must sum to 1")


class PhonemeRecognizer(nn.Module):
    """Seq2seq phoneme recognizer with joint CTC/attention training."""

    def __init__(self, config: EncoderConfig, n_symbols: int):
        super().__init__()
        self.config = config
        self.n_symbols = n_symbols
        self.eos = n_symbols        # last attention class
        self.sos = n_symbols        # last embedding row
        self.blank = n_symbols      # last CTC class
        n_classes = n_symbols + 1

        if config.variant == "av_transformer":
            self.fusion = FusionLayer(config.audio_dim, config.visual_dim,
                                      config.transformer_dim)
            self.encoder = TransformerEncoder(
                config.transformer_dim, config.transformer_heads,
                config.transformer_blocks, config.transformer_ffn)
            enc_dim = config.transformer_dim
        else:
            if config.variant == "av_vgg":
                # fusion keeps the audio feature width so the backbone is
                # structurally identical to the audio-only encoder
                self.fusion = FusionLayer(config.audio_dim, config.visual_dim,
                                          config.audio_dim)
            else:
                self.fusion = None
            self.vgg = VggExtractor(config.audio_dim, config.vgg_channels)
            self.blstm = nn.LSTM(self.vgg.out_dim, config.blstm_units,
                                 num_layers=config.blstm_layers,
                                 batch_first=True, bidirectional=True)
            enc_dim = 2 * config.blstm_units
        self.enc_dim = enc_dim

        self.ctc_head = nn.Linear(enc_dim, n_classes)
        self.attention = LocationAwareAttention(
            enc_dim, config.dec_lstm_units, config.attn_dim,
            config.attn_conv_channels, config.attn_conv_kernel)
        self.embed = nn.Embedding(n_symbols + 1, config.emb_dim)
        self.dec_cells = nn.ModuleList()
        for layer in range(config.dec_lstm_layers):
            in_dim = config.emb_dim + enc_dim if layer == 0 else config.dec_lstm_units
            self.dec_cells.append(nn.LSTMCell(in_dim, config.dec_lstm_units))
        self.out_layer = nn.Linear(config.dec_lstm_units + enc_dim, n_classes)

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def forward_encoder(self, xa: torch.Tensor, xv: torch.Tensor | None,
                        lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """xa (B, T, 160), xv (B, T, Dv) or None -> (enc, enc_lengths)."""
        if self.config.variant == "audio_only":
            fused = xa
        else:
            if xv is None:
                raise ValueError(f"variant {self.config.variant} requires visual features")
            fused = self.fusion(xa, xv)
        if self.config.variant == "av_transformer":
            return self.encoder(fused, lengths)
        vgg_out, vgg_lengths = self.vgg(fused, lengths)
        enc, _ = self.blstm(vgg_out)
        return enc, vgg_lengths

    def ctc_log_probs(self, enc: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.ctc_head(enc), dim=-1)

    # ------------------------------------------------------------------
    # attention decoder
    # ------------------------------------------------------------------

    def _init_decoder(self, enc: torch.Tensor, enc_lengths: torch.Tensor):
        B, T, _ = enc.shape
        mask = length_mask(enc_lengths, T)
        att = mask.to(enc.dtype) / enc_lengths.to(enc.dtype)[:, None]
        states = [
            (enc.new_zeros(B, self.config.dec_lstm_units),
             enc.new_zeros(B, self.config.dec_lstm_units))
            for _ in self.dec_cells
        ]
        return self.attention.precompute(enc), mask, att, states

    def _decoder_step(self, tokens: torch.Tensor, enc, enc_proj, mask, att, states):
        context, att = self.attention(enc, enc_proj, mask, states[-1][0], att)
        h = torch.cat([self.embed(tokens), context], dim=-1)
        new_states = []
        for cell, (hx, cx) in zip(self.dec_cells, states):
            hx, cx = cell(h, (hx, cx))
            new_states.append((hx, cx))
            h = hx
        logits = self.out_layer(torch.cat([h, context], dim=-1))
        return logits, att, new_states

    def teacher_forcing(self, enc: torch.Tensor, enc_lengths: torch.Tensor,
                        targets: list[list[int]]) -> torch.Tensor:
        """(B, L_max + 1, C) log posteriors under teacher forcing."""
        B = enc.shape[0]
        L = max(len(t) for t in targets)
        enc_proj, mask, att, states = self._init_decoder(enc, enc_lengths)
        tokens = enc.new_full((B,), self.sos, dtype=torch.long)
        steps = []
        for t in range(L + 1):
            logits, att, states = self._decoder_step(tokens, enc, enc_proj, mask, att, states)
            steps.append(torch.log_softmax(logits, dim=-1))
            if t < L:
                # next input: ground truth; padded positions are masked in the CE
                tokens = enc.new_tensor(
                    [seq[t] if t < len(seq) else 0 for seq in targets], dtype=torch.long)
        return torch.stack(steps, dim=1)

    def greedy_decode(self, enc: torch.Tensor, enc_lengths: torch.Tensor,
                      max_len: int | None = None
                      ) -> tuple[list[list[int]], list[torch.Tensor]]:
        """Free-running argmax decode; returns token lists and posterior rows.

        Posterior rows include the final end-of-sequence row. Ties break
        toward the lowest class index.
        """
        B, T, _ = enc.shape
        if max_len is None:
            max_len = 2 * T + 10
        enc_proj, mask, att, states = self._init_decoder(enc, enc_lengths)
        tokens = enc.new_full((B,), self.sos, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        results: list[list[int]] = [[] for _ in range(B)]
        rows = [[] for _ in range(B)]
        for _ in range(max_len):
            logits, att, states = self._decoder_step(tokens, enc, enc_proj, mask, att, states)
            post = torch.softmax(logits, dim=-1)
            choice = torch.argmax(post, dim=-1)  # argmax picks lowest index on ties
            for b in range(B):
                if not done[b]:
                    rows[b].append(post[b])
                    if int(choice[b]) == self.eos:
                        done[b] = True
                    else:
                        results[b].append(int(choice[b]))
            if bool(done.all()):
                break
            tokens = torch.where(choice == self.eos,
                                 torch.zeros_like(choice), choice)
        posteriors = [torch.stack(r) for r in rows]
        return results, posteriors

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------

    def compute_losses(self, xa: torch.Tensor, xv: torch.Tensor | None,
                       lengths: torch.Tensor, targets: list[list[int]]
                       ) -> tuple[torch.Tensor, torch.Tensor]:
        """(ctc, attention CE) for a padded batch."""
        enc, enc_lengths = self.forward_encoder(xa, xv, lengths)
        log_probs = self.teacher_forcing(enc, enc_lengths, targets)
        B = enc.shape[0]
        ce_terms = []
        for b in range(B):
            labels = torch.tensor(targets[b] + [self.eos], dtype=torch.long)
            ce_terms.append(-log_probs[b, : len(labels)].gather(
                1, labels.unsqueeze(1)).mean())
        ce = torch.stack(ce_terms).mean()
        ctc = ctc_loss_batch(self.ctc_log_probs(enc), enc_lengths.tolist(),
                             targets, self.blank)
        return ctc, ce


def joint_loss(ctc: torch.Tensor | float, attention_ce: torch.Tensor | float,
               ctc_weight: float) -> torch.Tensor | float:
    """lambda * CTC + (1 - lambda) * attention cross-entropy."""
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError("ctc_weight must lie in [0, 1]")
    return ctc_weight * ctc + (1.0 - ctc_weight) * attention_ce


def _to_tensor(mat: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(mat, dtype=np.float32)).unsqueeze(0)


def _run_single(model: PhonemeRecognizer, xa: np.ndarray, xv: np.ndarray | None,
                targets: list[int] | None) -> PhonemeEmbedding:
    model.eval()
    with torch.no_grad():
        lengths = torch.tensor([xa.shape[0]])
        enc, enc_lengths = model.forward_encoder(
            _to_tensor(xa), None if xv is None else _to_tensor(xv), lengths)
        if targets is not None:
            log_probs = model.teacher_forcing(enc, enc_lengths, [list(targets)])
            return PhonemeEmbedding(torch.exp(log_probs[0]).numpy())
        _, posteriors = model.greedy_decode(enc, enc_lengths)
        return PhonemeEmbedding(posteriors[0].numpy())


def encode_audio(model: PhonemeRecognizer, xa: np.ndarray,
                 targets: list[int] | None = None) -> PhonemeEmbedding:
    """Posterior rows from FBK+delta features (teacher forcing when targets given)."""
    if model.config.variant != "audio_only":
        raise ValueError("encode_audio requires an audio_only model")
    return _run_single(model, xa, None, targets)


def encode_av_vgg(model: PhonemeRecognizer, xa: np.ndarray, xv: np.ndarray,
                  targets: list[int] | None = None) -> PhonemeEmbedding:
    if model.config.variant != "av_vgg":
        raise ValueError("encode_av_vgg requires an av_vgg model")
    return _run_single(model, xa, xv, targets)


def encode_av_transformer(model: PhonemeRecognizer, xa: np.ndarray, xv: np.ndarray,
                          targets: list[int] | None = None) -> PhonemeEmbedding:
    if model.config.variant != "av_transformer":
        raise ValueError("encode_av_transformer requires an av_transformer model")
    return _run_single(model, xa, xv, targets)


def fuse_av(xa: np.ndarray, xv: np.ndarray, fusion: FusionLayer) -> np.ndarray:
    """Row-wise concat + affine map; raises on row-count mismatch."""
    if xa.shape[0] != xv.shape[0]:
        raise ValueError(f"row-count mismatch: {xa.shape[0]} vs {xv.shape[0]}")
    with torch.no_grad():
        out = fusion(torch.as_tensor(np.asarray(xa, dtype=np.float32)),
                     torch.as_tensor(np.asarray(xv, dtype=np.float32)))
    return out.numpy()


def decode_greedy(p: PhonemeEmbedding, symbols: list[str] | None = None) -> list:
    """Per-row argmax truncated at the end-of-sequence class (the last column).

    Ties break toward the lowest index. Returns symbol strings when an
    inventory symbol list is supplied, else integer indices.
    """
    eos = p.rows.shape[1] - 1
    out = []
    for row in p.rows:
        idx = int(np.argmax(row))
        if idx == eos:
            break
        out.append(symbols[idx] if symbols is not None else idx)
    return out
