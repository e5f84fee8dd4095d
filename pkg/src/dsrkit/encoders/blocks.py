"""Reusable network blocks for the phoneme-embedding encoders."""
from __future__ import annotations

import math

import torch
import torch.nn as nn


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, max_len) bool mask, True at valid positions."""
    ar = torch.arange(max_len, device=lengths.device)
    return ar[None, :] < lengths[:, None]


class VggExtractor(nn.Module):
    """VGG-style conv front end; each block downsamples time and freq by 2.

    Input (B, T, D) -> (B, T', channels[-1] * D'), T' = T // 2**len(channels).
    """

    def __init__(self, in_dim: int, channels: tuple[int, ...] = (8, 16)):
        super().__init__()
        layers = []
        c_in = 1
        for c in channels:
            layers += [
                nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
                nn.MaxPool2d(2, ceil_mode=False),
            ]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.pool_factor = 2 ** len(channels)
        self.out_dim = channels[-1] * (in_dim // self.pool_factor)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x.unsqueeze(1))  # (B, C, T', D')
        b, c, t, d = out.shape
        if t < 1:
            raise ValueError("no frames left after VGG downsampling")
        out = out.permute(0, 2, 1, 3).reshape(b, t, c * d)
        out_lengths = torch.div(lengths, self.pool_factor, rounding_mode="floor")
        if torch.any(out_lengths < 1):
            raise ValueError("an utterance is shorter than the VGG downsampling factor")
        return out, out_lengths


class LocationAwareAttention(nn.Module):
    """Additive attention conditioned on the previous alignment via a conv."""

    def __init__(self, enc_dim: int, dec_dim: int, att_dim: int,
                 conv_channels: int = 10, conv_kernel: int = 15):
        super().__init__()
        self.enc_proj = nn.Linear(enc_dim, att_dim)
        self.dec_proj = nn.Linear(dec_dim, att_dim, bias=False)
        self.loc_proj = nn.Linear(conv_channels, att_dim, bias=False)
        self.loc_conv = nn.Conv1d(1, conv_channels, conv_kernel,
                                  padding=conv_kernel // 2, bias=False)
        self.score = nn.Linear(att_dim, 1)

    def precompute(self, enc: torch.Tensor) -> torch.Tensor:
        return self.enc_proj(enc)

    def forward(self, enc: torch.Tensor, enc_proj: torch.Tensor, mask: torch.Tensor,
                dec_state: torch.Tensor, prev_att: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """enc (B,T,De), mask (B,T) bool, dec_state (B,Dd), prev_att (B,T)."""
        conv = self.loc_conv(prev_att.unsqueeze(1)).transpose(1, 2)  # (B, T, C)
        scores = self.score(torch.tanh(
            enc_proj + self.loc_proj(conv) + self.dec_proj(dec_state).unsqueeze(1)
        )).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=1)
        context = torch.bmm(att.unsqueeze(1), enc).squeeze(1)
        return context, att


class FusionLayer(nn.Module):
    """FC fusion of concatenated audio + visual rows."""

    def __init__(self, audio_dim: int, visual_dim: int, out_dim: int):
        super().__init__()
        self.audio_dim = audio_dim
        self.visual_dim = visual_dim
        self.linear = nn.Linear(audio_dim + visual_dim, out_dim)

    def forward(self, xa: torch.Tensor, xv: torch.Tensor) -> torch.Tensor:
        if xa.shape[:-1] != xv.shape[:-1]:
            raise ValueError(
                f"audio/visual row counts differ: {tuple(xa.shape[:-1])} vs {tuple(xv.shape[:-1])}"
            )
        return self.linear(torch.cat([xa, xv], dim=-1))


def sinusoidal_positions(length: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, device=device, dtype=dtype)
                    * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, device=device, dtype=dtype)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + attn_out
        return x + self.ffn(self.norm2(x))


class TransformerEncoder(nn.Module):
    """Stack of pre-norm blocks with optional sinusoidal positions."""

    def __init__(self, dim: int, heads: int, blocks: int, ffn_dim: int,
                 use_positions: bool = True):
        super().__init__()
        self.dim = dim
        self.use_positions = use_positions
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, ffn_dim) for _ in range(blocks))
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.use_positions:
            x = x + sinusoidal_positions(x.shape[1], self.dim, x.device, x.dtype)
        pad_mask = ~length_mask(lengths, x.shape[1])
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.final_norm(x), lengths
