"""Normal-prosody prediction: phoneme durations, F0, and length regulation.

Duration and F0 predictors share one structure: a BiGRU stack, three
same-padded convolutions, and a scalar head. Durations are regressed in the
log domain; F0 is regressed in Hz with unvoiced frames excluded from the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError
from .signal_frontend import F0Contour, F0_MIN, F0_MAX


@dataclass
class PredictorConfig:
    in_dim: int = 25              # |P| incl. end-of-sequence column
    bigru_layers: int = 3
    bigru_units: int = 256
    conv_channels: int = 256
    conv_kernels: tuple[int, ...] = (5, 9, 19)
    out_dim: int = 1

    def __post_init__(self) -> None:
        if any(k % 2 == 0 for k in self.conv_kernels):
            raise ValueError("conv kernels must be odd for same-length padding")

    @classmethod
    def desk_scale(cls, in_dim: int) -> "PredictorConfig":
        return cls(in_dim=in_dim, bigru_units=64, conv_channels=64)

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @staticmethod
    def from_json(obj: dict) -> "PredictorConfig":
        obj = dict(obj)
        obj["conv_kernels"] = tuple(obj["conv_kernels"])
        return PredictorConfig(**obj)


class VariancePredictor(nn.Module):
    """BiGRU stack -> conv stack -> scalar head; padding-invariant."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.gru = nn.GRU(config.in_dim, config.bigru_units,
                          num_layers=config.bigru_layers,
                          batch_first=True, bidirectional=True)
        convs = []
        c_in = 2 * config.bigru_units
        for k in config.conv_kernels:
            convs.append(nn.Conv1d(c_in, config.conv_channels, k, padding=k // 2))
            c_in = config.conv_channels
        self.convs = nn.ModuleList(convs)
        self.act = nn.ReLU()
        self.head = nn.Linear(c_in, config.out_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """x (B, L, in_dim) -> raw outputs (B, L)."""
        mask = (torch.arange(x.shape[1])[None, :] < lengths[:, None]).to(x.dtype)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True,
                                                total_length=x.shape[1])
        h = h.transpose(1, 2)  # (B, C, L)
        for conv in self.convs:
            h = h * mask.unsqueeze(1)
            h = self.act(conv(h))
        h = (h * mask.unsqueeze(1)).transpose(1, 2)
        return self.head(h).squeeze(-1) * mask


def _single_forward(model: VariancePredictor, rows: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(rows, dtype=np.float32)).unsqueeze(0)
        raw = model(x, torch.tensor([rows.shape[0]]))
    return raw[0].numpy()


def predict_durations(model: VariancePredictor, p: np.ndarray) -> np.ndarray:
    """Per-phoneme frame counts: exp of the raw log-duration, round half
    up, floored at one frame."""
    rows = np.asarray(p, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("need a non-empty phoneme-embedding matrix")
    raw = _single_forward(model, rows)
    return np.maximum(np.floor(np.exp(raw) + 0.5), 1.0).astype(np.int64)


def predict_f0(model: VariancePredictor, p_hat: np.ndarray) -> F0Contour:
    """Frame-level F0 in Hz; raw values below half the voiced floor are
    treated as unvoiced (0), the rest clamped into [50, 600]."""
    rows = np.asarray(p_hat, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("need a non-empty expanded embedding matrix")
    raw = _single_forward(model, rows).astype(np.float64)
    values = np.where(raw < F0_MIN / 2, 0.0, np.clip(raw, F0_MIN, F0_MAX))
    return F0Contour(values)


def expand(p: np.ndarray, durations: Sequence[int]) -> np.ndarray:
    """Length regulation: row i of p repeated durations[i] times.

    A zero duration (training-time ground truth only) omits that row; the
    output always has sum(durations) rows.
    """
    rows = np.asarray(p)
    d = np.asarray(durations)
    if rows.shape[0] != len(d):
        raise ValueError(f"{rows.shape[0]} rows vs {len(d)} durations")
    if np.any(d < 0):
        raise ValueError("durations must be non-negative")
    return np.repeat(rows, d, axis=0)


def one_hot_rows(indices: Sequence[int], n_classes: int) -> np.ndarray:
    out = np.zeros((len(indices), n_classes), dtype=np.float32)
    out[np.arange(len(indices)), np.asarray(indices, dtype=np.int64)] = 1.0
    return out


# one item: (phoneme one-hot L x |P|, durations length L, frame F0 length sum(d))
AdaptorItem = tuple[np.ndarray, Sequence[int], np.ndarray]


def _pad_rows(mats: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mats], dtype=torch.long)
    out = torch.zeros(len(mats), int(lengths.max()), mats[0].shape[1])
    for b, m in enumerate(mats):
        out[b, : m.shape[0]] = torch.as_tensor(np.asarray(m, dtype=np.float32))
    return out, lengths


def train_adaptor(items: Sequence[AdaptorItem], config: PredictorConfig,
                  steps: int, seed: int, batch_size: int = 16, lr: float = 1e-3
                  ) -> tuple[VariancePredictor, VariancePredictor, list[float]]:
    """L1 training of both predictors on normal-speech ground truth."""
    for _, durations, f0 in items:
        if durations is None:
            raise ValueError("adaptor training requires ground-truth durations")
        if len(f0) != int(np.sum(durations)):
            raise ValueError("F0 frames must match total duration")
    torch.manual_seed(seed)
    dur_model = VariancePredictor(config)
    f0_model = VariancePredictor(config)
    params = list(dur_model.parameters()) + list(f0_model.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed + 1)

    trace: list[float] = []
    dur_model.train()
    f0_model.train()
    for _ in range(steps):
        idx = rng.choice(len(items), size=min(batch_size, len(items)), replace=False)
        batch = [items[int(i)] for i in idx]
        p_mats, p_lengths = _pad_rows([b[0] for b in batch])
        dur_targets = torch.zeros_like(p_mats[..., 0])
        for b, (_, d, _) in enumerate(batch):
            dur_targets[b, : len(d)] = torch.log(torch.tensor([float(v) for v in d]))
        p_mask = (torch.arange(p_mats.shape[1])[None, :] < p_lengths[:, None]).float()
        dur_raw = dur_model(p_mats, p_lengths)
        dur_loss = (torch.abs(dur_raw - dur_targets) * p_mask).sum() / p_mask.sum()

        expanded, f0_targets = [], []
        for p_rows, d, f0 in batch:
            expanded.append(expand(p_rows, d))
            f0_targets.append(np.asarray(f0, dtype=np.float32))
        e_mats, e_lengths = _pad_rows(expanded)
        f0_pad = torch.zeros_like(e_mats[..., 0])
        for b, f0 in enumerate(f0_targets):
            f0_pad[b, : len(f0)] = torch.as_tensor(f0)
        voiced = (f0_pad > 0).float()
        f0_raw = f0_model(e_mats, e_lengths)
        f0_loss = (torch.abs(f0_raw - f0_pad) * voiced).sum() / voiced.sum().clamp(min=1.0)

        loss = dur_loss + f0_loss / 100.0  # Hz-scale term balanced against log-frames
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite adaptor loss at step {len(trace)}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
    dur_model.eval()
    f0_model.eval()
    return dur_model, f0_model, trace
