"""Mel-spectrogram generation from expanded phoneme embeddings, F0, and a
repeated speaker embedding.

Topology: 2-layer FC prenet, 2 bidirectional recurrent layers, linear mel
projection, and a 5-layer convolutional postnet whose output is added back as
a residual. Trained with L1 before and after the postnet.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError
from .signal_frontend import MelSpectrogram, N_MELS
from .speaker_encoder import SpeakerEmbedding

F0_NORM_SCALE = 100.0


def normalize_f0(values: np.ndarray) -> np.ndarray:
    """log(1 + v/100); keeps unvoiced frames at exactly 0."""
    return np.log1p(np.asarray(values, dtype=np.float32) / F0_NORM_SCALE)


@dataclass
class MelDecoderConfig:
    in_dim: int = 25 + 1 + 256    # |P| + F0 + speaker embedding
    mel_dim: int = N_MELS
    prenet_dim: int = 256
    rnn_units: int = 256
    rnn_layers: int = 2
    postnet_channels: int = 256
    postnet_layers: int = 5
    dropout: float = 0.5

    @classmethod
    def desk_scale(cls, in_dim: int) -> "MelDecoderConfig":
        return cls(in_dim=in_dim, prenet_dim=128, rnn_units=128, postnet_channels=128)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "MelDecoderConfig":
        return MelDecoderConfig(**obj)


class MelDecoderNet(nn.Module):
    def __init__(self, config: MelDecoderConfig):
        super().__init__()
        self.config = config
        self.prenet = nn.Sequential(
            nn.Linear(config.in_dim, config.prenet_dim), nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.prenet_dim, config.prenet_dim), nn.ReLU(),
            nn.Dropout(config.dropout),
        )
        self.rnn = nn.LSTM(config.prenet_dim, config.rnn_units,
                           num_layers=config.rnn_layers,
                           batch_first=True, bidirectional=True)
        self.mel_proj = nn.Linear(2 * config.rnn_units, config.mel_dim)
        convs = []
        c_in = config.mel_dim
        for i in range(config.postnet_layers - 1):
            convs += [nn.Conv1d(c_in, config.postnet_channels, 5, padding=2), nn.Tanh()]
            c_in = config.postnet_channels
        convs.append(nn.Conv1d(c_in, config.mel_dim, 5, padding=2))
        self.postnet = nn.Sequential(*convs)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """x (B, T, in_dim) -> (pre-postnet mel, post-postnet mel), each (B, T, 80)."""
        h = self.prenet(x)
        packed = nn.utils.rnn.pack_padded_sequence(
            h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True,
                                                total_length=x.shape[1])
        pre = self.mel_proj(h)
        post = pre + self.postnet(pre.transpose(1, 2)).transpose(1, 2)
        return pre, post


def decoder_input_frames(p_hat: np.ndarray, f0_values: np.ndarray,
                         e: SpeakerEmbedding) -> np.ndarray:
    """Per-frame concatenation p-hat_t (+) v_t (+) e; width |P| + 1 + emb_dim."""
    rows = np.asarray(p_hat, dtype=np.float32)
    f0 = np.asarray(f0_values, dtype=np.float32)
    if rows.shape[0] != len(f0):
        raise ValueError(f"{rows.shape[0]} embedding rows vs {len(f0)} F0 frames")
    repeated = np.tile(e.vector[None, :], (rows.shape[0], 1))
    return np.concatenate([rows, normalize_f0(f0)[:, None], repeated], axis=1)


def decode_mel(model: MelDecoderNet, p_hat: np.ndarray, v: np.ndarray,
               e: SpeakerEmbedding) -> MelSpectrogram:
    """Reconstructed mel; output frame count equals the input frame count.

    Deterministic at inference: the prenet's stochastic regularization is
    disabled by eval mode.
    """
    frames = decoder_input_frames(p_hat, v, e)
    model.eval()
    with torch.no_grad():
        _, post = model(torch.as_tensor(frames).unsqueeze(0),
                        torch.tensor([frames.shape[0]]))
    return MelSpectrogram(post[0].numpy())


# one item: (p-hat rows, frame F0, speaker embedding vector, target mel)
DecoderItem = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


def train_decoder(items: Sequence[DecoderItem], config: MelDecoderConfig,
                  steps: int, seed: int, batch_size: int = 16, lr: float = 1e-3
                  ) -> tuple[MelDecoderNet, list[float]]:
    """L1(pre-postnet) + L1(post-postnet) against ground-truth mels."""
    torch.manual_seed(seed)
    model = MelDecoderNet(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)

    inputs = []
    targets = []
    for p_hat, f0, emb, mel in items:
        e = SpeakerEmbedding(emb)
        n = min(p_hat.shape[0], mel.shape[0])
        inputs.append(decoder_input_frames(p_hat[:n], np.asarray(f0)[:n], e))
        targets.append(np.asarray(mel[:n], dtype=np.float32))

    trace: list[float] = []
    model.train()
    for _ in range(steps):
        idx = rng.choice(len(inputs), size=min(batch_size, len(inputs)), replace=False)
        lengths = torch.tensor([inputs[int(i)].shape[0] for i in idx], dtype=torch.long)
        T = int(lengths.max())
        x = torch.zeros(len(idx), T, inputs[0].shape[1])
        y = torch.zeros(len(idx), T, targets[0].shape[1])
        for b, i in enumerate(idx):
            x[b, : lengths[b]] = torch.as_tensor(inputs[int(i)])
            y[b, : lengths[b]] = torch.as_tensor(targets[int(i)])
        mask = (torch.arange(T)[None, :] < lengths[:, None]).float().unsqueeze(-1)
        pre, post = model(x, lengths)
        denom = mask.sum() * y.shape[-1]
        loss = ((torch.abs(pre - y) * mask).sum() + (torch.abs(post - y) * mask).sum()) / denom
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite decoder loss at step {len(trace)}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
    model.eval()
    return model, trace
