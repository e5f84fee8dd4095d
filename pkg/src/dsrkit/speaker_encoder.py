"""Deep speaker embeddings trained with the generalized end-to-end loss."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError

EMBEDDING_DIM = 256


@dataclass
class SpeakerEmbedding:
    """Unit-norm voice-identity vector."""

    vector: np.ndarray
    speaker_id: Optional[str] = None

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float32)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"speaker embedding must be unit-norm, got {norm}")


@dataclass
class SpeakerEncoderConfig:
    mel_dim: int = 80
    lstm_layers: int = 3
    lstm_units: int = 256
    emb_dim: int = EMBEDDING_DIM

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "SpeakerEncoderConfig":
        return SpeakerEncoderConfig(**obj)


class SpeakerEncoderNet(nn.Module):
    """Recurrent stack; the final-frame state is projected and normalized."""

    def __init__(self, config: SpeakerEncoderConfig = SpeakerEncoderConfig()):
        super().__init__()
        self.config = config
        self.lstm = nn.LSTM(config.mel_dim, config.lstm_units,
                            num_layers=config.lstm_layers, batch_first=True)
        self.proj = nn.Linear(config.lstm_units, config.emb_dim)

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """mels (B, T, 80) -> unit-norm embeddings (B, emb_dim)."""
        packed = nn.utils.rnn.pack_padded_sequence(
            mels, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
        last = h[torch.arange(h.shape[0]), lengths - 1]
        emb = self.proj(last)
        return emb / emb.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def embed_speaker(model: SpeakerEncoderNet, mel_frames: np.ndarray,
                  speaker_id: str | None = None) -> SpeakerEmbedding:
    frames = np.asarray(mel_frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("need at least one mel frame")
    model.eval()
    with torch.no_grad():
        emb = model(torch.as_tensor(frames).unsqueeze(0),
                    torch.tensor([frames.shape[0]]))
    return SpeakerEmbedding(emb[0].numpy(), speaker_id)


def ge2e_loss(embeddings: torch.Tensor, w: torch.Tensor | float,
              b: torch.Tensor | float) -> torch.Tensor:
    """Softmax-variant GE2E loss, summed over all N*M utterances.

    `embeddings` is (N speakers, M utterances, D), rows unit-norm. The
    similarity to the own-speaker centroid excludes the query utterance.
    """
    if embeddings.ndim != 3:
        raise ValueError("expected (N, M, D) embeddings")
    N, M, D = embeddings.shape
    if N < 2 or M < 2:
        raise ValueError("GE2E needs N >= 2 speakers and M >= 2 utterances each")
    w = torch.as_tensor(w, dtype=embeddings.dtype).clamp(min=1e-6)
    b = torch.as_tensor(b, dtype=embeddings.dtype)

    centroids = embeddings.mean(dim=1)                       # (N, D)
    sums = embeddings.sum(dim=1, keepdim=True)               # (N, 1, D)
    excl = (sums - embeddings) / (M - 1)                     # own centroid w/o self

    def _cos(a: torch.Tensor, bb: torch.Tensor) -> torch.Tensor:
        num = (a * bb).sum(dim=-1)
        return num / (a.norm(dim=-1) * bb.norm(dim=-1)).clamp(min=1e-12)

    sim = _cos(embeddings[:, :, None, :], centroids[None, None, :, :])  # (N, M, N)
    own = _cos(embeddings, excl)                                        # (N, M)
    eye = torch.eye(N, dtype=torch.bool)
    sim = torch.where(eye[:, None, :], own[:, :, None].expand(N, M, N), sim)
    scores = w * sim + b
    log_softmax = scores - torch.logsumexp(scores, dim=2, keepdim=True)
    return -log_softmax[torch.arange(N), :, torch.arange(N)].sum()


class Ge2eCriterion(nn.Module):
    """Learnable similarity scale/offset; w stays positive via clamping."""

    def __init__(self, init_w: float = 10.0, init_b: float = -5.0):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(init_w)))
        self.b = nn.Parameter(torch.tensor(float(init_b)))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return ge2e_loss(embeddings, self.w, self.b)

    def clamp_(self) -> None:
        with torch.no_grad():
            self.w.clamp_(min=1e-6)


def _pad_mels(mels: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels], dtype=torch.long)
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1])
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.as_tensor(np.asarray(m, dtype=np.float32))
    return out, lengths


def train_speaker_encoder(mels_by_speaker: dict[str, list[np.ndarray]],
                          config: SpeakerEncoderConfig, steps: int, seed: int,
                          n_per_batch: int = 4, m_per_batch: int = 4,
                          lr: float = 1e-3) -> tuple[SpeakerEncoderNet, Ge2eCriterion, list[float]]:
    speakers = sorted(mels_by_speaker)
    if len(speakers) < max(n_per_batch, 2):
        raise ValueError(f"need at least {max(n_per_batch, 2)} speakers, have {len(speakers)}")
    torch.manual_seed(seed)
    model = SpeakerEncoderNet(config)
    criterion = Ge2eCriterion()
    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(criterion.parameters()), lr=lr)
    rng = np.random.default_rng(seed + 1)

    trace: list[float] = []
    model.train()
    for _ in range(steps):
        chosen = rng.choice(len(speakers), size=n_per_batch, replace=False)
        batch: list[np.ndarray] = []
        for s in chosen:
            pool = mels_by_speaker[speakers[int(s)]]
            take = rng.choice(len(pool), size=m_per_batch, replace=len(pool) < m_per_batch)
            batch.extend(pool[int(i)] for i in take)
        mels, lengths = _pad_mels(batch)
        emb = model(mels, lengths).reshape(n_per_batch, m_per_batch, -1)
        loss = criterion(emb)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite GE2E loss at step {len(trace)}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        criterion.clamp_()
        trace.append(float(loss.detach()))
    model.eval()
    return model, criterion, trace
