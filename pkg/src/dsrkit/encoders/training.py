"""Deterministic training loop for the phoneme recognizers."""
from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from ..errors import NumericalError
from .model import EncoderConfig, PhonemeRecognizer, joint_loss

# one dataset item: (audio features TxDa, visual features TxDv or None, target indices)
Item = tuple[np.ndarray, Optional[np.ndarray], list[int]]


def pad_batch(items: Sequence[Item]) -> tuple[torch.Tensor, torch.Tensor | None,
                                              torch.Tensor, list[list[int]]]:
    lengths = torch.tensor([it[0].shape[0] for it in items], dtype=torch.long)
    T = int(lengths.max())
    da = items[0][0].shape[1]
    xa = torch.zeros(len(items), T, da)
    has_visual = items[0][1] is not None
    xv = torch.zeros(len(items), T, items[0][1].shape[1]) if has_visual else None
    targets = []
    for b, (a, v, y) in enumerate(items):
        xa[b, : a.shape[0]] = torch.as_tensor(np.asarray(a, dtype=np.float32))
        if has_visual:
            xv[b, : v.shape[0]] = torch.as_tensor(np.asarray(v, dtype=np.float32))
        targets.append(list(y))
    return xa, xv, lengths, targets


def _batch_stream(n_items: int, batch_size: int, seed: int) -> Iterator[list[int]]:
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n_items)
        for start in range(0, n_items, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk):
                yield [int(i) for i in chunk]


def build_recognizer(config: EncoderConfig, n_symbols: int, seed: int) -> PhonemeRecognizer:
    torch.manual_seed(seed)
    return PhonemeRecognizer(config, n_symbols)


def fit_recognizer(dataset: Sequence[Item], config: EncoderConfig, n_symbols: int,
                   steps: int, seed: int, batch_size: int = 8, lr: float = 1.0,
                   init_params: dict[str, np.ndarray] | None = None,
                   grad_clip: float = 5.0) -> tuple[PhonemeRecognizer, list[float]]:
    """Adadelta training of the joint CTC/attention objective.

    Fully deterministic: the seed fixes both initialization and batch order,
    so identical runs produce identical loss traces and parameters.
    """
    model = build_recognizer(config, n_symbols, seed)
    if init_params is not None:
        load_state(model, init_params)
    optimizer = torch.optim.Adadelta(model.parameters(), lr=lr)
    stream = _batch_stream(len(dataset), batch_size, seed + 1)
    trace: list[float] = []
    model.train()
    for _ in range(steps):
        batch = [dataset[i] for i in next(stream)]
        xa, xv, lengths, targets = pad_batch(batch)
        ctc, ce = model.compute_losses(xa, xv, lengths, targets)
        loss = joint_loss(ctc, ce, config.ctc_weight)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {len(trace)}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
        trace.append(float(loss.detach()))
    model.eval()
    return model, trace


def smoothed(trace: Sequence[float], window: int = 20) -> list[float]:
    """Trailing moving average, used by the training-progress checks."""
    out = []
    for i in range(len(trace)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(trace[lo : i + 1])))
    return out


def state_dict_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in model.state_dict().items()}


def load_state(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    tensors = {k: torch.as_tensor(v) for k, v in params.items()}
    model.load_state_dict(tensors)


def decode_dataset(model: PhonemeRecognizer, dataset: Sequence[Item],
                   batch_size: int = 8) -> list[list[int]]:
    """Greedy free-running decode of every item, in order."""
    model.eval()
    out: list[list[int]] = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            xa, xv, lengths, _ = pad_batch(dataset[start : start + batch_size])
            enc, enc_lengths = model.forward_encoder(xa, xv, lengths)
            hyps, _ = model.greedy_decode(enc, enc_lengths)
            out.extend(hyps)
    return out


def teacher_forcing_accuracy(model: PhonemeRecognizer, dataset: Sequence[Item]) -> float:
    """Fraction of teacher-forced steps whose argmax matches the reference."""
    model.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for item in dataset:
            xa, xv, lengths, targets = pad_batch([item])
            enc, enc_lengths = model.forward_encoder(xa, xv, lengths)
            log_probs = model.teacher_forcing(enc, enc_lengths, targets)
            labels = targets[0] + [model.eos]
            pred = torch.argmax(log_probs[0, : len(labels)], dim=-1)
            correct += int((pred == torch.tensor(labels)).sum())
            total += len(labels)
    return correct / max(total, 1)
