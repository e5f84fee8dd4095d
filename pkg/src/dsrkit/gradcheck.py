"""Finite-difference verification of every trainable block.

Each registered block is instantiated tiny and in double precision; analytic
gradients from autograd are compared entry-by-entry against central finite
differences of the scalar loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .encoders.blocks import (FusionLayer, LocationAwareAttention, TransformerBlock,
                              VggExtractor)
from .encoders.ctc import ctc_loss
from .mel_decoder import MelDecoderConfig, MelDecoderNet
from .speaker_encoder import ge2e_loss
from .variance_adaptor import PredictorConfig, VariancePredictor

DEFAULT_TOL = 1e-5

# a builder returns (named leaf tensors to perturb, scalar loss closure)
Builder = Callable[[int], tuple[list[tuple[str, torch.Tensor]], Callable[[], torch.Tensor]]]


@dataclass
class GradCheckResult:
    name: str
    per_param: dict[str, float]
    max_rel_error: float
    passed: bool
    note: str = ""

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.note:
            return f"{self.name}: {status} ({self.note})"
        return f"{self.name}: {status} max_rel_error={self.max_rel_error:.3e}"


def _params_of(module: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(n, p) for n, p in module.named_parameters()]


def _build_vgg(seed: int):
    torch.manual_seed(seed)
    module = VggExtractor(in_dim=8, channels=(2, 3)).double()
    x = torch.randn(1, 8, 8, dtype=torch.float64)
    lengths = torch.tensor([8])

    def loss_fn():
        out, _ = module(x, lengths)
        return (out ** 2).sum()

    return _params_of(module), loss_fn


def _build_blstm(seed: int):
    torch.manual_seed(seed)
    module = torch.nn.LSTM(5, 4, num_layers=1, batch_first=True,
                           bidirectional=True).double()
    x = torch.randn(2, 6, 5, dtype=torch.float64)

    def loss_fn():
        out, _ = module(x)
        return (out ** 2).sum()

    return _params_of(module), loss_fn


def _build_bigru(seed: int):
    torch.manual_seed(seed)
    config = PredictorConfig(in_dim=4, bigru_layers=1, bigru_units=3,
                             conv_channels=3, conv_kernels=(3, 5))
    module = VariancePredictor(config).double()
    x = torch.randn(2, 5, 4, dtype=torch.float64)
    lengths = torch.tensor([5, 3])

    def loss_fn():
        return (module(x, lengths) ** 2).sum()

    return _params_of(module), loss_fn


def _build_attention(seed: int):
    torch.manual_seed(seed)
    module = LocationAwareAttention(enc_dim=5, dec_dim=4, att_dim=6,
                                    conv_channels=3, conv_kernel=3).double()
    enc = torch.randn(1, 6, 5, dtype=torch.float64)
    dec_state = torch.randn(1, 4, dtype=torch.float64)
    prev_att = torch.softmax(torch.randn(1, 6, dtype=torch.float64), dim=1)
    mask = torch.ones(1, 6, dtype=torch.bool)

    def loss_fn():
        context, att = module(enc, module.precompute(enc), mask, dec_state, prev_att)
        return (context ** 2).sum() + (att ** 2).sum()

    return _params_of(module), loss_fn


def _build_transformer(seed: int):
    torch.manual_seed(seed)
    module = TransformerBlock(dim=8, heads=2, ffn_dim=16).double()
    x = torch.randn(1, 5, 8, dtype=torch.float64)

    def loss_fn():
        return (module(x) ** 2).sum()

    return _params_of(module), loss_fn


def _build_fusion(seed: int):
    torch.manual_seed(seed)
    module = FusionLayer(4, 3, 5).double()
    xa = torch.randn(1, 6, 4, dtype=torch.float64)
    xv = torch.randn(1, 6, 3, dtype=torch.float64)

    def loss_fn():
        return (module(xa, xv) ** 2).sum()

    return _params_of(module), loss_fn


def _build_ctc(seed: int):
    torch.manual_seed(seed)
    logits = torch.randn(5, 4, dtype=torch.float64)
    target = [0, 1, 0]

    def loss_fn():
        return ctc_loss(torch.log_softmax(logits, dim=-1), target, blank=3)

    return [("frame_logits", logits)], loss_fn


def _build_ce(seed: int):
    torch.manual_seed(seed)
    logits = torch.randn(4, 5, dtype=torch.float64)
    labels = torch.tensor([1, 0, 4, 2])

    def loss_fn():
        return torch.nn.functional.cross_entropy(logits, labels)

    return [("step_logits", logits)], loss_fn


def _build_ge2e(seed: int):
    torch.manual_seed(seed)
    emb = torch.randn(2, 3, 4, dtype=torch.float64)
    w = torch.tensor(10.0, dtype=torch.float64)
    b = torch.tensor(-5.0, dtype=torch.float64)

    def loss_fn():
        return ge2e_loss(emb, w, b)

    return [("embeddings", emb), ("w", w), ("b", b)], loss_fn


def _build_decoder(seed: int):
    torch.manual_seed(seed)
    config = MelDecoderConfig(in_dim=6, mel_dim=5, prenet_dim=5, rnn_units=4,
                              rnn_layers=1, postnet_channels=4, postnet_layers=3,
                              dropout=0.0)
    module = MelDecoderNet(config).double()
    module.eval()  # keep the prenet deterministic for finite differences
    x = torch.randn(2, 5, 6, dtype=torch.float64)
    lengths = torch.tensor([5, 4])

    def loss_fn():
        pre, post = module(x, lengths)
        return (pre ** 2).sum() + (post ** 2).sum()

    return _params_of(module), loss_fn


def _build_length_regulator(seed: int):
    # expansion has no trainable parameters; registered for the vacuous case
    return [], lambda: torch.tensor(0.0, dtype=torch.float64)


REGISTRY: dict[str, Builder] = {
    "vgg": _build_vgg,
    "blstm": _build_blstm,
    "bigru": _build_bigru,
    "attention": _build_attention,
    "transformer": _build_transformer,
    "fusion": _build_fusion,
    "ctc": _build_ctc,
    "ce": _build_ce,
    "ge2e": _build_ge2e,
    "decoder": _build_decoder,
    "length_regulator": _build_length_regulator,
}


def check_block(name: str, seed: int = 0, tol: float = DEFAULT_TOL) -> GradCheckResult:
    """Central finite differences vs autograd for one registered block."""
    if name not in REGISTRY:
        raise KeyError(f"unknown gradcheck module {name!r}; "
                       f"known: {', '.join(sorted(REGISTRY))}")
    params, loss_fn = REGISTRY[name](seed)
    if not params:
        return GradCheckResult(name, {}, 0.0, True, note="no parameters")

    for _, p in params:
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None
                    else torch.zeros_like(p)) for n, p in params}

    per_param: dict[str, float] = {}
    with torch.no_grad():
        for pname, p in params:
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                eps = 1e-6 * max(1.0, abs(orig))
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd[i] = (up - down) / (2.0 * eps)
            g = analytic[pname].view(-1)
            scale = max(float(g.norm()), float(fd.norm()), 1e-12)
            per_param[pname] = float((fd - g).norm()) / scale
    max_err = max(per_param.values())
    return GradCheckResult(name, per_param, max_err, max_err < tol)


def check_all(seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    return [check_block(name, seed, tol) for name in REGISTRY]
