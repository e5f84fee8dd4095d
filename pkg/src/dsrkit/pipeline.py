"""Stage orchestration: corpus -> features -> training -> reconstruction -> eval.

Every stage is idempotent (same seed, same bytes), records the corpus config
hash it was produced from, and checks that its prerequisites exist before
running. All randomness flows from the named seeds in PipelineConfig.
"""
from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch

from . import formats
from .corpus import (PhonemeInventory, SynthesisConfig, UtteranceRecord, config_hash,
                     read_inventory, read_manifest, synth_corpus, video_frame_labels)
from .encoders import (EncoderConfig, PhonemeEmbedding, PhonemeRecognizer,
                       build_recognizer, decode_dataset, decode_greedy, fit_recognizer,
                       load_state, state_dict_arrays)
from .errors import MissingPrerequisiteError, NumericalError, UsageError
from .evalkit import MetricReport, aggregate_report, speaker_error_rates
from .gradcheck import GradCheckResult, REGISTRY, check_all, check_block
from .mel_decoder import (MelDecoderConfig, MelDecoderNet, decode_mel, train_decoder)
from .signal_frontend import (F0Contour, MelSpectrogram, Waveform, fbank_delta,
                              griffin_lim, log_mmse_enhance, mel_spectrogram)
from .speaker_encoder import (SpeakerEncoderConfig, SpeakerEncoderNet, embed_speaker,
                              train_speaker_encoder)
from .variance_adaptor import (PredictorConfig, VariancePredictor, expand, one_hot_rows,
                               predict_durations, predict_f0, train_adaptor)
from .visual_frontend import (DCT_KEEP, LDA_DIM, LdaProjection, extract_visual_features,
                              fit_lda, roi_feature_vector)

OUT_ROOT_ENV = "DSRKIT_OUT_ROOT"
STAGES = ("corpus", "features", "enc_pretrain", "enc_finetune",
          "adaptor", "speaker", "decoder", "eval")
VARIANT_ALIASES = {"a": "audio_only", "av-vgg": "av_vgg", "av-transformer": "av_transformer",
                   "audio_only": "audio_only", "av_vgg": "av_vgg",
                   "av_transformer": "av_transformer"}
TEST_FOLD = 8  # every 8th utterance is held out


@dataclass
class EncoderStageConfig:
    lr: float = 1.0
    batch_size: int = 8
    pretrain_steps: int = 1500
    finetune_steps: int = 300
    finetune_speaker: str = "spk0"


@dataclass
class AdaptorStageConfig:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 600
    speaker: str = "spk0"  # single normal-speech source for prosody targets


@dataclass
class SpeakerStageConfig:
    lr: float = 1e-3
    steps: int = 400
    n_per_batch: int = 4
    m_per_batch: int = 4


@dataclass
class DecoderStageConfig:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 600


@dataclass
class SeedConfig:
    encoder: int = 100
    adaptor: int = 200
    speaker: int = 300
    decoder: int = 400


@dataclass
class PipelineConfig:
    out_root: str = "runs/desk"
    profile: str = "desk"  # desk | paper
    encoder_variant: str = "audio_only"
    corpus: SynthesisConfig = field(default_factory=SynthesisConfig)
    encoder: EncoderStageConfig = field(default_factory=EncoderStageConfig)
    adaptor: AdaptorStageConfig = field(default_factory=AdaptorStageConfig)
    speaker: SpeakerStageConfig = field(default_factory=SpeakerStageConfig)
    decoder: DecoderStageConfig = field(default_factory=DecoderStageConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def __post_init__(self) -> None:
        env_root = os.environ.get(OUT_ROOT_ENV)
        if env_root:
            self.out_root = env_root
        if self.profile not in ("desk", "paper"):
            raise UsageError(f"unknown profile {self.profile!r}")
        if self.encoder_variant not in VARIANT_ALIASES:
            raise UsageError(f"unknown encoder variant {self.encoder_variant!r}")
        self.encoder_variant = VARIANT_ALIASES[self.encoder_variant]

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_json(obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        for key, cls in (("corpus", SynthesisConfig), ("encoder", EncoderStageConfig),
                         ("adaptor", AdaptorStageConfig), ("speaker", SpeakerStageConfig),
                         ("decoder", DecoderStageConfig), ("seeds", SeedConfig)):
            if key in obj and isinstance(obj[key], dict):
                obj[key] = cls(**obj[key])
        return PipelineConfig(**obj)

    def apply_override(self, dotted: str) -> None:
        """Apply one `path.to.field=value` override (CLI flag)."""
        if "=" not in dotted:
            raise UsageError(f"override must look like key.path=value, got {dotted!r}")
        path, raw = dotted.split("=", 1)
        parts = path.strip().split(".")
        target = self
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise UsageError(f"unknown config path {path!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise UsageError(f"unknown config path {path!r}")
        current = getattr(target, leaf)
        try:
            if isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise UsageError(f"bad value for {path!r}: {raw!r}") from exc
        setattr(target, leaf, value)

    # --- paths -----------------------------------------------------------

    @property
    def corpus_dir(self) -> str:
        return os.path.join(self.out_root, "corpus")

    @property
    def features_dir(self) -> str:
        return os.path.join(self.out_root, "features")

    @property
    def checkpoints_dir(self) -> str:
        return os.path.join(self.out_root, "checkpoints")

    @property
    def reports_dir(self) -> str:
        return os.path.join(self.out_root, "reports")

    def manifest_path(self) -> str:
        return os.path.join(self.corpus_dir, "manifest.jsonl")

    def feature_path(self, utt_id: str, kind: str) -> str:
        return os.path.join(self.features_dir, f"{utt_id}.{kind}.f32m")

    def encoder_ckpt(self, variant: str | None = None, stage: str = "pretrain",
                     speaker: str | None = None) -> str:
        variant = variant or self.encoder_variant
        if stage == "pretrain":
            name = f"encoder_pretrain_{variant}.ckpt"
        else:
            name = f"encoder_finetune_{variant}_{speaker or self.encoder.finetune_speaker}.ckpt"
        return os.path.join(self.checkpoints_dir, name)

    def ckpt_path(self, kind: str) -> str:
        return os.path.join(self.checkpoints_dir, f"{kind}.ckpt")


def load_config(path: str | None = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    if path is None:
        config = PipelineConfig()
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                config = PipelineConfig.from_json(json.load(fh))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad config file {path}: {exc}") from exc
    for item in overrides:
        config.apply_override(item)
    return config


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# shared data assembly
# ---------------------------------------------------------------------------

def utt_index(utt_id: str) -> int:
    return int(utt_id.split("_")[0].lstrip("u"))


def is_test_utterance(utt_id: str) -> bool:
    return utt_index(utt_id) % TEST_FOLD == TEST_FOLD - 1


def _require(path: str, stage: str, detail: str = "") -> None:
    if not os.path.exists(path):
        raise MissingPrerequisiteError(stage, detail or path)


def _corpus_hash(config: PipelineConfig) -> str:
    return config_hash(config.corpus.to_json())


def load_records(config: PipelineConfig) -> list[UtteranceRecord]:
    _require(config.manifest_path(), "corpus")
    return read_manifest(config.manifest_path())


def load_inventory(config: PipelineConfig) -> PhonemeInventory:
    _require(os.path.join(config.corpus_dir, "inventory.json"), "corpus")
    return read_inventory(config.corpus_dir)


def encoder_config(config: PipelineConfig, variant: str | None = None) -> EncoderConfig:
    variant = VARIANT_ALIASES[variant or config.encoder_variant]
    if config.profile == "paper":
        return EncoderConfig.paper_scale(variant)
    return EncoderConfig.desk_scale(variant)


def _encoder_dataset(config: PipelineConfig, records: Sequence[UtteranceRecord],
                     inventory: PhonemeInventory, variant: str,
                     split: str) -> tuple[list, list[UtteranceRecord]]:
    """(features, targets) items for degraded rows of the requested split."""
    items = []
    used = []
    needs_visual = variant != "audio_only"
    for rec in records:
        if rec.severity == "normal":
            continue
        if split == "train" and is_test_utterance(rec.utterance_id):
            continue
        if split == "test" and not is_test_utterance(rec.utterance_id):
            continue
        fbank_path = config.feature_path(rec.utterance_id, "fbank")
        _require(fbank_path, "features", f"fbank for {rec.utterance_id}")
        xa = formats.read_f32m(fbank_path)
        xv = None
        if needs_visual:
            visual_path = config.feature_path(rec.utterance_id, "visual")
            _require(visual_path, "features", f"visual for {rec.utterance_id}")
            xv = formats.read_f32m(visual_path)
        items.append((xa, xv, inventory.to_indices(rec.phonemes)))
        used.append(rec)
    return items, used


def _clean_records(records: Sequence[UtteranceRecord], split: str = "train"
                   ) -> list[UtteranceRecord]:
    out = []
    for rec in records:
        if rec.severity != "normal":
            continue
        if split == "train" and is_test_utterance(rec.utterance_id):
            continue
        if split == "test" and not is_test_utterance(rec.utterance_id):
            continue
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_corpus(config: PipelineConfig) -> str:
    synth_corpus(config.corpus, config.corpus_dir)
    return config.manifest_path()


def stage_features(config: PipelineConfig) -> str:
    """Enhanced FBK+delta, mel, LDA-projected visual features per utterance."""
    records = load_records(config)
    inventory = load_inventory(config)
    os.makedirs(config.features_dir, exist_ok=True)

    # pass 1: audio features; collect DCT vectors + labels for the LDA fit
    dct_rows: list[np.ndarray] = []
    dct_labels: list[int] = []
    per_utt_frames: dict[str, tuple[np.ndarray, list[np.ndarray], int]] = {}
    for rec in records:
        samples, rate = formats.read_wav(os.path.join(config.corpus_dir, rec.wav_path))
        wav = Waveform(samples, rate)
        if rec.severity == "normal":
            formats.write_f32m(config.feature_path(rec.utterance_id, "mel"),
                               mel_spectrogram(wav).frames)
            continue
        enhanced = log_mmse_enhance(wav)
        feats = fbank_delta(enhanced)
        formats.write_f32m(config.feature_path(rec.utterance_id, "fbank"), feats.frames)
        if rec.video_path is None:
            continue
        video = formats.read_lipv(os.path.join(config.corpus_dir, rec.video_path))
        lm_rows = [np.asarray(obj["points"], dtype=np.float64)
                   for _, obj in formats.read_jsonl(
                       os.path.join(config.corpus_dir, rec.landmarks_path))]
        per_utt_frames[rec.utterance_id] = (video, lm_rows, feats.frames.shape[0])
        if not is_test_utterance(rec.utterance_id):
            labels = video_frame_labels(inventory.to_indices(rec.phonemes),
                                        rec.durations, video.shape[0])
            img = video.astype(np.float64) / 255.0
            for v in range(video.shape[0]):
                dct_rows.append(roi_feature_vector(img[v], lm_rows[v], DCT_KEEP))
                dct_labels.append(int(labels[v]))

    lda = None
    if dct_rows:
        lda = fit_lda(np.stack(dct_rows), np.asarray(dct_labels), LDA_DIM)
        formats.write_f32m(os.path.join(config.features_dir, "lda.mean.f32m"),
                           lda.mean[None, :])
        formats.write_f32m(os.path.join(config.features_dir, "lda.basis.f32m"), lda.basis)
        formats.atomic_write_bytes(
            os.path.join(config.features_dir, "lda.json"),
            json.dumps({"class_count": lda.class_count, "keep": DCT_KEEP,
                        "out_dim": int(lda.basis.shape[1])}).encode())

    # pass 2: aligned visual features
    if lda is not None:
        for utt_id, (video, lm_rows, n_audio) in per_utt_frames.items():
            feats = extract_visual_features(video, lm_rows, n_audio, lda, DCT_KEEP)
            formats.write_f32m(config.feature_path(utt_id, "visual"), feats.frames)

    meta = {
        "corpus_hash": _corpus_hash(config),
        "test_utterances": sorted({rec.utterance_id.split("_")[0] for rec in records
                                   if is_test_utterance(rec.utterance_id)}),
    }
    formats.atomic_write_bytes(os.path.join(config.features_dir, "features.meta.json"),
                               json.dumps(meta, sort_keys=False).encode())
    return config.features_dir


def load_lda(config: PipelineConfig) -> LdaProjection:
    lda_json = os.path.join(config.features_dir, "lda.json")
    _require(lda_json, "features", "LDA projection")
    with open(lda_json, "r", encoding="utf-8") as fh:
        side = json.load(fh)
    mean = formats.read_f32m(os.path.join(config.features_dir, "lda.mean.f32m"))[0]
    basis = formats.read_f32m(os.path.join(config.features_dir, "lda.basis.f32m"))
    return LdaProjection(mean=mean.astype(np.float64), basis=basis.astype(np.float64),
                         class_count=side["class_count"])


def stage_enc_pretrain(config: PipelineConfig, variant: str | None = None) -> str:
    variant = VARIANT_ALIASES[variant or config.encoder_variant]
    _require(os.path.join(config.features_dir, "features.meta.json"), "features")
    records = load_records(config)
    inventory = load_inventory(config)
    items, _ = _encoder_dataset(config, records, inventory, variant, "train")
    enc_cfg = encoder_config(config, variant)
    model, trace = fit_recognizer(items, enc_cfg, inventory.size,
                                  steps=config.encoder.pretrain_steps,
                                  seed=config.seeds.encoder,
                                  batch_size=config.encoder.batch_size,
                                  lr=config.encoder.lr)
    path = config.encoder_ckpt(variant, "pretrain")
    header = {
        "kind": "encoder", "stage": "pretrain", "variant": variant,
        "config": enc_cfg.to_json(), "inventory": list(inventory.symbols),
        "step": len(trace), "seed": config.seeds.encoder,
        "loss_trace": [round(v, 6) for v in trace],
        "corpus_hash": _corpus_hash(config),
    }
    formats.save_checkpoint(path, header, state_dict_arrays(model))
    return path


def stage_enc_finetune(config: PipelineConfig, variant: str | None = None,
                       speaker: str | None = None) -> str:
    variant = VARIANT_ALIASES[variant or config.encoder_variant]
    speaker = speaker or config.encoder.finetune_speaker
    pretrain_path = config.encoder_ckpt(variant, "pretrain")
    _require(pretrain_path, "enc_pretrain")
    header, params = formats.load_checkpoint(pretrain_path)
    records = [r for r in load_records(config) if r.speaker_id == speaker]
    if not records:
        raise UsageError(f"no utterances for speaker {speaker!r}")
    inventory = load_inventory(config)
    items, _ = _encoder_dataset(config, records, inventory, variant, "train")
    enc_cfg = EncoderConfig.from_json(header["config"])
    model, trace = fit_recognizer(items, enc_cfg, inventory.size,
                                  steps=config.encoder.finetune_steps,
                                  seed=config.seeds.encoder + 1,
                                  batch_size=config.encoder.batch_size,
                                  lr=config.encoder.lr, init_params=params)
    path = config.encoder_ckpt(variant, "finetune", speaker)
    out_header = dict(header)
    out_header.update(stage="finetune", speaker=speaker, step=len(trace),
                      loss_trace=[round(v, 6) for v in trace],
                      seed=config.seeds.encoder + 1)
    formats.save_checkpoint(path, out_header, state_dict_arrays(model))
    return path


def _adaptor_items(config: PipelineConfig, records: Sequence[UtteranceRecord],
                   inventory: PhonemeInventory) -> list:
    items = []
    for rec in records:
        if rec.durations is None or rec.f0 is None:
            raise UsageError(f"{rec.utterance_id}: adaptor training needs durations and F0")
        p = one_hot_rows(inventory.to_indices(rec.phonemes), inventory.size + 1)
        items.append((p, rec.durations, np.asarray(rec.f0, dtype=np.float32)))
    return items


def stage_adaptor(config: PipelineConfig) -> str:
    _require(os.path.join(config.features_dir, "features.meta.json"), "features")
    records = [r for r in _clean_records(load_records(config), "train")
               if r.speaker_id == config.adaptor.speaker]
    if not records:
        raise UsageError(f"no clean utterances for speaker {config.adaptor.speaker!r}")
    inventory = load_inventory(config)
    pred_cfg = (PredictorConfig(in_dim=inventory.size + 1) if config.profile == "paper"
                else PredictorConfig.desk_scale(inventory.size + 1))
    dur_model, f0_model, trace = train_adaptor(
        _adaptor_items(config, records, inventory), pred_cfg,
        steps=config.adaptor.steps, seed=config.seeds.adaptor,
        batch_size=config.adaptor.batch_size, lr=config.adaptor.lr)
    params = {f"duration.{k}": v for k, v in state_dict_arrays(dur_model).items()}
    params.update({f"f0.{k}": v for k, v in state_dict_arrays(f0_model).items()})
    path = config.ckpt_path("adaptor")
    formats.save_checkpoint(path, {
        "kind": "adaptor", "config": pred_cfg.to_json(),
        "speaker": config.adaptor.speaker, "step": len(trace),
        "seed": config.seeds.adaptor, "loss_trace": [round(v, 6) for v in trace],
        "corpus_hash": _corpus_hash(config),
    }, params)
    return path


def load_adaptor(path: str) -> tuple[VariancePredictor, VariancePredictor, dict]:
    header, params = formats.load_checkpoint(path)
    pred_cfg = PredictorConfig.from_json(header["config"])
    dur_model = VariancePredictor(pred_cfg)
    f0_model = VariancePredictor(pred_cfg)
    load_state(dur_model, {k[len("duration."):]: v for k, v in params.items()
                           if k.startswith("duration.")})
    load_state(f0_model, {k[len("f0."):]: v for k, v in params.items()
                          if k.startswith("f0.")})
    dur_model.eval()
    f0_model.eval()
    return dur_model, f0_model, header


def stage_speaker(config: PipelineConfig) -> str:
    _require(os.path.join(config.features_dir, "features.meta.json"), "features")
    records = _clean_records(load_records(config), "train")
    mels: dict[str, list[np.ndarray]] = {}
    for rec in records:
        mel_path = config.feature_path(rec.utterance_id, "mel")
        _require(mel_path, "features", f"mel for {rec.utterance_id}")
        mels.setdefault(rec.speaker_id, []).append(formats.read_f32m(mel_path))
    spk_cfg = SpeakerEncoderConfig()
    model, criterion, trace = train_speaker_encoder(
        mels, spk_cfg, steps=config.speaker.steps, seed=config.seeds.speaker,
        n_per_batch=min(config.speaker.n_per_batch, len(mels)),
        m_per_batch=config.speaker.m_per_batch, lr=config.speaker.lr)
    params = state_dict_arrays(model)
    params["criterion.w"] = np.asarray([float(criterion.w)], dtype=np.float32)
    params["criterion.b"] = np.asarray([float(criterion.b)], dtype=np.float32)
    path = config.ckpt_path("speaker")
    formats.save_checkpoint(path, {
        "kind": "speaker", "config": spk_cfg.to_json(), "step": len(trace),
        "seed": config.seeds.speaker, "loss_trace": [round(v, 6) for v in trace],
        "corpus_hash": _corpus_hash(config),
    }, params)
    return path


def load_speaker_encoder(path: str) -> tuple[SpeakerEncoderNet, dict]:
    header, params = formats.load_checkpoint(path)
    model = SpeakerEncoderNet(SpeakerEncoderConfig.from_json(header["config"]))
    load_state(model, {k: v for k, v in params.items() if not k.startswith("criterion.")})
    model.eval()
    return model, header


def stage_decoder(config: PipelineConfig) -> str:
    _require(config.ckpt_path("adaptor"), "adaptor")
    _require(config.ckpt_path("speaker"), "speaker")
    speaker_model, _ = load_speaker_encoder(config.ckpt_path("speaker"))
    records = _clean_records(load_records(config), "train")
    inventory = load_inventory(config)
    items = []
    for rec in records:
        mel_path = config.feature_path(rec.utterance_id, "mel")
        _require(mel_path, "features", f"mel for {rec.utterance_id}")
        mel = formats.read_f32m(mel_path)
        p_hat = expand(one_hot_rows(inventory.to_indices(rec.phonemes),
                                    inventory.size + 1), rec.durations)
        emb = embed_speaker(speaker_model, mel, rec.speaker_id)
        items.append((p_hat, np.asarray(rec.f0, dtype=np.float32), emb.vector, mel))
    in_dim = inventory.size + 1 + 1 + speaker_model.config.emb_dim
    dec_cfg = (MelDecoderConfig(in_dim=in_dim) if config.profile == "paper"
               else MelDecoderConfig.desk_scale(in_dim))
    model, trace = train_decoder(items, dec_cfg, steps=config.decoder.steps,
                                 seed=config.seeds.decoder,
                                 batch_size=config.decoder.batch_size,
                                 lr=config.decoder.lr)
    path = config.ckpt_path("decoder")
    formats.save_checkpoint(path, {
        "kind": "decoder", "config": dec_cfg.to_json(), "step": len(trace),
        "seed": config.seeds.decoder, "loss_trace": [round(v, 6) for v in trace],
        "corpus_hash": _corpus_hash(config),
    }, state_dict_arrays(model))
    return path


def load_mel_decoder(path: str) -> tuple[MelDecoderNet, dict]:
    header, params = formats.load_checkpoint(path)
    model = MelDecoderNet(MelDecoderConfig.from_json(header["config"]))
    load_state(model, params)
    model.eval()
    return model, header


def load_encoder(path: str) -> tuple[PhonemeRecognizer, dict]:
    header, params = formats.load_checkpoint(path)
    enc_cfg = EncoderConfig.from_json(header["config"])
    model = build_recognizer(enc_cfg, len(header["inventory"]), seed=0)
    load_state(model, params)
    model.eval()
    return model, header


def stage_eval(config: PipelineConfig, variant: str | None = None) -> dict:
    """Greedy-decode the held-out degraded utterances; per-speaker PER/WER."""
    variant = VARIANT_ALIASES[variant or config.encoder_variant]
    ckpt = config.encoder_ckpt(variant, "pretrain")
    _require(ckpt, "enc_pretrain")
    model, header = load_encoder(ckpt)
    records = load_records(config)
    inventory = load_inventory(config)
    items, used = _encoder_dataset(config, records, inventory, variant, "test")
    hyps = decode_dataset(model, items)
    utterances = []
    ref_words = []
    for rec, hyp in zip(used, hyps):
        ref = inventory.to_indices(rec.phonemes)
        utterances.append((rec.speaker_id, hyp, ref))
        if rec.word_lengths:
            words, pos = [], 0
            for n in rec.word_lengths:
                words.append(ref[pos : pos + n])
                pos += n
            ref_words.append(words)
    rates = speaker_error_rates(utterances, ref_words if len(ref_words) == len(utterances) else None)
    result = {
        "variant": variant,
        "per_speaker": rates,
        "n_utterances": len(utterances),
        "corpus_hash": header.get("corpus_hash"),
    }
    os.makedirs(config.reports_dir, exist_ok=True)
    formats.atomic_write_bytes(os.path.join(config.reports_dir, f"eval_{variant}.json"),
                               json.dumps(result, sort_keys=False).encode())
    return result


def run_report(config: PipelineConfig, systems: Sequence[str],
               metric: str = "per") -> MetricReport:
    per_system: dict[str, dict[str, float]] = {}
    for name in systems:
        variant = VARIANT_ALIASES.get(name)
        if variant is None:
            raise UsageError(f"unknown system {name!r}")
        path = os.path.join(config.reports_dir, f"eval_{variant}.json")
        _require(path, "eval", f"eval_{variant}.json")
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        per_system[name] = {spk: vals[metric] for spk, vals in data["per_speaker"].items()}
    report = aggregate_report(per_system, list(systems))
    os.makedirs(config.reports_dir, exist_ok=True)
    formats.atomic_write_bytes(
        os.path.join(config.reports_dir, f"report_{metric}.json"),
        json.dumps(report.to_json(), sort_keys=False).encode())
    formats.atomic_write_bytes(
        os.path.join(config.reports_dir, f"report_{metric}.txt"),
        (report.render_table() + "\n").encode())
    return report


def run_stage(stage: str, config: PipelineConfig) -> object:
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}; stages: {', '.join(STAGES)}")
    runners = {
        "corpus": stage_corpus,
        "features": stage_features,
        "enc_pretrain": stage_enc_pretrain,
        "enc_finetune": stage_enc_finetune,
        "adaptor": stage_adaptor,
        "speaker": stage_speaker,
        "decoder": stage_decoder,
        "eval": stage_eval,
    }
    return runners[stage](config)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionResult:
    waveform: Waveform
    mel: MelSpectrogram
    phonemes: list[str]
    durations: np.ndarray
    f0: F0Contour
    posterior: PhonemeEmbedding


def _check_hashes(headers: Sequence[dict], force: bool) -> None:
    hashes = {h.get("corpus_hash") for h in headers}
    if len(hashes) > 1 and not force:
        raise UsageError(
            f"checkpoint corpus hashes disagree ({sorted(map(str, hashes))}); "
            "pass force=True/--force to override")


def reconstruct(config: PipelineConfig, wav_path: str,
                video_path: str | None = None, landmarks_path: str | None = None,
                reference_path: str | None = None, encoder_ckpt: str | None = None,
                force: bool = False) -> ReconstructionResult:
    """Full chain: enhance -> encode -> normal prosody -> mel -> waveform.

    The speaker reference defaults to the input utterance itself, preserving
    the original speaker's timbre.
    """
    variant = config.encoder_variant
    encoder_ckpt = encoder_ckpt or config.encoder_ckpt(variant, "pretrain")
    for path, stage in ((encoder_ckpt, "enc_pretrain"),
                        (config.ckpt_path("adaptor"), "adaptor"),
                        (config.ckpt_path("speaker"), "speaker"),
                        (config.ckpt_path("decoder"), "decoder")):
        _require(path, stage)
    enc_model, enc_header = load_encoder(encoder_ckpt)
    dur_model, f0_model, adaptor_header = load_adaptor(config.ckpt_path("adaptor"))
    spk_model, spk_header = load_speaker_encoder(config.ckpt_path("speaker"))
    dec_model, dec_header = load_mel_decoder(config.ckpt_path("decoder"))
    _check_hashes([enc_header, adaptor_header, spk_header, dec_header], force)
    if enc_header["variant"] != variant and not force:
        raise UsageError(f"checkpoint variant {enc_header['variant']!r} does not match "
                         f"configured variant {variant!r}")

    samples, rate = formats.read_wav(wav_path)
    enhanced = log_mmse_enhance(Waveform(samples, rate))
    xa = fbank_delta(enhanced).frames
    xv = None
    if variant != "audio_only":
        if video_path is None or landmarks_path is None:
            raise UsageError(f"variant {variant} requires video and landmarks inputs")
        lda = load_lda(config)
        video = formats.read_lipv(video_path)
        lm_rows = [np.asarray(obj["points"], dtype=np.float64)
                   for _, obj in formats.read_jsonl(landmarks_path)]
        xv = extract_visual_features(video, lm_rows, xa.shape[0], lda).frames

    symbols = enc_header["inventory"]
    with torch.no_grad():
        lengths = torch.tensor([xa.shape[0]])
        xa_t = torch.as_tensor(xa, dtype=torch.float32).unsqueeze(0)
        xv_t = None if xv is None else torch.as_tensor(xv, dtype=torch.float32).unsqueeze(0)
        enc, enc_lengths = enc_model.forward_encoder(xa_t, xv_t, lengths)
        tokens, posterior_rows = enc_model.greedy_decode(enc, enc_lengths)
    tokens = tokens[0]
    posterior = PhonemeEmbedding(posterior_rows[0].numpy())
    if not tokens:
        raise NumericalError("encoder decoded an empty phoneme sequence")
    phoneme_rows = posterior.rows[: len(tokens)]

    durations = predict_durations(dur_model, phoneme_rows)
    p_hat = expand(phoneme_rows, durations)
    f0 = predict_f0(f0_model, p_hat)

    ref_path = reference_path or wav_path
    ref_samples, ref_rate = formats.read_wav(ref_path)
    ref_mel = mel_spectrogram(Waveform(ref_samples, ref_rate))
    emb = embed_speaker(spk_model, ref_mel.frames)

    # durations count 10 ms frames; the 25 ms analysis framing yields one
    # fewer mel frame than sum(durations), so trim the final frame
    n_frames = max(int(durations.sum()) - 1, 1)
    mel = decode_mel(dec_model, p_hat[:n_frames], f0.values[:n_frames], emb)
    wav_out = griffin_lim(mel, iters=60)
    return ReconstructionResult(
        waveform=wav_out, mel=mel,
        phonemes=[symbols[t] for t in tokens],
        durations=durations, f0=f0, posterior=posterior)


def run_gradcheck(selector: str | None = None, seed: int = 0) -> list[GradCheckResult]:
    if selector is None or selector == "all":
        return check_all(seed)
    if selector not in REGISTRY:
        raise UsageError(f"unknown gradcheck module {selector!r}; "
                         f"known: {', '.join(sorted(REGISTRY))}")
    return [check_block(selector, seed)]
