"""Synthetic audio-visual mini-corpus and manifest ingestion.

Each utterance is a chain of two-formant phonemes. The clean waveform carries
the normal prosody ground truth; the degraded counterpart gets per-phoneme
tempo stretching, additive noise, and phoneme-realization substitutions while
the lip video stays clean. Generation is a pure function of SynthesisConfig.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .formats import atomic_write_bytes, write_jsonl, write_lipv, write_wav, read_jsonl

SEVERITIES = ("very_low", "low", "middle", "normal")
DEGRADED_SEVERITIES = ("very_low", "low", "middle")

# severity -> (SNR offset dB, substitution multiplier, tempo exponent multiplier)
SEVERITY_PROFILES = {
    "very_low": (-4.0, 1.6, 1.3),
    "low": (0.0, 1.0, 1.0),
    "middle": (4.0, 0.5, 0.6),
}

HOP = 160
SAMPLE_RATE = 16000
VIDEO_FPS = 25
VIDEO_SIZE = 48

_BASE_SYMBOLS = (
    "aa ae ah ao eh er ih iy uw uh b d g k p t m n ng f s sh v z l r w y hh "
    "ch jh th dh zh"
).split()


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered phoneme labels plus the index reserved for the CTC blank."""

    symbols: tuple[str, ...]
    blank_index: int = -1

    def __post_init__(self) -> None:
        if len(self.symbols) < 2:
            raise ValueError("inventory needs at least 2 symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("inventory symbols must be unique")
        if self.blank_index == -1:
            object.__setattr__(self, "blank_index", len(self.symbols))
        if self.blank_index < len(self.symbols):
            raise ValueError("blank index must not shadow a phoneme")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def to_indices(self, labels: Sequence[str]) -> list[int]:
        lookup = {s: i for i, s in enumerate(self.symbols)}
        return [lookup[s] for s in labels]

    def to_json(self) -> dict:
        return {"symbols": list(self.symbols), "blank_index": self.blank_index}

    @staticmethod
    def from_json(obj: dict) -> "PhonemeInventory":
        return PhonemeInventory(tuple(obj["symbols"]), obj.get("blank_index", -1))


def default_inventory(size: int) -> PhonemeInventory:
    if size < 2:
        raise ValueError("inventory size must be >= 2")
    symbols = list(_BASE_SYMBOLS[:size])
    for i in range(len(symbols), size):
        symbols.append(f"ph{i}")
    return PhonemeInventory(tuple(symbols))


@dataclass
class SynthesisConfig:
    sample_rate: int = SAMPLE_RATE
    n_speakers: int = 4
    n_utterances: int = 48
    inventory_size: int = 24
    noise_snr_db: float = 8.0
    tempo_distortion: float = 1.3
    substitution_rate: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inventory_size < 2:
            raise ValueError("degenerate config: inventory_size < 2")
        if not 0.0 <= self.substitution_rate <= 1.0:
            raise ValueError("substitution_rate must lie in [0, 1]")
        if self.tempo_distortion < 1.0:
            raise ValueError("tempo_distortion must be >= 1")
        if self.n_speakers < 1 or self.n_utterances < 1:
            raise ValueError("need at least one speaker and one utterance")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    wav_path: str
    phonemes: list[str]
    severity: str
    video_path: Optional[str] = None
    landmarks_path: Optional[str] = None
    durations: Optional[list[int]] = None
    f0: Optional[list[float]] = None
    word_lengths: Optional[list[int]] = None

    def validate(self) -> None:
        if not self.phonemes:
            raise ValueError("empty phoneme sequence")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.durations is not None:
            if len(self.durations) != len(self.phonemes):
                raise ValueError(
                    f"{len(self.durations)} durations for {len(self.phonemes)} phonemes"
                )
            if any(d < 1 for d in self.durations):
                raise ValueError("durations must be >= 1 frame")
        if self.f0 is not None and self.durations is not None:
            if len(self.f0) != sum(self.durations):
                raise ValueError("F0 length must equal total duration frames")
        if self.word_lengths is not None:
            if any(n < 1 for n in self.word_lengths) or sum(self.word_lengths) != len(self.phonemes):
                raise ValueError("word lengths must be positive and cover the phonemes")

    def to_json(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "speaker_id": self.speaker_id,
            "wav_path": self.wav_path,
            "video_path": self.video_path,
            "landmarks_path": self.landmarks_path,
            "phonemes": self.phonemes,
            "durations": self.durations,
            "f0": self.f0,
            "word_lengths": self.word_lengths,
            "severity": self.severity,
        }


# ---------------------------------------------------------------------------
# deterministic per-phoneme and per-speaker parameters
# ---------------------------------------------------------------------------

def phoneme_formants(index: int) -> tuple[float, float]:
    """Two-formant pair; distinct per inventory index."""
    f1 = 280.0 + 95.0 * (index % 5)
    f2 = 1050.0 + 330.0 * (index // 5)
    return f1, f2


def phoneme_is_voiced(index: int) -> bool:
    return index % 6 != 5


def phoneme_base_duration(index: int) -> int:
    """Frames; phoneme-dependent so durations are predictable from identity."""
    return 8 + (index * 5) % 13


def phoneme_mouth(index: int) -> tuple[float, float]:
    """(aperture height, width) in pixels on the synthetic face."""
    height = 6.0 + 3.2 * (index % 5)
    width = 12.0 + 2.8 * (index // 5)
    return height, width


def speaker_voice(speaker_idx: int, n_speakers: int) -> dict:
    spread = speaker_idx / max(n_speakers - 1, 1)
    return {
        "base_f0": 112.0 + 168.0 * spread,
        "formant_scale": 0.92 + 0.16 * spread,
        "severity": DEGRADED_SEVERITIES[speaker_idx % len(DEGRADED_SEVERITIES)],
    }


def _formant_envelope(freqs: np.ndarray, f1: float, f2: float) -> np.ndarray:
    env = (
        0.08
        + np.exp(-0.5 * ((freqs - f1) / 110.0) ** 2)
        + 0.7 * np.exp(-0.5 * ((freqs - f2) / 170.0) ** 2)
    )
    return env * (freqs < 3900.0)


def _phoneme_f0_targets(phonemes: list[int], base_f0: float, rng: np.random.Generator) -> np.ndarray:
    """Per-phoneme F0 targets with declination; 0 for unvoiced phonemes."""
    n = len(phonemes)
    targets = np.zeros(n)
    for i, ph in enumerate(phonemes):
        if phoneme_is_voiced(ph):
            decl = 1.06 - 0.14 * (i / max(n - 1, 1))
            targets[i] = base_f0 * decl * rng.uniform(0.97, 1.03)
    return targets


def _frame_f0(targets: np.ndarray, durations: list[int]) -> np.ndarray:
    """Frame-level contour: constant per phoneme, 0 on unvoiced phonemes."""
    parts = [np.full(d, t) for t, d in zip(targets, durations)]
    return np.concatenate(parts) if parts else np.zeros(0)


def _synth_segments(realized: list[int], durations: list[int], frame_f0: np.ndarray,
                    formant_scale: float, seed: int, utt_idx: int) -> np.ndarray:
    """Additive two-formant synthesis; phase-continuous across segments.

    Output length is sum(durations) * hop plus half a hop of silence, which
    puts the 25 ms analysis frame count exactly one short of the frame total.
    """
    total = sum(durations) * HOP
    out = np.zeros(total + HOP // 2)
    theta = 0.0
    pos = 0
    frame_pos = 0
    for seg, (ph, d) in enumerate(zip(realized, durations)):
        n = d * HOP
        f1, f2 = phoneme_formants(ph)
        f1, f2 = f1 * formant_scale, f2 * formant_scale
        if phoneme_is_voiced(ph):
            f0_seg = np.repeat(frame_f0[frame_pos : frame_pos + d], HOP)
            f0_seg = np.where(f0_seg > 0, f0_seg, 120.0)
            phase = theta + 2.0 * np.pi * np.cumsum(f0_seg) / SAMPLE_RATE
            theta = float(phase[-1])
            f0_mean = float(f0_seg.mean())
            n_harm = max(1, min(14, int(3800.0 / f0_mean)))
            ks = np.arange(1, n_harm + 1)
            amps = _formant_envelope(ks * f0_mean, f1, f2)
            seg_sig = (amps[None, :] * np.sin(phase[:, None] * ks[None, :])).sum(axis=1)
        else:
            rng = np.random.default_rng([seed, utt_idx, seg])
            noise = rng.standard_normal(n)
            spec = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
            seg_sig = np.fft.irfft(spec * _formant_envelope(freqs, f1, f2), n=n)
            rms = float(np.sqrt(np.mean(seg_sig**2)))
            seg_sig = seg_sig * (0.6 / max(rms, 1e-9))
        ramp = min(64, n // 4)
        if ramp > 0:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            seg_sig[:ramp] *= fade
            seg_sig[-ramp:] *= fade[::-1]
        out[pos : pos + n] = seg_sig
        pos += n
        frame_pos += d
    peak = float(np.max(np.abs(out)))
    return out * (0.55 / max(peak, 1e-9))


def _render_video(phonemes: list[int], durations: list[int], seed: int, utt_idx: int
                  ) -> tuple[np.ndarray, list[dict]]:
    """Grayscale mouth video + 20-point lip landmarks encoding the clean labels."""
    total_s = sum(durations) * HOP / SAMPLE_RATE
    n_frames = max(1, math.ceil(total_s * VIDEO_FPS))
    bounds = np.cumsum([0] + list(durations)) * HOP / SAMPLE_RATE
    rng = np.random.default_rng([seed, utt_idx, 424242])
    jitter = rng.integers(-2, 3, size=(n_frames, 2)).astype(np.float64)

    yy, xx = np.mgrid[0:VIDEO_SIZE, 0:VIDEO_SIZE].astype(np.float64)
    frames = np.empty((n_frames, VIDEO_SIZE, VIDEO_SIZE), dtype=np.uint8)
    landmark_rows = []
    angles = 2.0 * np.pi * np.arange(20) / 20.0
    for v in range(n_frames):
        t = (v + 0.5) / VIDEO_FPS
        i = int(np.searchsorted(bounds, t, side="right")) - 1
        i = min(max(i, 0), len(phonemes) - 1)
        height, width = phoneme_mouth(phonemes[i])
        # 40 ms raised-cosine blend into the next phoneme near the boundary
        if i + 1 < len(phonemes):
            gap = bounds[i + 1] - t
            if gap < 0.04:
                w = 0.5 - 0.5 * math.cos(math.pi * (1.0 - gap / 0.04))
                h2, w2 = phoneme_mouth(phonemes[i + 1])
                height = (1 - w) * height + w * h2
                width = (1 - w) * width + w * w2
        cx = VIDEO_SIZE / 2.0 + jitter[v, 0]
        cy = VIDEO_SIZE / 2.0 + jitter[v, 1]
        ax, ay = width / 2.0, height / 2.0
        r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
        shade = np.clip(2.0 * (1.0 - r2), 0.0, 1.0)
        frames[v] = np.round(205.0 - 165.0 * shade).astype(np.uint8)
        points = np.stack([cx + ax * np.cos(angles), cy + ay * np.sin(angles)], axis=1)
        landmark_rows.append({"frame": v, "points": [[float(x), float(y)] for x, y in points]})
    return frames, landmark_rows


def frame_phoneme_labels(phonemes: Sequence[int], durations: Sequence[int]) -> np.ndarray:
    """Per-10ms-frame phoneme indices from clean durations."""
    return np.repeat(np.asarray(phonemes, dtype=np.int64), np.asarray(durations, dtype=np.int64))


def video_frame_labels(phonemes: Sequence[int], durations: Sequence[int], n_video: int) -> np.ndarray:
    """Phoneme index shown by each video frame (clean timing)."""
    bounds = np.cumsum([0] + list(durations)) * HOP / SAMPLE_RATE
    labels = np.empty(n_video, dtype=np.int64)
    for v in range(n_video):
        t = (v + 0.5) / VIDEO_FPS
        i = int(np.searchsorted(bounds, t, side="right")) - 1
        labels[v] = phonemes[min(max(i, 0), len(phonemes) - 1)]
    return labels


def _build_vocabulary(inventory_size: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, 101])
    vocab: list[tuple[int, ...]] = []
    target = max(24, 2 * inventory_size)
    while len(vocab) < target:
        length = int(rng.integers(2, 5))
        word = tuple(int(rng.integers(0, inventory_size)) for _ in range(length))
        if word not in vocab:
            vocab.append(word)
    return [list(w) for w in vocab]


def config_hash(config_json: dict) -> str:
    return hashlib.sha256(json.dumps(config_json, sort_keys=True).encode()).hexdigest()[:16]


def synth_corpus(config: SynthesisConfig, out_dir: str) -> list[UtteranceRecord]:
    """Generate the corpus under `out_dir`; returns the manifest records.

    Writes per utterance: a clean waveform, a degraded waveform, a LIPV lip
    video of the clean phoneme chain, lip landmarks, and two manifest rows
    (clean + degraded) sharing ground-truth phonemes/durations/F0.
    """
    if config.inventory_size < 2:
        raise ValueError("degenerate config: inventory_size < 2")
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {out_dir}")
    inventory = default_inventory(config.inventory_size)
    vocabulary = _build_vocabulary(config.inventory_size, config.seed)
    speakers = [speaker_voice(i, config.n_speakers) for i in range(config.n_speakers)]

    records: list[UtteranceRecord] = []
    for utt in range(config.n_utterances):
        spk_idx = utt % config.n_speakers
        voice = speakers[spk_idx]
        rng = np.random.default_rng([config.seed, utt, 1])

        n_words = int(rng.integers(2, 5))
        words = [vocabulary[int(rng.integers(0, len(vocabulary)))] for _ in range(n_words)]
        phonemes = [p for w in words for p in w]
        word_lengths = [len(w) for w in words]
        durations = [
            max(3, phoneme_base_duration(p) + int(rng.integers(-2, 3))) for p in phonemes
        ]
        f0_targets = _phoneme_f0_targets(phonemes, voice["base_f0"], rng)
        clean_f0 = _frame_f0(f0_targets, durations)
        clean = _synth_segments(phonemes, durations, clean_f0,
                                voice["formant_scale"], config.seed, utt)

        severity = voice["severity"]
        snr_off, sub_mult, tempo_mult = SEVERITY_PROFILES[severity]
        deg_rng = np.random.default_rng([config.seed, utt, 2])
        p_sub = min(1.0, config.substitution_rate * sub_mult)
        realized = []
        for p in phonemes:
            if deg_rng.uniform() < p_sub:
                shift = int(deg_rng.integers(1, config.inventory_size))
                realized.append((p + shift) % config.inventory_size)
            else:
                realized.append(p)
        exponents = deg_rng.uniform(-1.0, 1.0, size=len(phonemes)) * tempo_mult
        deg_durations = [
            max(2, int(round(d * config.tempo_distortion**u)))
            for d, u in zip(durations, exponents)
        ]
        deg_f0 = _frame_f0(f0_targets, deg_durations)
        degraded = _synth_segments(realized, deg_durations, deg_f0,
                                   voice["formant_scale"], config.seed, utt)
        noise_rng = np.random.default_rng([config.seed, utt, 3])
        snr_db = config.noise_snr_db + snr_off
        sig_rms = float(np.sqrt(np.mean(degraded**2)))
        noise = noise_rng.standard_normal(len(degraded))
        noise *= sig_rms * 10.0 ** (-snr_db / 20.0) / max(float(np.sqrt(np.mean(noise**2))), 1e-12)
        degraded = np.clip(degraded + noise, -1.0, 1.0)

        video, landmark_rows = _render_video(phonemes, durations, config.seed, utt)

        uid = f"u{utt:04d}"
        clean_wav = f"wav/{uid}_clean.wav"
        dys_wav = f"wav/{uid}_dys.wav"
        video_path = f"video/{uid}.lipv"
        landmarks_path = f"landmarks/{uid}.jsonl"
        write_wav(os.path.join(out_dir, clean_wav), clean, config.sample_rate)
        write_wav(os.path.join(out_dir, dys_wav), degraded, config.sample_rate)
        write_lipv(os.path.join(out_dir, video_path), video)
        write_jsonl(os.path.join(out_dir, landmarks_path), landmark_rows)

        labels = [inventory.symbols[p] for p in phonemes]
        shared = dict(
            phonemes=labels,
            durations=list(durations),
            f0=[round(float(v), 3) for v in clean_f0],
            word_lengths=word_lengths,
        )
        records.append(UtteranceRecord(
            utterance_id=f"{uid}_clean", speaker_id=f"spk{spk_idx}",
            wav_path=clean_wav, severity="normal", **shared))
        records.append(UtteranceRecord(
            utterance_id=f"{uid}_dys", speaker_id=f"spk{spk_idx}",
            wav_path=dys_wav, video_path=video_path, landmarks_path=landmarks_path,
            severity=severity, **shared))

    for rec in records:
        rec.validate()
    write_jsonl(os.path.join(out_dir, "manifest.jsonl"), [r.to_json() for r in records])
    atomic_write_bytes(os.path.join(out_dir, "inventory.json"),
                       json.dumps(inventory.to_json(), sort_keys=False).encode())
    meta = {
        "config": config.to_json(),
        "config_hash": config_hash(config.to_json()),
        "speakers": {f"spk{i}": speakers[i] for i in range(config.n_speakers)},
        "vocabulary": vocabulary,
    }
    atomic_write_bytes(os.path.join(out_dir, "corpus.meta.json"),
                       json.dumps(meta, sort_keys=False).encode())
    return records


def read_manifest(path: str) -> list[UtteranceRecord]:
    """Parse and validate a JSON-lines manifest; errors name the offending row."""
    records = []
    for lineno, obj in read_jsonl(path):
        try:
            rec = UtteranceRecord(
                utterance_id=str(obj["utterance_id"]),
                speaker_id=str(obj["speaker_id"]),
                wav_path=str(obj["wav_path"]),
                phonemes=list(obj["phonemes"]),
                severity=str(obj["severity"]),
                video_path=obj.get("video_path"),
                landmarks_path=obj.get("landmarks_path"),
                durations=obj.get("durations"),
                f0=obj.get("f0"),
                word_lengths=obj.get("word_lengths"),
            )
            rec.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: row {lineno}: {exc}") from exc
        records.append(rec)
    return records


def read_inventory(corpus_dir: str) -> PhonemeInventory:
    with open(os.path.join(corpus_dir, "inventory.json"), "r", encoding="utf-8") as fh:
        return PhonemeInventory.from_json(json.load(fh))
