"""Deterministic audio analysis and synthesis.

Speech enhancement, 80-band log-mel filterbank features with deltas, F0
extraction by normalized autocorrelation, mel-spectrogram computation, and a
Griffin-Lim phase-reconstruction vocoder substitute. Everything here is a pure
function of its inputs; no module-level state is mutated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import exp1

SAMPLE_RATE = 16000
HOP_LENGTH = 160       # 10 ms
WIN_LENGTH = 400       # 25 ms
N_FFT = 512
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10
F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3


@dataclass
class Waveform:
    """Mono PCM sample sequence in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class AudioFeatures:
    """T x 160 matrix: columns 0-79 log-mel FBK, 80-159 their deltas."""

    frames: np.ndarray
    hop_ms: int = 10
    window_ms: int = 25

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != 2 * N_MELS:
            raise ValueError(f"AudioFeatures must be T x {2 * N_MELS}")
        if self.frames.shape[0] < 1:
            raise ValueError("AudioFeatures needs at least one frame")


@dataclass
class MelSpectrogram:
    """T x 80 log-mel energy matrix at 10 ms hop."""

    frames: np.ndarray
    hop_ms: int = 10

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"MelSpectrogram must be T x {N_MELS}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("MelSpectrogram contains non-finite entries")


@dataclass
class F0Contour:
    """One F0 value (Hz) per 10 ms frame; 0 encodes unvoiced."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("F0 values must be >= 0")
        voiced = self.values[self.values > 0]
        if voiced.size and (voiced.min() < F0_MIN or voiced.max() > F0_MAX):
            raise ValueError(f"voiced F0 must lie in [{F0_MIN}, {F0_MAX}] Hz")


def frame_count(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    if n_samples < win:
        raise ValueError(f"input shorter than one analysis window ({win} samples)")
    return (n_samples - win) // hop + 1


def frame_signal(samples: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    n_frames = frame_count(len(samples), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


@lru_cache(maxsize=8)
def _hann(win: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


def stft(samples: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH,
         n_fft: int = N_FFT) -> np.ndarray:
    frames = frame_signal(samples, win, hop) * _hann(win)[None, :]
    return np.fft.rfft(frames, n=n_fft, axis=1)


def istft(spec: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH,
          n_fft: int = N_FFT) -> np.ndarray:
    """Weighted overlap-add inverse; output length (T-1)*hop + win."""
    frames = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win]
    window = _hann(win)
    n_frames = frames.shape[0]
    length = (n_frames - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        out[t * hop : t * hop + win] += frames[t] * window
        norm[t * hop : t * hop + win] += window ** 2
    return out / np.maximum(norm, 1e-10)


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    mel = 3.0 * freq / 200.0
    log_region = freq >= 1000.0
    logstep = np.log(6.4) / 27.0
    return np.where(log_region, 15.0 + np.log(np.maximum(freq, 1e-12) / 1000.0) / logstep, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    freq = 200.0 * mel / 3.0
    logstep = np.log(6.4) / 27.0
    return np.where(mel >= 15.0, 1000.0 * np.exp(logstep * (mel - 15.0)), freq)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters (peak 1.0) on the Slaney mel scale; (n_mels, n_fft//2+1)."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    bank = np.zeros((n_mels, len(fft_freqs)))
    for k in range(n_mels):
        lo, center, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[k] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return bank


def mel_band_edges(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """(n_mels, 3) rows of (low, center, high) frequencies in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return np.stack([edges[:-2], edges[1:-1], edges[2:]], axis=1)


def _log_mel_power(samples: np.ndarray) -> np.ndarray:
    power = np.abs(stft(samples)) ** 2
    mel = power @ mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR))


def _deltas(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +/- `width` frames with edge replication."""
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    T = feats.shape[0]
    out = np.zeros_like(feats)
    for n in range(1, width + 1):
        ahead = feats[np.minimum(np.arange(T) + n, T - 1)]
        behind = feats[np.maximum(np.arange(T) - n, 0)]
        out += n * (ahead - behind)
    return out / denom


def fbank_delta(w: Waveform) -> AudioFeatures:
    """80 log-mel filterbank energies plus deltas; T x 160."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    logmel = _log_mel_power(w.samples)
    return AudioFeatures(np.concatenate([logmel, _deltas(logmel)], axis=1))


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """80-band log-mel energies (no deltas); shares framing with fbank_delta."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    return MelSpectrogram(_log_mel_power(w.samples))


@lru_cache(maxsize=2)
def _mel_pinv() -> np.ndarray:
    return np.linalg.pinv(mel_filterbank())


def griffin_lim(m: MelSpectrogram, iters: int = 60) -> Waveform:
    """Phase reconstruction from a log-mel spectrogram (vocoder substitute).

    The 80 mel bands are lifted to linear bins with a fixed pseudo-inverse of
    the mel filterbank, then `iters` rounds of Griffin-Lim phase refinement
    run from a zero-phase start (fully deterministic).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(m.frames)):
        raise ValueError("non-finite mel input")
    mel_power = np.exp(m.frames.astype(np.float64))
    lin_power = np.maximum(mel_power @ _mel_pinv().T, 0.0)
    magnitude = np.sqrt(lin_power)
    spec = magnitude.astype(np.complex128)
    samples = istft(spec)
    for _ in range(iters):
        rebuilt = stft(samples)
        phase = np.exp(1j * np.angle(rebuilt))
        samples = istft(magnitude * phase)
    return Waveform(np.clip(samples, -1.0, 1.0))


def log_mmse_enhance(noisy: Waveform, noise_frames: int = 6,
                     alpha: float = 0.98) -> Waveform:
    """Log-spectral MMSE speech enhancement.

    Noise power is initialized from the leading frames and tracked with a
    likelihood-ratio VAD; the a-priori SNR uses decision-directed smoothing.
    Output has the same length and sample rate as the input.
    """
    x = noisy.samples
    if len(x) < WIN_LENGTH:
        raise ValueError("input shorter than one analysis window")
    # zero-pad so overlap-add covers the full input length
    pad = WIN_LENGTH
    padded = np.concatenate([x, np.zeros(pad)])
    spec = stft(padded)
    power = np.abs(spec) ** 2

    noise_power = power[: min(noise_frames, len(power))].mean(axis=0) + 1e-12
    ksi_min = 10.0 ** (-25.0 / 10.0)
    gains = np.empty_like(power)
    prev_clean = None
    for t in range(power.shape[0]):
        gamma = np.minimum(power[t] / noise_power, 40.0)
        if prev_clean is None:
            ksi = alpha + (1.0 - alpha) * np.maximum(gamma - 1.0, 0.0)
        else:
            ksi = alpha * prev_clean / noise_power + (1.0 - alpha) * np.maximum(gamma - 1.0, 0.0)
            ksi = np.maximum(ksi, ksi_min)
        a = ksi / (1.0 + ksi)
        v = np.maximum(a * gamma, 1e-8)
        gain = np.clip(a * np.exp(0.5 * exp1(v)), 0.0, 1.0)
        gains[t] = gain
        prev_clean = (gain ** 2) * power[t]
        # likelihood-ratio VAD: adapt the noise estimate in speech-absent frames
        log_sigma = gamma * ksi / (1.0 + ksi) - np.log1p(ksi)
        if log_sigma.mean() < 0.15:
            noise_power = 0.98 * noise_power + 0.02 * power[t] + 1e-12
    enhanced = istft(gains * spec)
    out = np.zeros_like(x)
    n = min(len(out), len(enhanced))
    out[:n] = enhanced[:n]
    return Waveform(np.clip(out, -1.0, 1.0), noisy.sample_rate)


def extract_f0(w: Waveform) -> F0Contour:
    """F0 by normalized autocorrelation with parabolic peak interpolation.

    One value per 10 ms hop on the fbank frame grid; frames whose best
    normalized autocorrelation is below the voicing threshold (or whose
    energy is negligible) are marked unvoiced (0).
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    x = w.samples
    if len(x) < WIN_LENGTH:
        return F0Contour(np.zeros(0))
    n_frames = frame_count(len(x))
    lag_min = int(np.floor(SAMPLE_RATE / F0_MAX))
    lag_max = int(np.ceil(SAMPLE_RATE / F0_MIN))
    corr_win = 480  # 30 ms correlation window
    seg_len = corr_win + lag_max
    half = seg_len // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(seg_len)])

    values = np.zeros(n_frames)
    for t in range(n_frames):
        center = t * HOP_LENGTH + WIN_LENGTH // 2 + half
        seg = padded[center - half : center - half + seg_len]
        base = seg[:corr_win]
        energy0 = float(base @ base)
        if energy0 < 1e-8:
            continue
        lags = np.arange(lag_min, lag_max + 1)
        # r(tau) = <x_t, x_{t+tau}> / (|x_t| |x_{t+tau}|)
        corr = np.array([base @ seg[lag : lag + corr_win] for lag in lags])
        norm = np.array([seg[lag : lag + corr_win] @ seg[lag : lag + corr_win] for lag in lags])
        r = corr / np.sqrt(energy0 * np.maximum(norm, 1e-12))
        best = float(r.max())
        if best < VOICING_THRESHOLD:
            continue
        # among strong local maxima prefer the shortest lag (avoids octave-down)
        candidates = []
        for i in range(1, len(r) - 1):
            if r[i] >= r[i - 1] and r[i] >= r[i + 1] and r[i] >= 0.85 * best:
                candidates.append(i)
        if not candidates:
            candidates = [int(np.argmax(r))]
        i = candidates[0]
        lag = float(lags[i])
        if 0 < i < len(r) - 1:
            denom = r[i - 1] - 2.0 * r[i] + r[i + 1]
            if abs(denom) > 1e-12:
                lag += 0.5 * (r[i - 1] - r[i + 1]) / denom
        f0 = SAMPLE_RATE / lag
        if F0_MIN <= f0 <= F0_MAX:
            values[t] = f0
    return F0Contour(values)
