"""Multi-modal dysarthric speech reconstruction toolkit.

Pipeline: robust phoneme posteriors from degraded audio plus lip-video
features, normal-prosody prediction (durations + F0), speaker-conditioned
mel-spectrogram synthesis, and phase-reconstruction vocoding — backed by a
deterministic synthetic audio-visual mini-corpus and an oracle/property test
harness.
"""

__version__ = "0.1.0"
