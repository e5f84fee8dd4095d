"""Phoneme-embedding encoders: audio-only and audio-visual variants."""
from .blocks import FusionLayer, LocationAwareAttention, TransformerEncoder, VggExtractor
from .ctc import ctc_loss, ctc_loss_batch
from .model import (AUDIO_DIM, VISUAL_DIM, EncoderConfig, PhonemeEmbedding,
                    PhonemeRecognizer, decode_greedy, encode_audio, encode_av_transformer,
                    encode_av_vgg, fuse_av, joint_loss)
from .training import (build_recognizer, decode_dataset, fit_recognizer, load_state,
                       pad_batch, smoothed, state_dict_arrays, teacher_forcing_accuracy)

__all__ = [
    "AUDIO_DIM", "VISUAL_DIM", "EncoderConfig", "PhonemeEmbedding", "PhonemeRecognizer",
    "FusionLayer", "LocationAwareAttention", "TransformerEncoder", "VggExtractor",
    "ctc_loss", "ctc_loss_batch", "decode_greedy", "encode_audio", "encode_av_transformer",
    "encode_av_vgg", "fuse_av", "joint_loss", "build_recognizer", "decode_dataset",
    "fit_recognizer", "load_state", "pad_batch", "smoothed", "state_dict_arrays",
    "teacher_forcing_accuracy",
]
