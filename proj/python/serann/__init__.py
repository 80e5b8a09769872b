"""Speech emotion recognition with LLM-assisted annotation."""

from ._core import (
    SerannError,
    average_energy,
    average_pitch,
    mel_spectrogram,
    parse_label,
    quantize,
    read_wav,
    run,
    uar,
)

__all__ = [
    "SerannError",
    "average_energy",
    "average_pitch",
    "mel_spectrogram",
    "parse_label",
    "quantize",
    "read_wav",
    "run",
    "uar",
]
