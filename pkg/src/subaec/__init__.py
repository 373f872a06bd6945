"""Sub-band acoustic echo cancellation.

The processing cascade: far-end/microphone delay alignment (GCC-PHAT),
partitioned-block frequency-domain NLMS echo cancellation, pseudo-QMF
sub-band decomposition, and a gated convolutional-recurrent post-filter
that suppresses residual echo and noise.
"""

__version__ = "0.1.0"

from subaec.audio import Waveform, Spectrogram, load_wav, save_wav, stft, istft
from subaec.errors import ConfigurationError, FilterDesignError, TrainingError

__all__ = [
    "Waveform",
    "Spectrogram",
    "load_wav",
    "save_wav",
    "stft",
    "istft",
    "ConfigurationError",
    "FilterDesignError",
    "TrainingError",
]
