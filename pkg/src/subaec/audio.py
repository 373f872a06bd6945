"""Audio containers, WAV I/O, and FFT/STFT primitives.

Conventions used throughout the package:

* samples are float64 in [-1, 1] nominal range
* forward DFT is unscaled, the inverse applies 1/N
* 50%-overlap sqrt-Hann (periodic) analysis and synthesis windows
* one-sided spectra keep bins 0 .. fft_size/2 - 1; the Nyquist bin is
  reconstructed from the zero-padding redundancy on inversion
"""

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from subaec.errors import ConfigurationError


@dataclass
class Waveform:
    """Mono audio signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigurationError("Waveform requires a 1-D sample array")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Complex one-sided STFT, shape (frames, bins)."""

    bins: np.ndarray
    hop: int
    win: int
    sample_rate: int

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise ConfigurationError("Spectrogram requires a 2-D bin array")

    @property
    def num_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def num_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def fft_size(self) -> int:
        return 2 * self.bins.shape[1]


def load_wav(path) -> Waveform:
    """Read a mono WAV file (16-bit PCM or IEEE float)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ConfigurationError(f"{path}: expected mono, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ConfigurationError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path, w: Waveform, pcm16: bool = False) -> None:
    """Write a mono WAV file, IEEE float32 by default."""
    if pcm16:
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, w.sample_rate, (clipped * 32768.0).round().astype(np.int16))
    else:
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def _check_pow2(n: int) -> None:
    if n <= 0 or n & (n - 1):
        raise ConfigurationError(f"FFT length must be a power of two, got {n}")


def fft(x: np.ndarray) -> np.ndarray:
    """Unscaled forward DFT along the last axis; length must be a power of two."""
    x = np.asarray(x)
    _check_pow2(x.shape[-1])
    return np.fft.fft(x)


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT (1/N scaling) along the last axis; length must be a power of two."""
    x = np.asarray(x)
    _check_pow2(x.shape[-1])
    return np.fft.ifft(x)


def sqrt_hann(win: int) -> np.ndarray:
    """Square root of the periodic Hann window."""
    n = np.arange(win)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / win))


def _window(name: str, win: int) -> np.ndarray:
    if name == "sqrt_hann":
        return sqrt_hann(win)
    if name == "rect":
        return np.ones(win)
    raise ConfigurationError(f"unknown window {name!r}")


def stft(w: Waveform, win: int = 240, hop: int = 120, fft_size: int = 256,
         window: str = "sqrt_hann") -> Spectrogram:
    """Short-time transform keeping the fft_size/2 lowest bins.

    Frame t covers samples [t*hop, t*hop + win); the tail that does not
    fill a whole frame is dropped.
    """
    _check_pow2(fft_size)
    if not (0 < hop <= win <= fft_size):
        raise ConfigurationError(f"need 0 < hop <= win <= fft_size, got {hop}/{win}/{fft_size}")
    x = w.samples
    if len(x) < win:
        raise ConfigurationError(f"signal shorter than one frame ({len(x)} < {win})")
    num = (len(x) - win) // hop + 1
    idx = np.arange(num)[:, None] * hop + np.arange(win)[None, :]
    frames = x[idx] * _window(window, win)[None, :]
    spec = np.fft.rfft(frames, n=fft_size, axis=1)[:, : fft_size // 2]
    return Spectrogram(spec, hop=hop, win=win, sample_rate=w.sample_rate)


def istft(s: Spectrogram, length: int | None = None, window: str = "sqrt_hann") -> Waveform:
    """Invert `stft` by overlap-add with the matching synthesis window.

    The dropped Nyquist bin is recovered per frame from the constraint
    that samples [win, fft_size) of the zero-padded frame are zero;
    when win == fft_size the bin is unrecoverable and taken as zero.
    Samples where the window overlap carries no energy come out as zero.
    """
    win, hop = s.win, s.hop
    fft_size = s.fft_size
    spec = np.concatenate([s.bins, np.zeros((s.num_frames, 1))], axis=1)
    frames = np.fft.irfft(spec, n=fft_size, axis=1)
    pad = fft_size - win
    if pad > 0:
        alt = np.where(np.arange(fft_size) % 2 == 0, 1.0, -1.0)
        # least-squares Nyquist coefficient zeroing the padded region
        nyq = -(fft_size / pad) * (frames[:, win:] * alt[None, win:]).sum(axis=1)
        frames = frames + nyq[:, None] * alt[None, :] / fft_size
    wsyn = _window(window, win)
    frames = frames[:, :win] * wsyn[None, :]
    total = (s.num_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = wsyn * wsyn
    for t in range(s.num_frames):
        out[t * hop : t * hop + win] += frames[t]
        norm[t * hop : t * hop + win] += wsq
    good = norm > 1e-10
    out[good] /= norm[good]
    if length is not None:
        if length > total:
            out = np.concatenate([out, np.zeros(length - total)])
        else:
            out = out[:length]
    return Waveform(out, s.sample_rate)
