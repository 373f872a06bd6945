"""Far-end/microphone delay estimation (GCC-PHAT) and compensation.

Echo paths in real capture stacks include bulk latency from buffering and
resampling, often hundreds of milliseconds, which a short adaptive filter
cannot absorb. The estimator whitens the cross-spectrum so the correlation
peak depends only on phase, then searches non-negative lags.
"""

from dataclasses import dataclass

import numpy as np

from subaec.audio import Waveform
from subaec.errors import ConfigurationError


@dataclass
class DelayEstimate:
    delay: int
    confidence: float


def gcc_phat(mic: Waveform, far: Waveform, max_lag: int = 48000) -> DelayEstimate:
    """Generalized cross-correlation with phase transform, lags in [0, max_lag].

    confidence is the ratio of the correlation peak to the mean correlation
    magnitude over the searched lag range; all-zero input gives (0, 0.0).
    """
    if mic.sample_rate != far.sample_rate:
        raise ConfigurationError("sample rates differ")
    n = len(mic.samples) + len(far.samples)
    if min(len(mic.samples), len(far.samples)) <= 2 * max_lag:
        raise ConfigurationError("signals must be longer than twice max_lag")
    nfft = 1 << (n - 1).bit_length()
    spec = np.fft.rfft(mic.samples, nfft) * np.conj(np.fft.rfft(far.samples, nfft))
    mag = np.abs(spec)
    if mag.max() < 1e-12:
        return DelayEstimate(0, 0.0)
    cc = np.fft.irfft(spec / np.maximum(mag, 1e-12), nfft)[: max_lag + 1]
    peak = int(np.argmax(cc))
    denom = np.mean(np.abs(cc))
    if denom <= 0.0 or cc[peak] <= 0.0:
        return DelayEstimate(0, 0.0)
    return DelayEstimate(peak, float(cc[peak] / denom))


def compensate(far: Waveform, d: DelayEstimate) -> Waveform:
    """Shift the far-end reference onto the microphone timeline.

    The estimate sign convention is "mic lags far by d", so alignment
    delays the reference by d samples (zeros at the head, tail samples
    beyond the original length dropped, length preserved). Re-estimating
    on the compensated pair yields delay 0.
    """
    k = int(d.delay)
    if k < 0:
        raise ConfigurationError("negative delays are not supported")
    if k == 0:
        return Waveform(far.samples.copy(), far.sample_rate)
    out = np.zeros_like(far.samples)
    out[k:] = far.samples[: len(out) - k]
    return Waveform(out, far.sample_rate)


class DelayTracker:
    """Streaming re-estimation on a sliding buffer with hysteresis.

    A new estimate replaces the current delay only when its confidence
    clears `threshold` and it moves by more than `hysteresis` samples,
    so momentary correlation dropouts do not reset a converged filter.
    """

    def __init__(self, sample_rate: int = 48000, max_lag: int = 48000,
                 window_seconds: float = 4.0, interval_seconds: float = 1.0,
                 threshold: float = 2.0, hysteresis: int = 48):
        self.sample_rate = sample_rate
        self.max_lag = max_lag
        self.window = int(window_seconds * sample_rate)
        self.interval = int(interval_seconds * sample_rate)
        self.threshold = threshold
        self.hysteresis = hysteresis
        self.delay = 0
        self._mic = np.zeros(0)
        self._far = np.zeros(0)
        self._since_update = 0

    def feed(self, mic_chunk: np.ndarray, far_chunk: np.ndarray) -> int:
        """Consume aligned raw chunks, return the current delay estimate."""
        self._mic = np.concatenate([self._mic, mic_chunk])[-self.window:]
        self._far = np.concatenate([self._far, far_chunk])[-self.window:]
        self._since_update += len(mic_chunk)
        if self._since_update >= self.interval and len(self._mic) > 2 * self.max_lag:
            self._since_update = 0
            est = gcc_phat(Waveform(self._mic, self.sample_rate),
                           Waveform(self._far, self.sample_rate), self.max_lag)
            if est.confidence > self.threshold and abs(est.delay - self.delay) > self.hysteresis:
                self.delay = est.delay
        return self.delay
