"""Pseudo-QMF filter bank for near-perfect-reconstruction sub-band processing.

Band k of an M-band bank is the cosine modulation of a lowpass prototype

    h_k[n] = 2 p[n] cos((2k+1) pi/(2M) (n - (L-1)/2) + (-1)^k pi/4)

and the synthesis filter mirrors the phase term. The prototype is a
Kaiser-windowed sinc whose cutoff is tuned by golden-section search so the
analysis-synthesis composite response is maximally flat. Adjacent-band
aliasing cancels structurally; non-adjacent aliasing is pushed below the
prototype stopband.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, kaiser_beta

from subaec.audio import Waveform
from subaec.errors import ConfigurationError, FilterDesignError

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class PqmfBank:
    num_bands: int
    prototype: np.ndarray
    analysis_filters: np.ndarray
    synthesis_filters: np.ndarray

    @property
    def num_taps(self) -> int:
        return len(self.prototype)

    @property
    def total_delay(self) -> int:
        """Analysis + synthesis group delay in full-band samples."""
        return self.num_taps - 1


def _lowpass(num_taps: int, cutoff: float, beta: float) -> np.ndarray:
    # windowed sinc, cutoff in cycles/sample
    n = np.arange(num_taps) - (num_taps - 1) / 2.0
    return 2.0 * cutoff * np.sinc(2.0 * cutoff * n) * np.kaiser(num_taps, beta)


def _modulate(p: np.ndarray, num_bands: int, sign: float) -> np.ndarray:
    m, taps = num_bands, len(p)
    k = np.arange(m)[:, None]
    n = np.arange(taps)[None, :] - (taps - 1) / 2.0
    phase = (2 * k + 1) * np.pi / (2 * m) * n + sign * (-1.0) ** k * np.pi / 4.0
    return 2.0 * p[None, :] * np.cos(phase)


def _composite_ripple(p, num_bands, grid, mask):
    h = _modulate(p, num_bands, +1.0)
    g = _modulate(p, num_bands, -1.0)
    hf = np.fft.rfft(h, n=grid, axis=1)
    gf = np.fft.rfft(g, n=grid, axis=1)
    t = np.abs((hf * gf).sum(axis=0)) / num_bands
    tdb = 20.0 * np.log10(np.maximum(t[mask], 1e-12))
    return tdb.max() - tdb.min()


def design_prototype(num_bands: int = 4, num_taps: int = 64,
                     transition: float = 0.03, stopband_db: float = 80.0) -> PqmfBank:
    """Design an M-band bank; `transition` is the normalized width (cycles
    per full-band sample) around band edges excluded from flatness checks."""
    if num_bands < 2:
        raise ConfigurationError("need at least 2 bands")
    if num_taps % num_bands:
        raise ConfigurationError("tap count must be a multiple of the band count")
    if not 0.0 < transition < 1.0 / (2 * num_bands):
        raise ConfigurationError("transition must lie in (0, 1/(2M))")

    beta = kaiser_beta(stopband_db)
    grid = 8192
    freqs = np.arange(grid // 2 + 1) / grid
    edges = np.arange(1, num_bands) / (2.0 * num_bands)
    mask = np.ones(len(freqs), dtype=bool)
    for e in edges:
        mask &= np.abs(freqs - e) >= transition

    # golden-section search on the prototype cutoff
    lo, hi = 0.50 / (2 * num_bands), 0.95 / (2 * num_bands)
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = _composite_ripple(_lowpass(num_taps, c, beta), num_bands, grid, mask)
    fd = _composite_ripple(_lowpass(num_taps, d, beta), num_bands, grid, mask)
    for _ in range(60):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = _composite_ripple(_lowpass(num_taps, c, beta), num_bands, grid, mask)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = _composite_ripple(_lowpass(num_taps, d, beta), num_bands, grid, mask)
    cutoff = (a + b) / 2.0
    proto = _lowpass(num_taps, cutoff, beta)

    # aliasing floor: prototype must be deep in its stopband past 1.5 band widths
    pf = np.abs(np.fft.rfft(proto, n=grid))
    stop = freqs >= 1.5 / (2.0 * num_bands)
    atten = 20.0 * np.log10(pf[stop].max() / pf[0])
    if atten > -60.0:
        raise FilterDesignError(
            f"prototype stopband only {-atten:.1f} dB; increase taps or bands spacing")

    return _build_bank(proto, num_bands, transition)


def _build_bank(proto: np.ndarray, num_bands: int, transition: float) -> PqmfBank:
    analysis = _modulate(proto, num_bands, +1.0)
    synthesis = _modulate(proto, num_bands, -1.0)
    grid = 8192
    freqs = np.arange(grid // 2 + 1) / grid
    mask = np.ones(len(freqs), dtype=bool)
    for e in np.arange(1, num_bands) / (2.0 * num_bands):
        mask &= np.abs(freqs - e) >= transition
    # normalize composite passband gain to unity
    hf = np.fft.rfft(analysis, n=grid, axis=1)
    gf = np.fft.rfft(synthesis, n=grid, axis=1)
    gain = (np.abs((hf * gf).sum(axis=0)) / num_bands)[mask].mean()
    return PqmfBank(num_bands, proto, analysis, synthesis / gain)


def analyze(bank: PqmfBank, w: Waveform) -> list[Waveform]:
    """Split into M critically sampled bands (group delay (L-1)/2 before decimation)."""
    if w.sample_rate % bank.num_bands:
        raise ConfigurationError("sample rate must be divisible by the band count")
    m = bank.num_bands
    x = w.samples
    if len(x) % m:
        x = np.concatenate([x, np.zeros(m - len(x) % m)])
    rate = w.sample_rate // m
    out = []
    for k in range(m):
        y = fftconvolve(x, bank.analysis_filters[k])[: len(x)]
        out.append(Waveform(y[::m], rate))
    return out


def synthesize(bank: PqmfBank, bands: list[Waveform]) -> Waveform:
    """Zero-stuff, filter, and sum the bands back to the full rate."""
    m = bank.num_bands
    if len(bands) != m:
        raise ConfigurationError(f"expected {m} bands, got {len(bands)}")
    n = len(bands[0].samples)
    for b in bands:
        if len(b.samples) != n:
            raise ConfigurationError("bands must have equal lengths")
    out = np.zeros(n * m)
    up = np.zeros(n * m)
    for k in range(m):
        up[:] = 0.0
        up[::m] = bands[k].samples
        out += fftconvolve(up, bank.synthesis_filters[k])[: len(out)]
    return Waveform(out, bands[0].sample_rate * m)


def roundtrip(bank: PqmfBank, w: Waveform) -> Waveform:
    """analyze + synthesize with the bank delay removed; output matches len(w)."""
    y = synthesize(bank, analyze(bank, w)).samples
    d = bank.total_delay
    y = y[d:]
    if len(y) < len(w.samples):
        y = np.concatenate([y, np.zeros(len(w.samples) - len(y))])
    return Waveform(y[: len(w.samples)], w.sample_rate)


def export_prototype(bank: PqmfBank, path) -> None:
    """One tap per line, full double precision."""
    with open(path, "w") as f:
        for v in bank.prototype:
            f.write(f"{v:.17g}\n")


def import_prototype(path, num_bands: int = 4, transition: float = 0.03) -> PqmfBank:
    with open(path) as f:
        taps = np.array([float(line) for line in f if line.strip()])
    if len(taps) % num_bands:
        raise ConfigurationError("tap count must be a multiple of the band count")
    return _build_bank(taps, num_bands, transition)


class StreamingAnalyzer:
    """Stateful analyze() for chunked input; chunks must be multiples of M."""

    def __init__(self, bank: PqmfBank):
        self.bank = bank
        self.hist = np.zeros(bank.num_taps - 1)

    def process(self, chunk: np.ndarray) -> np.ndarray:
        m = self.bank.num_bands
        if len(chunk) % m:
            raise ConfigurationError("chunk length must be a multiple of the band count")
        buf = np.concatenate([self.hist, chunk])
        taps = self.bank.num_taps
        out = np.empty((m, len(chunk) // m))
        for k in range(m):
            y = fftconvolve(buf, self.bank.analysis_filters[k])[taps - 1 : taps - 1 + len(chunk)]
            out[k] = y[::m]
        if taps > 1:
            self.hist = buf[-(taps - 1):]
        return out


class StreamingSynthesizer:
    """Stateful synthesize() for chunked sub-band input (overlap-add)."""

    def __init__(self, bank: PqmfBank):
        self.bank = bank
        self.hist = np.zeros(bank.num_taps - 1)

    def process(self, bands: np.ndarray) -> np.ndarray:
        m = self.bank.num_bands
        if bands.shape[0] != m:
            raise ConfigurationError(f"expected {m} bands")
        n = bands.shape[1] * m
        taps = self.bank.num_taps
        acc = np.zeros(n + taps - 1)
        up = np.zeros(n)
        for k in range(m):
            up[:] = 0.0
            up[::m] = bands[k]
            acc += fftconvolve(up, self.bank.synthesis_filters[k])
        acc[: taps - 1] += self.hist
        self.hist = acc[n:].copy()
        return acc[:n]
