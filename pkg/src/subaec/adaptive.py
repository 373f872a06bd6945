"""Partitioned-block frequency-domain NLMS echo canceller.

Overlap-save processing with the filter split into P partitions of one
block each, so a 200 ms echo tail at 48 kHz costs a handful of FFTs per
20 ms block instead of a 9600-tap time-domain update. Gradient
time-aliasing is removed after every update (constrained variant).

The error signal keeps the sample-wise identity e + y = mic.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from subaec.audio import Waveform
from subaec.delay import DelayEstimate, compensate, gcc_phat
from subaec.errors import ConfigurationError


@dataclass
class LinearAecConfig:
    block: int = 960
    partitions: int = 10
    step: float = 0.2
    power_smoothing: float = 0.9
    reg_scale: float = 1e-3
    max_lag: int = 48000
    estimate_delay: bool = True
    delay_override: int | None = None
    # GCC-PHAT locks onto the dominant path, which may lie inside the room
    # response; backing off keeps the full echo onset causal for the filter
    delay_margin: int = 960


class AdaptiveFilterState:
    """Weights, input history, and adaptation guards for one stream."""

    def __init__(self, block: int = 960, partitions: int = 10, step: float = 0.2,
                 power_smoothing: float = 0.9, reg_scale: float = 1e-3):
        if block <= 0 or block % 2:
            raise ConfigurationError("block must be a positive even sample count")
        if not 0.0 <= step <= 1.0:
            raise ConfigurationError("step must lie in [0, 1] (0 freezes adaptation)")
        self.block = block
        self.partitions = partitions
        self.step = step
        self.power_smoothing = power_smoothing
        self.reg_scale = reg_scale
        self.nfft = 2 * block
        self.bins = self.nfft // 2 + 1
        self.weights = np.zeros((partitions, self.bins), dtype=np.complex128)
        self.input_spectra = np.zeros((partitions, self.bins), dtype=np.complex128)
        self.power_est = np.zeros(self.bins)
        self.prev_far = np.zeros(block)
        self.converged = False
        self.fault_count = 0
        self._smooth_mic = 0.0
        self._smooth_err = 0.0
        self._power_primed = False

    def reset(self) -> None:
        self.weights[:] = 0
        self.input_spectra[:] = 0
        self.power_est[:] = 0
        self.prev_far[:] = 0
        self.converged = False
        self._smooth_mic = 0.0
        self._smooth_err = 0.0
        self._power_primed = False

    def time_domain_filter(self) -> np.ndarray:
        """Concatenated impulse response across partitions (P*block taps)."""
        taps = np.fft.irfft(self.weights, self.nfft, axis=1)[:, : self.block]
        return taps.reshape(-1)


def nlms_process_block(state: AdaptiveFilterState, far_block: np.ndarray,
                       mic_block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Filter one block and adapt; returns (e_block, y_block)."""
    b = state.block
    if len(far_block) != b or len(mic_block) != b:
        raise ConfigurationError(f"blocks must be exactly {b} samples")
    if not (np.isfinite(far_block).all() and np.isfinite(mic_block).all()):
        raise ConfigurationError("non-finite sample in input block")

    # overlap-save input window [previous block | current block]
    spectrum = np.fft.rfft(np.concatenate([state.prev_far, far_block]))
    state.prev_far = np.asarray(far_block, dtype=np.float64).copy()
    state.input_spectra = np.roll(state.input_spectra, 1, axis=0)
    state.input_spectra[0] = spectrum

    y = np.fft.irfft((state.weights * state.input_spectra).sum(axis=0), state.nfft)[b:]
    e = mic_block - y

    p_mic = float(np.mean(mic_block**2))
    p_y = float(np.mean(y**2))
    p_e = float(np.mean(e**2))
    a = state.power_smoothing
    state._smooth_mic = a * state._smooth_mic + (1 - a) * p_mic
    state._smooth_err = a * state._smooth_err + (1 - a) * p_e
    if state._smooth_mic > 0 and state._smooth_err < 0.25 * state._smooth_mic:
        state.converged = True

    adapt = True
    # double-talk freeze: only meaningful once the echo prediction is trusted
    if state.converged and p_mic > 10.0 * (p_y + 1e-12):
        adapt = False
    # divergence guard: the filter is making things worse, pull it back
    if p_e > 2.0 * p_mic + 1e-12:
        adapt = False
        state.weights *= 0.98

    if adapt and state.step > 0.0:
        block_power = (np.abs(state.input_spectra) ** 2).sum(axis=0)
        if not state._power_primed:
            # cold smoothing from zero would overshoot the step on early blocks
            state.power_est = block_power
            state._power_primed = True
        else:
            state.power_est = a * state.power_est + (1 - a) * block_power
        # floor the normalizer with the current block so power rises are
        # seen immediately; decayed estimates after a far-end pause would
        # otherwise multiply the step at every speech onset
        denom = np.maximum(state.power_est, block_power)
        reg = state.reg_scale * float(denom.mean()) + 1e-12
        gain = state.step / (denom + reg)
        err_spec = np.fft.rfft(np.concatenate([np.zeros(b), e]))
        state.weights += gain * np.conj(state.input_spectra) * err_spec
        # constrained update: zero the acausal half of every partition
        taps = np.fft.irfft(state.weights, state.nfft, axis=1)
        taps[:, b:] = 0.0
        state.weights = np.fft.rfft(taps, axis=1)

    if not np.isfinite(state.weights).all():
        state.reset()
        state.fault_count += 1
        warnings.warn("adaptive filter reset after non-finite weights", RuntimeWarning)
        y = np.zeros(b)
        e = mic_block.astype(np.float64).copy()

    return e, y


def run_linear_stage(mic: Waveform, far: Waveform,
                     cfg: LinearAecConfig | None = None) -> tuple[Waveform, Waveform]:
    """Delay-compensate the reference and run the block loop over a whole file.

    Outputs share the mic timeline and length; e + y = mic sample-wise.
    """
    cfg = cfg or LinearAecConfig()
    if mic.sample_rate != far.sample_rate:
        raise ConfigurationError("sample rates differ")
    n = max(len(mic.samples), len(far.samples))
    pad = lambda x: np.concatenate([x, np.zeros(n - len(x))])
    mic_s = pad(mic.samples)
    far_s = pad(far.samples)

    if cfg.delay_override is not None:
        lag = int(cfg.delay_override)
    elif cfg.estimate_delay and n > 2 * cfg.max_lag:
        est = gcc_phat(Waveform(mic_s, mic.sample_rate),
                       Waveform(far_s, far.sample_rate), cfg.max_lag)
        lag = max(0, est.delay - cfg.delay_margin)
    else:
        lag = 0
    far_s = compensate(Waveform(far_s, far.sample_rate), DelayEstimate(lag, 1.0)).samples

    b = cfg.block
    total = ((n + b - 1) // b) * b
    mic_s = np.concatenate([mic_s, np.zeros(total - n)])
    far_s = np.concatenate([far_s, np.zeros(total - n)])
    state = AdaptiveFilterState(cfg.block, cfg.partitions, cfg.step,
                                cfg.power_smoothing, cfg.reg_scale)
    e_out = np.empty(total)
    y_out = np.empty(total)
    for i in range(0, total, b):
        e_out[i : i + b], y_out[i : i + b] = nlms_process_block(
            state, far_s[i : i + b], mic_s[i : i + b])
    keep = len(mic.samples)
    return (Waveform(e_out[:keep], mic.sample_rate),
            Waveform(y_out[:keep], mic.sample_rate))
