"""End-to-end echo canceller: cascade wiring, training loop, metrics, ablation.

The cascade runs delay alignment, the frequency-domain adaptive filter, a
4-band pseudo-QMF split, per-band STFT, the gated conv-recurrent mask
network, and the inverse transforms back to the full rate.  The offline
and block-streaming paths share every component; streaming exists so the
real-time factor can be measured on code shaped like a live deployment.
"""

import dataclasses
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from subaec import adaptive, audio, lossfn, network, nnops, pqmf, synth
from subaec.audio import Spectrogram, Waveform
from subaec.delay import DelayTracker
from subaec.errors import ConfigurationError, TrainingError


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    """Everything the canceller needs besides the learned weights."""

    sample_rate: int = 48000
    bands: int = 4
    win: int = 240
    hop: int = 120
    fft_size: int = 256
    checkpoint: str | None = None
    linear_only: bool = False
    # frames per streaming block; 10 frames = 100 ms of lookahead-free
    # batching, which keeps the per-block overhead amortized
    block_frames: int = 10
    linear: adaptive.LinearAecConfig = field(
        default_factory=adaptive.LinearAecConfig)
    net: network.NetConfig = field(default_factory=network.NetConfig)

    def __post_init__(self):
        if self.sample_rate % self.bands:
            raise ConfigurationError("sample rate must divide into the bands")
        if self.fft_size // 2 != self.net.freq_bins:
            raise ConfigurationError(
                f"fft_size {self.fft_size} gives {self.fft_size // 2} bins "
                f"but the network expects {self.net.freq_bins}")
        if self.net.input_channels != 6:
            raise ConfigurationError(
                "the cascade always stacks 6 feature channels")
        if self.block_frames < 1:
            raise ConfigurationError("block_frames must be at least 1")

    @property
    def frame_stride(self) -> int:
        """Full-rate samples consumed per STFT hop."""
        return self.hop * self.bands


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 2
    steps_per_epoch: int | None = None
    segment_seconds: float = 10.0
    seed: int = 0
    patience: int = 2
    lr_factor: float = 0.5
    log_every: int = 10

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError("learning rate must not be negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.segment_seconds <= 0:
            raise ConfigurationError("segment_seconds must be positive")


_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _convert(text: str, annotation) -> object:
    """Coerce a config-file string by the dataclass field annotation."""
    ann = str(annotation)
    t = text.strip()
    if "bool" in ann:
        if t.lower() not in _BOOL_WORDS:
            raise ValueError(f"expected a boolean, got {t!r}")
        return _BOOL_WORDS[t.lower()]
    if t.lower() in ("none", "null") and "None" in ann:
        return None
    if "tuple" in ann:
        return tuple(int(p) for p in t.split(","))
    if "int" in ann:
        return int(t)
    if "float" in ann:
        return float(t)
    return t


def parse_config_file(path) -> dict[str, str]:
    """Read `section.key = value` lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected key=value, got {s!r}")
            k, v = s.split("=", 1)
            out[k.strip()] = v.strip()
    return out


_SECTIONS = {
    "pipeline": PipelineConfig,
    "nlms": adaptive.LinearAecConfig,
    "net": network.NetConfig,
    "train": TrainConfig,
}


def build_configs(kv: dict[str, str]) -> tuple[PipelineConfig, TrainConfig]:
    """Turn dotted keys into a (PipelineConfig, TrainConfig) pair."""
    buckets = {name: {} for name in _SECTIONS}
    for key, raw in kv.items():
        if "." not in key:
            raise ConfigurationError(
                f"config key {key!r} needs a section prefix "
                f"({', '.join(_SECTIONS)})")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if name not in fields or name in ("linear", "net"):
            raise ConfigurationError(
                f"unknown config key {name!r} in section {section!r}")
        try:
            buckets[section][name] = _convert(raw, fields[name].type)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from exc
    pipeline_cfg = PipelineConfig(
        linear=adaptive.LinearAecConfig(**buckets["nlms"]),
        net=network.NetConfig(**buckets["net"]),
        **buckets["pipeline"])
    return pipeline_cfg, TrainConfig(**buckets["train"])


def load_config(path=None) -> tuple[PipelineConfig, TrainConfig]:
    kv = parse_config_file(path) if path else {}
    return build_configs(kv)


# ---------------------------------------------------------------------------
# checkpoints

def save_pipeline_checkpoint(path, params, net_cfg: network.NetConfig,
                             extra: dict | None = None) -> None:
    """Weights plus the network shape they were trained with."""
    meta = dict(extra or {})
    net = {}
    for f in dataclasses.fields(network.NetConfig):
        v = getattr(net_cfg, f.name)
        net[f.name] = list(v) if isinstance(v, tuple) else v
    meta["net"] = net
    nnops.save_checkpoint(path, params, extra=meta)


def load_pipeline_checkpoint(path):
    """Returns (params, net_cfg, extra)."""
    params, extra = nnops.load_checkpoint(path)
    net_kv = extra.get("net", {})
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in net_kv.items()}
    return params, network.NetConfig(**kwargs), extra


def make_identity_checkpoint(path, net_cfg: network.NetConfig | None = None,
                             seed: int = 0) -> None:
    """Write weights whose mask is exactly 1+0j, so the filter passes the
    adaptive-stage output through untouched.  Useful as a smoke-test and
    as a known-good starting point for the passthrough checks."""
    cfg = net_cfg or network.NetConfig()
    params = network.init_params(cfg, seed)
    with torch.no_grad():
        params["mask.out.content.w"].zero_()
        params["mask.out.content.b"].copy_(torch.tensor([1.0, 0.0]))
        params["mask.out.gate.w"].zero_()
        # sigmoid(40) rounds to 1.0 in float32, making the gate transparent
        params["mask.out.gate.b"].fill_(40.0)
    save_pipeline_checkpoint(path, {k: v.detach() for k, v in params.items()},
                             cfg, extra={"identity": True})


# ---------------------------------------------------------------------------
# feature extraction

def band_spectra(bank: pqmf.PqmfBank, w: Waveform,
                 cfg: PipelineConfig) -> np.ndarray:
    """Sub-band STFTs stacked to [bands, frames, bins], complex."""
    bands = pqmf.analyze(bank, w)
    specs = [audio.stft(b, cfg.win, cfg.hop, cfg.fft_size) for b in bands]
    frames = min(s.num_frames for s in specs)
    return np.stack([s.bins[:frames] for s in specs], axis=0)


def make_features(d_spec: np.ndarray, e_spec: np.ndarray,
                  y_spec: np.ndarray) -> torch.Tensor:
    """Stack mic/error/echo-estimate spectra to [bands, 6, frames, bins]."""
    frames = min(d_spec.shape[1], e_spec.shape[1], y_spec.shape[1])
    parts = []
    for s in (d_spec, e_spec, y_spec):
        s = s[:, :frames]
        parts.extend([s.real, s.imag])
    feats = np.stack(parts, axis=1)
    return torch.from_numpy(feats.astype(np.float32))


def spec_to_complex(t: torch.Tensor) -> np.ndarray:
    """[B, 2, T, F] float -> [B, T, F] complex128."""
    a = t.detach().to(torch.float64).numpy()
    return a[:, 0] + 1j * a[:, 1]


# ---------------------------------------------------------------------------
# streaming helpers

class _StftStream:
    """Chunked forward transform matching audio.stft frame for frame."""

    def __init__(self, bands: int, win: int, hop: int, fft_size: int):
        self.win, self.hop, self.fft_size = win, hop, fft_size
        self.window = audio.sqrt_hann(win)
        self.buf = np.zeros((bands, 0))

    def push(self, x: np.ndarray) -> np.ndarray:
        """[bands, n] samples in -> [bands, k, fft/2] complex frames out."""
        self.buf = np.concatenate([self.buf, x], axis=1)
        n = self.buf.shape[1]
        if n < self.win:
            return np.zeros((x.shape[0], 0, self.fft_size // 2), complex)
        k = (n - self.win) // self.hop + 1
        idx = np.arange(k)[:, None] * self.hop + np.arange(self.win)
        frames = self.buf[:, idx] * self.window
        spec = np.fft.rfft(frames, n=self.fft_size, axis=2)
        self.buf = self.buf[:, k * self.hop:]
        return spec[:, :, : self.fft_size // 2]


class _IstftStream:
    """Chunked inverse transform matching audio.istft sample for sample.

    A sample is finished once the last frame overlapping it has arrived,
    so each pushed frame releases one hop of output.
    """

    def __init__(self, bands: int, win: int, hop: int, fft_size: int):
        self.win, self.hop, self.fft_size = win, hop, fft_size
        wsyn = audio.sqrt_hann(win)
        self.wsyn = wsyn
        self.wsq = wsyn * wsyn
        self.alt = np.where(np.arange(fft_size) % 2 == 0, 1.0, -1.0)
        self.acc = np.zeros((bands, win))
        self.norm = np.zeros(win)

    def _frames(self, spec: np.ndarray) -> np.ndarray:
        b, k, nb = spec.shape
        full = np.concatenate([spec, np.zeros((b, k, 1))], axis=2)
        frames = np.fft.irfft(full, n=self.fft_size, axis=2)
        pad = self.fft_size - self.win
        if pad > 0:
            # recover the dropped Nyquist bin from the zero-padded region
            nyq = -(self.fft_size / pad) * (
                frames[:, :, self.win:] * self.alt[self.win:]).sum(axis=2)
            frames = frames + nyq[:, :, None] * self.alt / self.fft_size
        return frames[:, :, : self.win] * self.wsyn

    def push(self, spec: np.ndarray) -> np.ndarray:
        """[bands, k, fft/2] frames in -> [bands, k*hop] samples out."""
        b, k, _ = spec.shape
        if k == 0:
            return np.zeros((b, 0))
        frames = self._frames(spec)
        grow = k * self.hop
        self.acc = np.concatenate([self.acc, np.zeros((b, grow))], axis=1)
        self.norm = np.concatenate([self.norm, np.zeros(grow)])
        for j in range(k):
            self.acc[:, j * self.hop : j * self.hop + self.win] += frames[:, j]
            self.norm[j * self.hop : j * self.hop + self.win] += self.wsq
        out = self.acc[:, :grow].copy()
        norm = self.norm[:grow]
        good = norm > 1e-10
        out[:, good] /= norm[good]
        self.acc = self.acc[:, grow:]
        self.norm = self.norm[grow:]
        return out


class _NlmsStream:
    """Buffered block loop around the adaptive filter state."""

    def __init__(self, cfg: adaptive.LinearAecConfig):
        self.block = cfg.block
        self.state = adaptive.AdaptiveFilterState(
            cfg.block, cfg.partitions, cfg.step, cfg.power_smoothing,
            cfg.reg_scale)
        self.far = np.zeros(0)
        self.mic = np.zeros(0)

    def push(self, far: np.ndarray, mic: np.ndarray):
        if len(far) != len(mic):
            raise ConfigurationError("far/mic chunks must match in length")
        self.far = np.concatenate([self.far, far])
        self.mic = np.concatenate([self.mic, mic])
        k = len(self.mic) // self.block
        if k == 0:
            return np.zeros(0), np.zeros(0)
        n = k * self.block
        e = np.empty(n)
        y = np.empty(n)
        for i in range(0, n, self.block):
            e[i : i + self.block], y[i : i + self.block] = \
                adaptive.nlms_process_block(
                    self.state, self.far[i : i + self.block],
                    self.mic[i : i + self.block])
        self.far = self.far[n:]
        self.mic = self.mic[n:]
        return e, y


# ---------------------------------------------------------------------------
# the canceller

class EchoCanceller:
    """Offline and block-streaming interface over the whole cascade."""

    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.bank = pqmf.design_prototype(self.cfg.bands)
        self.params = None
        self.infer_cfg = None
        if not self.cfg.linear_only:
            path = self.cfg.checkpoint
            if path and os.path.exists(path):
                params, net_cfg, _ = load_pipeline_checkpoint(path)
                if net_cfg.freq_bins != self.cfg.fft_size // 2:
                    raise ConfigurationError(
                        f"checkpoint expects {net_cfg.freq_bins} bins, "
                        f"pipeline produces {self.cfg.fft_size // 2}")
                self.params = {k: v.detach() for k, v in params.items()}
                # the auxiliary heads only shape training; inference runs
                # the mask decoder alone
                self.infer_cfg = dataclasses.replace(
                    net_cfg, use_dsvad=False, use_echo_decoder=False)
            else:
                detail = f"checkpoint {path!r} not found" if path \
                    else "no checkpoint configured"
                warnings.warn(f"{detail}; running the linear stage only",
                              stacklevel=2)

    @property
    def has_network(self) -> bool:
        return self.params is not None

    def latency_samples(self) -> int:
        """Pipeline delay at the full rate.

        The adaptive stage and the STFT/ISTFT pair are timeline-aligned;
        only the analysis+synthesis filter bank delays the signal.
        """
        return self.bank.total_delay

    # -- offline -----------------------------------------------------------

    def _validate(self, mic: Waveform, far: Waveform) -> None:
        if mic.sample_rate != self.cfg.sample_rate \
                or far.sample_rate != self.cfg.sample_rate:
            raise ConfigurationError(
                f"expected {self.cfg.sample_rate} Hz input, got "
                f"{mic.sample_rate}/{far.sample_rate}")
        if len(mic.samples) == 0:
            raise ConfigurationError("empty microphone signal")

    def process(self, mic: Waveform, far: Waveform) -> Waveform:
        """Cancel the echo in `mic` given the far-end reference `far`."""
        self._validate(mic, far)
        e, y = adaptive.run_linear_stage(mic, far, self.cfg.linear)
        n = len(mic.samples)
        if not self.has_network:
            return Waveform(e.samples[:n].copy(), mic.sample_rate)
        if n < self.cfg.win * self.cfg.bands:
            # too short for a single analysis frame
            return Waveform(e.samples[:n].copy(), mic.sample_rate)

        d_spec = band_spectra(self.bank, mic, self.cfg)
        e_spec = band_spectra(self.bank, e, self.cfg)
        y_spec = band_spectra(self.bank, y, self.cfg)
        feats = make_features(d_spec, e_spec, y_spec)
        with torch.no_grad():
            out, _ = network.forward(self.params, self.infer_cfg, feats)
        s_hat = spec_to_complex(out.s_hat)

        band_len = len(pqmf.analyze(self.bank, e)[0].samples)
        rate = mic.sample_rate // self.cfg.bands
        # extend each band past the bank delay so the tail samples survive
        # the synthesis trim
        pad = -(-self.latency_samples() // self.cfg.bands)
        rebuilt = [
            audio.istft(Spectrogram(s_hat[k], hop=self.cfg.hop,
                                    win=self.cfg.win,
                                    sample_rate=rate),
                        length=band_len + pad)
            for k in range(self.cfg.bands)
        ]
        full = pqmf.synthesize(self.bank, rebuilt).samples
        full = full[self.latency_samples():]
        if len(full) < n:
            full = np.concatenate([full, np.zeros(n - len(full))])
        return Waveform(full[:n], mic.sample_rate)

    # -- streaming ---------------------------------------------------------

    def process_streaming(self, mic: Waveform, far: Waveform) -> Waveform:
        """Same cascade fed in blocks of block_frames STFT hops."""
        self._validate(mic, far)
        cfg = self.cfg
        stride = cfg.frame_stride
        block = cfg.block_frames * stride
        n = len(mic.samples)
        mic_s = mic.samples
        far_s = far.samples

        lin = cfg.linear
        tracker = None
        if lin.delay_override is not None:
            lag = max(0, int(lin.delay_override))
        elif lin.estimate_delay:
            tracker = DelayTracker(sample_rate=cfg.sample_rate,
                                   max_lag=lin.max_lag)
            lag = 0
        else:
            lag = 0

        nlms = _NlmsStream(lin)
        ana = {k: pqmf.StreamingAnalyzer(self.bank) for k in "dey"}
        stft_in = {k: _StftStream(cfg.bands, cfg.win, cfg.hop, cfg.fft_size)
                   for k in "dey"}
        istft_out = _IstftStream(cfg.bands, cfg.win, cfg.hop, cfg.fft_size)
        syn = pqmf.StreamingSynthesizer(self.bank)
        net_state = None

        def read(x, start, count):
            seg = np.zeros(count)
            lo = max(start, 0)
            hi = min(start + count, len(x))
            if hi > lo:
                seg[lo - start : hi - start] = x[lo:hi]
            return seg

        # enough trailing zero blocks to flush every stage's history
        drain = self.latency_samples() + cfg.win * cfg.bands \
            + lin.block + block
        nblocks = (n + drain + block - 1) // block
        pieces = []
        for bi in range(nblocks):
            s0 = bi * block
            mic_b = read(mic_s, s0, block)
            far_b = read(far_s, s0, block)
            if tracker is not None:
                est = tracker.feed(mic_b, far_b)
                lag = max(0, est - lin.delay_margin)
            far_del = read(far_s, s0 - lag, block)
            e_chunk, y_chunk = nlms.push(far_del, mic_b)
            m = len(e_chunk)
            if m == 0:
                continue
            # the adaptive stage buffers internally, so regenerate the mic
            # chunk on its output timeline
            consumed = (s0 + block) - len(nlms.mic) - m
            d_chunk = read(mic_s, consumed, m)

            spec = {
                "d": stft_in["d"].push(ana["d"].process(d_chunk)),
                "e": stft_in["e"].push(ana["e"].process(e_chunk)),
                "y": stft_in["y"].push(ana["y"].process(y_chunk)),
            }
            k = spec["e"].shape[1]
            if k == 0:
                continue
            if self.has_network:
                feats = make_features(spec["d"], spec["e"], spec["y"])
                with torch.no_grad():
                    out, net_state = network.forward(
                        self.params, self.infer_cfg, feats, net_state)
                frames = spec_to_complex(out.s_hat)
            else:
                frames = spec["e"]
            band_samples = istft_out.push(frames)
            if band_samples.shape[1]:
                pieces.append(syn.process(band_samples))

        full = np.concatenate(pieces) if pieces else np.zeros(0)
        full = full[self.latency_samples():]
        if len(full) < n:
            full = np.concatenate([full, np.zeros(n - len(full))])
        return Waveform(full[:n], mic.sample_rate)


# ---------------------------------------------------------------------------
# metrics

def erle_db(mic: Waveform, out: Waveform,
            active: np.ndarray | None = None) -> float:
    """Echo-return-loss enhancement, clamped to 100 dB.

    `active` optionally restricts the measurement to a boolean sample mask
    (e.g. far-end-active regions).
    """
    x = mic.samples
    y = out.samples
    m = min(len(x), len(y))
    x, y = x[:m], y[:m]
    if active is not None:
        mask = np.asarray(active, bool)[:m]
        x, y = x[mask], y[mask]
    num = float(np.sum(x * x))
    den = float(np.sum(y * y))
    if num <= 0.0:
        return 0.0
    if den <= 0.0:
        return 100.0
    return float(min(10.0 * math.log10(num / den), 100.0))


def rtf(processing_seconds: float, audio_seconds: float) -> float:
    """Real-time factor; below 1.0 means faster than the audio plays."""
    if audio_seconds <= 0:
        raise ConfigurationError("audio duration must be positive")
    return processing_seconds / audio_seconds


def active_sample_mask(w: Waveform, frame: int = 480,
                       hop: int = 480) -> np.ndarray:
    """Boolean per-sample mask from frame-level activity labels."""
    labels = synth.vad_labels(w, frame, hop)
    mask = np.zeros(len(w.samples), dtype=bool)
    for t in np.flatnonzero(labels):
        mask[t * hop : t * hop + frame] = True
    return mask


# ---------------------------------------------------------------------------
# training

class PlateauScheduler:
    """Halve the rate after `patience` epochs without a lower loss."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.5):
        if patience < 1 or not (0 < factor < 1):
            raise ConfigurationError("patience >= 1 and 0 < factor < 1")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stale = 0

    def step(self, value: float) -> bool:
        """Feed one epoch's validation loss; returns True when lr drops."""
        if value < self.best:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
            return True
        return False


class Trainer:
    """Multi-task training over rendered manifest clips.

    Per-clip features and targets are computed once and cached, so the
    steady-state step cost is the forward/backward pass alone.
    """

    def __init__(self, manifest_path, out_dir, val_manifest_path=None,
                 pipe_cfg: PipelineConfig | None = None,
                 train_cfg: TrainConfig | None = None):
        self.cfg = pipe_cfg or PipelineConfig()
        self.tcfg = train_cfg or TrainConfig()
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.entries = synth.load_manifest(manifest_path)
        if not self.entries:
            raise ConfigurationError(f"{manifest_path} lists no clips")
        self.base = os.path.dirname(os.path.abspath(manifest_path))
        self.val_entries = []
        self.val_base = None
        if val_manifest_path:
            self.val_entries = synth.load_manifest(val_manifest_path)
            self.val_base = os.path.dirname(os.path.abspath(val_manifest_path))
        self.bank = pqmf.design_prototype(self.cfg.bands)
        self.params = network.init_params(self.cfg.net, self.tcfg.seed)
        for p in self.params.values():
            p.requires_grad_(True)
        self.opt = nnops.Adam(self.params, lr=self.tcfg.lr)
        self.sched = PlateauScheduler(self.tcfg.lr, self.tcfg.patience,
                                      self.tcfg.lr_factor)
        self._cache = {}
        self.history = []

    # -- data --------------------------------------------------------------

    def _load(self, base, entry, name) -> Waveform:
        path = os.path.join(base, entry["files"][name])
        w = audio.load_wav(path)
        if w.sample_rate != self.cfg.sample_rate:
            raise ConfigurationError(
                f"{path}: expected {self.cfg.sample_rate} Hz")
        return w

    def _clip_tensors(self, base, entry):
        """Features plus spectral/VAD targets for one manifest clip."""
        key = (base, entry["id"])
        if key in self._cache:
            return self._cache[key]
        seg = int(self.tcfg.segment_seconds * self.cfg.sample_rate)
        stride = self.cfg.frame_stride
        seg = max(stride * (self.cfg.win // self.cfg.hop + 1),
                  (seg // stride) * stride)

        crop = lambda w: Waveform(w.samples[:seg], w.sample_rate)
        mic = crop(self._load(base, entry, "mic"))
        far = crop(self._load(base, entry, "far"))
        near = crop(self._load(base, entry, "near"))
        echo = crop(self._load(base, entry, "echo"))

        e, y = adaptive.run_linear_stage(mic, far, self.cfg.linear)
        feats = make_features(band_spectra(self.bank, mic, self.cfg),
                              band_spectra(self.bank, e, self.cfg),
                              band_spectra(self.bank, y, self.cfg))
        frames = feats.shape[2]

        def target(w):
            spec = band_spectra(self.bank, w, self.cfg)[:, :frames]
            out = np.stack([spec.real, spec.imag], axis=-1)
            return torch.from_numpy(out.astype(np.float32))

        def labels(w):
            lab = synth.vad_labels(w, stride, stride).astype(np.float32)
            if len(lab) < frames:
                lab = np.concatenate(
                    [lab, np.zeros(frames - len(lab), np.float32)])
            lab_t = torch.from_numpy(lab[:frames])
            return lab_t.expand(self.cfg.bands, frames).contiguous()

        item = {
            "feats": feats,
            "s": target(near),
            "z": target(echo),
            "near_labels": labels(near),
            "far_labels": labels(echo),
        }
        self._cache[key] = item
        return item

    # -- loss --------------------------------------------------------------

    def _loss(self, out: network.NetworkOutput, batch):
        asl = lambda t: t.permute(0, 2, 3, 1)  # [B,2,T,F] -> [B,T,F,2]
        net = self.cfg.net
        if net.use_dsvad and net.use_echo_decoder:
            total, report = lossfn.loss_final(
                asl(out.s_hat), batch["s"], asl(out.z_hat), batch["z"],
                out.p_near, batch["near_labels"],
                out.p_far, batch["far_labels"])
            return total, dataclasses.asdict(report)
        # ablation variants drop the terms whose heads are absent
        s_hat = asl(out.s_hat)
        ea = lossfn.loss_echo_aware(s_hat, batch["s"], batch["z"])
        mask = lossfn.loss_mask(s_hat, batch["s"])
        asym = lossfn.loss_asym(s_hat, batch["s"])
        total = ea + lossfn.MASK_COEFF * mask + asym
        parts = {"echo_aware": float(ea.detach()),
                 "mask": float(mask.detach()),
                 "asym": float(asym.detach())}
        if net.use_dsvad:
            dtd, dn, df = lossfn.loss_dtd(
                out.p_near, batch["near_labels"],
                out.p_far, batch["far_labels"])
            total = total + lossfn.DTD_COEFF * dtd
            parts.update(dtd=float(dtd.detach()),
                         dtd_near=float(dn.detach()),
                         dtd_far=float(df.detach()))
        if net.use_echo_decoder:
            echo = lossfn.loss_echo(asl(out.z_hat), batch["z"])
            total = total + lossfn.ECHO_COEFF * echo
            parts["echo"] = float(echo.detach())
        parts["final"] = float(total.detach())
        return total, parts

    def _batch(self, picks):
        items = [self._clip_tensors(self.base, self.entries[i])
                 for i in picks]
        frames = min(it["feats"].shape[2] for it in items)
        cut = {
            "feats": torch.cat([it["feats"][:, :, :frames] for it in items]),
            "s": torch.cat([it["s"][:, :frames] for it in items]),
            "z": torch.cat([it["z"][:, :frames] for it in items]),
            "near_labels": torch.cat(
                [it["near_labels"][:, :frames] for it in items]),
            "far_labels": torch.cat(
                [it["far_labels"][:, :frames] for it in items]),
        }
        return cut

    def _dump_diagnostics(self, epoch, step, picks, parts):
        path = os.path.join(self.out_dir, "diagnostics.json")
        with open(path, "w") as f:
            json.dump({"epoch": epoch, "step": step, "lr": self.opt.lr,
                       "clips": [int(self.entries[i]["id"]) for i in picks],
                       "loss_parts": parts}, f, indent=2)
        return path

    def _train_step(self, epoch, step, picks):
        batch = self._batch(picks)
        out, _ = network.forward(self.params, self.cfg.net, batch["feats"])
        total, parts = self._loss(out, batch)
        if not torch.isfinite(total):
            path = self._dump_diagnostics(epoch, step, picks, parts)
            raise TrainingError(
                f"non-finite loss at epoch {epoch} step {step}; "
                f"diagnostics in {path}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        return float(total.detach()), parts

    def _validation_loss(self) -> float | None:
        if not self.val_entries:
            return None
        losses = []
        for entry in self.val_entries:
            item = self._clip_tensors(self.val_base, entry)
            with torch.no_grad():
                out, _ = network.forward(self.params, self.cfg.net,
                                         item["feats"])
                total, _ = self._loss(out, item)
            losses.append(float(total))
        return float(np.mean(losses))

    def train(self) -> list[dict]:
        rng = np.random.default_rng(self.tcfg.seed)
        n = len(self.entries)
        bs = min(self.tcfg.batch_size, n)
        steps = self.tcfg.steps_per_epoch or max(1, n // bs)
        log_path = os.path.join(self.out_dir, "train_log.jsonl")
        with open(log_path, "w") as log:
            order = []
            for epoch in range(1, self.tcfg.epochs + 1):
                epoch_losses = []
                for step in range(1, steps + 1):
                    while len(order) < bs:
                        order.extend(rng.permutation(n).tolist())
                    picks, order = order[:bs], order[bs:]
                    loss, parts = self._train_step(epoch, step, picks)
                    epoch_losses.append(loss)
                    if step == 1 or step % self.tcfg.log_every == 0 \
                            or step == steps:
                        log.write(json.dumps(
                            {"epoch": epoch, "step": step, "lr": self.opt.lr,
                             **parts}, sort_keys=True) + "\n")
                        log.flush()
                val = self._validation_loss()
                train_mean = float(np.mean(epoch_losses))
                halved = self.sched.step(val if val is not None
                                         else train_mean)
                self.opt.lr = self.sched.lr
                row = {"epoch": epoch, "train_loss": train_mean,
                       "val_loss": val, "lr": self.opt.lr,
                       "lr_halved": halved}
                self.history.append(row)
                log.write(json.dumps({"summary": row},
                                     sort_keys=True) + "\n")
                log.flush()
                self.save(os.path.join(self.out_dir,
                                       f"epoch_{epoch:03d}.ckpt"))
        self.save(os.path.join(self.out_dir, "final.ckpt"))
        return self.history

    def save(self, path) -> None:
        save_pipeline_checkpoint(
            path, {k: v.detach() for k, v in self.params.items()},
            self.cfg.net, extra={"history": self.history})


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MetricsReport:
    erle_db: float
    rtf: float | None
    n_clips: int
    scenarios: dict
    clips: list

    def table(self) -> str:
        width = max(8, *(len(n) for n in self.scenarios)) if self.scenarios \
            else 8
        lines = [f"{'scenario':<{width}}  clips   ERLE (dB)",
                 f"{'-' * width}  -----   ---------"]
        for name in sorted(self.scenarios):
            row = self.scenarios[name]
            e = row["erle_db"]
            shown = f"{e:9.2f}" if e is not None else "        -"
            lines.append(f"{name:<{width}}  {row['n']:>5}   {shown}")
        lines.append("")
        lines.append(f"mean ERLE over echo clips: {self.erle_db:.2f} dB")
        if self.rtf is not None:
            lines.append(f"streaming real-time factor: {self.rtf:.3f}")
        return "\n".join(lines)


def evaluate(manifest_path, checkpoint=None, report_path=None,
             cfg: PipelineConfig | None = None, limit: int | None = None,
             measure_rtf: bool = True) -> MetricsReport:
    """Offline ERLE per scenario plus a streaming RTF measurement."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = synth.load_manifest(manifest_path)
    if limit is not None:
        entries = entries[:limit]
    if not entries:
        raise ConfigurationError(f"{manifest_path} lists no clips")
    cfg = dataclasses.replace(cfg or PipelineConfig(),
                              checkpoint=checkpoint if checkpoint
                              else (cfg.checkpoint if cfg else None))
    canceller = EchoCanceller(cfg)

    clip_rows = []
    echo_scen = {synth.FAR_SINGLE_TALK, synth.DOUBLE_TALK}
    for entry in entries:
        mic = audio.load_wav(os.path.join(base, entry["files"]["mic"]))
        far = audio.load_wav(os.path.join(base, entry["files"]["far"]))
        out = canceller.process(mic, far)
        row = {"id": entry["id"], "scenario": entry["scenario"]}
        if entry["scenario"] in echo_scen:
            echo = audio.load_wav(os.path.join(base, entry["files"]["echo"]))
            active = active_sample_mask(echo)
            row["erle_db"] = erle_db(mic, out, active if active.any()
                                     else None)
        else:
            # near-end single talk: report how much the near signal moved
            num = float(np.sum(mic.samples ** 2))
            den = float(np.sum((out.samples - mic.samples) ** 2))
            row["near_change_db"] = (-10.0 * math.log10(num / den)
                                     if num > 0 and den > 0 else -100.0)
        clip_rows.append(row)

    scen = {}
    for row in clip_rows:
        s = scen.setdefault(row["scenario"], {"n": 0, "vals": []})
        s["n"] += 1
        if "erle_db" in row:
            s["vals"].append(row["erle_db"])
    scenarios = {
        name: {"n": s["n"],
               "erle_db": float(np.mean(s["vals"])) if s["vals"] else None}
        for name, s in scen.items()
    }
    erles = [r["erle_db"] for r in clip_rows if "erle_db" in r]
    mean_erle = float(np.mean(erles)) if erles else 0.0

    factor = None
    if measure_rtf:
        entry = next((e for e in entries
                      if e["scenario"] == synth.FAR_SINGLE_TALK), entries[0])
        mic = audio.load_wav(os.path.join(base, entry["files"]["mic"]))
        far = audio.load_wav(os.path.join(base, entry["files"]["far"]))
        t0 = time.perf_counter()
        canceller.process_streaming(mic, far)
        factor = rtf(time.perf_counter() - t0, mic.duration)

    report = MetricsReport(erle_db=mean_erle, rtf=factor,
                           n_clips=len(clip_rows), scenarios=scenarios,
                           clips=clip_rows)
    if report_path:
        with open(report_path, "w") as f:
            for row in clip_rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
            f.write(json.dumps(
                {"summary": {"erle_db": report.erle_db, "rtf": report.rtf,
                             "n_clips": report.n_clips,
                             "scenarios": report.scenarios}},
                sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# ablation

def _scenario_erle(report: MetricsReport,
                   scenario: str = synth.FAR_SINGLE_TALK) -> float | None:
    row = report.scenarios.get(scenario)
    return row["erle_db"] if row else None


ABLATION_VARIANTS = {
    # cumulative build-up: each row adds one mechanism
    "base": dict(use_tfcm=False, use_dsvad=False, use_echo_decoder=False),
    "dsvad": dict(use_tfcm=False, use_dsvad=True, use_echo_decoder=False),
    "tfcm": dict(use_tfcm=True, use_dsvad=True, use_echo_decoder=False),
    "full": dict(use_tfcm=True, use_dsvad=True, use_echo_decoder=True),
}


def ablate(manifest_path, variants, out_dir,
           pipe_cfg: PipelineConfig | None = None,
           train_cfg: TrainConfig | None = None,
           eval_limit: int | None = None) -> list[dict]:
    """Train each variant briefly and measure ERLE on the same clips.

    `variants` may include "linear" for the adaptive stage alone; other
    names must come from ABLATION_VARIANTS.
    """
    base_cfg = pipe_cfg or PipelineConfig()
    tcfg = train_cfg or TrainConfig()
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name in variants:
        if name == "linear":
            cfg = dataclasses.replace(base_cfg, linear_only=True,
                                      checkpoint=None)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report = evaluate(manifest_path, cfg=cfg, limit=eval_limit,
                                  measure_rtf=False)
            rows.append({"variant": "linear", "params": 0,
                         "final_loss": None, "erle_db": report.erle_db,
                         "erle_fe_db": _scenario_erle(report)})
            continue
        if name not in ABLATION_VARIANTS:
            raise ConfigurationError(
                f"unknown ablation variant {name!r}; choose from "
                f"{['linear', *ABLATION_VARIANTS]}")
        net_cfg = dataclasses.replace(base_cfg.net,
                                      **ABLATION_VARIANTS[name])
        cfg = dataclasses.replace(base_cfg, net=net_cfg)
        vdir = os.path.join(out_dir, name)
        trainer = Trainer(manifest_path, vdir, pipe_cfg=cfg, train_cfg=tcfg)
        history = trainer.train()
        ckpt = os.path.join(vdir, "final.ckpt")
        eval_cfg = dataclasses.replace(cfg, checkpoint=ckpt)
        report = evaluate(manifest_path, cfg=eval_cfg, limit=eval_limit,
                          measure_rtf=False)
        rows.append({"variant": name,
                     "params": network.param_count(trainer.params),
                     "final_loss": history[-1]["train_loss"],
                     "erle_db": report.erle_db,
                     "erle_fe_db": _scenario_erle(report)})

    table = ["variant   params      final loss   ERLE (dB)",
             "-------   ------      ----------   ---------"]
    for r in rows:
        loss = f"{r['final_loss']:10.4f}" if r["final_loss"] is not None \
            else "         -"
        table.append(f"{r['variant']:<8}  {r['params']:>9,}  {loss}   "
                     f"{r['erle_db']:9.2f}")
    text = "\n".join(table)
    with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
        f.write(text + "\n")
    with open(os.path.join(out_dir, "ablation.jsonl"), "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return rows
