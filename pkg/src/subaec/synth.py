"""Synthetic mixture generation: room impulse responses, SER/SNR mixing,
energy-based VAD labels, and scenario manifests.

The mic signal follows d = s + z + v with z = delayed(x) * h, where s is
near-end speech, x the far-end reference, v near-end noise, and h a shoebox
room response from the image-source model. A built-in speech-like source
(amplitude-modulated colored noise) keeps everything hermetic; WAV pools
can be supplied instead.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, lfilter

from subaec.audio import Waveform, save_wav
from subaec.errors import ConfigurationError

SPEED_OF_SOUND = 343.0

FAR_SINGLE_TALK = "far-single-talk"
NEAR_SINGLE_TALK = "near-single-talk"
DOUBLE_TALK = "double-talk"
SCENARIOS = (FAR_SINGLE_TALK, NEAR_SINGLE_TALK, DOUBLE_TALK)

# parameter ranges for drawing mixtures; SER/SNR bounds follow the usual
# wideband AEC training recipe
PAPER_RANGES = {
    "ser_db": (-10.0, 15.0),
    "snr_near_db": (0.0, 20.0),
    "snr_far_db": (15.0, 45.0),
    "delay": (0, 24000),
    "dims_x": (3.0, 8.0),
    "dims_y": (3.0, 8.0),
    "dims_z": (2.5, 4.0),
    "rt60": (0.2, 0.8),
}


@dataclass
class MixSpec:
    ser_db: float
    snr_near_db: float
    snr_far_db: float
    delay: int
    scenario: str
    seed: int

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if self.delay < 0:
            raise ConfigurationError("delay must be non-negative")


@dataclass
class RoomSpec:
    dims: tuple
    source_pos: tuple
    mic_pos: tuple
    rt60: float
    max_order: int | None = None

    def __post_init__(self):
        if self.rt60 <= 0:
            raise ConfigurationError("rt60 must be positive")
        for p in (self.source_pos, self.mic_pos):
            if not all(0 < p[i] < self.dims[i] for i in range(3)):
                raise ConfigurationError("positions must lie strictly inside the room")


@dataclass
class Mixture:
    d: Waveform
    s: Waveform
    z: Waveform
    v: Waveform


def image_method_rir(room: RoomSpec, fs: int) -> Waveform:
    """Shoebox image-source room response, length ceil(rt60*fs).

    Uniform wall reflection coefficient from Sabine's formula; each image
    contributes beta^reflections / (4 pi dist) through an 81-tap
    Hann-windowed sinc fractional delay.
    """
    lx, ly, lz = room.dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    absorption = 0.161 * volume / (room.rt60 * surface)
    if absorption >= 1.0:
        raise ConfigurationError(
            f"rt60 {room.rt60}s infeasible for this geometry (Sabine absorption >= 1)")
    beta = np.sqrt(1.0 - absorption)

    length = int(np.ceil(room.rt60 * fs))
    if room.max_order is None:
        # Images must cover well past the midpoint of the decay or the
        # truncated tail drags the -60 dB crossing early.  0.7 * rt60 of
        # travel keeps the crossing within a few percent of the target.
        reach = 0.7 * room.rt60 * SPEED_OF_SOUND
        orders = [min(36, int(np.ceil(reach / (2 * room.dims[i]))) + 1) for i in range(3)]
    else:
        orders = [room.max_order] * 3

    axes = []
    for i in range(3):
        n = np.arange(-orders[i], orders[i] + 1)
        p = np.array([0, 1])
        # image coordinate (1-2p)*src + 2nL and its reflection count |n-p| + |n|
        coord = ((1 - 2 * p)[None, :] * room.source_pos[i]
                 + 2 * n[:, None] * room.dims[i]).reshape(-1)
        refl = (np.abs(n[:, None] - p[None, :]) + np.abs(n)[:, None]).reshape(-1)
        axes.append((coord - room.mic_pos[i], refl))

    dx, rx = axes[0]
    dy, ry = axes[1]
    dz, rz = axes[2]
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2
                   + dz[None, None, :] ** 2).reshape(-1)
    refl = (rx[:, None, None] + ry[None, :, None] + rz[None, None, :]).reshape(-1)
    if room.max_order is not None:
        # an explicit order bounds the number of wall bounces, so the parity
        # mirrors that share a period index but add a reflection must go too
        mask = refl <= room.max_order
        dist = dist[mask]
        refl = refl[mask]
    dist = np.maximum(dist, 1e-2)
    amp = beta ** refl / (4.0 * np.pi * dist)
    delays = dist / SPEED_OF_SOUND * fs

    half = 40
    keep = delays < length + half
    delays = delays[keep]
    amp = amp[keep]
    base = np.floor(delays).astype(np.int64)
    frac = delays - base

    h = np.zeros(length)
    for j in range(-half, half + 1):
        t = j - frac
        kern = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / (half + 1)))
        idx = base + j
        ok = (idx >= 0) & (idx < length)
        if np.any(ok):
            h += np.bincount(idx[ok], weights=(amp * kern)[ok], minlength=length)
    return Waveform(h, fs)


def vad_labels(w: Waveform, frame: int, hop: int) -> np.ndarray:
    """Binary activity per frame: RMS above max(peak - 40 dB, -60 dBFS), strict."""
    x = w.samples
    if len(x) < frame:
        return np.zeros(0, dtype=np.int8)
    num = (len(x) - frame) // hop + 1
    idx = np.arange(num)[:, None] * hop + np.arange(frame)[None, :]
    rms = np.sqrt(np.mean(x[idx] ** 2, axis=1))
    db = 20.0 * np.log10(np.maximum(rms, 1e-10))
    thresh = max(db.max() - 40.0, -60.0)
    return (db > thresh).astype(np.int8)


def _active_power(x: np.ndarray, active_frames: np.ndarray, frame: int, hop: int) -> float:
    spans = np.zeros(len(x), dtype=bool)
    for t in np.flatnonzero(active_frames):
        spans[t * hop : t * hop + frame] = True
    if not spans.any():
        return 0.0
    return float(np.mean(x[spans] ** 2))


def mix(s: Waveform, x: Waveform, v: Waveform, h: Waveform, spec: MixSpec) -> Mixture:
    """Assemble d = s + z + v with z = delayed(x) * h, scaled per spec.

    SER scaling uses frames where both s and z are active; near-end noise is
    scaled against active near speech (against the echo when s is absent).
    Far-single-talk zeroes s and keeps the naturally convolved echo level,
    since SER is undefined without near speech.
    """
    rate = s.sample_rate
    n = len(s.samples)
    if len(x.samples) != n or len(v.samples) != n:
        raise ConfigurationError("s, x, v must have equal lengths")

    xd = np.zeros(n)
    k = int(spec.delay)
    if k < n:
        xd[k:] = x.samples[: n - k]
    z = fftconvolve(xd, h.samples)[:n]
    s_out = s.samples.copy()
    v_out = v.samples.copy()

    frame, hop = int(0.02 * rate), int(0.01 * rate)
    if spec.scenario == FAR_SINGLE_TALK:
        s_out[:] = 0.0
    elif spec.scenario == NEAR_SINGLE_TALK:
        z[:] = 0.0

    if spec.scenario == DOUBLE_TALK:
        s_act = vad_labels(Waveform(s_out, rate), frame, hop)
        if not s_act.any():
            raise ConfigurationError("near speech is silent but a finite SER was requested")
        z_act = vad_labels(Waveform(z, rate), frame, hop)
        both = s_act.astype(bool) & z_act.astype(bool)
        if not both.any():
            raise ConfigurationError("near speech and echo never overlap; SER undefined")
        p_s = _active_power(s_out, both, frame, hop)
        p_z = _active_power(z, both, frame, hop)
        if p_z <= 0:
            raise ConfigurationError("echo is silent; SER undefined")
        z *= np.sqrt(p_s / (p_z * 10.0 ** (spec.ser_db / 10.0)))

    # near-end noise level against whatever carries the clip
    ref = s_out if spec.scenario != FAR_SINGLE_TALK else z
    if np.any(v_out != 0.0):
        ref_act = vad_labels(Waveform(ref, rate), frame, hop)
        if ref_act.any():
            p_ref = _active_power(ref, ref_act, frame, hop)
            p_v = float(np.mean(v_out**2))
            if p_v > 0:
                v_out *= np.sqrt(p_ref / (p_v * 10.0 ** (spec.snr_near_db / 10.0)))

    d = s_out + z + v_out
    return Mixture(Waveform(d, rate), Waveform(s_out, rate),
                   Waveform(z, rate), Waveform(v_out, rate))


def speech_like(duration: float, sample_rate: int, seed: int) -> Waveform:
    """Amplitude-modulated colored noise with utterance bursts and pauses."""
    rng = np.random.default_rng(seed)
    n = int(duration * sample_rate)
    carrier = lfilter([1.0], [1.0, -0.93], rng.standard_normal(n))

    # syllabic envelope around 3-5 Hz
    slow = lfilter([1.0], [1.0, -(1.0 - 8.0 / sample_rate)], np.abs(rng.standard_normal(n)))
    slow /= np.abs(slow).max() + 1e-12

    gate = np.zeros(n)
    pos = 0
    while pos < n:
        burst = int(rng.uniform(0.25, 1.5) * sample_rate)
        pause = int(rng.uniform(0.15, 0.8) * sample_rate)
        gate[pos : pos + burst] = 1.0
        pos += burst + pause
    # soften gate edges to avoid clicks
    ramp = int(0.01 * sample_rate)
    gate = lfilter(np.ones(ramp) / ramp, [1.0], gate)

    out = carrier * slow * gate
    peak = np.abs(out).max()
    if peak > 0:
        out = out / peak * 0.5
    return Waveform(out, sample_rate)


def noise_like(duration: float, sample_rate: int, seed: int) -> Waveform:
    """Stationary colored noise."""
    rng = np.random.default_rng(seed)
    n = int(duration * sample_rate)
    out = lfilter([1.0], [1.0, -0.85], rng.standard_normal(n))
    return Waveform(out / (np.abs(out).max() + 1e-12) * 0.1, sample_rate)


def _scenario_counts(n_clips: int) -> tuple[int, int, int]:
    # test-set composition ratio 400:400:700
    fe = round(n_clips * 400 / 1500)
    ne = round(n_clips * 400 / 1500)
    return fe, ne, n_clips - fe - ne


def build_manifest(sources: dict | None, n_clips: int, ranges: dict | None,
                   seed: int, path) -> list[dict]:
    """Draw clip specs deterministically and write one JSON object per line.

    `sources` maps pool names ("near", "far", "noise") to lists of WAV paths;
    None or missing pools fall back to the built-in synthetic generator.
    """
    rng = np.random.default_rng(seed)
    ranges = dict(PAPER_RANGES, **(ranges or {}))
    sources = sources or {}
    fe, ne, dt = _scenario_counts(n_clips)
    scenarios = [FAR_SINGLE_TALK] * fe + [NEAR_SINGLE_TALK] * ne + [DOUBLE_TALK] * dt

    def draw(lo, hi):
        return float(rng.uniform(lo, hi))

    def pick(pool):
        items = sources.get(pool)
        if not items:
            return None
        return str(items[int(rng.integers(len(items)))])

    entries = []
    for i, scenario in enumerate(scenarios):
        dims = (draw(*ranges["dims_x"]), draw(*ranges["dims_y"]), draw(*ranges["dims_z"]))
        pos = lambda: tuple(float(rng.uniform(0.3, d - 0.3)) for d in dims)
        entry = {
            "id": i,
            "scenario": scenario,
            "ser_db": draw(*ranges["ser_db"]),
            "snr_near_db": draw(*ranges["snr_near_db"]),
            "snr_far_db": draw(*ranges["snr_far_db"]),
            "delay": int(rng.integers(ranges["delay"][0], ranges["delay"][1] + 1)),
            "seed": int(rng.integers(2**31)),
            "rir_id": f"rir_{i:04d}",
            "room": {
                "dims": dims,
                "source_pos": pos(),
                "mic_pos": pos(),
                "rt60": draw(*ranges["rt60"]),
            },
            "near_wav": pick("near"),
            "far_wav": pick("far"),
            "noise_wav": pick("noise"),
            "files": {
                "mic": f"clip_{i:04d}_mic.wav",
                "far": f"clip_{i:04d}_far.wav",
                "near": f"clip_{i:04d}_near.wav",
                "echo": f"clip_{i:04d}_echo.wav",
            },
        }
        entries.append(entry)
    with open(path, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    return entries


def load_manifest(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def render_clip(entry: dict, out_dir, duration: float = 8.0,
                sample_rate: int = 48000) -> dict:
    """Synthesize and write the four WAVs for one manifest entry."""
    import os

    rng = np.random.default_rng(entry["seed"])
    sub = lambda: int(rng.integers(2**31))
    n = int(duration * sample_rate)

    def pool_or_synthetic(path, maker, seed):
        if path:
            from subaec.audio import load_wav

            w = load_wav(path)
            x = w.samples
            if len(x) < n:
                x = np.tile(x, n // len(x) + 1)
            off = int(rng.integers(max(len(x) - n, 1)))
            return Waveform(x[off : off + n], sample_rate)
        return maker(duration, sample_rate, seed)

    s = pool_or_synthetic(entry.get("near_wav"), speech_like, sub())
    x = pool_or_synthetic(entry.get("far_wav"), speech_like, sub())
    v = pool_or_synthetic(entry.get("noise_wav"), noise_like, sub())

    # far-end pickup noise
    far_noise = noise_like(duration, sample_rate, sub()).samples
    p_x = np.mean(x.samples**2)
    p_fn = np.mean(far_noise**2)
    if p_x > 0 and p_fn > 0:
        far_noise *= np.sqrt(p_x / (p_fn * 10.0 ** (entry["snr_far_db"] / 10.0)))
        x = Waveform(x.samples + far_noise, sample_rate)

    room = RoomSpec(**entry["room"])
    h = image_method_rir(room, sample_rate)
    spec = MixSpec(entry["ser_db"], entry["snr_near_db"], entry["snr_far_db"],
                   entry["delay"], entry["scenario"], entry["seed"])
    m = mix(s, x, v, h, spec)

    # joint headroom scale keeps d = s + z + v and all ratios intact
    peak = np.abs(m.d.samples).max()
    if peak > 0.95:
        g = 0.95 / peak
        for w in (m.d, m.s, m.z, m.v):
            w.samples *= g

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for key, w in (("mic", m.d), ("far", x), ("near", m.s), ("echo", m.z)):
        p = os.path.join(out_dir, entry["files"][key])
        save_wav(p, w)
        paths[key] = p
    return paths


def render_manifest(entries: list[dict], out_dir, duration: float = 8.0,
                    sample_rate: int = 48000) -> list[dict]:
    return [render_clip(e, out_dir, duration, sample_rate) for e in entries]
