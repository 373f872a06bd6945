"""Gated convolutional recurrent post-filter with auxiliary heads.

The mic, linear-stage output, and linear echo estimate enter as six real
channels (re/im of each). Four frequency-downsampling layers (gated conv
plus a dilated convolutional stack) feed a frequency/time LSTM bottleneck.
A mask decoder mirrors the encoder with gated transposed convs, U-Net skip
projections, and time-dilated conv stacks; its 2-channel output is a complex
mask applied to the linear-stage spectrum. A parallel decoder estimates the
residual echo spectrum, and two small heads emit per-frame near/far speech
probabilities. The echo decoder and the probability heads only read shared
features, so dropping them at inference never changes the mask path.

Every layer is causal in time. forward() accepts and returns a state dict
(conv frame histories and LSTM carries), letting chunked streaming produce
the same frames as one offline pass.

Sub-bands are stacked along the batch axis and share all weights.
"""

from dataclasses import dataclass

import torch

from subaec import nnops
from subaec.errors import ConfigurationError

PRELU_INIT = 0.25


@dataclass
class NetConfig:
    channels: int = 80
    fd_layers: int = 4
    kernel: tuple = (2, 3)
    stride: tuple = (1, 2)
    tfcm_blocks: int = 4
    input_channels: int = 6
    freq_bins: int = 128
    vad_channels: int = 8
    use_tfcm: bool = True
    use_dsvad: bool = True
    use_echo_decoder: bool = True

    def __post_init__(self):
        if self.freq_bins % (self.stride[1] ** self.fd_layers) != 0:
            raise ConfigurationError(
                f"freq_bins {self.freq_bins} not divisible by "
                f"{self.stride[1]}^{self.fd_layers}")
        if self.kernel[0] < 1 or self.kernel[1] % 2 == 0:
            raise ConfigurationError("kernel must be causal-time, odd-frequency")

    def encoder_freqs(self):
        """Frequency sizes after each downsampling layer."""
        f = self.freq_bins
        out = []
        for _ in range(self.fd_layers):
            f //= self.stride[1]
            out.append(f)
        return out


def _conv_pair(params, prefix, shape, bias_ch, gen):
    params[f"{prefix}.w"] = nnops.kaiming_conv_init(shape, gen)
    params[f"{prefix}.b"] = torch.zeros(bias_ch)


def _ln_affine(params, prefix, channels, freq):
    params[f"{prefix}.gamma"] = torch.ones(1, channels, 1, freq)
    params[f"{prefix}.beta"] = torch.zeros(1, channels, 1, freq)


def _init_tfcm(params, prefix, cfg, gen):
    # block norms are channel-only so the stack's frequency receptive field
    # stays exactly the sum of the depthwise dilations
    c = cfg.channels
    for i in range(cfg.tfcm_blocks):
        p = f"{prefix}.block{i}"
        _conv_pair(params, f"{p}.pw1", (c, c, 1, 1), c, gen)
        _conv_pair(params, f"{p}.dw", (c, 1, 3, 3), c, gen)
        _conv_pair(params, f"{p}.pw2", (c, c, 1, 1), c, gen)
        params[f"{p}.slope"] = torch.full((1,), PRELU_INIT)
        params[f"{p}.ln.gamma"] = torch.ones(1, c, 1, 1)
        params[f"{p}.ln.beta"] = torch.zeros(1, c, 1, 1)


def _init_decoder(params, prefix, cfg, gen):
    c = cfg.channels
    kt, kf = cfg.kernel
    freqs = cfg.encoder_freqs()  # e.g. [64, 32, 16, 8]
    for j in range(cfg.fd_layers):
        p = f"{prefix}.fu{j}"
        f_out = freqs[cfg.fd_layers - 2 - j] if j < cfg.fd_layers - 1 else cfg.freq_bins
        _conv_pair(params, f"{p}.skip", (c, c, 1, 1), c, gen)
        _conv_pair(params, f"{p}.content", (2 * c, c, kt, kf), c, gen)
        _conv_pair(params, f"{p}.gate", (2 * c, c, kt, kf), c, gen)
        params[f"{p}.slope"] = torch.full((1,), PRELU_INIT)
        _ln_affine(params, f"{p}.ln", c, f_out)
        if cfg.use_tfcm:
            _init_tfcm(params, f"{p}.tfcm", cfg, gen)
    _conv_pair(params, f"{prefix}.out.content", (c, 2, kt, kf), 2, gen)
    _conv_pair(params, f"{prefix}.out.gate", (c, 2, kt, kf), 2, gen)


def init_params(cfg: NetConfig, seed: int = 0):
    """Build the full trainable parameter dict, deterministically."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    params = {}
    c = cfg.channels
    kt, kf = cfg.kernel

    f = cfg.freq_bins
    in_ch = cfg.input_channels
    for i, f_out in enumerate(cfg.encoder_freqs()):
        p = f"enc{i}"
        _conv_pair(params, f"{p}.content", (c, in_ch, kt, kf), c, gen)
        _conv_pair(params, f"{p}.gate", (c, in_ch, kt, kf), c, gen)
        params[f"{p}.slope"] = torch.full((1,), PRELU_INIT)
        _ln_affine(params, f"{p}.ln", c, f_out)
        if cfg.use_tfcm:
            _init_tfcm(params, f"{p}.utfcm", cfg, gen)
        in_ch = c
        f = f_out

    for block in ("freq", "time"):
        w_ih, w_hh, b_ih, b_hh = nnops.lstm_weight_init(c, c, gen)
        params[f"ftlstm.{block}.w_ih"] = w_ih
        params[f"ftlstm.{block}.w_hh"] = w_hh
        params[f"ftlstm.{block}.b_ih"] = b_ih
        params[f"ftlstm.{block}.b_hh"] = b_hh
        params[f"ftlstm.{block}.proj.w"] = (
            torch.rand(c, c, generator=gen) * 2 - 1) / c**0.5
        params[f"ftlstm.{block}.proj.b"] = torch.zeros(c)
        _ln_affine(params, f"ftlstm.{block}.ln", c, f)

    _init_decoder(params, "mask", cfg, gen)
    if cfg.use_echo_decoder:
        _init_decoder(params, "echo", cfg, gen)

    if cfg.use_dsvad:
        for head in ("near", "far"):
            p = f"dsvad.{head}"
            _conv_pair(params, f"{p}.proj", (cfg.vad_channels, c, 1, 1),
                       cfg.vad_channels, gen)
            params[f"{p}.lin.w"] = (
                torch.rand(1, cfg.vad_channels, generator=gen) * 2 - 1
            ) / cfg.vad_channels**0.5
            params[f"{p}.lin.b"] = torch.zeros(1)

    for v in params.values():
        v.requires_grad_(True)
    return params


def param_count(params) -> int:
    return sum(v.numel() for v in params.values())


def complex_mask_apply(mask, spec):
    """Complex multiply of two [B, 2, T, F] tensors (channel 0 re, 1 im)."""
    re = mask[:, 0] * spec[:, 0] - mask[:, 1] * spec[:, 1]
    im = mask[:, 0] * spec[:, 1] + mask[:, 1] * spec[:, 0]
    return torch.stack([re, im], dim=1)


@dataclass
class NetworkOutput:
    mask: torch.Tensor
    s_hat: torch.Tensor
    z_hat: torch.Tensor | None
    p_near: torch.Tensor | None
    p_far: torch.Tensor | None


def _shift_in(state, key, x, frames):
    """Prepend cached history (zeros at stream start) along time; cache the
    tail for the next chunk."""
    if state is None:
        hist = torch.zeros(x.shape[0], x.shape[1], frames, x.shape[3],
                           dtype=x.dtype)
        hist = hist.contiguous(memory_format=torch.channels_last)
    else:
        hist = state[key]
    xx = torch.cat([hist, x], dim=2)
    new_hist = xx[:, :, xx.shape[2] - frames :, :].detach()
    return xx, new_hist


def _gconv(params, prefix, cfg, x, state, new_state):
    kt = cfg.kernel[0]
    fpad = cfg.kernel[1] // 2
    xx, new_state[prefix] = _shift_in(state, prefix, x, kt - 1)
    a = nnops.conv2d(xx, params[f"{prefix}.content.w"], params[f"{prefix}.content.b"],
                     stride=cfg.stride, padding=(0, 0, fpad, fpad))
    g = nnops.conv2d(xx, params[f"{prefix}.gate.w"], params[f"{prefix}.gate.b"],
                     stride=cfg.stride, padding=(0, 0, fpad, fpad))
    content = nnops.prelu(
        nnops.layer_norm_cf(a, params[f"{prefix}.ln.gamma"],
                            params[f"{prefix}.ln.beta"]),
        params[f"{prefix}.slope"])
    return content * torch.sigmoid(g)


def _tfcm(params, prefix, cfg, x, state, new_state, freq_dilated):
    c = cfg.channels
    for i in range(cfg.tfcm_blocks):
        p = f"{prefix}.block{i}"
        dt = 2**i
        df = dt if freq_dilated else 1
        u = nnops.conv2d(x, params[f"{p}.pw1.w"], params[f"{p}.pw1.b"])
        uu, new_state[p] = _shift_in(state, p, u, 2 * dt)
        # depthwise 3x3; the 2*dt frames of history stand in for time padding
        v = nnops.conv2d(uu, params[f"{p}.dw.w"], params[f"{p}.dw.b"],
                         dilation=(dt, df), padding=(0, 0, df, df), groups=c)
        w = nnops.conv2d(v, params[f"{p}.pw2.w"], params[f"{p}.pw2.b"])
        normed = nnops.layer_norm_c(
            nnops.prelu(w, params[f"{p}.slope"]),
            params[f"{p}.ln.gamma"], params[f"{p}.ln.beta"])
        x = x + normed
    return x


def _ftlstm_block(params, prefix, x, carry):
    """LSTM scan + projection + layer norm + residual over one axis."""
    b, c, t, f = x.shape
    if prefix.endswith("freq"):
        seq = x.permute(0, 2, 3, 1).reshape(b * t, f, c)
        out, _ = nnops.lstm_seq(seq, params[f"{prefix}.w_ih"],
                                params[f"{prefix}.w_hh"],
                                params[f"{prefix}.b_ih"],
                                params[f"{prefix}.b_hh"])
        new_carry = None
    else:
        seq = x.permute(0, 3, 2, 1).reshape(b * f, t, c)
        out, new_carry = nnops.lstm_seq(seq, params[f"{prefix}.w_ih"],
                                        params[f"{prefix}.w_hh"],
                                        params[f"{prefix}.b_ih"],
                                        params[f"{prefix}.b_hh"], state=carry)
        new_carry = tuple(s.detach() for s in new_carry)
    out = out @ params[f"{prefix}.proj.w"].T + params[f"{prefix}.proj.b"]
    if prefix.endswith("freq"):
        out = out.reshape(b, t, f, c).permute(0, 3, 1, 2)
    else:
        out = out.reshape(b, f, t, c).permute(0, 3, 2, 1)
    normed = nnops.layer_norm_cf(out, params[f"{prefix}.ln.gamma"],
                                 params[f"{prefix}.ln.beta"])
    return x + normed, new_carry


def _ftlstm(params, cfg, x, state, new_state):
    x, _ = _ftlstm_block(params, "ftlstm.freq", x, None)
    carry = state.get("ftlstm.time") if state is not None else None
    x, new_carry = _ftlstm_block(params, "ftlstm.time", x, carry)
    new_state["ftlstm.time"] = new_carry
    return x


def _trgconv(params, prefix, cfg, x, state, new_state, final):
    kt = cfg.kernel[0]
    fpad = cfg.kernel[1] // 2
    stride = (1, 1) if final else cfg.stride
    out_pad = (0, 0) if final else (0, cfg.stride[1] - 1)
    xx, new_state[prefix] = _shift_in(state, prefix, x, kt - 1)
    n = x.shape[2]

    def branch(kind):
        y = nnops.conv_transpose2d(xx, params[f"{prefix}.{kind}.w"],
                                   params[f"{prefix}.{kind}.b"],
                                   stride=stride, padding=(0, fpad),
                                   output_padding=out_pad)
        # transposed time kernel 2 over [history | chunk] emits n + 2 frames;
        # frames [1, n] are exactly "current plus previous input"
        return y[:, :, 1 : n + 1, :]

    a = branch("content")
    g = branch("gate")
    if not final:
        a = nnops.prelu(
            nnops.layer_norm_cf(a, params[f"{prefix}.ln.gamma"],
                                params[f"{prefix}.ln.beta"]),
            params[f"{prefix}.slope"])
    return a * torch.sigmoid(g)


def _decoder(params, prefix, cfg, x, skips, state, new_state):
    for j in range(cfg.fd_layers):
        p = f"{prefix}.fu{j}"
        skip = skips[cfg.fd_layers - 1 - j]
        proj = nnops.conv2d(skip, params[f"{p}.skip.w"], params[f"{p}.skip.b"])
        x = torch.cat([x, proj], dim=1)
        x = _trgconv(params, p, cfg, x, state, new_state, final=False)
        if cfg.use_tfcm:
            x = _tfcm(params, f"{p}.tfcm", cfg, x, state, new_state,
                      freq_dilated=False)
    return _trgconv(params, f"{prefix}.out", cfg, x, state, new_state, final=True)


def _dsvad(params, prefix, x):
    h = nnops.conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    pooled = h.mean(dim=3)  # [B, vad_ch, T]
    logits = pooled.permute(0, 2, 1) @ params[f"{prefix}.lin.w"].T \
        + params[f"{prefix}.lin.b"]
    return torch.sigmoid(logits[..., 0])  # [B, T]


def forward(params, cfg: NetConfig, feats, state=None):
    """Run the post-filter on [B, 6, T, F] features.

    Returns (NetworkOutput, state). Pass the returned state back in to
    continue a stream; None starts fresh (zero histories).
    """
    if feats.dim() != 4 or feats.shape[1] != cfg.input_channels \
            or feats.shape[3] != cfg.freq_bins:
        raise ConfigurationError(
            f"expected [B, {cfg.input_channels}, T, {cfg.freq_bins}] features, "
            f"got {tuple(feats.shape)}")
    new_state = {}
    # interior layers run channels-last: depthwise and transposed convs pick
    # much faster kernels there, and the (channel, freq) layer norm becomes a
    # free view instead of two layout copies
    x = feats.contiguous(memory_format=torch.channels_last)
    skips = []
    for i in range(cfg.fd_layers):
        x = _gconv(params, f"enc{i}", cfg, x, state, new_state)
        if cfg.use_tfcm:
            x = _tfcm(params, f"enc{i}.utfcm", cfg, x, state, new_state,
                      freq_dilated=True)
        skips.append(x)

    x = _ftlstm(params, cfg, x, state, new_state)

    p_near = p_far = None
    if cfg.use_dsvad:
        p_near = _dsvad(params, "dsvad.near", x)
        p_far = _dsvad(params, "dsvad.far", x)

    mask = _decoder(params, "mask", cfg, x, skips, state, new_state).contiguous()
    e_spec = feats[:, 2:4]
    s_hat = complex_mask_apply(mask, e_spec)

    z_hat = None
    if cfg.use_echo_decoder:
        z_hat = _decoder(params, "echo", cfg, x, skips, state,
                         new_state).contiguous()

    return NetworkOutput(mask, s_hat, z_hat, p_near, p_far), new_state
