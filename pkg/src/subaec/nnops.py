"""Tensor op layer for the neural post-filter.

Thin, explicit wrappers around torch primitives so the rest of the package
depends on one small surface: convolutions with explicit asymmetric padding
(causal time padding is always applied by the caller), a hand-rolled LSTM
cell, layer normalization over arbitrary axes, an Adam optimizer with NaN
rejection, a finite-difference gradient checker, and a self-describing
binary checkpoint container.

Training and inference run in float32; gradient verification runs the same
graph in float64 where central differences are trustworthy at step 1e-5.
"""

import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F

from subaec.errors import ConfigurationError, TrainingError

CHECKPOINT_MAGIC = b"STFGCRN1"


def conv2d(x, w, b=None, stride=(1, 1), dilation=(1, 1), padding=(0, 0, 0, 0),
           groups=1):
    """Cross-correlation over [B, C, T, F] with explicit padding.

    `padding` is (time_before, time_after, freq_before, freq_after); a causal
    layer passes its full kernel history as time_before and zero after.
    """
    tb, ta, fb, fa = padding
    if tb == ta == 0 and fb == fa:
        # symmetric padding stays inside the conv kernel (no materialized copy)
        return F.conv2d(x, w, b, stride=stride, padding=(0, fb),
                        dilation=dilation, groups=groups)
    if tb or ta or fb or fa:
        x = F.pad(x, (fb, fa, tb, ta))
    return F.conv2d(x, w, b, stride=stride, dilation=dilation, groups=groups)


def conv_transpose2d(x, w, b=None, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)):
    return F.conv_transpose2d(x, w, b, stride=stride, padding=padding,
                              output_padding=output_padding)


def lstm_step(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """One LSTM cell update; gate blocks ordered (input, forget, cell, output)."""
    gates = x @ w_ih.T + h @ w_hh.T + b_ih + b_hh
    i, f, g, o = gates.chunk(4, dim=-1)
    i = torch.sigmoid(i)
    f = torch.sigmoid(f)
    g = torch.tanh(g)
    o = torch.sigmoid(o)
    c_next = f * c + i * g
    h_next = o * torch.tanh(c_next)
    return h_next, c_next


def lstm_seq(x, w_ih, w_hh, b_ih, b_hh, state=None):
    """Scan the cell over axis 1 of x: [batch, steps, features] -> same shape
    with hidden-size features. Returns (output, (h, c)) so streaming callers
    can carry state between chunks."""
    batch, steps, _ = x.shape
    hidden = w_hh.shape[1]
    if state is None:
        h = x.new_zeros(batch, hidden)
        c = x.new_zeros(batch, hidden)
    else:
        h, c = state
    outs = []
    for t in range(steps):
        h, c = lstm_step(x[:, t], h, c, w_ih, w_hh, b_ih, b_hh)
        outs.append(h)
    return torch.stack(outs, dim=1), (h, c)


def prelu(x, slope):
    return F.prelu(x, slope)


# the rest of the documented elementwise surface; named here so callers never
# reach past this module for a primitive
sigmoid = torch.sigmoid
tanh = torch.tanh
add = torch.add
mul = torch.mul
concat = torch.cat
split = torch.split
pad = F.pad


def layer_norm(x, axes, gamma, beta, eps=1e-5):
    """Normalize to zero mean / unit variance over `axes`, then affine.

    gamma and beta must broadcast against x (singleton on the non-normalized
    axes); torch's own layer_norm only handles trailing axes, and the network
    normalizes over (channel, frequency) with time in between. Variance is
    spelled out with mean ops (torch's multi-axis var takes a slow path).
    """
    mean = x.mean(dim=axes, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=axes, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def layer_norm_cf(x, gamma, beta, eps=1e-5):
    """layer_norm over axes (1, 3) of [B, C, T, F], tuned for channels-last.

    Statistics and affine match layer_norm(x, (1, 3), gamma, beta) up to
    summation order. When x is channels_last the permute to [B, T, F, C] is
    a free view and torch's fused layer_norm runs without any layout copy;
    gamma and beta stay stored as [1, C, 1, F].
    """
    c, f = x.shape[1], x.shape[3]
    xv = x.permute(0, 2, 3, 1)
    w = gamma.reshape(c, f).t().contiguous()
    b = beta.reshape(c, f).t().contiguous()
    y = F.layer_norm(xv, (f, c), w, b, eps)
    return y.permute(0, 3, 1, 2)


def layer_norm_c(x, gamma, beta, eps=1e-5):
    """layer_norm over the channel axis of [B, C, T, F] (axes=(1,)).

    Per-position statistics: each (batch, time, freq) site is normalized over
    channels alone, so the op never mixes information across time or
    frequency. gamma and beta are per-channel, stored [1, C, 1, 1]. Same
    channels-last view trick as layer_norm_cf.
    """
    c = x.shape[1]
    xv = x.permute(0, 2, 3, 1)
    y = F.layer_norm(xv, (c,), gamma.reshape(c), beta.reshape(c), eps)
    return y.permute(0, 3, 1, 2)


class Adam:
    """Adam with bias correction; a NaN or Inf gradient aborts the step."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ConfigurationError("learning rate must not be negative")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}

    @torch.no_grad()
    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)

    def zero_grad(self):
        for p in self.params.values():
            if p.grad is not None:
                p.grad = None


def finite_difference_check(fn, tensors, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn maps the list of tensors to a scalar; everything is evaluated in
    float64. Checks every element, so keep the tensors small.
    """
    tensors = [t.detach().double().requires_grad_(True) for t in tensors]
    loss = fn(tensors)
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.reshape(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = fn(tensors).item()
                flat[i] = orig - step
                lo = fn(tensors).item()
                flat[i] = orig
                fd[i] = (hi - lo) / (2.0 * step)
            an = g.reshape(-1)
            scale = float(an.abs().max()) + 1e-12
            err = float((fd - an).abs().max()) / scale
            worst = max(worst, err)
    return worst


def save_checkpoint(path, params, extra=None):
    """Write tensors as self-describing records; hyperparameters go to a
    JSON sidecar next to the weights.

    Record layout after the 8-byte magic: name length (uint32 LE), utf-8
    name, rank (uint32), dims (uint32 each), then the float32 LE values.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name in sorted(params):
            tensor = params[name]
            data = tensor.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4", copy=False).tobytes())
    if extra is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(extra, f, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint back; returns (params, extra) with extra = {} when
    no sidecar exists."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path} is not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    params = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        params[name] = torch.from_numpy(data.copy()).reshape(dims)
    extra = {}
    sidecar = str(path) + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            extra = json.load(f)
    return params, extra


def kaiming_conv_init(shape, generator):
    """Kaiming-uniform weights for a conv kernel [out, in, kt, kf]."""
    fan_in = shape[1] * shape[2] * shape[3]
    bound = np.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=generator) * 2 - 1) * bound


def lstm_weight_init(input_size, hidden_size, generator):
    """Orthogonal recurrent block, uniform input block, zero biases."""
    w_ih = (torch.rand(4 * hidden_size, input_size, generator=generator) * 2 - 1) \
        / np.sqrt(input_size)
    blocks = []
    for _ in range(4):
        a = torch.randn(hidden_size, hidden_size, generator=generator)
        q, r = torch.linalg.qr(a)
        q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
        blocks.append(q)
    w_hh = torch.cat(blocks, dim=0)
    return w_ih, w_hh, torch.zeros(4 * hidden_size), torch.zeros(4 * hidden_size)
