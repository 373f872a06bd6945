"""Multi-task training objective for the neural post-filter.

Complex spectra are carried as real tensors with a trailing (re, im) axis.
The objective combines an echo-weighted compressed spectral loss on the
enhanced output, a plain compressed loss, BCE on the dual VAD heads, an MAE
echo-estimation loss, and a one-sided penalty on residual energy above the
target:

    final = echo_aware + 0.2 * mask + 0.1 * dtd + 0.05 * echo + asym
"""

import json
from dataclasses import asdict, dataclass

import torch

COMPRESSION = 0.3
PHASE_WEIGHT = 0.3
ECHO_WEIGHT_LAMBDA = 2.0
WEIGHT_EPS = 1e-8
MAG_EPS = 1e-12
PROB_CLAMP = 1e-7

MASK_COEFF = 0.2
DTD_COEFF = 0.1
ECHO_COEFF = 0.05


@dataclass
class LossReport:
    echo_aware: float
    mask: float
    dtd: float
    dtd_near: float
    dtd_far: float
    echo: float
    asym: float
    final: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _power(x):
    """Squared magnitude of a (re, im) tensor, last axis."""
    return (x**2).sum(dim=-1)


def _mag(x):
    return torch.sqrt(_power(x) + MAG_EPS)


def _compressed(x, c=COMPRESSION):
    """Magnitude^c and the compressed complex vector mag^(c-1) * (re, im)."""
    p = _power(x) + MAG_EPS
    mag_c = p ** (c / 2.0)
    vec = p.unsqueeze(-1) ** ((c - 1.0) / 2.0) * x
    return mag_c, vec


def loss_echo(z_hat, z):
    """Mean absolute error between complex spectra."""
    return _mag(z_hat - z).mean()


def _weighted_mask_terms(s_hat, s, weight):
    mh, vh = _compressed(s_hat)
    m, v = _compressed(s)
    mag_term = (weight * (mh - m) ** 2).mean()
    complex_term = (weight * ((vh - v) ** 2).sum(dim=-1)).mean()
    return mag_term + PHASE_WEIGHT * complex_term


def loss_mask(s_hat, s):
    """Compressed spectral MSE: magnitude term plus phase-aware term."""
    return _weighted_mask_terms(s_hat, s, torch.ones(()))


def loss_echo_aware(s_hat, s, z):
    """loss_mask with each bin weighted up where the echo dominates."""
    pz = _power(z)
    ps = _power(s)
    weight = 1.0 + ECHO_WEIGHT_LAMBDA * pz / (pz + ps + WEIGHT_EPS)
    return _weighted_mask_terms(s_hat, s, weight)


def loss_asym(s_hat, s):
    """One-sided penalty on compressed magnitude overshoot."""
    mh, _ = _compressed(s_hat)
    m, _ = _compressed(s)
    return torch.clamp(mh - m, min=0.0).pow(2).mean()


def _bce(p, labels):
    p = torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p)).mean()


def loss_dtd(p_near, near_labels, p_far, far_labels):
    """BCE per VAD stream; total is their sum."""
    near = _bce(p_near, near_labels)
    far = _bce(p_far, far_labels)
    return near + far, near, far


def loss_final(s_hat, s, z_hat, z, p_near, near_labels, p_far, far_labels):
    """Returns (scalar for backprop, LossReport for logging).

    The report's `final` is recomputed from the logged component floats so
    the mixing identity holds exactly on what gets serialized.
    """
    ea = loss_echo_aware(s_hat, s, z)
    mask = loss_mask(s_hat, s)
    dtd, near, far = loss_dtd(p_near, near_labels, p_far, far_labels)
    echo = loss_echo(z_hat, z)
    asym = loss_asym(s_hat, s)
    total = ea + MASK_COEFF * mask + DTD_COEFF * dtd + ECHO_COEFF * echo + asym

    ea_f = float(ea.detach())
    mask_f = float(mask.detach())
    dtd_f = float(dtd.detach())
    echo_f = float(echo.detach())
    asym_f = float(asym.detach())
    report = LossReport(
        echo_aware=ea_f,
        mask=mask_f,
        dtd=dtd_f,
        dtd_near=float(near.detach()),
        dtd_far=float(far.detach()),
        echo=echo_f,
        asym=asym_f,
        final=ea_f + MASK_COEFF * mask_f + DTD_COEFF * dtd_f
        + ECHO_COEFF * echo_f + asym_f,
    )
    return total, report
