"""Segmentation and adversarial losses, the patch discriminator, and the
AdamW optimizer with its warmup/decay schedule.

Adversarial training is the alternating two-optimizer scheme: the
discriminator minimizes ``disc_loss`` on detached mask probabilities, then
the generator minimizes ``gen_adv_loss`` (the non-saturating term) through
a fresh discriminator forward whose weights act as constants.  Generator
and discriminator parameters are disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import trunc_normal
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    leaky_relu,
    log_softmax_lastdim,
    reshape,
    softplus,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "DiscConfig",
    "init_disc_params",
    "discriminator_forward",
    "seg_cross_entropy",
    "disc_loss",
    "gen_adv_loss",
    "adversarial_losses",
    "total_loss",
    "lr_schedule",
    "AdamW",
    "OptimizerDiverged",
]


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscConfig:
    """Fully-convolutional patch discriminator: kernel 4, stride 2 per layer.

    ``channels`` ends in 1 (the per-patch real/fake logit).  The desk-scale
    stack is five layers; micro configs may use fewer so tiny inputs keep a
    positive output size.
    """

    in_channels: int = 2
    channels: tuple[int, ...] = (8, 16, 32, 64, 1)
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not self.channels or self.channels[-1] != 1:
            raise ValueError("discriminator channels must end in 1")


def init_disc_params(cfg: DiscConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels):
        p[f"disc.conv{i}.w"] = Tensor(trunc_normal(rng, (cout, cin, 4, 4)))
        p[f"disc.conv{i}.b"] = Tensor(np.zeros(cout))
        cin = cout
    return p


def discriminator_forward(params: dict, cfg: DiscConfig, probs: Tensor) -> Tensor:
    """Mask probabilities [C, H, W] -> patch logits [1, H', W'].

    Leaky-ReLU between layers, none after the last.  Raises a shape error
    when the input is smaller than the stack's receptive stride chain.
    """
    x = probs
    last = len(cfg.channels) - 1
    for i in range(len(cfg.channels)):
        x = conv2d(x, params[f"disc.conv{i}.w"], stride=2, padding=1)
        x = x + reshape(params[f"disc.conv{i}.b"], (-1, 1, 1))
        if i < last:
            x = leaky_relu(x, cfg.leaky_slope)
    return x


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def seg_cross_entropy(logits: Tensor, labels: np.ndarray,
                      valid: np.ndarray | None = None,
                      class_weights: np.ndarray | None = None):
    """Pixel cross-entropy on a [K, H, W] logit map.

    ``labels`` is an integer class map, ``valid`` an optional boolean mask;
    invalid pixels contribute nothing.  The summed loss is normalized by the
    total weight of valid pixels (plain count when ``class_weights`` is
    None), so magnitudes are comparable across crops and class mixes.

    Returns ``(loss, n_valid)``; ``n_valid == 0`` is the no-signal flag and
    comes with a constant zero loss.
    """
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ShapeError(f"labels {labels.shape} vs logits spatial {(h, w)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label values outside [0, {k})")
    mask = np.ones((h, w), dtype=bool) if valid is None else valid.astype(bool)
    if mask.shape != (h, w):
        raise ShapeError(f"valid mask {mask.shape} vs logits spatial {(h, w)}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        return Tensor(0.0), 0
    onehot = np.zeros((h, w, k))
    iy, ix = np.nonzero(mask)
    onehot[iy, ix, labels[iy, ix]] = 1.0
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (k,):
            raise ShapeError(f"class_weights shape {cw.shape}, expected ({k},)")
        onehot *= cw
    total_w = onehot.sum()
    lp = log_softmax_lastdim(transpose(logits, (1, 2, 0)))
    loss = -(1.0 / total_w) * tsum(lp * Tensor(onehot))
    return loss, n_valid


def disc_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Train D to score real high, fake low: softplus(-D(real)) + softplus(D(fake)),
    each averaged over patches."""
    return tmean(softplus(-d_real)) + tmean(softplus(d_fake))


def gen_adv_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating generator term: push D(fake) toward real."""
    return tmean(softplus(-d_fake))


def adversarial_losses(d_source: Tensor, d_target: Tensor):
    """Both adversarial objectives from one pair of discriminator outputs;
    source masks play the real role, target masks the fake role."""
    return disc_loss(d_source, d_target), gen_adv_loss(d_target)


def total_loss(l_seg_s: Tensor, l_seg_t: Tensor, g_loss: Tensor,
               beta1: float = 0.1, beta2: float = 1.0) -> Tensor:
    """Weighted training objective: l_seg_s + beta1 * l_seg_t + beta2 * g_adv."""
    return l_seg_s + beta1 * l_seg_t + beta2 * g_loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class OptimizerDiverged(FloatingPointError):
    """Non-finite gradient encountered; carries the offending parameter."""

    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient for {name!r} at step {step}")
        self.name = name
        self.step = step


def lr_schedule(step: int, base: float, warmup: int, total: int | None) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then linear decay to
    zero at ``total``.  Steps count from 1; ``total=None`` holds ``base``
    after warmup (constant schedule)."""
    if step < 1:
        raise ValueError("optimizer steps count from 1")
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    if total is None:
        return base
    if step >= total:
        return 0.0
    return base * (total - step) / (total - warmup)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Moments are allocated lazily per parameter name; ``step`` mutates the
    parameter tensors in place.  State round-trips through checkpoints via
    ``state_tensors`` / ``load_state``.
    """

    def __init__(self, lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup: int = 150, total: int | None = 4000):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.warmup = warmup
        self.total = total
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        return lr_schedule(step, self.lr, self.warmup, self.total)

    def step(self, params: dict[str, Tensor],
             grads: dict[str, np.ndarray]) -> float:
        """Apply one update using ``grads`` (name -> array); parameters
        without a gradient entry are skipped.  Returns the lr used."""
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise OptimizerDiverged(name, self.t)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)
        return lr

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, m in self.m.items():
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = np.array(arr)
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = np.array(arr)
