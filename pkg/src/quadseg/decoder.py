"""All-MLP decoder over the four-stream feature pyramid.

Every stage of a stream is linearly unified to ``embed_dim`` channels,
bilinearly upsampled to the stage-0 grid (H/4 x W/4) and concatenated into
a per-stream map phi of 4 * embed_dim channels.  A domain head then fuses
the self map with its cross counterpart -- (phi_s, phi_ts) for the source
mask, (phi_t, phi_st) for the target mask -- through a linear + ReLU fuse
layer and a linear classifier.  Source-free inference feeds (phi_t, phi_t)
into the target head, which by the encoder's degeneracy property equals
the paired forward with the target image in both slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, trunc_normal
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    relu,
    reshape,
    softmax_lastdim,
    transpose,
    upsample_bilinear,
)

__all__ = [
    "DecoderConfig",
    "init_decoder_params",
    "unify_and_upsample",
    "fuse_and_predict",
    "decode_pair",
    "decode_single",
    "logits_to_grid",
    "mask_probs",
]


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64          # C_e: common channel width after unification
    num_classes: int = 2
    extra_hidden: bool = False   # ablation: one more hidden MLP in the head
    share_heads: bool = True     # one fuse/classifier serving both domains

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + line)")


def _heads(dec_cfg: DecoderConfig) -> list[str]:
    return ["head"] if dec_cfg.share_heads else ["head_src", "head_tgt"]


def init_decoder_params(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    ce = dec_cfg.embed_dim
    for i, c in enumerate(enc_cfg.channels):
        p[f"dec.unify{i}.w"] = Tensor(trunc_normal(rng, (c, ce)))
        p[f"dec.unify{i}.b"] = Tensor(np.zeros(ce))
    fuse_in = 2 * enc_cfg.num_stages * ce
    for h in _heads(dec_cfg):
        p[f"dec.{h}.fuse.w"] = Tensor(trunc_normal(rng, (fuse_in, ce)))
        p[f"dec.{h}.fuse.b"] = Tensor(np.zeros(ce))
        if dec_cfg.extra_hidden:
            p[f"dec.{h}.hidden.w"] = Tensor(trunc_normal(rng, (ce, ce)))
            p[f"dec.{h}.hidden.b"] = Tensor(np.zeros(ce))
        p[f"dec.{h}.cls.w"] = Tensor(trunc_normal(rng, (ce, dec_cfg.num_classes)))
        p[f"dec.{h}.cls.b"] = Tensor(np.zeros(dec_cfg.num_classes))
    return p


def unify_and_upsample(params: dict, enc_cfg: EncoderConfig,
                       stage_feats: list[Tensor],
                       dims: list[tuple[int, int]]) -> Tensor:
    """Map each per-stage token tensor to embed_dim channels, upsample all to
    the stage-0 grid and concatenate: [h0*w0, num_stages*embed_dim]."""
    if len(stage_feats) != enc_cfg.num_stages or len(dims) != enc_cfg.num_stages:
        raise ShapeError(
            f"expected {enc_cfg.num_stages} stage features, got {len(stage_feats)}")
    h0, w0 = dims[0]
    pieces = []
    for i, (f, (h, w)) in enumerate(zip(stage_feats, dims)):
        u = matmul(f, params[f"dec.unify{i}.w"]) + params[f"dec.unify{i}.b"]
        if (h, w) != (h0, w0):
            ce = u.shape[-1]
            s = transpose(reshape(u, (h, w, ce)), (2, 0, 1))
            s = upsample_bilinear(s, h0, w0)
            u = reshape(transpose(s, (1, 2, 0)), (h0 * w0, ce))
        pieces.append(u)
    return concat(pieces, axis=-1)


def fuse_and_predict(params: dict, dec_cfg: DecoderConfig, head: str,
                     phi_a: Tensor, phi_b: Tensor) -> Tensor:
    """Concatenate two phi maps and classify: [h0*w0, num_classes] logits."""
    if phi_a.shape != phi_b.shape:
        raise ShapeError(f"phi shapes disagree: {phi_a.shape} vs {phi_b.shape}")
    x = concat([phi_a, phi_b], axis=-1)
    x = relu(matmul(x, params[f"dec.{head}.fuse.w"]) + params[f"dec.{head}.fuse.b"])
    if dec_cfg.extra_hidden:
        x = relu(matmul(x, params[f"dec.{head}.hidden.w"])
                 + params[f"dec.{head}.hidden.b"])
    return matmul(x, params[f"dec.{head}.cls.w"]) + params[f"dec.{head}.cls.b"]


def _head_name(dec_cfg: DecoderConfig, domain: str) -> str:
    if dec_cfg.share_heads:
        return "head"
    return "head_src" if domain == "src" else "head_tgt"


def decode_pair(params: dict, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                feats: dict, dims: list[tuple[int, int]],
                use_cross_src: bool = True, use_cross_tgt: bool = True):
    """Produce both domain logit maps plus the augmented (pre-fuse) target
    features used by the prototype machinery.

    Returns ``(logits_s, logits_t, aug_t)`` with logits of shape
    [h0*w0, num_classes] and ``aug_t`` of shape [h0*w0, 2*num_stages*embed_dim].
    The cross toggles substitute a stream's own self map for its cross map,
    which is the ablation that disables cross-attention features per domain.
    """
    phi_s = unify_and_upsample(params, enc_cfg, feats["s"], dims)
    phi_t = unify_and_upsample(params, enc_cfg, feats["t"], dims)
    phi_ts = unify_and_upsample(params, enc_cfg, feats["ts"], dims) \
        if use_cross_src else phi_s
    phi_st = unify_and_upsample(params, enc_cfg, feats["st"], dims) \
        if use_cross_tgt else phi_t
    aug_t = concat([phi_t, phi_st], axis=-1)
    logits_s = fuse_and_predict(params, dec_cfg, _head_name(dec_cfg, "src"),
                                phi_s, phi_ts)
    logits_t = fuse_and_predict(params, dec_cfg, _head_name(dec_cfg, "tgt"),
                                phi_t, phi_st)
    return logits_s, logits_t, aug_t


def decode_single(params: dict, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                  feats: list[Tensor], dims: list[tuple[int, int]]):
    """Source-free path: fuse (phi_t, phi_t) through the target head.

    Returns ``(logits, aug)`` shaped like the target outputs of
    ``decode_pair``.
    """
    phi = unify_and_upsample(params, enc_cfg, feats, dims)
    logits = fuse_and_predict(params, dec_cfg, _head_name(dec_cfg, "tgt"), phi, phi)
    return logits, concat([phi, phi], axis=-1)


def logits_to_grid(logits: Tensor, h: int, w: int,
                   out_h: int | None = None, out_w: int | None = None) -> Tensor:
    """[h*w, K] token logits -> [K, H, W] map, optionally upsampled."""
    k = logits.shape[-1]
    g = transpose(reshape(logits, (h, w, k)), (2, 0, 1))
    if out_h is not None and (out_h, out_w) != (h, w):
        g = upsample_bilinear(g, out_h, out_w)
    return g


def mask_probs(logits_grid: Tensor) -> Tensor:
    """Softmax over the class axis of a [K, H, W] logit map."""
    k, h, w = logits_grid.shape
    t = transpose(logits_grid, (1, 2, 0))
    p = softmax_lastdim(t)
    return transpose(p, (2, 0, 1))
