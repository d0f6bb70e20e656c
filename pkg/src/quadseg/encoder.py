"""Hierarchical quadruple-attention transformer encoder.

Four token streams run through every stage: two self streams (source,
target) updated by efficient multi-head self-attention (EMSA), and two
cross streams (target-source, source-target) updated by efficient
multi-head cross-attention (EMCA) whose queries come from one self
stream's previous activation and keys/values from the other's.  Each
attention is followed by a depthwise-conv Mix-FFN; both sublayers are
residual, with layer normalization applied to attention inputs only:

    f^_s     = EMSA(LN(f_s))            + f_s
    f_s'     = MixFFN(f^_s)             + f^_s
    f^_t     = EMSA(LN(f_t))            + f_t
    f_t'     = MixFFN(f^_t)             + f^_t
    f^_ts    = EMCA(LN(f_t), LN(f_s))   + f_ts
    f_ts'    = MixFFN(f^_ts)            + f^_ts
    f^_st    = EMCA(LN(f_s), LN(f_t))   + f_st
    f_st'    = MixFFN(f^_st)            + f^_st

By default all four branches share one parameter family per block, which
makes EMCA(x, x) coincide with EMSA(x) bit-for-bit; feeding the same image
into both slots then collapses the four streams onto one.  Stages shrink
the token grid with a 4x4 non-overlapping patch embedding up front and
overlapped 3x3 stride-2 convolutions in between, so stage i runs on an
(H / 2^(i+2)) x (W / 2^(i+2)) token grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    depthwise_conv2d,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax_lastdim,
    transpose,
)

__all__ = [
    "EncoderConfig",
    "init_encoder_params",
    "trunc_normal",
    "patch_embed",
    "sequence_reduce",
    "attention",
    "emsa",
    "emca",
    "mix_ffn",
    "quad_block",
    "patch_merge",
    "encoder_forward",
    "encoder_forward_single",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Structural hyperparameters of the encoder.

    ``channels[i]`` must be divisible by ``heads[i]``; ``sr_ratios[i]`` is
    the side of the square token fold applied to the key/value path before
    attention (the learned recovery projection is applied even at ratio 1).
    """

    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32, 64)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 1, 2, 4)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    ffn_expand: int = 4
    patch: int = 4
    share_branch_weights: bool = True

    def __post_init__(self):
        n = len(self.channels)
        if not (len(self.depths) == len(self.heads) == len(self.sr_ratios) == n):
            raise ValueError("channels/depths/heads/sr_ratios lengths disagree")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_grid(self, hw: int, stage: int) -> int:
        """Token-grid side length of ``stage`` for a ``hw`` x ``hw`` image."""
        return hw // (self.patch * (1 << stage))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """N(0, std^2) truncated to +-2 std, by rejection."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _branches(cfg: EncoderConfig) -> list[str]:
    return ["all"] if cfg.share_branch_weights else ["s", "t", "ts", "st"]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Flat name -> Tensor registry.  Weights are trunc-normal(0.02), biases
    zero, layer-norm gains one."""
    p: dict[str, Tensor] = {}

    def w(name, shape):
        p[name] = Tensor(trunc_normal(rng, shape))

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape))

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape))

    for i in range(cfg.num_stages):
        c = cfg.channels[i]
        if i == 0:
            w("embed.w", (cfg.in_channels * cfg.patch ** 2, c))
            zeros("embed.b", (c,))
        else:
            w(f"s{i}.merge.w", (c, cfg.channels[i - 1], 3, 3))
            zeros(f"s{i}.merge.b", (c,))
        r = cfg.sr_ratios[i]
        e = cfg.ffn_expand * c
        for l in range(cfg.depths[i]):
            for br in _branches(cfg):
                pre = f"s{i}.b{l}.{br}"
                if br in ("all", "s", "t"):
                    ones(f"{pre}.ln.g", (c,))
                    zeros(f"{pre}.ln.b", (c,))
                else:  # cross branches normalize query and key/value inputs separately
                    ones(f"{pre}.ln_q.g", (c,))
                    zeros(f"{pre}.ln_q.b", (c,))
                    ones(f"{pre}.ln_kv.g", (c,))
                    zeros(f"{pre}.ln_kv.b", (c,))
                for m in ("q", "k", "v", "o"):
                    w(f"{pre}.attn.w{m}", (c, c))
                    zeros(f"{pre}.attn.b{m}", (c,))
                w(f"{pre}.attn.wsr", (r * r * c, c))
                zeros(f"{pre}.attn.bsr", (c,))
                w(f"{pre}.ffn.w1", (c, e))
                zeros(f"{pre}.ffn.b1", (e,))
                w(f"{pre}.ffn.dw", (e, 3, 3))
                zeros(f"{pre}.ffn.bdw", (e,))
                w(f"{pre}.ffn.w2", (e, c))
                zeros(f"{pre}.ffn.b2", (c,))
    return p


# ---------------------------------------------------------------------------
# token / spatial plumbing
# ---------------------------------------------------------------------------

def _to_spatial(tokens: Tensor, h: int, w: int) -> Tensor:
    """[h*w, C] row-major tokens -> [C, h, w]."""
    c = tokens.shape[-1]
    return transpose(reshape(tokens, (h, w, c)), (2, 0, 1))


def _to_tokens(x: Tensor) -> Tensor:
    """[C, h, w] -> [h*w, C]."""
    c, h, w = x.shape
    return reshape(transpose(x, (1, 2, 0)), (h * w, c))


def patch_embed(params: dict, img: Tensor, patch: int) -> tuple[Tensor, int, int]:
    """Fold non-overlapping ``patch`` x ``patch`` pixels into one token each,
    then apply the learned linear projection.  Returns (tokens, h, w)."""
    cin, hh, ww = img.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"image {hh}x{ww} not divisible by patch {patch}")
    h, w = hh // patch, ww // patch
    x = reshape(img, (cin, h, patch, w, patch))
    x = transpose(x, (1, 3, 0, 2, 4))                 # [h, w, Cin, p, p]
    x = reshape(x, (h * w, cin * patch * patch))
    tokens = matmul(x, params["embed.w"]) + params["embed.b"]
    return tokens, h, w


def patch_merge(params: dict, prefix: str, tokens: Tensor,
                h: int, w: int) -> tuple[Tensor, int, int]:
    """Overlapped downsampling between stages: 3x3 stride-2 convolution."""
    x = _to_spatial(tokens, h, w)
    y = conv2d(x, params[f"{prefix}.w"], stride=2, padding=1)
    y = y + reshape(params[f"{prefix}.b"], (-1, 1, 1))
    return _to_tokens(y), (h + 1) // 2, (w + 1) // 2


def sequence_reduce(params: dict, prefix: str, tokens: Tensor,
                    h: int, w: int, ratio: int) -> Tensor:
    """Shrink the key/value sequence by folding ratio x ratio token tiles and
    projecting back to C channels.  The projection is learned and applied
    even at ratio 1."""
    c = tokens.shape[-1]
    if ratio > 1:
        if h % ratio or w % ratio:
            raise ShapeError(f"token grid {h}x{w} not divisible by ratio {ratio}")
        x = reshape(tokens, (h // ratio, ratio, w // ratio, ratio, c))
        x = transpose(x, (0, 2, 1, 3, 4))
        x = reshape(x, ((h // ratio) * (w // ratio), ratio * ratio * c))
    else:
        x = tokens
    return matmul(x, params[f"{prefix}.wsr"]) + params[f"{prefix}.bsr"]


def attention(params: dict, prefix: str, q_tokens: Tensor, kv_tokens: Tensor,
              h: int, w: int, heads: int, ratio: int) -> Tensor:
    """Efficient multi-head attention.  Self-attention is the special case
    ``q_tokens is kv_tokens``; cross-attention reads queries from one stream
    and keys/values from another.  The key/value path is sequence-reduced."""
    n, c = q_tokens.shape
    dh = c // heads
    q = matmul(q_tokens, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    red = sequence_reduce(params, prefix, kv_tokens, h, w, ratio)
    k = matmul(red, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = matmul(red, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]
    nr = k.shape[0]
    q = transpose(reshape(q, (n, heads, dh)), (1, 0, 2))       # [heads, N, dh]
    k = transpose(reshape(k, (nr, heads, dh)), (1, 0, 2))
    v = transpose(reshape(v, (nr, heads, dh)), (1, 0, 2))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    out = matmul(softmax_lastdim(scores), v)                   # [heads, N, dh]
    out = reshape(transpose(out, (1, 0, 2)), (n, c))
    return matmul(out, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def emsa(params: dict, prefix: str, x: Tensor, h: int, w: int,
         heads: int, ratio: int) -> Tensor:
    """Efficient multi-head self-attention (queries = keys = values source)."""
    return attention(params, prefix, x, x, h, w, heads, ratio)


def emca(params: dict, prefix: str, x_query: Tensor, x_kv: Tensor,
         h: int, w: int, heads: int, ratio: int) -> Tensor:
    """Efficient multi-head cross-attention (queries from one stream,
    keys/values from the other)."""
    return attention(params, prefix, x_query, x_kv, h, w, heads, ratio)


def mix_ffn(params: dict, prefix: str, tokens: Tensor, h: int, w: int) -> Tensor:
    """Expand -> depthwise 3x3 over the token grid -> GELU -> project."""
    x = matmul(tokens, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"]
    s = _to_spatial(x, h, w)
    s = depthwise_conv2d(s, params[f"{prefix}.dw"], stride=1, padding=1)
    s = s + reshape(params[f"{prefix}.bdw"], (-1, 1, 1))
    x = gelu(_to_tokens(s))
    return matmul(x, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


# ---------------------------------------------------------------------------
# the quadruple block
# ---------------------------------------------------------------------------

def _ln(params: dict, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def quad_block(params: dict, cfg: EncoderConfig, stage: int, layer: int,
               f_s: Tensor, f_t: Tensor, f_ts: Tensor, f_st: Tensor,
               h: int, w: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One encoder block updating all four streams (see module docstring)."""
    heads, ratio = cfg.heads[stage], cfg.sr_ratios[stage]

    def run(attn_pre, ffn_pre, q_in, kv_in, residual):
        a = attention(params, attn_pre, q_in, kv_in, h, w, heads, ratio)
        hat = a + residual
        return mix_ffn(params, ffn_pre, hat, h, w) + hat

    if cfg.share_branch_weights:
        b = f"s{stage}.b{layer}.all"
        ns = _ln(params, f"{b}.ln", f_s)
        nt = _ln(params, f"{b}.ln", f_t)
        return (run(f"{b}.attn", f"{b}.ffn", ns, ns, f_s),
                run(f"{b}.attn", f"{b}.ffn", nt, nt, f_t),
                run(f"{b}.attn", f"{b}.ffn", nt, ns, f_ts),
                run(f"{b}.attn", f"{b}.ffn", ns, nt, f_st))

    b = f"s{stage}.b{layer}"
    ns = _ln(params, f"{b}.s.ln", f_s)
    nt = _ln(params, f"{b}.t.ln", f_t)
    return (
        run(f"{b}.s.attn", f"{b}.s.ffn", ns, ns, f_s),
        run(f"{b}.t.attn", f"{b}.t.ffn", nt, nt, f_t),
        run(f"{b}.ts.attn", f"{b}.ts.ffn",
            _ln(params, f"{b}.ts.ln_q", f_t), _ln(params, f"{b}.ts.ln_kv", f_s), f_ts),
        run(f"{b}.st.attn", f"{b}.st.ffn",
            _ln(params, f"{b}.st.ln_q", f_s), _ln(params, f"{b}.st.ln_kv", f_t), f_st),
    )


def encoder_forward(params: dict, cfg: EncoderConfig, img_s: Tensor, img_t: Tensor):
    """Run the paired encoder.

    Returns ``(feats, dims)`` where ``feats`` maps stream name (``"s"``,
    ``"t"``, ``"ts"``, ``"st"``) to the list of per-stage token tensors and
    ``dims`` is the list of per-stage (h, w) token grids.  The cross streams
    start from the *other* domain's embedded tokens: f_ts^0 is the embedded
    target, f_st^0 the embedded source.
    """
    if img_s.shape != img_t.shape:
        raise ShapeError(f"paired images disagree: {img_s.shape} vs {img_t.shape}")
    tok_s, h, w = patch_embed(params, img_s, cfg.patch)
    tok_t, _, _ = patch_embed(params, img_t, cfg.patch)
    f_s, f_t, f_ts, f_st = tok_s, tok_t, tok_t, tok_s
    feats = {"s": [], "t": [], "ts": [], "st": []}
    dims: list[tuple[int, int]] = []
    for i in range(cfg.num_stages):
        if i > 0:
            pre = f"s{i}.merge"
            f_s, h2, w2 = patch_merge(params, pre, f_s, h, w)
            f_t, _, _ = patch_merge(params, pre, f_t, h, w)
            f_ts, _, _ = patch_merge(params, pre, f_ts, h, w)
            f_st, _, _ = patch_merge(params, pre, f_st, h, w)
            h, w = h2, w2
        if h < 1 or w < 1:
            raise ShapeError(f"stage {i} token grid collapsed to {h}x{w}")
        for l in range(cfg.depths[i]):
            f_s, f_t, f_ts, f_st = quad_block(params, cfg, i, l,
                                              f_s, f_t, f_ts, f_st, h, w)
        feats["s"].append(f_s)
        feats["t"].append(f_t)
        feats["ts"].append(f_ts)
        feats["st"].append(f_st)
        dims.append((h, w))
    return feats, dims


def encoder_forward_single(params: dict, cfg: EncoderConfig, img: Tensor):
    """Source-free single-stream forward (self-attention path only).

    With shared branch weights this equals every stream of
    ``encoder_forward(params, cfg, img, img)`` exactly; without sharing it
    follows the target branch.
    """
    tok, h, w = patch_embed(params, img, cfg.patch)
    f = tok
    feats: list[Tensor] = []
    dims: list[tuple[int, int]] = []
    for i in range(cfg.num_stages):
        if i > 0:
            f, h, w = patch_merge(params, f"s{i}.merge", f, h, w)
        for l in range(cfg.depths[i]):
            b = (f"s{i}.b{l}.all" if cfg.share_branch_weights
                 else f"s{i}.b{l}.t")
            n = _ln(params, f"{b}.ln", f)
            a = attention(params, f"{b}.attn", n, n, h, w,
                          cfg.heads[i], cfg.sr_ratios[i])
            hat = a + f
            f = mix_ffn(params, f"{b}.ffn", hat, h, w) + hat
        feats.append(f)
        dims.append((h, w))
    return feats, dims
