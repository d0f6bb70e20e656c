"""Self-training machinery: warm-up pseudo-labels, the prototype bank with
EMA class centroids, online pseudo-label correction, and two-way SSIM image
pairing.

Everything here is label plumbing -- plain float64 numpy with no gradient
flow.  Features enter already L2-normalized by the caller (the trainer),
and warm-up probabilities are treated as immutable: correction multiplies
them by prototype-affinity weights and renormalizes, it never overwrites
them, which is the guard against the trivial self-confirming solution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .pnm import read_f64, read_pgm, write_f64, write_pgm
from .tensor import Tensor, interp_matrix
from .decoder import mask_probs
from .model import infer_target_sourcefree

__all__ = [
    "PrototypeBank",
    "PseudoLabels",
    "PairSet",
    "batch_prototype",
    "ema_update",
    "initialize_bank",
    "correct_pseudo_labels",
    "warmup_pseudo_labels",
    "save_pseudo_labels",
    "load_pseudo_labels",
    "to_grayscale",
    "downscale_gray",
    "ssim",
    "pair_two_way",
    "write_pairs",
    "read_pairs",
]


# ---------------------------------------------------------------------------
# prototype bank
# ---------------------------------------------------------------------------

@dataclass
class PrototypeBank:
    """Per-class EMA centroids in augmented-feature space ([K, D])."""

    eta: np.ndarray
    weight: np.ndarray            # per-class accumulated update weight
    lam: float = 0.9999
    initialized: bool = False

    @classmethod
    def create(cls, num_classes: int, dim: int, lam: float = 0.9999):
        return cls(eta=np.zeros((num_classes, dim)),
                   weight=np.zeros(num_classes), lam=lam)


def batch_prototype(feats: np.ndarray, probs: np.ndarray, c: int):
    """Probability-weighted centroid of class ``c`` over one batch.

    ``feats`` is [N, D], ``probs`` is [N, K]; a pixel belongs to the batch
    of class c when argmax(probs) == c, and contributes with weight
    probs[:, c].  Returns None (the no-update signal) when the class is
    absent from the batch.
    """
    if feats.shape[0] != probs.shape[0]:
        raise ValueError(f"feats {feats.shape} vs probs {probs.shape}")
    sel = probs.argmax(axis=1) == c
    if not sel.any():
        return None
    w = probs[sel, c]
    total = w.sum()
    if total <= 0.0:
        return None
    return (w[:, None] * feats[sel]).sum(axis=0) / total


def ema_update(bank: PrototypeBank, c: int, eta_prime: np.ndarray) -> None:
    """eta_c <- lam * eta_c + (1 - lam) * eta'_c, in place."""
    if not np.all(np.isfinite(eta_prime)):
        raise FloatingPointError(f"non-finite prototype update for class {c}")
    bank.eta[c] = bank.lam * bank.eta[c] + (1.0 - bank.lam) * eta_prime
    bank.weight[c] += 1.0


def initialize_bank(bank: PrototypeBank, batches) -> None:
    """One full accumulation pass: ``batches`` yields (feats [N, D],
    probs [N, K]) chunks; sets each prototype to the global weighted
    centroid of its class so the first online corrections are meaningful."""
    k, d = bank.eta.shape
    sums = np.zeros((k, d))
    weights = np.zeros(k)
    for feats, probs in batches:
        hard = probs.argmax(axis=1)
        for c in range(k):
            sel = hard == c
            if sel.any():
                w = probs[sel, c]
                sums[c] += (w[:, None] * feats[sel]).sum(axis=0)
                weights[c] += w.sum()
    nonzero = weights > 0
    bank.eta[nonzero] = sums[nonzero] / weights[nonzero, None]
    bank.weight[:] = weights
    bank.initialized = True


# ---------------------------------------------------------------------------
# pseudo labels
# ---------------------------------------------------------------------------

@dataclass
class PseudoLabels:
    """Soft per-pixel class probabilities plus the validity mask."""

    probs: np.ndarray             # [K, H, W], sums to 1 per pixel
    valid: np.ndarray             # [H, W] bool, max prob >= tau
    provenance: str = "warm-up"   # "warm-up" | "corrected"

    def hard(self) -> np.ndarray:
        return self.probs.argmax(axis=0).astype(np.uint8)

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=0)


def _upsample_channels(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of [K, h, w] using the shared
    interpolation convention."""
    k, h, w = arr.shape
    ay = interp_matrix(h, out_h)
    ax = interp_matrix(w, out_w)
    return np.einsum("pi,kiw,qw->kpq", ay, arr, ax, optimize=True)


def correct_pseudo_labels(labels: PseudoLabels, feats: np.ndarray,
                          grid: tuple[int, int], bank: PrototypeBank,
                          temperature: float = 1.0,
                          tau: float = 0.9) -> PseudoLabels:
    """Reweight FIXED warm-up probabilities by prototype affinity.

    ``feats`` [N, D] are the augmented target features on the ``grid``
    token lattice, on their natural scale — the feature norms carry class
    signal, and ``temperature`` converts distance gaps to affinity odds.
    The affinity k(f, c) = softmax_c(-||f - eta_c|| / T) is computed per token,
    bilinearly upsampled to the label resolution, multiplied into the
    warm-up probabilities and renormalized; the validity mask is then
    recomputed at ``tau``.  When all prototypes are equidistant from a
    pixel's feature the pixel is unchanged.
    """
    if not bank.initialized:
        raise ValueError("prototype bank not initialized; run the warm-up pass")
    kk, hh, ww = labels.probs.shape
    h, w = grid
    if feats.shape[0] != h * w:
        raise ValueError(f"{feats.shape[0]} features for grid {h}x{w}")
    if feats.shape[1] != bank.eta.shape[1]:
        raise ValueError(f"feature dim {feats.shape[1]} vs bank {bank.eta.shape[1]}")
    diff = feats[:, None, :] - bank.eta[None, :, :]       # [N, K, D]
    dist = np.sqrt((diff * diff).sum(axis=2))
    z = -dist / temperature
    z -= z.max(axis=1, keepdims=True)
    kw = np.exp(z)
    kw /= kw.sum(axis=1, keepdims=True)                   # [N, K]
    kw_grid = kw.T.reshape(kk, h, w)
    kw_full = _upsample_channels(kw_grid, hh, ww)
    p = kw_full * labels.probs
    p /= p.sum(axis=0, keepdims=True)
    return PseudoLabels(probs=p, valid=p.max(axis=0) >= tau,
                        provenance="corrected")


def warmup_pseudo_labels(params: dict, enc_cfg, dec_cfg, images,
                         tau: float = 0.9) -> list[PseudoLabels]:
    """Source-free inference over ``images`` ([3, H, W] arrays); valid where
    the max class probability reaches ``tau``."""
    out = []
    for img in images:
        logits, _, _ = infer_target_sourcefree(params, enc_cfg, dec_cfg,
                                               Tensor(img))
        probs = mask_probs(logits).data
        out.append(PseudoLabels(probs=probs, valid=probs.max(axis=0) >= tau,
                                provenance="warm-up"))
    return out


def save_pseudo_labels(directory: str, sample_id: int, pl: PseudoLabels) -> None:
    """Persist as hard-label PGM plus f64 max-probability map."""
    os.makedirs(directory, exist_ok=True)
    write_pgm(os.path.join(directory, f"{sample_id:04d}.pgm"), pl.hard())
    write_f64(os.path.join(directory, f"{sample_id:04d}.conf"), pl.confidence())


def load_pseudo_labels(directory: str, sample_id: int, num_classes: int,
                       tau: float) -> PseudoLabels:
    """Rebuild soft probabilities from the persisted pair.  Exact for two
    classes; for more the non-argmax remainder is spread uniformly."""
    hard = read_pgm(os.path.join(directory, f"{sample_id:04d}.pgm"))
    conf = read_f64(os.path.join(directory, f"{sample_id:04d}.conf"), hard.shape)
    h, w = hard.shape
    probs = np.full((num_classes, h, w),
                    0.0 if num_classes == 2 else 1.0 / num_classes)
    rest = (1.0 - conf) / (num_classes - 1)
    for c in range(num_classes):
        probs[c] = np.where(hard == c, conf, rest)
    return PseudoLabels(probs=probs, valid=conf >= tau, provenance="warm-up")


# ---------------------------------------------------------------------------
# SSIM and two-way pairing
# ---------------------------------------------------------------------------

_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """[3, H, W] -> [H, W] luma (ITU-R 601 weights)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def downscale_gray(g: np.ndarray, target: int = 64) -> np.ndarray:
    """Block-mean downscale of a square grayscale image to target x target."""
    h, w = g.shape
    if (h, w) == (target, target):
        return g
    if h % target or w % target:
        raise ValueError(f"{h}x{w} not divisible by target {target}")
    bh, bw = h // target, w // target
    return g.reshape(target, bh, target, bw).mean(axis=(1, 3))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles of two
    grayscale images in [0, 1].  K1 = 0.01, K2 = 0.03, L = 1."""
    if a.shape != b.shape:
        raise ValueError(f"image sizes disagree: {a.shape} vs {b.shape}")
    h, w = a.shape
    th, tw = h // window, w // window
    if th < 1 or tw < 1:
        raise ValueError(f"image {h}x{w} smaller than window {window}")
    at = a[:th * window, :tw * window].reshape(th, window, tw, window)
    bt = b[:th * window, :tw * window].reshape(th, window, tw, window)
    mu_a = at.mean(axis=(1, 3))
    mu_b = bt.mean(axis=(1, 3))
    da = at - mu_a[:, None, :, None]
    db = bt - mu_b[:, None, :, None]
    var_a = (da * da).mean(axis=(1, 3))
    var_b = (db * db).mean(axis=(1, 3))
    cov = (da * db).mean(axis=(1, 3))
    score = ((2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)) \
        / ((mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2))
    return float(score.mean())


@dataclass
class PairSet:
    """Two-way best-similarity pairing between source and target corpora."""

    pairs: list = field(default_factory=list)    # (source_id, target_id)
    sims: list = field(default_factory=list)
    origins: list = field(default_factory=list)  # "s" | "t" | "both"


def pair_two_way(src_gray: list, tgt_gray: list, window: int = 8) -> PairSet:
    """For every source image its most similar target (P_s) and for every
    target its most similar source (P_t); the union with duplicates merged.
    Every image therefore appears in at least one pair and
    |P| <= |src| + |tgt|."""
    if not src_gray or not tgt_gray:
        raise ValueError("pairing needs non-empty corpora on both sides")
    ns, nt = len(src_gray), len(tgt_gray)
    sim = np.empty((ns, nt))
    for i, a in enumerate(src_gray):
        for j, b in enumerate(tgt_gray):
            sim[i, j] = ssim(a, b, window)
    chosen: dict[tuple[int, int], str] = {}
    for i in range(ns):
        chosen[(i, int(sim[i].argmax()))] = "s"
    for j in range(nt):
        key = (int(sim[:, j].argmax()), j)
        chosen[key] = "both" if key in chosen else "t"
    out = PairSet()
    for (i, j) in sorted(chosen):
        out.pairs.append((i, j))
        out.sims.append(float(sim[i, j]))
        out.origins.append(chosen[(i, j)])
    return out


def write_pairs(path: str, ps: PairSet, src_paths: list, tgt_paths: list) -> None:
    """Persist as ``source_path<TAB>target_path<TAB>ssim`` lines."""
    with open(path, "w", encoding="ascii") as fh:
        for (i, j), s in zip(ps.pairs, ps.sims):
            fh.write(f"{src_paths[i]}\t{tgt_paths[j]}\t{s:.17g}\n")


def read_pairs(path: str, src_paths: list, tgt_paths: list) -> PairSet:
    """Load a persisted pairing, mapping paths back to corpus indices."""
    s_idx = {p: i for i, p in enumerate(src_paths)}
    t_idx = {p: i for i, p in enumerate(tgt_paths)}
    out = PairSet()
    with open(path, encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields")
            sp, tp, sv = parts
            if sp not in s_idx or tp not in t_idx:
                raise ValueError(f"{path}:{ln}: unknown image path")
            out.pairs.append((s_idx[sp], t_idx[tp]))
            out.sims.append(float(sv))
            out.origins.append("file")
    return out
