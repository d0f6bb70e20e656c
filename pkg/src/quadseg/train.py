"""Training drivers: source-only warm-up, paired adaptation, evaluation.

Both loops draw every stochastic choice (batch membership, augmentation,
initialization) from rng streams keyed by ``(seed, phase, step)``, so a rerun
with the same config writes byte-identical checkpoints, logs, and masks.

The adaptation step interleaves two optimizers on one define-by-run tape:
the pair forward and segmentation losses are recorded on the generator tape,
the discriminator then takes its own step on detached mask probabilities,
and the generator tape is re-entered to score its masks against the *updated*
discriminator before the single backward sweep.
"""

from __future__ import annotations

import os

import numpy as np

from .adaptation import (
    PrototypeBank,
    PseudoLabels,
    batch_prototype,
    correct_pseudo_labels,
    ema_update,
    initialize_bank,
    load_pseudo_labels,
    pair_two_way,
    read_pairs,
    save_pseudo_labels,
    to_grayscale,
    warmup_pseudo_labels,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, serialize_config
from .dataset import (
    Sample,
    augment,
    crop_window,
    generate_sample,
    image_path,
    iou,
    list_image_ids,
    load_sample,
    read_scene_specs,
    split_target_ids,
)
from .decoder import mask_probs
from .model import (
    forward_pair,
    infer_target_sourcefree,
    init_model_params,
)
from .objectives import (
    AdamW,
    discriminator_forward,
    disc_loss,
    gen_adv_loss,
    init_disc_params,
    seg_cross_entropy,
)
from .pnm import write_pgm
from .tensor import Tape, Tensor

__all__ = ["warmup", "adapt", "evaluate", "predict_mask",
           "source_val_iou", "target_val_iou", "LOG_HEADER"]

# rng stream tags: every draw in a run comes from (seed, tag, step)
_RNG_INIT, _RNG_WARMUP, _RNG_ADAPT, _RNG_DISC = 0, 1, 2, 3

LOG_HEADER = "step,l_seg_s,l_seg_t,d_loss,g_loss,lr,target_iou"

_SOURCE_VAL_IDS = range(200, 220)     # regenerated from spec.txt, never stored

_ARCH_FIELDS = ("channels", "depths", "heads", "sr_ratios", "ffn_expand",
                "share_branch_weights", "embed_dim", "num_classes",
                "extra_hidden", "share_heads", "disc_channels")


def _rng(seed: int, tag: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, step)))


def _check_architecture(stored: RunConfig, cfg: RunConfig) -> None:
    for name in _ARCH_FIELDS:
        if getattr(stored, name) != getattr(cfg, name):
            raise CheckpointError(
                f"checkpoint architecture field {name!r} is "
                f"{getattr(stored, name)!r}, run config wants {getattr(cfg, name)!r}")


def _class_weights(cfg: RunConfig) -> np.ndarray:
    w = np.ones(cfg.num_classes)
    w[-1] = cfg.class_weight_pl
    return w


def _grid_probs(probs: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Block-mean [K, H, W] probabilities down to [gh*gw, K] token rows."""
    k, h, w = probs.shape
    pooled = probs.reshape(k, gh, h // gh, gw, w // gw).mean(axis=(2, 4))
    return pooled.reshape(k, gh * gw).T


def _load_domain(root: str, domain: str, ids, with_label: bool):
    return [load_sample(root, domain, i, with_label=with_label) for i in ids]


def _restore_params(data, cfg: RunConfig) -> dict[str, Tensor]:
    """Model parameters from a checkpoint, ignoring optimizer/critic state."""
    params = init_model_params(cfg.encoder_config(), cfg.decoder_config(),
                               _rng(cfg.seed, _RNG_INIT, 0))
    for name, p in params.items():
        arr = data.tensors.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {p.data.shape}")
        p.data[...] = arr
    return params


def _opt_state(tensors: dict, critic: bool) -> dict:
    """Split persisted optimizer moments by owner (model vs discriminator)."""
    out = {}
    for key, arr in tensors.items():
        if not key.startswith(("opt.m.", "opt.v.")):
            continue
        if key.split(".", 2)[2].startswith("disc.") == critic:
            out[key] = arr
    return out


class _Log:
    def __init__(self, path: str | None):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w") as fh:
                fh.write(LOG_HEADER + "\n")

    def row(self, step, l_s="", l_t="", d="", g="", lr="", tgt_iou=""):
        if not self.path:
            return

        def fmt(v):
            return f"{v:.6f}" if isinstance(v, float) else str(v)

        with open(self.path, "a") as fh:
            fh.write(",".join(fmt(v) for v in
                              (step, l_s, l_t, d, g, lr, tgt_iou)) + "\n")


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict_mask(params: dict, cfg: RunConfig, image: np.ndarray) -> np.ndarray:
    """Hard class map for one target image via the source-free path."""
    logits, _, _ = infer_target_sourcefree(params, cfg.encoder_config(),
                                           cfg.decoder_config(), Tensor(image))
    return logits.data.argmax(axis=0).astype(np.uint8)


def _mean_iou(params, cfg, samples) -> float:
    vals = [iou(predict_mask(params, cfg, s.image), s.label.astype(int))
            for s in samples]
    return float(np.mean(vals))


def target_val_iou(params: dict, cfg: RunConfig, root: str) -> float:
    _, val_ids = split_target_ids(root)
    return _mean_iou(params, cfg,
                     _load_domain(root, "target", val_ids, with_label=True))


def source_val_iou(params: dict, cfg: RunConfig, root: str) -> float:
    """Held-out source IoU on samples regenerated from ``spec.txt`` with ids
    beyond the materialized range (nothing extra is stored on disk)."""
    src_spec, _ = read_scene_specs(os.path.join(root, "spec.txt"))
    samples = [generate_sample(src_spec, i) for i in _SOURCE_VAL_IDS]
    return _mean_iou(params, cfg, samples)


# ---------------------------------------------------------------------------
# warm-up
# ---------------------------------------------------------------------------


def warmup(cfg: RunConfig, root: str, ckpt_out: str,
           resume: str | None = None, log_path: str | None = None) -> dict:
    """Source-only training through the source-free inference path, then a
    pseudo-label pass over every target training image.

    Returns a summary dict with the final source-val and target-val IoU.
    """
    enc, dec = cfg.encoder_config(), cfg.decoder_config()
    # constant lr after the ramp: the decay horizon belongs to adaptation
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay,
                betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                warmup=cfg.warmup_steps, total=None)
    start = 0
    if resume is None:
        params = init_model_params(enc, dec, _rng(cfg.seed, _RNG_INIT, 0))
    else:
        data = load_checkpoint(resume)
        _check_architecture(parse_config(data.config_text), cfg)
        params = _restore_params(data, cfg)
        opt.load_state(_opt_state(data.tensors, critic=False), data.step)
        start = data.step
    src = _load_domain(root, "source", list_image_ids(root, "source"),
                       with_label=True)
    tgt_val = _load_domain(root, "target", split_target_ids(root)[1],
                           with_label=True)
    weights = _class_weights(cfg)
    log = _Log(log_path)
    for step in range(start + 1, cfg.warmup_iterations + 1):
        rng = _rng(cfg.seed, _RNG_WARMUP, step)
        batch = rng.choice(len(src), size=min(cfg.batch, len(src)),
                           replace=False)
        with Tape() as tape:
            for p in params.values():
                tape.watch(p)
            acc = Tensor(0.0)
            for i in batch:
                s = augment(src[int(i)], rng, crop=cfg.crop)
                logits, _, _ = infer_target_sourcefree(params, enc, dec,
                                                       Tensor(s.image))
                loss, _ = seg_cross_entropy(logits, s.label.astype(int),
                                            class_weights=weights)
                acc = acc + loss
            total = (1.0 / len(batch)) * acc
            tape.backward(total)
        grads = {name: tape.grad(p) for name, p in params.items()}
        lr = opt.step(params, grads)
        periodic = step % cfg.eval_every == 0 or step == cfg.warmup_iterations
        log.row(step, l_s=total.item(), lr=f"{lr:.8g}",
                tgt_iou=_mean_iou(params, cfg, tgt_val) if periodic else "")
    save_checkpoint(ckpt_out, {**params, **opt.state_tensors()},
                    serialize_config(cfg), cfg.warmup_iterations)
    plabel_dir = ckpt_out + ".plabels"
    train_ids = split_target_ids(root)[0]
    images = [load_sample(root, "target", i, with_label=False).image
              for i in train_ids]
    for i, pl in zip(train_ids,
                     warmup_pseudo_labels(params, enc, dec, images, cfg.tau)):
        save_pseudo_labels(plabel_dir, i, pl)
    return {"checkpoint": ckpt_out,
            "source_val_iou": source_val_iou(params, cfg, root),
            "target_val_iou": _mean_iou(params, cfg, tgt_val)}


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


def _augment_target(s: Sample, pl: PseudoLabels, rng: np.random.Generator,
                    crop: int) -> tuple[np.ndarray, PseudoLabels]:
    """Crop/flip image and pseudo-labels together; photometric image-only."""
    img, probs, valid = s.image, pl.probs, pl.valid
    size = img.shape[1]
    if crop < size:
        anchor = np.logical_and(valid, probs.argmax(axis=0) == probs.shape[0] - 1)
        r0, c0 = crop_window(rng, size, crop, anchor)
        img = img[:, r0:r0 + crop, c0:c0 + crop]
        probs = probs[:, r0:r0 + crop, c0:c0 + crop]
        valid = valid[r0:r0 + crop, c0:c0 + crop]
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
        probs = probs[:, :, ::-1]
        valid = valid[:, ::-1]
    gain = rng.uniform(0.9, 1.1)
    bias = rng.uniform(-0.08, 0.08)
    channel = rng.uniform(0.95, 1.05, size=3)
    img = np.clip((img * gain + 0.5 * (1.0 - gain) + bias)
                  * channel[:, None, None], 0.0, 1.0)
    return (np.ascontiguousarray(img),
            PseudoLabels(probs=np.ascontiguousarray(probs),
                         valid=np.ascontiguousarray(valid),
                         provenance=pl.provenance))


def _load_or_make_plabels(params, cfg, root, warmup_ckpt, train_ids):
    plabel_dir = warmup_ckpt + ".plabels"
    if os.path.isdir(plabel_dir):
        return [load_pseudo_labels(plabel_dir, i, cfg.num_classes, cfg.tau)
                for i in train_ids]
    images = [load_sample(root, "target", i, with_label=False).image
              for i in train_ids]
    return warmup_pseudo_labels(params, cfg.encoder_config(),
                                cfg.decoder_config(), images, cfg.tau)


def _init_bank(params, cfg, images, plabels) -> PrototypeBank:
    enc, dec = cfg.encoder_config(), cfg.decoder_config()
    bank = PrototypeBank.create(cfg.num_classes,
                                2 * enc.num_stages * cfg.embed_dim,
                                lam=cfg.lambda_ema)

    def batches():
        for img, pl in zip(images, plabels):
            _, aug, (gh, gw) = infer_target_sourcefree(params, enc, dec,
                                                       Tensor(img))
            yield aug.data, _grid_probs(pl.probs, gh, gw)

    initialize_bank(bank, batches())
    return bank


def adapt(cfg: RunConfig, root: str, warmup_ckpt: str, ckpt_out: str,
          pairs_path: str | None = None, log_path: str | None = None) -> dict:
    """Paired adaptation from a warm-up checkpoint.

    Ablation toggles: with ``self_training`` off the target segmentation
    loss is dropped; ``adversarial`` off skips both discriminator and
    generator adversarial terms; ``label_correction`` off uses the stored
    warm-up pseudo-labels as-is.
    """
    enc, dec = cfg.encoder_config(), cfg.decoder_config()
    data = load_checkpoint(warmup_ckpt)
    _check_architecture(parse_config(data.config_text), cfg)
    params = _restore_params(data, cfg)
    disc_cfg = cfg.disc_config()
    disc = init_disc_params(disc_cfg, _rng(cfg.seed, _RNG_DISC, 0))
    g_opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay,
                  betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                  warmup=cfg.warmup_steps, total=cfg.iterations)
    d_opt = AdamW(lr=cfg.disc_lr, weight_decay=0.0,
                  betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                  warmup=cfg.warmup_steps, total=cfg.iterations)

    train_ids, val_ids = split_target_ids(root)
    src = _load_domain(root, "source", list_image_ids(root, "source"),
                       with_label=True)
    tgt = _load_domain(root, "target", train_ids, with_label=False)
    tgt_val = _load_domain(root, "target", val_ids, with_label=True)
    plabels = _load_or_make_plabels(params, cfg, root, warmup_ckpt, train_ids)

    if pairs_path is not None and os.path.exists(pairs_path):
        src_paths = [image_path(root, "source", s.id) for s in src]
        tgt_paths = [image_path(root, "target", i) for i in train_ids]
        pairset = read_pairs(pairs_path, src_paths, tgt_paths)
    else:
        pairset = pair_two_way([to_grayscale(s.image) for s in src],
                               [to_grayscale(s.image) for s in tgt])

    correcting = cfg.label_correction and cfg.self_training
    bank = (_init_bank(params, cfg, [s.image for s in tgt], plabels)
            if correcting else None)

    weights = _class_weights(cfg)
    log = _Log(log_path)
    for step in range(1, cfg.iterations + 1):
        rng = _rng(cfg.seed, _RNG_ADAPT, step)
        picks = rng.choice(len(pairset.pairs), size=cfg.batch,
                           replace=len(pairset.pairs) < cfg.batch)
        gtape = Tape()
        l_s = l_t = g_term = Tensor(0.0)
        probs_pairs: list = []
        ema_batch: list = []
        with gtape:
            for p in params.values():
                gtape.watch(p)
            for k in picks:
                si, tj = pairset.pairs[int(k)]
                s = augment(src[si], rng, crop=cfg.crop)
                t_img, pl = _augment_target(tgt[tj], plabels[tj], rng,
                                            cfg.crop)
                out = forward_pair(params, enc, dec, Tensor(s.image),
                                   Tensor(t_img), cfg.use_cross_src,
                                   cfg.use_cross_tgt)
                loss_s, _ = seg_cross_entropy(out.logits_s,
                                              s.label.astype(int),
                                              class_weights=weights)
                l_s = l_s + loss_s
                if cfg.self_training:
                    feats = out.aug_t.data
                    if correcting:
                        pl = correct_pseudo_labels(pl, feats, out.grid, bank,
                                                   cfg.temperature, cfg.tau)
                    loss_t, _ = seg_cross_entropy(out.logits_t, pl.hard(),
                                                  valid=pl.valid,
                                                  class_weights=weights)
                    l_t = l_t + loss_t
                    if correcting:
                        gh, gw = out.grid
                        ema_batch.append((feats, _grid_probs(pl.probs, gh, gw)))
                if cfg.adversarial:
                    probs_pairs.append((mask_probs(out.logits_s),
                                        mask_probs(out.logits_t)))
        d_val = ""
        if cfg.adversarial:
            with Tape() as dtape:
                for p in disc.values():
                    dtape.watch(p)
                d_acc = Tensor(0.0)
                for ps, pt in probs_pairs:
                    d_real = discriminator_forward(disc, disc_cfg,
                                                   Tensor(ps.data.copy()))
                    d_fake = discriminator_forward(disc, disc_cfg,
                                                   Tensor(pt.data.copy()))
                    d_acc = d_acc + disc_loss(d_real, d_fake)
                d_total = (1.0 / len(probs_pairs)) * d_acc
                dtape.backward(d_total)
            d_grads = {name: dtape.grad(p) for name, p in disc.items()}
            d_opt.step(disc, d_grads)
            d_val = d_total.item()
            with gtape:
                for _, pt in probs_pairs:
                    g_term = g_term + gen_adv_loss(
                        discriminator_forward(disc, disc_cfg, pt))
        with gtape:
            n = float(len(picks))
            total = (1.0 / n) * l_s + (cfg.beta1 / n) * l_t \
                + (cfg.beta2 / n) * g_term
            gtape.backward(total)
        grads = {name: gtape.grad(p) for name, p in params.items()}
        lr = g_opt.step(params, grads)
        for feats, gp in ema_batch:         # prototypes trail the corrections
            for c in range(cfg.num_classes):
                proto = batch_prototype(feats, gp, c)
                if proto is not None:
                    ema_update(bank, c, proto)
        periodic = step % cfg.eval_every == 0 or step == cfg.iterations
        log.row(step, l_s=l_s.item() / len(picks),
                l_t=l_t.item() / len(picks) if cfg.self_training else "",
                d=d_val,
                g=g_term.item() / len(picks) if cfg.adversarial else "",
                lr=f"{lr:.8g}",
                tgt_iou=_mean_iou(params, cfg, tgt_val) if periodic else "")
    tensors = {**params, **g_opt.state_tensors()}
    if cfg.adversarial:
        tensors.update(disc)
        tensors.update(d_opt.state_tensors())
    save_checkpoint(ckpt_out, tensors, serialize_config(cfg), cfg.iterations)
    return {"checkpoint": ckpt_out,
            "target_val_iou": _mean_iou(params, cfg, tgt_val)}


# ---------------------------------------------------------------------------
# evaluation command
# ---------------------------------------------------------------------------


def evaluate(ckpt_path: str, root: str, out_dir: str) -> dict:
    """Source-free evaluation on the labeled target validation split.

    Writes one predicted-mask PGM per image plus ``report.csv`` (one row per
    image, then a summary row).  No source image is read on this path.
    """
    data = load_checkpoint(ckpt_path)
    cfg = parse_config(data.config_text)
    params = _restore_params(data, cfg)
    _, val_ids = split_target_ids(root)
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    scale = 255 // (cfg.num_classes - 1)
    for i in val_ids:
        s = load_sample(root, "target", i, with_label=True)
        pred = predict_mask(params, cfg, s.image)
        write_pgm(os.path.join(mask_dir, f"{i:04d}.pgm"),
                  (pred * scale).astype(np.uint8))
        rows.append((i, iou(pred, s.label.astype(int))))
    mean = float(np.mean([v for _, v in rows])) if rows else 1.0
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write("id,iou\n")
        for i, v in rows:
            fh.write(f"{i:04d},{v:.6f}\n")
        fh.write(f"mean,{mean:.6f}\n")
    return {"mean_iou": mean, "count": len(rows),
            "report": os.path.join(out_dir, "report.csv")}
