"""Training loop: AdamW with cosine schedule, class-balanced PK sampling over
both modalities, pseudo-label mask targets, per-step CSV logging,
checkpointing, and post-training embedding export."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import imgproc, losses, synthdata
from .config import RunConfig
from .evaluation import EmbeddingSet, evaluate_all_protocols, save_embeddings
from .model import GeoMamba, save_checkpoint
from .synthdata import ManifestRecord
from .tensor import Tensor

TRAIN_CSV_FIELDS = ("step", "epoch", "lr", "loss_total", "loss_id", "loss_tri",
                    "loss_gcc", "n_valid_triplets", "grad_norm")


class TrainerError(RuntimeError):
    """Raised when training cannot proceed (bad data, non-finite loss)."""


# ---- optimizer and schedule -------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay and bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_frac: float = 0.05) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


# ---- sampling and batch assembly --------------------------------------------

class PkSampler:
    """Draws P labels, then K optical and K radar samples per label.

    Sample i of the optical half shares a label with sample i of the radar
    half, which is what the paired cross-modal forward expects.
    """

    def __init__(self, records: list[ManifestRecord], p: int, k: int):
        self.by_label: dict[int, dict[str, list[ManifestRecord]]] = {}
        for rec in records:
            self.by_label.setdefault(rec.label, {m: [] for m in synthdata.MODALITIES})
            self.by_label[rec.label][rec.modality].append(rec)
        for label, mods in self.by_label.items():
            for mod, recs in mods.items():
                if not recs:
                    raise TrainerError(f"label {label} has no {mod} training samples")
        if len(self.by_label) < p:
            raise TrainerError(f"need at least {p} labels, got {len(self.by_label)}")
        self.p, self.k = p, k

    def sample(self, rng: np.random.Generator
               ) -> tuple[list[ManifestRecord], list[ManifestRecord], np.ndarray]:
        labels = rng.choice(sorted(self.by_label), size=self.p, replace=False)
        opt, sar, out_labels = [], [], []
        for label in labels:
            for mod, bucket in (("OPT", opt), ("SAR", sar)):
                pool = self.by_label[label][mod]
                replace = len(pool) < self.k
                idx = rng.choice(len(pool), size=self.k, replace=replace)
                bucket.extend(pool[i] for i in idx)
            out_labels.extend([label] * self.k)
        return opt, sar, np.array(out_labels, dtype=np.int64)


def _mask_targets(masks_full: np.ndarray, shallow: int, deep: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    sh = np.stack([imgproc.downsample_mask(m, shallow) for m in masks_full])
    dp = np.stack([imgproc.downsample_mask(m, deep) for m in masks_full])
    return sh[:, None], dp[:, None]


def make_batch(root: str | Path, opt_recs: list[ManifestRecord],
               sar_recs: list[ManifestRecord], labels: np.ndarray,
               cfg: RunConfig, rng: np.random.Generator) -> dict:
    """Load, augment, and pseudo-label one paired batch.

    Pseudo-label masks are computed after augmentation so they stay aligned
    with the network input.
    """
    cross_self = bool(rng.uniform() < cfg.cross_self_p)
    x_opt, x_sar, aux, opt_masks, sar_masks = [], [], [], [], []
    for rec in opt_recs:
        img = synthdata.load_sample(root, rec)
        img = synthdata.augment(img, rng, pad=cfg.augment_pad,
                                flip_p=cfg.augment_flip_p,
                                erase_p=cfg.augment_erase_p)
        gray = imgproc.rgb_to_gray(img)
        x_opt.append(img.transpose(2, 0, 1) / 255.0)
        opt_masks.append(imgproc.sobel_mask(gray, cfg.sobel_quantile))
    for rec in sar_recs:
        img = synthdata.load_sample(root, rec)
        img = synthdata.augment(img, rng, pad=cfg.augment_pad,
                                flip_p=cfg.augment_flip_p,
                                erase_p=cfg.augment_erase_p)
        mask = imgproc.harris_mask(img, k=cfg.harris_k, window=cfg.harris_window,
                                   quantile=cfg.harris_quantile)
        x_sar.append(np.repeat(img[None] / 255.0, 3, axis=0))
        aux.append(np.stack([img / 255.0, mask]))
        sar_masks.append(mask)
    shallow = cfg.stages.strides[0]
    deep = int(np.prod(cfg.stages.strides))
    opt_sh, opt_dp = _mask_targets(np.array(opt_masks), shallow, deep)
    sar_sh, sar_dp = _mask_targets(np.array(sar_masks), shallow, deep)
    return {
        "x_opt": Tensor(np.array(x_opt)),
        "x_sar": Tensor(np.array(x_sar)),
        "aux": Tensor(np.array(aux)),
        "labels": labels,
        "cross_self": cross_self,
        "targets": {"opt_shallow": opt_sh, "opt_deep": opt_dp,
                    "sar_shallow": sar_sh, "sar_deep": sar_dp},
        "sample_ids": [r.sample_id for r in opt_recs] + [r.sample_id for r in sar_recs],
    }


# ---- one optimization step --------------------------------------------------

def compute_losses(out: dict, batch: dict, cfg: RunConfig) -> tuple[Tensor, dict]:
    """Assemble the total objective from a training forward pass."""
    w = cfg.loss
    both_labels = np.concatenate([batch["labels"], batch["labels"]])
    loss_id = losses.identity_loss(out["logits"], both_labels, w.label_smoothing)
    loss_tri, n_valid = losses.triplet_loss(out["features"], both_labels, w.margin,
                                            normalize=w.tri_normalize)
    retrieval = loss_id + w.lambda_tri * loss_tri
    if cfg.gcc_enabled:
        gcc = losses.gcc_loss(out["masks"], batch["targets"], w)
        total = losses.total_loss(retrieval, gcc, w.lambda_gcc)
    else:
        gcc = Tensor(0.0)
        total = retrieval
    parts = {"loss_total": float(total.data), "loss_id": float(loss_id.data),
             "loss_tri": float(loss_tri.data), "loss_gcc": float(gcc.data),
             "n_valid_triplets": n_valid}
    return total, parts


def train_step(model: GeoMamba, optim: AdamW, batch: dict, cfg: RunConfig,
               lr: float) -> dict:
    model.set_training(True)
    model.zero_grad()
    out = model.forward_train(batch["x_opt"], batch["x_sar"], batch["aux"],
                              cross_self=batch.get("cross_self", False))
    total, parts = compute_losses(out, batch, cfg)
    if not np.isfinite(total.data):
        raise TrainerError(f"non-finite loss on batch {batch['sample_ids']}")
    total.backward()
    sq = 0.0
    for p in optim.params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    if not np.isfinite(sq):
        raise TrainerError(f"non-finite gradient on batch {batch['sample_ids']}")
    optim.step(lr)
    parts["grad_norm"] = math.sqrt(sq)
    parts["lr"] = lr
    return parts


# ---- embedding export -------------------------------------------------------

def _embed_chunk(model: GeoMamba, imgs: list[np.ndarray], mod: str,
                 cfg: RunConfig) -> np.ndarray:
    xs, auxs = [], []
    for img in imgs:
        if mod == "OPT":
            xs.append(img.transpose(2, 0, 1) / 255.0)
        else:
            mask = imgproc.harris_mask(img, k=cfg.harris_k,
                                       window=cfg.harris_window,
                                       quantile=cfg.harris_quantile)
            xs.append(np.repeat(img[None] / 255.0, 3, axis=0))
            auxs.append(np.stack([img / 255.0, mask]))
    x = Tensor(np.array(xs))
    if mod == "OPT":
        emb = model.forward_embed(x, "opt")
    else:
        emb = model.forward_embed(x, "sar", Tensor(np.array(auxs)))
    return emb.data


def _unit_rows(f: np.ndarray) -> np.ndarray:
    return f / np.sqrt((f * f).sum(axis=1, keepdims=True) + 1e-12)


def export_embeddings(model: GeoMamba, root: str | Path,
                      records: list[ManifestRecord], cfg: RunConfig,
                      role: str, batch_size: int = 32) -> EmbeddingSet:
    """Run the inference forward over a record list.

    With `cfg.embed_flip_avg`, each sample is embedded both as-is and
    horizontally mirrored (matching the training-time flip augmentation) and
    the unit-normalized embeddings are averaged. With `cfg.embed_normalize`,
    the output rows are projected to the unit sphere, so retrieval distances
    are cosine-equivalent and match the normalized triplet objective.
    """
    model.set_training(False)
    feats, labels, modality, ids = [], [], [], []
    for mod in synthdata.MODALITIES:
        recs = [r for r in records if r.modality == mod]
        for start in range(0, len(recs), batch_size):
            chunk = recs[start:start + batch_size]
            imgs = [synthdata.load_sample(root, rec) for rec in chunk]
            emb = _embed_chunk(model, imgs, mod, cfg)
            if cfg.embed_flip_avg:
                flipped = [np.ascontiguousarray(img[:, ::-1]) for img in imgs]
                emb = _unit_rows(emb) + _unit_rows(
                    _embed_chunk(model, flipped, mod, cfg))
            if cfg.embed_normalize:
                emb = _unit_rows(emb)
            feats.append(emb)
            labels.extend(r.label for r in chunk)
            modality.extend([mod] * len(chunk))
            ids.extend(r.sample_id for r in chunk)
    if not feats:
        raise TrainerError(f"no records to embed for role {role!r}")
    return EmbeddingSet(np.concatenate(feats), np.array(labels),
                        np.array(modality), np.array(ids), role=role)


# ---- run orchestration ------------------------------------------------------

class Trainer:
    def __init__(self, data_root: str | Path, out_dir: str | Path, cfg: RunConfig):
        self.root = Path(data_root)
        self.out = Path(out_dir)
        self.cfg = cfg
        self.records = synthdata.load_manifest(self.root)
        self.train_records = [r for r in self.records if r.split == "train"]
        self.classes = sorted({r.label for r in self.train_records})
        if self.classes != list(range(len(self.classes))):
            raise TrainerError(f"train labels must be 0..K-1, got {self.classes}")
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out / "config.yaml")

    def _model_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0]))

    def _step_rng(self, epoch: int, step: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, 1, epoch, step]))

    def run(self, log_every: int = 1) -> dict:
        cfg = self.cfg
        model = GeoMamba(cfg, len(self.classes), self._model_rng())
        params = model.named_parameters()
        if cfg.aux_frozen:
            params = {k: v for k, v in params.items()
                      if not k.startswith("geo_encoder.")}
        optim = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        sampler = PkSampler(self.train_records, cfg.p_classes, cfg.k_instances)
        per_modality = sum(r.modality == "OPT" for r in self.train_records)
        steps_per_epoch = max(1, per_modality // (cfg.p_classes * cfg.k_instances))
        total_steps = cfg.epochs * steps_per_epoch

        last = {}
        with open(self.out / "train_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRAIN_CSV_FIELDS)
            writer.writeheader()
            global_step = 0
            for epoch in range(cfg.epochs):
                for step in range(steps_per_epoch):
                    rng = self._step_rng(epoch, step)
                    opt_recs, sar_recs, labels = sampler.sample(rng)
                    batch = make_batch(self.root, opt_recs, sar_recs, labels, cfg, rng)
                    lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.warmup_frac)
                    try:
                        parts = train_step(model, optim, batch, cfg, lr)
                    except TrainerError:
                        with open(self.out / "failed_batch.json", "w") as dump:
                            json.dump({"epoch": epoch, "step": step,
                                       "sample_ids": batch["sample_ids"]}, dump)
                        raise
                    if global_step % log_every == 0:
                        writer.writerow({"step": global_step, "epoch": epoch, **parts})
                        fh.flush()
                    last = parts
                    global_step += 1
                save_checkpoint(self.out / "checkpoint.npz", model,
                                extra={"epoch": epoch, "global_step": global_step})

        metrics = self.evaluate(model)
        summary = {"final_train": last, "metrics": metrics,
                   "steps": cfg.epochs * steps_per_epoch}
        with open(self.out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        return summary

    def evaluate(self, model: GeoMamba) -> dict:
        query = export_embeddings(model, self.root,
                                  [r for r in self.records if r.split == "query"],
                                  self.cfg, role="query")
        gallery = export_embeddings(model, self.root,
                                    [r for r in self.records if r.split == "gallery"],
                                    self.cfg, role="gallery")
        save_embeddings(self.out / "query", query)
        save_embeddings(self.out / "gallery", gallery)
        metrics = evaluate_all_protocols(query, gallery)
        with open(self.out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2)
        return metrics
