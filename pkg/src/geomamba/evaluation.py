"""Protocol-aware retrieval evaluation: mAP and CMC/Rank-k over Euclidean
rankings, plus flat-binary + JSONL embedding interchange."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OPT = "OPT"
SAR = "SAR"
PROTOCOLS = ("all_to_all", "opt_to_sar", "sar_to_opt")


@dataclass
class EmbeddingSet:
    features: np.ndarray          # (N, D)
    labels: np.ndarray            # (N,) int
    modality: np.ndarray          # (N,) str, OPT | SAR
    sample_ids: np.ndarray        # (N,) unique per sample across sets
    role: str = "gallery"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.modality = np.asarray(self.modality)
        self.sample_ids = np.asarray(self.sample_ids)
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.modality) == len(self.sample_ids) == n):
            raise ValueError("embedding set fields are not row-aligned")
        if np.isnan(self.features).any():
            raise ValueError("embeddings contain NaN")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(self.features[idx], self.labels[idx],
                            self.modality[idx], self.sample_ids[idx], self.role)


@dataclass
class ProtocolSpec:
    name: str
    query_modality: str | None = field(init=False)
    gallery_modality: str | None = field(init=False)
    exclude_self: bool = field(init=False)

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.name!r}; expected one of {PROTOCOLS}")
        table = {
            "all_to_all": (None, None, True),
            "opt_to_sar": (OPT, SAR, False),
            "sar_to_opt": (SAR, OPT, False),
        }
        self.query_modality, self.gallery_modality, self.exclude_self = table[self.name]


def pairwise_distances(q: np.ndarray, g: np.ndarray, block: int = 512) -> np.ndarray:
    """Blockwise Euclidean distance matrix (memory-bounded over queries)."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    g_sq = (g ** 2).sum(axis=1)
    out = np.empty((q.shape[0], g.shape[0]))
    for lo in range(0, q.shape[0], block):
        hi = min(lo + block, q.shape[0])
        qb = q[lo:hi]
        d2 = (qb ** 2).sum(axis=1)[:, None] + g_sq[None, :] - 2.0 * qb @ g.T
        out[lo:hi] = np.sqrt(np.maximum(d2, 0.0))
    return out


def rank_gallery(query_feature: np.ndarray, query_sample_id, gallery: EmbeddingSet,
                 proto: ProtocolSpec) -> np.ndarray:
    """Indices into `gallery` ordered by ascending distance.

    Ties break by sample-id order; the query's own sample is excluded under
    all_to_all; gallery modality is filtered per protocol.
    """
    keep = np.ones(len(gallery), dtype=bool)
    if proto.gallery_modality is not None:
        keep &= gallery.modality == proto.gallery_modality
    if proto.exclude_self:
        keep &= gallery.sample_ids != query_sample_id
    idx = np.flatnonzero(keep)
    # stable sort over (distance, sample id)
    idx = idx[np.argsort(gallery.sample_ids[idx], kind="stable")]
    d = np.linalg.norm(gallery.features[idx] - np.asarray(query_feature, dtype=np.float64), axis=1)
    return idx[np.argsort(d, kind="stable")]


def average_precision(relevance) -> float:
    """AP of a ranked binary relevance list; requires >= 1 relevant item."""
    rel = np.asarray(relevance, dtype=np.float64)
    n_rel = rel.sum()
    if n_rel == 0:
        raise ValueError("average_precision requires at least one relevant item")
    cum = np.cumsum(rel)
    precision_at_hits = cum[rel > 0] / (np.flatnonzero(rel) + 1)
    return float(precision_at_hits.sum() / n_rel)


def evaluate(query: EmbeddingSet, gallery: EmbeddingSet, proto: ProtocolSpec,
             topk: tuple[int, ...] = (1, 3, 5), block: int = 512) -> dict:
    """mAP and Rank-k under a protocol. Queries with no relevant gallery item
    are excluded from the means and reported in `excluded_queries`."""
    q_idx = np.arange(len(query))
    if proto.query_modality is not None:
        q_idx = q_idx[query.modality[q_idx] == proto.query_modality]
    g_keep = np.ones(len(gallery), dtype=bool)
    if proto.gallery_modality is not None:
        g_keep &= gallery.modality == proto.gallery_modality
    g_idx = np.flatnonzero(g_keep)
    # pre-sort by sample id so stable distance sorting breaks ties canonically
    g_idx = g_idx[np.argsort(gallery.sample_ids[g_idx], kind="stable")]
    g_feat = gallery.features[g_idx]
    g_labels = gallery.labels[g_idx]
    g_ids = gallery.sample_ids[g_idx]

    dist = pairwise_distances(query.features[q_idx], g_feat, block=block)
    aps = []
    hits = {k: [] for k in topk}
    excluded = 0
    for row, qi in enumerate(q_idx):
        mask = np.ones(len(g_idx), dtype=bool)
        if proto.exclude_self:
            mask &= g_ids != query.sample_ids[qi]
        order = np.argsort(dist[row][mask], kind="stable")
        rel = (g_labels[mask][order] == query.labels[qi]).astype(np.float64)
        if rel.sum() == 0:
            excluded += 1
            continue
        aps.append(average_precision(rel))
        for k in topk:
            hits[k].append(1.0 if rel[:k].sum() > 0 else 0.0)
    if not aps:
        raise ValueError("no query has a relevant gallery item under this protocol")
    out = {"protocol": proto.name, "mAP": float(np.mean(aps)),
           "num_queries": len(aps), "excluded_queries": excluded}
    for k in topk:
        out[f"rank{k}"] = float(np.mean(hits[k]))
    return out


def evaluate_all_protocols(query: EmbeddingSet, gallery: EmbeddingSet,
                           topk: tuple[int, ...] = (1, 3, 5)) -> dict[str, dict]:
    return {name: evaluate(query, gallery, ProtocolSpec(name), topk=topk)
            for name in PROTOCOLS}


def random_ranking_map(query: EmbeddingSet, gallery: EmbeddingSet,
                       proto: ProtocolSpec) -> float:
    """Analytic mAP of a uniformly random ranking: mean class prior R/N per
    query (the expected precision at every recall level is R/N)."""
    q_idx = np.arange(len(query))
    if proto.query_modality is not None:
        q_idx = q_idx[query.modality == proto.query_modality]
    g_keep = np.ones(len(gallery), dtype=bool)
    if proto.gallery_modality is not None:
        g_keep &= gallery.modality == proto.gallery_modality
    priors = []
    for qi in q_idx:
        mask = g_keep.copy()
        if proto.exclude_self:
            mask &= gallery.sample_ids != query.sample_ids[qi]
        n = mask.sum()
        r = (gallery.labels[mask] == query.labels[qi]).sum()
        if r > 0:
            priors.append(r / n)
    return float(np.mean(priors))


# ---- interchange formats ----------------------------------------------------

def save_embeddings(prefix: str | Path, es: EmbeddingSet):
    """Write `<prefix>.f64` (row-major flat f64 matrix) and `<prefix>.jsonl`
    (one record per row: sample_id, label, modality, role, dim)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    es.features.astype("<f8").tofile(prefix.with_suffix(".f64"))
    with open(prefix.with_suffix(".jsonl"), "w") as fh:
        for i in range(len(es)):
            fh.write(json.dumps({
                "sample_id": str(es.sample_ids[i]),
                "label": int(es.labels[i]),
                "modality": str(es.modality[i]),
                "role": es.role,
                "dim": int(es.features.shape[1]),
            }) + "\n")


def load_embeddings(prefix: str | Path) -> EmbeddingSet:
    prefix = Path(prefix)
    records = [json.loads(line) for line in open(prefix.with_suffix(".jsonl"))]
    if not records:
        raise ValueError(f"empty embedding sidecar {prefix}.jsonl")
    dim = records[0]["dim"]
    feats = np.fromfile(prefix.with_suffix(".f64"), dtype="<f8").reshape(len(records), dim)
    return EmbeddingSet(
        feats,
        np.array([r["label"] for r in records]),
        np.array([r["modality"] for r in records]),
        np.array([r["sample_id"] for r in records]),
        role=records[0]["role"],
    )


def write_metrics(out_dir: str | Path, metrics: dict[str, dict]):
    """Emit metrics as JSON and CSV side by side."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2)
    rows = list(metrics.values())
    keys = list(rows[0].keys())
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def dump_ranked_lists(path: str | Path, query: EmbeddingSet, gallery: EmbeddingSet,
                      proto: ProtocolSpec, top: int = 10):
    """JSONL dump of each query's top retrieved gallery ids, for inspection."""
    with open(path, "w") as fh:
        for qi in range(len(query)):
            if proto.query_modality is not None and query.modality[qi] != proto.query_modality:
                continue
            order = rank_gallery(query.features[qi], query.sample_ids[qi], gallery, proto)[:top]
            fh.write(json.dumps({
                "query_id": str(query.sample_ids[qi]),
                "query_label": int(query.labels[qi]),
                "retrieved": [
                    {"sample_id": str(gallery.sample_ids[g]),
                     "label": int(gallery.labels[g]),
                     "correct": bool(gallery.labels[g] == query.labels[qi])}
                    for g in order
                ],
            }) + "\n")
