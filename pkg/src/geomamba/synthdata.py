"""Procedural optical/SAR dataset: fine-grained shape families rendered as
unaligned image pairs, plus manifest/split machinery.

Categories share a family silhouette (aircraft-like or ship-like) and differ
only in sub-part geometry (wing sweep/span, hull proportions, scattering
layout), so the retrieval task is fine-grained by construction. Optical and
SAR poses are drawn independently: renders of the same instance share no
pixel alignment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import imgproc

SUPERSAMPLE = 4
MODALITIES = ("OPT", "SAR")
SPLITS = ("train", "query", "gallery")


# ---- category geometry ------------------------------------------------------

def _aircraft(bw, span, sweep, wing_y, wing_w, tail):
    """Right-half outline of an aircraft silhouette in [-1,1]^2, mirrored."""
    right = [
        (0.0, 1.0),
        (bw, 0.55),
        (bw, wing_y + wing_w),
        (span, wing_y + wing_w - sweep),
        (span * 0.96, wing_y - sweep),
        (bw, wing_y - wing_w),
        (bw * 0.8, -0.6),
        (tail, -0.78),
        (tail * 0.85, -0.95),
        (bw * 0.5, -0.9),
        (0.0, -1.0),
    ]
    poly = right + [(-x, y) for x, y in reversed(right[1:-1])]
    scatter = [(0.0, 1.0), (span, wing_y + wing_w - sweep),
               (-span, wing_y + wing_w - sweep), (tail, -0.78), (-tail, -0.78),
               (0.0, 0.0), (0.0, -0.95), (bw, wing_y), (-bw, wing_y)]
    return poly, scatter


def _ship(hw, bow, stern_cut, rows):
    right = [
        (0.0, 1.0),
        (hw * 0.6, bow),
        (hw, bow - 0.25),
        (hw, -1.0 + stern_cut),
        (hw - stern_cut, -1.0),
        (0.0, -1.0),
    ]
    poly = right + [(-x, y) for x, y in reversed(right[1:-1])]
    scatter = [(0.0, 1.0), (hw, bow - 0.25), (-hw, bow - 0.25),
               (hw - stern_cut, -1.0), (-(hw - stern_cut), -1.0)]
    for r in range(rows):
        y = 0.6 - 1.2 * (r + 1) / (rows + 1)
        scatter += [(0.0, y), (hw * 0.5, y), (-hw * 0.5, y)]
    return poly, scatter


CATEGORY_BUILDERS = [
    lambda: _aircraft(bw=0.14, span=0.95, sweep=0.15, wing_y=0.25, wing_w=0.14, tail=0.45),
    lambda: _aircraft(bw=0.14, span=0.95, sweep=0.55, wing_y=0.35, wing_w=0.12, tail=0.40),
    lambda: _aircraft(bw=0.20, span=0.70, sweep=0.30, wing_y=0.15, wing_w=0.22, tail=0.55),
    lambda: _aircraft(bw=0.10, span=1.00, sweep=0.05, wing_y=0.30, wing_w=0.08, tail=0.30),
    lambda: _ship(hw=0.28, bow=0.55, stern_cut=0.05, rows=2),
    lambda: _ship(hw=0.45, bow=0.35, stern_cut=0.02, rows=4),
    lambda: _ship(hw=0.20, bow=0.75, stern_cut=0.12, rows=1),
    lambda: _ship(hw=0.34, bow=0.60, stern_cut=0.25, rows=3),
]

NUM_CATEGORIES = len(CATEGORY_BUILDERS)


@dataclass
class ObjectSpec:
    category: int
    polygon: np.ndarray        # (V, 2) canonical outline in [-1,1]^2
    scatter: np.ndarray        # (S, 2) canonical scattering centers

    @classmethod
    def sample(cls, category: int, rng: np.random.Generator,
               jitter: float = 0.03) -> "ObjectSpec":
        if not 0 <= category < NUM_CATEGORIES:
            raise ValueError(f"category must be in [0,{NUM_CATEGORIES}), got {category}")
        poly, scatter = CATEGORY_BUILDERS[category]()
        poly = np.asarray(poly) + rng.normal(0, jitter, (len(poly), 2))
        scatter = np.asarray(scatter) + rng.normal(0, jitter, (len(scatter), 2))
        return cls(category, poly, scatter)


@dataclass
class RenderConfig:
    size: int = 64
    clutter: bool = True
    noise_sigma: float = 6.0      # additive optical noise
    speckle_looks: float = 4.0    # SAR gamma speckle; 0 disables
    background: float = 60.0
    object_brightness: float = 180.0
    max_rotation: float = 0.35        # pose angle drawn U(-max, +max)
    tint_range: float = 0.02          # per-channel optical tint U(1-t, 1+t)


def _pose(rng: np.random.Generator, size: int, max_rotation: float = np.pi / 4):
    """Random rotation/scale/translation mapping canonical to pixel coords."""
    theta = rng.uniform(-max_rotation, max_rotation)
    scale = rng.uniform(0.30, 0.42) * size
    tx = size / 2 + rng.uniform(-0.08, 0.08) * size
    ty = size / 2 + rng.uniform(-0.08, 0.08) * size
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    return rot * scale, np.array([tx, ty])


def _to_pixels(points: np.ndarray, rot_scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return points @ rot_scale.T + shift


def render_optical(spec: ObjectSpec, rng: np.random.Generator,
                   cfg: RenderConfig | None = None,
                   info_out: dict | None = None) -> np.ndarray:
    """Anti-aliased textured silhouette over cluttered background, RGB HxWx3."""
    cfg = cfg or RenderConfig()
    size = cfg.size
    rot_scale, shift = _pose(rng, size, cfg.max_rotation)
    poly_px = _to_pixels(spec.polygon, rot_scale, shift)

    ss = size * SUPERSAMPLE
    im = Image.new("F", (ss, ss), 0.0)
    draw = ImageDraw.Draw(im)
    draw.polygon([(SUPERSAMPLE * x, SUPERSAMPLE * y) for x, y in poly_px], fill=1.0)
    alpha = np.asarray(im).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))

    bg = np.full((size, size), cfg.background)
    if cfg.clutter:
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(rng.integers(3, 7)):
            cx, cy = rng.uniform(0, size, 2)
            rad = rng.uniform(0.04, 0.12) * size
            amp = rng.uniform(-25.0, 25.0)
            bg += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad ** 2))
    # object texture: base brightness, mild linear shading, fine grain
    gradient = np.linspace(-12.0, 12.0, size)[None, :]
    obj = cfg.object_brightness + gradient + rng.normal(0, 5.0, (size, size))
    img = bg * (1 - alpha) + obj * alpha
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0, cfg.noise_sigma, (size, size))
    img = np.clip(img, 0, 255)
    # slight per-channel tint keeps it honest RGB
    tint = rng.uniform(1.0 - cfg.tint_range, 1.0 + cfg.tint_range, 3)
    rgb = np.clip(img[:, :, None] * tint[None, None, :], 0, 255)
    if info_out is not None:
        info_out["polygon_px"] = poly_px
        info_out["alpha"] = alpha
    return rgb


def render_sar(spec: ObjectSpec, rng: np.random.Generator,
               cfg: RenderConfig | None = None,
               info_out: dict | None = None) -> np.ndarray:
    """Bright blobs at the category's scattering centers under gamma speckle,
    gray HxW. Pose is drawn independently of the optical render."""
    cfg = cfg or RenderConfig()
    size = cfg.size
    rot_scale, shift = _pose(rng, size, cfg.max_rotation)
    pts = _to_pixels(spec.scatter, rot_scale, shift)
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), 8.0)
    blob_sigma = 0.018 * size + 1.0
    for (px, py) in pts:
        amp = rng.uniform(185.0, 225.0)
        img += amp * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * blob_sigma ** 2))
    if cfg.speckle_looks > 0:
        looks = cfg.speckle_looks
        img = img * rng.gamma(looks, 1.0 / looks, (size, size))
    img = np.clip(img, 0, 255)
    if info_out is not None:
        info_out["scatter_px"] = pts
    return img


# ---- augmentation -----------------------------------------------------------

def augment(img: np.ndarray, rng: np.random.Generator, pad: int = 10,
            flip_p: float = 0.5, erase_p: float = 0.5,
            erase_frac: tuple[float, float] = (0.02, 0.2)) -> np.ndarray:
    """Horizontal flip, pad-and-random-crop, random erasing. Size-preserving."""
    out = np.array(img, dtype=np.float64)
    h, w = out.shape[:2]
    if rng.uniform() < flip_p:
        out = out[:, ::-1].copy()
    if pad > 0:
        widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (out.ndim - 2)
        padded = np.pad(out, widths, mode="constant")
        oy = rng.integers(0, 2 * pad + 1)
        ox = rng.integers(0, 2 * pad + 1)
        out = padded[oy:oy + h, ox:ox + w]
    if rng.uniform() < erase_p:
        frac = rng.uniform(*erase_frac)
        aspect = rng.uniform(0.5, 2.0)
        eh = int(round(np.sqrt(frac * h * w / aspect)))
        ew = int(round(np.sqrt(frac * h * w * aspect)))
        eh, ew = max(1, min(eh, h)), max(1, min(ew, w))
        ey = rng.integers(0, h - eh + 1)
        ex = rng.integers(0, w - ew + 1)
        out[ey:ey + eh, ex:ex + ew] = rng.uniform(0, 255)
    return out


# ---- manifest ---------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    modality: str
    label: int
    split: str
    width: int
    height: int
    sample_id: str


@dataclass
class SplitCounts:
    train: int = 640
    query: int = 96
    gallery: int = 256


def _stratify(total: int, n_strata: int) -> list[int]:
    base, rem = divmod(total, n_strata)
    return [base + (1 if i < rem else 0) for i in range(n_strata)]


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    """Per-sample stream derived from (seed, index): order-independent."""
    return np.random.default_rng(np.random.SeedSequence([seed, sample_index]))


def build_manifest(root: str | Path, counts: SplitCounts | None = None,
                   seed: int = 0, n_categories: int = NUM_CATEGORIES,
                   image_size: int = 64, preprocess: bool = False,
                   render_cfg: RenderConfig | None = None) -> list[ManifestRecord]:
    """Render the dataset to `<root>/<split>/<modality>/<label>/<id>.png` and
    write `manifest.jsonl`. Deterministic under `seed`."""
    if n_categories > NUM_CATEGORIES:
        raise ValueError(f"at most {NUM_CATEGORIES} categories available")
    counts = counts or SplitCounts()
    cfg = render_cfg or RenderConfig(size=image_size)
    cfg.size = image_size
    root = Path(root)
    records: list[ManifestRecord] = []
    sample_index = 0
    for split in SPLITS:
        total = getattr(counts, split)
        strata = [(cat, mod) for cat in range(n_categories) for mod in MODALITIES]
        for (cat, mod), n in zip(strata, _stratify(total, len(strata))):
            for _ in range(n):
                rng = sample_rng(seed, sample_index)
                spec = ObjectSpec.sample(cat, rng)
                sid = f"s{sample_index:06d}"
                rel = Path(split) / mod / str(cat) / f"{sid}.png"
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                if mod == "OPT":
                    img = render_optical(spec, rng, cfg)
                    if preprocess:
                        gray = imgproc.preprocess_optical(imgproc.rgb_to_gray(img))
                        img = np.repeat(gray[:, :, None], 3, axis=2)
                else:
                    img = render_sar(spec, rng, cfg)
                    if preprocess:
                        img = imgproc.preprocess_sar(img)
                imgproc.save_image(path, img)
                records.append(ManifestRecord(str(rel), mod, cat, split,
                                              image_size, image_size, sid))
                sample_index += 1
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")
    return records


def load_manifest(root: str | Path) -> list[ManifestRecord]:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    records = [ManifestRecord(**json.loads(line)) for line in open(path)]
    seen = set()
    for rec in records:
        if rec.path in seen:
            raise ValueError(f"file listed twice in manifest: {rec.path}")
        seen.add(rec.path)
    train_labels = {r.label for r in records if r.split == "train"}
    for rec in records:
        if rec.label not in train_labels:
            raise ValueError(f"label {rec.label} in {rec.split} missing from train (open set)")
    return records


def load_sample(root: str | Path, rec: ManifestRecord) -> np.ndarray:
    return imgproc.load_image(Path(root) / rec.path)
