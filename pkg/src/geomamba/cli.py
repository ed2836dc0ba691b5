"""Command-line entry point: data synthesis, preprocessing, training,
evaluation, ablations, hyperparameter sweeps, gradient verification, and
embedding export.

Exit codes: 0 ok, 1 usage error, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import imgproc, losses, synthdata, tensor as T
from .config import RunConfig
from .evaluation import (PROTOCOLS, ProtocolSpec, evaluate, evaluate_all_protocols,
                         load_embeddings, random_ranking_map, save_embeddings)
from .model import load_checkpoint
from .tensor import Tensor
from .trainer import Trainer, TrainerError, export_embeddings

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

PROTOCOL_ALIASES = {"all": "all_to_all", "o2s": "opt_to_sar", "s2o": "sar_to_opt"}


class NumericalFailure(RuntimeError):
    pass


def _fresh_dir(path: Path) -> Path:
    """Refuse to write into a non-empty existing directory."""
    if path.exists() and any(path.iterdir()):
        raise click.UsageError(
            f"output directory {path} already exists and is not empty; "
            "choose a new --out or remove it explicitly")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _force_single_thread():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"


def _load_config(config_path, **overrides) -> RunConfig:
    try:
        cfg = RunConfig.load(config_path) if config_path else RunConfig()
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad configuration: {exc}")
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad configuration: {exc}")


def config_options(fn):
    for deco in reversed([
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="YAML config file; flags override it."),
        click.option("--seed", type=int, default=None),
        click.option("--image-size", type=int, default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--lambda-gcc", type=float, default=None),
        click.option("--no-gfi", is_flag=True, default=False,
                     help="Disable the geometric injection/interaction blocks."),
        click.option("--no-gcc", is_flag=True, default=False,
                     help="Disable the mask-consistency auxiliary loss."),
        click.option("--deterministic/--no-deterministic", default=None),
    ]):
        fn = deco(fn)
    return fn


def build_config(config_path, seed, image_size, epochs, lambda_gcc, no_gfi,
                 no_gcc, deterministic, **extra) -> RunConfig:
    cfg = _load_config(config_path, seed=seed, image_size=image_size,
                       epochs=epochs, deterministic=deterministic, **extra)
    if lambda_gcc is not None:
        cfg.loss.lambda_gcc = lambda_gcc
    if no_gfi:
        cfg.gfi_enabled = False
    if no_gcc:
        cfg.gcc_enabled = False
    if cfg.deterministic:
        _force_single_thread()
    return cfg


@click.group()
def cli():
    """Geometry-guided optical/radar cross-modal retrieval toolkit."""


@cli.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--image-size", type=int, default=64)
@click.option("--train", "n_train", type=int, default=640)
@click.option("--query", "n_query", type=int, default=96)
@click.option("--gallery", "n_gallery", type=int, default=256)
@click.option("--preprocess", is_flag=True, default=False,
              help="Apply the modality-specific filter chains while rendering.")
def synth(out, seed, image_size, n_train, n_query, n_gallery, preprocess):
    """Render the synthetic two-modality dataset and write its manifest."""
    root = _fresh_dir(Path(out))
    counts = synthdata.SplitCounts(train=n_train, query=n_query, gallery=n_gallery)
    records = synthdata.build_manifest(root, counts, seed=seed,
                                       image_size=image_size, preprocess=preprocess)
    click.echo(f"wrote {len(records)} samples to {root}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def preprocess(data, out):
    """Apply the modality-specific filter chains to an existing dataset."""
    root, dest = Path(data), _fresh_dir(Path(out))
    records = synthdata.load_manifest(root)
    for rec in records:
        img = synthdata.load_sample(root, rec)
        if rec.modality == "OPT":
            gray = imgproc.preprocess_optical(imgproc.rgb_to_gray(img))
            img = np.repeat(gray[:, :, None], 3, axis=2)
        else:
            img = imgproc.preprocess_sar(img)
        target = dest / rec.path
        target.parent.mkdir(parents=True, exist_ok=True)
        imgproc.save_image(target, img)
    (dest / "manifest.jsonl").write_text((root / "manifest.jsonl").read_text())
    click.echo(f"preprocessed {len(records)} samples into {dest}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@config_options
def train(data, out, **cfg_flags):
    """Train the full model and evaluate on all protocols."""
    cfg = build_config(**cfg_flags)
    summary = Trainer(data, _fresh_dir(Path(out)), cfg).run()
    click.echo(json.dumps(summary["metrics"], indent=2))


@cli.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="Training run directory (checkpoint or exported embeddings).")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--protocol", type=click.Choice(sorted(PROTOCOL_ALIASES) + list(PROTOCOLS)),
              default=None, help="Single protocol; default evaluates all three.")
def eval_cmd(run_dir, data, protocol):
    """Score a finished run: mAP and Rank-1/3/5, plus the chance baseline."""
    run_dir = Path(run_dir)
    query, gallery = _run_embeddings(run_dir, data)
    if protocol:
        name = PROTOCOL_ALIASES.get(protocol, protocol)
        metrics = {name: evaluate(query, gallery, ProtocolSpec(name))}
    else:
        metrics = evaluate_all_protocols(query, gallery)
    for name, m in metrics.items():
        m["random_mAP"] = random_ranking_map(query, gallery, ProtocolSpec(name))
    click.echo(json.dumps(metrics, indent=2))
    with open(run_dir / "eval.json", "w") as fh:
        json.dump(metrics, fh, indent=2)


def _run_embeddings(run_dir: Path, data):
    if (run_dir / "query.jsonl").exists():
        return load_embeddings(run_dir / "query"), load_embeddings(run_dir / "gallery")
    ckpt = run_dir / "checkpoint.npz"
    if not ckpt.exists():
        raise FileNotFoundError(f"no embeddings or checkpoint in {run_dir}")
    if data is None:
        raise click.UsageError("--data is required when embeddings are not exported")
    model, _ = load_checkpoint(ckpt)
    records = synthdata.load_manifest(Path(data))
    q = export_embeddings(model, data, [r for r in records if r.split == "query"],
                          model.cfg, role="query")
    g = export_embeddings(model, data, [r for r in records if r.split == "gallery"],
                          model.cfg, role="gallery")
    return q, g


@cli.command("export-embeddings")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def export_embeddings_cmd(run_dir, data, out):
    """Embed the query and gallery splits with a trained checkpoint."""
    model, _ = load_checkpoint(Path(run_dir) / "checkpoint.npz")
    records = synthdata.load_manifest(Path(data))
    dest = _fresh_dir(Path(out))
    for role in ("query", "gallery"):
        es = export_embeddings(model, data, [r for r in records if r.split == role],
                               model.cfg, role=role)
        save_embeddings(dest / role, es)
    click.echo(f"embeddings written to {dest}")


VARIANTS = (  # name -> (gfi, gcc)
    ("baseline", False, False),
    ("gfi", True, False),
    ("gcc", False, True),
    ("full", True, True),
)


def _train_variant(data, out_dir, cfg: RunConfig) -> dict:
    summary = Trainer(data, out_dir, cfg).run()
    return summary["metrics"]["all_to_all"]


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seeds", default="0,1,2", help="Comma-separated seed list.")
@config_options
def ablate(data, out, seeds, **cfg_flags):
    """Train baseline / +injection / +mask-loss / full variants per seed."""
    base_cfg = build_config(**cfg_flags)
    dest = _fresh_dir(Path(out))
    seed_list = _parse_int_list(seeds)
    rows = []
    for name, gfi, gcc in VARIANTS:
        for seed in seed_list:
            cfg = RunConfig.from_dict(base_cfg.to_dict())
            cfg.gfi_enabled, cfg.gcc_enabled, cfg.seed = gfi, gcc, seed
            metrics = _train_variant(data, dest / f"{name}_seed{seed}", cfg)
            rows.append({"variant": name, "seed": seed, **metrics})
            click.echo(f"{name} seed {seed}: mAP {metrics['mAP']:.4f}")
    _write_csv(dest / "ablation.csv", rows)
    means = {name: float(np.mean([r["mAP"] for r in rows if r["variant"] == name]))
             for name, _, _ in VARIANTS}
    _svg_bar_chart(dest / "ablation.svg", list(means), list(means.values()),
                   title="mean mAP by variant")
    click.echo(json.dumps(means, indent=2))


@cli.command("sweep-lambda")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--values", default="1,5,10,15,20", help="Comma-separated weights.")
@config_options
def sweep_lambda(data, out, values, **cfg_flags):
    """Train once per mask-loss weight and tabulate retrieval metrics."""
    base_cfg = build_config(**cfg_flags)
    dest = _fresh_dir(Path(out))
    lams = _parse_float_list(values)
    rows = []
    for lam in lams:
        cfg = RunConfig.from_dict(base_cfg.to_dict())
        cfg.loss.lambda_gcc = lam
        cfg.gcc_enabled = lam > 0
        metrics = _train_variant(data, dest / f"lambda_{lam:g}", cfg)
        rows.append({"lambda_gcc": lam, **metrics})
        click.echo(f"lambda {lam:g}: mAP {metrics['mAP']:.4f}")
    _write_csv(dest / "sweep.csv", rows)
    _svg_line_chart(dest / "sweep.svg", [r["lambda_gcc"] for r in rows],
                    [r["mAP"] for r in rows], title="mAP vs mask-loss weight")


@cli.command()
@click.option("--threshold", type=float, default=1e-4)
@click.option("--seed", type=int, default=0)
def gradcheck(threshold, seed):
    """Finite-difference verification of every differentiable building block."""
    failures = 0
    for name, worst in run_gradcheck_suite(seed):
        status = "ok" if worst < threshold else "FAIL"
        if worst >= threshold:
            failures += 1
        click.echo(f"{name:32s} max rel err {worst:.3e}  {status}")
    if failures:
        raise NumericalFailure(f"{failures} gradcheck case(s) above {threshold}")
    click.echo("all gradient checks passed")


def run_gradcheck_suite(seed: int = 0):
    """Yield (case name, max relative error) for a broad op/loss sample."""
    rng = np.random.default_rng(seed)
    x34 = rng.standard_normal((3, 4))
    x44 = rng.standard_normal((4, 4))
    img = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    labels = np.array([0, 1, 0, 1])
    cases = [
        ("mul_add", lambda t: ((t * t + t) * 0.5).sum(), x34),
        ("exp_log", lambda t: (t.exp() + (t * t + 1.0).log()).sum(), x34),
        ("tanh_sigmoid", lambda t: (t.tanh() * t.sigmoid()).sum(), x34),
        ("gelu_softplus", lambda t: (t.gelu() + t.softplus()).sum(), x34),
        ("matmul", lambda t: (t @ t.T).sum(), x34),
        ("softmax", lambda t: (T.softmax(t, axis=-1) * x34).sum(), x34),
        ("layer_norm", lambda t: (T.layer_norm(t, eps=1e-5) ** 3).sum(), x34),
        ("conv2d", lambda t: conv_loss(t, w), img),
        ("max_pool", lambda t: (T.max_pool2d(t, 2) * 1.5).sum(), img),
        ("distance_matrix", lambda t: dist_loss(t), x44),
        ("identity_loss", lambda t: losses.identity_loss(t, labels), x44),
        ("triplet_loss", lambda t: losses.triplet_loss(t, labels, 0.3)[0], x44),
        ("focal_loss", lambda t: losses.focal_loss(
            t, (np.arange(12).reshape(3, 4) % 3 == 0).astype(float)), x34),
    ]
    for name, fn, data in cases:
        yield name, T.gradcheck(fn, Tensor(data.copy()), eps=1e-5,
                                rng=np.random.default_rng(1))


def conv_loss(t, w):
    return (T.conv2d(t, Tensor(w, requires_grad=True), None, stride=1, pad=1)
            .tanh().sum())


def dist_loss(t):
    d = T.l2_distance_matrix(t)
    mask = Tensor(1.0 - np.eye(d.shape[0]))
    return (d * mask).tanh().sum()


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.UsageError(f"bad integer list: {text!r}")


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.UsageError(f"bad number list: {text!r}")


def _write_csv(path: Path, rows: list[dict]):
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---- minimal SVG charts -----------------------------------------------------

_SVG_HEAD = ('<svg xmlns="http://www.w3.org/2000/svg" width="480" height="320" '
             'viewBox="0 0 480 320"><rect width="480" height="320" fill="white"/>'
             '<text x="240" y="20" text-anchor="middle" font-size="14">{title}</text>')


def _svg_bar_chart(path: Path, labels: list[str], values: list[float], title: str):
    top = max(max(values), 1e-9)
    n = len(values)
    parts = [_SVG_HEAD.format(title=title)]
    for i, (label, v) in enumerate(zip(labels, values)):
        x = 40 + i * (400 // n)
        h = 240 * v / top
        parts.append(f'<rect x="{x}" y="{280 - h:.1f}" width="{400 // n - 10}" '
                     f'height="{h:.1f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x + (400 // n - 10) / 2:.0f}" y="300" '
                     f'text-anchor="middle" font-size="11">{label}</text>')
        parts.append(f'<text x="{x + (400 // n - 10) / 2:.0f}" y="{275 - h:.1f}" '
                     f'text-anchor="middle" font-size="10">{v:.3f}</text>')
    parts.append("</svg>")
    path.write_text("".join(parts))


def _svg_line_chart(path: Path, xs: list[float], ys: list[float], title: str):
    top = max(max(ys), 1e-9)
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0
    pts = []
    for x, y in zip(xs, ys):
        px = 40 + 400 * (x - x0) / span
        py = 280 - 240 * y / top
        pts.append((px, py))
    parts = [_SVG_HEAD.format(title=title)]
    poly = " ".join(f"{px:.1f},{py:.1f}" for px, py in pts)
    parts.append(f'<polyline points="{poly}" fill="none" stroke="#a85048" stroke-width="2"/>')
    for (px, py), x, y in zip(pts, xs, ys):
        parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" fill="#a85048"/>')
        parts.append(f'<text x="{px:.1f}" y="300" text-anchor="middle" '
                     f'font-size="11">{x:g}</text>')
    parts.append("</svg>")
    path.write_text("".join(parts))


def run(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return EXIT_OK if exc.exit_code == 0 else EXIT_USAGE
    except (click.UsageError, click.BadParameter) as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except (NumericalFailure, TrainerError, FloatingPointError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
