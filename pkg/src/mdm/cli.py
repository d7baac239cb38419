"""Command-line entry point: ``mdm <subcommand>``.

Subcommands: ``synth-data``, ``train-model``, ``explain``, ``evaluate`` and
``oracle-test``.  Every run is deterministic for a fixed seed.  A failed run
removes whatever it had already written and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import explain as mdm_explain
from . import imageio, metrics, models, oracle_check
from .config import ConfigError, RunConfig


class CliError(RuntimeError):
    pass


class Artifacts:
    """Tracks files written by a subcommand so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.written: list[Path] = []
        self._made: list[Path] = []

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        missing = []
        parent = p.parent
        while not parent.exists():
            missing.append(parent)
            parent = parent.parent
        for d in reversed(missing):
            d.mkdir()
            self._made.append(d)
        self.written.append(p)
        return p

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        for d in reversed(self._made):
            try:
                d.rmdir()
            except OSError:
                pass


@contextmanager
def artifacts(root):
    art = Artifacts(root)
    try:
        yield art
    except BaseException:
        art.rollback()
        raise


def _config(args, **extra) -> RunConfig:
    """Config file, then ``MDM_SEED``, then command-line flags (applied in one pass)."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    flags = {
        **extra,
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "steps", None),
        "percentile": getattr(args, "percentile", None),
        "scales": getattr(args, "scales", None),
    }
    lam = getattr(args, "lam", None)
    if lam is not None:
        flags["lambda"] = lam if lam == "auto" else float(lam)
    return cfg.with_overrides(**flags)


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _load_image_for(model, path) -> np.ndarray:
    x = imageio.load_ppm(path)
    c, h, w = model.input_shape
    if x.shape[0] != c:
        if c == 1:
            x = x.mean(axis=0, keepdims=True)
        else:
            raise CliError(f"{path}: model expects {c} channels, image has {x.shape[0]}")
    if x.shape[1:] != (h, w):
        x = np.clip(imageio.resize_bilinear(x, (h, w)), 0.0, 1.0)
    return x


def _selector_for(cfg: RunConfig, model, image):
    sel = cfg.activation_selector()
    if sel.mode == "logit" and sel.index is None:
        sel = models.ActivationSelector.logit(int(np.argmax(model.logits(image))))
    return sel


# --- subcommands ------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    samples = models.synth_dataset(cfg.seed, args.n, cfg.image_size)
    with artifacts(Path(args.out)) as art:
        rows = []
        for i, s in enumerate(samples):
            name = f"img{i:03d}.pgm"
            imageio.save_ppm(art.path("images", name), s.image)
            imageio.save_ppm(art.path("masks", name), s.blob_mask()[None])
            rows.append((name, s.label, s.center[0], s.center[1]))
        with open(art.path("labels.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", "label", "center_row", "center_col"])
            writer.writerows(rows)
    print(f"wrote {len(samples)} images and masks to {args.out}")
    return 0


def cmd_train_model(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    out = Path(args.out)
    if not out.parent.exists():
        raise CliError(f"output directory does not exist: {out.parent}")
    train = models.synth_dataset(cfg.seed, cfg.train_samples, cfg.image_size)
    held_out = models.synth_dataset(cfg.seed + 1, 100, cfg.image_size)
    model, report = models.train_tiny_cnn(models.build_tiny_cnn(cfg.seed, size=cfg.image_size),
                                          train, cfg.epochs, cfg.model_lr, cfg.seed)
    with artifacts(out.parent) as art:
        blob = models.model_to_bytes(model)
        art.path(out.name).write_bytes(blob)
    print(f"epochs={report.epochs} train_accuracy={report.accuracy:.4f} "
          f"heldout_accuracy={models.accuracy(model, held_out):.4f}")
    if report.losses:
        print(f"final_loss={report.losses[-1]:.6f}")
    print(f"sha256={hashlib.sha256(blob).hexdigest()}")
    return 0


def write_trace_csv(path, traces) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rows", "cols", "iteration", "consistency", "l1", "total"])
        for tr in traces:
            for j, (c, l, t) in enumerate(zip(tr.consistency, tr.l1, tr.total)):
                writer.writerow([tr.extents[0], tr.extents[1], j + 1, repr(c), repr(l), repr(t)])


def cmd_explain(args) -> int:
    cfg = _config(args)
    model = models.load_model(_require_file(args.model, "model file"))
    x = _load_image_for(model, _require_file(args.image, "image"))
    sel = _selector_for(cfg, model, x)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", mdm_explain.DegenerateExplanationWarning)
        exp = mdm_explain.run_mdm(model, x, sel, cfg.mdm())
    with artifacts(Path(args.out)) as art:
        imageio.save_ppm(art.path("heatmap.ppm"), imageio.render_heatmap(exp.heatmap, x, cfg.alpha, cfg.beta))
        imageio.save_ppm(art.path("binary_mask.ppm"), exp.binary_mask_image)
        mdm_explain.write_mdmm(art.path("fused.mdmm"), mdm_explain.explanation_matrices(exp))
        write_trace_csv(art.path("trace.csv"), exp.traces)
        if not args.no_figures:
            from . import plotting

            plotting.plot_explanation(x, exp, art.path("explain.png"), cfg.alpha, cfg.beta)
            plotting.plot_traces(exp.traces, art.path("trace.png"))
    if exp.degenerate or caught:
        print("warning: degenerate explanation (no pixel reached the fusion threshold)", file=sys.stderr)
    probs = model.predict_proba(x)
    print(f"predicted_class={int(np.argmax(probs))} probability={probs.max():.4f} "
          f"gamma={exp.gamma:.4f} retained={int(exp.binary.sum())} degenerate={exp.degenerate}")
    return 0


def _pairs(image_dir: Path, mask_dir: Path):
    exts = {".pgm", ".ppm", ".pnm"}
    images = {p.name: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in exts}
    masks = {p.name: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in exts}
    for name in sorted(set(images) ^ set(masks)):
        print(f"warning: {name} has no partner; skipped", file=sys.stderr)
    return [(n, images[n], masks[n]) for n in sorted(set(images) & set(masks))]


def cmd_evaluate(args) -> int:
    cfg = _config(args, random_baseline=args.random_baseline)
    model = models.load_model(_require_file(args.model, "model file"))
    image_dir, mask_dir = Path(args.images), Path(args.masks)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise CliError(f"directory not found: {d}")
    pairs = _pairs(image_dir, mask_dir)
    if not pairs:
        raise CliError("no image/mask pairs found")

    methods = ["mdm"] + (["random"] if cfg.random_baseline else [])
    rows = {m: [] for m in methods}
    sweeps = {m: [] for m in methods}
    curves = {m: {"deletion": [], "insertion": []} for m in methods}
    names = []
    _, h, w = model.input_shape
    for idx, (name, img_path, mask_path) in enumerate(pairs):
        x = _load_image_for(model, img_path)
        gt = imageio.load_ppm(mask_path).mean(axis=0)
        if gt.shape != (h, w):
            gt = imageio.resize_bilinear(gt[None], (h, w))[0]
        gt = (gt >= 0.5).astype(np.float64)
        if not gt.any():
            print(f"warning: {name} has an empty ground-truth mask; skipped", file=sys.stderr)
            continue
        names.append(name)
        sel = _selector_for(cfg, model, x)
        exp = mdm_explain.run_mdm(model, x, sel, cfg.mdm())
        saliencies = {"mdm": [exp.fused]}
        if cfg.random_baseline:
            saliencies["random"] = [metrics.random_saliency(cfg.seed + 1000 * idx + k, h, w)
                                    for k in range(cfg.baseline_seeds)]
        for method, maps in saliencies.items():
            per = [metrics.evaluate_image(model, x, s, gt, cfg.percentile, cfg.explain_percentile,
                                          cfg.curve_steps) for s in maps]
            rows[method].append(_mean_row(per))
            for r in per:
                curves[method]["deletion"].append(r["deletion_curve"])
                curves[method]["insertion"].append(r["insertion_curve"])
            sweeps[method].append(np.mean([metrics.overlap_sweep(s, gt) for s in maps], axis=0))
        print(f"{name}: mdm deletion={rows['mdm'][-1]['deletion_auc']:.4f} "
              f"insertion={rows['mdm'][-1]['insertion_auc']:.4f} dice={rows['mdm'][-1]['dice']:.4f}")
    if not names:
        raise CliError("every pair was skipped")

    out = Path(args.out)
    with artifacts(out) as art:
        report = {m: metrics.aggregate(rows[m], names).to_dict() for m in methods}
        art.path("report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        for method in methods:
            for i, name in enumerate(names):
                stem = Path(name).stem
                # random rows average several seeds; the first seed's curves are exported
                k = i * (cfg.baseline_seeds if method == "random" else 1)
                curves[method]["deletion"][k].to_csv(art.path("curves", f"{stem}_{method}_deletion.csv"))
                curves[method]["insertion"][k].to_csv(art.path("curves", f"{stem}_{method}_insertion.csv"))
        mean_sweeps = {m: np.mean(sweeps[m], axis=0) for m in methods}
        with open(art.path("sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "percentile", "dice", "iou", "ppv", "sensitivity"])
            for m in methods:
                for row in mean_sweeps[m]:
                    writer.writerow([m] + [repr(float(v)) for v in row])
        if not args.no_figures:
            from . import plotting

            plotting.plot_curves(curves, art.path("figures", "curves.png"))
            plotting.plot_overlap_sweep(mean_sweeps, art.path("figures", "overlap_sweep.png"))

    for m in methods:
        r = report[m]
        print(f"[{m}] AD={r['average_drop']:.2f}% AI={r['average_increase']:.3f} "
              f"deletion={r['deletion_auc']:.4f} insertion={r['insertion_auc']:.4f} "
              f"dice={r['dice']:.4f} iou={r['iou']:.4f} ppv={r['ppv']:.4f} sens={r['sensitivity']:.4f}")
    return 0


def _mean_row(per: list[dict]) -> dict:
    keys = ("base_score", "explained_score", "drop", "deletion_auc", "insertion_auc",
            "dice", "iou", "ppv", "sensitivity")
    row = {k: float(np.mean([r[k] for r in per])) for k in keys}
    row["increase"] = float(np.mean([r["increase"] for r in per]))
    row["target"] = per[0]["target"]
    return row


def cmd_oracle_test(args) -> int:
    seed = args.seed if args.seed is not None else _config(args).seed
    suite = oracle_check.run_suite(trials=args.trials, seed=seed, exponent=args.exponent,
                                   lam=args.lam, required=args.required)
    for i, t in enumerate(suite.trials):
        status = "PASS" if t.passed else "FAIL"
        print(f"trial {i:02d} {status} rho_trained={t.rho_trained:.3f} rho_grid={t.rho_grid:.3f} "
              f"rho_agree={t.rho_agree:.3f} weights={np.round(t.weights, 3).tolist()} "
              f"masks={np.round(t.trained, 3).tolist()}")
    verdict = "PASS" if suite.passed else "FAIL"
    print(f"{verdict}: {suite.n_passed}/{len(suite.trials)} trials ranked masks by weight "
          f"(need {suite.required})")
    return 0 if suite.passed else 1


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides config and MDM_SEED")


def _mdm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="training iterations per mask")
    p.add_argument("--lambda", dest="lam", help="mask weight: 'auto' or a number")
    p.add_argument("--scales", type=int, help="number of mask scales")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdm", description="Multiple dynamic masks saliency toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write quadrant-blob images and ground-truth masks")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-model", help="train the tiny CNN on synthetic data")
    _common(p)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("explain", help="explain one image")
    _common(p)
    _mdm_flags(p)
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="metric suite over an image directory")
    _common(p)
    _mdm_flags(p)
    p.add_argument("model")
    p.add_argument("images")
    p.add_argument("masks")
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, help="overlap cut percentile")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--random-baseline", dest="random_baseline", action="store_true", default=None)
    g.add_argument("--no-random-baseline", dest="random_baseline", action="store_false")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-test", help="mask-ordering check on the additive oracle")
    _common(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--exponent", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--required", type=int, default=18)
    p.set_defaults(func=cmd_oracle_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, models.ModelFormatError, imageio.ImageFormatError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
