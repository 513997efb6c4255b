"""Command-line interface.

Subcommands cover the full pipeline: render ground truth (densify),
generate synthetic data (synth), train, evaluate, report discovered
scenarios, run the ablation grid, and verify gradients.

Exit codes: 0 success, 2 argument or configuration error, 3 dimension or
data error, 4 numerical failure (NaN/Inf). argparse's own rejections also
exit 2.

A dataset directory holds one ``img_NNNN.dmap`` raster and one
``img_NNNN.json`` annotation file per image, listed by a ``manifest.json``.
``synth`` writes this layout; ``train``/``eval``/``scenarios``/``ablate``
read it.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import fileio, gradcheck
from .density import FIXED, GEOMETRY_ADAPTIVE, KernelSpec, count, render_density
from .errors import ConfigError, DataError, ScenecountError
from .harness import (SynthConfig, render_targets, run_ablation,
                      scenario_report, synth_dataset)
from .model import VARIANTS, ModelConfig, build, load_checkpoint, save_checkpoint
from .training import TrainConfig, count_metrics, train


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_json(path, what="config"):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _from_dict(cls, d: dict, what: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


def _parse_train_config(doc: dict, seed_override=None):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    tdict = dict(doc.get("train", {}))
    if seed_override is not None:
        tdict["seed"] = seed_override
    train_cfg = _from_dict(TrainConfig, tdict, "train config")
    kernel = _from_dict(KernelSpec, doc.get("kernel", {}), "kernel config")
    return model_cfg, train_cfg, kernel


def _write_dataset(out_dir, data) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (image, ann, regime) in enumerate(data):
        img_name = f"img_{i:04d}.dmap"
        ann_name = f"img_{i:04d}.json"
        fileio.write_density(out / img_name, image)
        fileio.write_annotations(out / ann_name, ann)
        entries.append({"id": i, "image": img_name, "annotations": ann_name,
                        "count": len(ann), "regime": regime})
    manifest = {"num_images": len(entries), "entries": entries}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_dataset(data_dir):
    """Read a dataset directory into (image, AnnotationSet) pairs."""
    d = Path(data_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{data_dir}: no manifest.json; not a dataset directory")
    manifest = _load_json(mpath, what="manifest")
    try:
        entries = manifest["entries"]
    except (TypeError, KeyError):
        raise DataError(f"{mpath}: manifest has no entry list") from None
    pairs = []
    for e in entries:
        try:
            img = fileio.read_density(d / e["image"])
            ann = fileio.read_annotations(d / e["annotations"])
        except (TypeError, KeyError) as exc:
            raise DataError(f"{mpath}: malformed entry ({exc})") from None
        except OSError as exc:
            raise DataError(f"{data_dir}: {exc}") from exc
        pairs.append((img, ann))
    if not pairs:
        raise DataError(f"{data_dir}: dataset is empty")
    return pairs


def _training_pairs(pairs, model_cfg: ModelConfig, kernel: KernelSpec):
    targets = render_targets([ann for _, ann in pairs], kernel,
                             2 ** model_cfg.backbone_pools)
    return [(img, t) for (img, _), t in zip(pairs, targets)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_densify(args) -> int:
    try:
        ann = fileio.read_annotations(args.annotations)
    except OSError as exc:
        raise DataError(f"cannot read {args.annotations}: {exc}") from exc
    mode = GEOMETRY_ADAPTIVE if args.mode == "adaptive" else FIXED
    spec = KernelSpec(mode=mode, beta=args.beta, k=args.k, fixed_sigma=args.sigma,
                      normalize_mass=(args.normalize == "on"))
    density = render_density(ann, spec)
    fileio.write_density(args.out, density)
    print(f"wrote {args.out}: {density.shape[1]}x{density.shape[0]} map, "
          f"{len(ann)} points, mass {count(density):.6f}")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_load_json(args.config))
    data = synth_dataset(cfg)
    _write_dataset(args.out_dir, data)
    counts = [len(ann) for _, ann, _ in data]
    print(f"wrote {len(data)} images to {args.out_dir} "
          f"(counts {min(counts)}..{max(counts)})")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, kernel = _parse_train_config(_load_json(args.config),
                                                       seed_override=args.seed)
    pairs = _load_dataset(args.data)
    dataset = _training_pairs(pairs, model_cfg, kernel)
    model = build(model_cfg, seed=train_cfg.seed)
    log = train(model, dataset, train_cfg, checkpoint_path=args.out)
    save_checkpoint(args.out, model)
    f = log.final
    print(f"epoch {f.epoch}: loss {f.loss:.6g}, train MAE {f.mae:.4f}, "
          f"MSE {f.mse:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    pairs = _load_dataset(args.data)
    model = load_checkpoint(args.model)
    rows = []
    for i, (img, ann) in enumerate(pairs):
        pred = model.forward(img[None]).predicted_count
        gt = float(len(ann))
        rows.append((i, gt, pred))
    mae, mse = count_metrics([r[1] for r in rows], [r[2] for r in rows])
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "gt_count", "pred_count", "abs_error"])
        for i, gt, pred in rows:
            w.writerow([i, f"{gt:.9g}", f"{pred:.9g}", f"{abs(pred - gt):.9g}"])
        w.writerow(["mae", "", "", f"{mae:.9g}"])
        w.writerow(["mse", "", "", f"{mse:.9g}"])
    print(f"MAE {mae:.4f}  MSE {mse:.4f} over {len(rows)} images")
    print(f"wrote {args.report}")
    return 0


def cmd_scenarios(args) -> int:
    pairs = _load_dataset(args.data)
    model = load_checkpoint(args.model)
    dataset = [(img, float(len(ann))) for img, ann in pairs]
    report = scenario_report(model, dataset, args.bins)
    report.to_json(args.report)
    sizes = {b: len(ids) for b, ids in sorted(report.bin_members.items())}
    print(f"{report.occupied_bin_count} occupied of {args.bins} bins: {sizes}")
    print(f"wrote {args.report}")
    return 0


def cmd_ablate(args) -> int:
    doc = _load_json(args.config)
    model_cfg, train_cfg, kernel = _parse_train_config(doc)
    variants = doc.get("variants", list(VARIANTS))
    bins_list = doc.get("bins_list", [])
    pairs = _load_dataset(args.data)
    dataset = _training_pairs(pairs, model_cfg, kernel)
    table = run_ablation(dataset, model_cfg, train_cfg, variants, bins_list)
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for row in table.to_csv_rows():
            w.writerow(row)
    for c in table.cells:
        detail = f"MAE {c.mae:.4f}  MSE {c.mse:.4f}" if c.status == "ok" else c.status
        print(f"{c.variant:12s} bins={c.bins:<5d} {detail}")
    print(f"wrote {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed, op=args.op)
    print(gradcheck.format_results(results))
    failed = sum(1 for r in results if not r.ok)
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scenecount",
        description="Crowd counting by density regression with adaptive "
                    "scenario discovery.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("densify", help="render an annotation file to a density map")
    d.add_argument("--annotations", required=True, help="annotation JSON path")
    d.add_argument("--mode", choices=("adaptive", "fixed"), default="adaptive")
    d.add_argument("--beta", type=float, default=0.3)
    d.add_argument("--k", type=int, default=3)
    d.add_argument("--sigma", type=float, default=15.0,
                   help="kernel sigma in fixed mode, fallback otherwise")
    d.add_argument("--normalize", choices=("on", "off"), default="on")
    d.add_argument("--out", required=True, help="output .dmap path")
    d.set_defaults(func=cmd_densify)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--config", required=True, help="generator config JSON")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True,
                   help='JSON with optional "model", "train", "kernel" sections')
    t.add_argument("--seed", type=int, required=True,
                   help="training seed (overrides the config)")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--report", required=True, help="output CSV path")
    e.set_defaults(func=cmd_eval)

    sc = sub.add_parser("scenarios", help="report discovered scenario bins")
    sc.add_argument("--data", required=True)
    sc.add_argument("--model", required=True, help="checkpoint path")
    sc.add_argument("--bins", type=int, required=True)
    sc.add_argument("--report", required=True, help="output JSON path")
    sc.set_defaults(func=cmd_scenarios)

    a = sub.add_parser("ablate", help="run the variant and bin-count ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--config", required=True,
                   help='training config JSON plus "variants" and "bins_list"')
    a.add_argument("--report", required=True, help="output CSV path")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--op", default=None,
                   help=f"single check to run; one of {', '.join(gradcheck.CHECK_NAMES)}")
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenecountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
