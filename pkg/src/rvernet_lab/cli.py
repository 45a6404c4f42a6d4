"""``rvernet-lab``: data generation, training, evaluation, perturbation,
ablation, GradCAM and report commands driven by one JSON config.

Exit codes: 0 success, 2 validation / usage error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .backbones import BackboneConfig
from .data import (DatasetError, SyntheticSpec, class_names, filter_classes,
                   generate_synthetic, load_dataset, save_dataset, to_arrays)
from .model import (MODES, Classifier, RveRNetModel, build_classifier,
                    build_rvernet, load_parameters)
from .metrics import (MetricsReport, UnsupportedArchitectureError, gradcam,
                      save_heatmap_png, table_report, table_to_csv)
from .perturb import (DeclineReport, aggregate_by_architecture,
                      aggregate_to_csv, apply_spec, default_specs,
                      perturbation_eval, spec_from_dict)
from .tensor import (DTYPES, ConfigurationError, DimensionError,
                     load_checkpoint, save_checkpoint)
from .train import TrainConfig, TrainingError, predict, train

log = logging.getLogger("rvernet_lab")

COMMANDS = ("gen-data", "train", "eval", "perturb", "ablate", "gradcam", "report")
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Bad config, flags or inputs; maps to exit code 2."""


# -- config -------------------------------------------------------------------
def _reject_unknown(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{section} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise UsageError(f"unknown keys in {section}: {sorted(unknown)}")


@dataclass
class DatasetSection:
    synthetic: SyntheticSpec | None = None
    manifest: str | None = None
    excluded_classes: list = field(default_factory=list)
    subset: list | None = None

    KEYS = ("synthetic", "manifest", "excluded_classes", "subset")

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "DatasetSection":
        _reject_unknown("dataset", d, cls.KEYS)
        if ("synthetic" in d) == ("manifest" in d):
            raise UsageError("dataset needs exactly one of 'synthetic' or 'manifest'")
        syn = SyntheticSpec.from_dict(d["synthetic"]) if "synthetic" in d else None
        manifest = str((base / d["manifest"]).resolve()) if "manifest" in d else None
        subset = d.get("subset")
        if subset is None and syn is not None:
            subset = list(syn.ambiguous_pair)
        return cls(syn, manifest, list(d.get("excluded_classes", [])), subset)


@dataclass
class ModelSection:
    roi: BackboneConfig | None = None
    xroi: BackboneConfig | None = None
    standalone: BackboneConfig | None = None
    mode: str = "both"
    hidden: int | None = None
    num_classes: int | None = None
    roi_init: str | None = None
    xroi_init: str | None = None

    KEYS = ("roi", "xroi", "standalone", "mode", "hidden", "num_classes", "roi_init", "xroi_init")

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "ModelSection":
        _reject_unknown("model", d, cls.KEYS)
        out = cls(mode=d.get("mode", "both"), hidden=d.get("hidden"),
                  num_classes=d.get("num_classes"))
        for k in ("roi", "xroi", "standalone"):
            if d.get(k) is not None:
                setattr(out, k, BackboneConfig.from_dict(d[k]))
        for k in ("roi_init", "xroi_init"):
            if d.get(k) is not None:
                p = (base / d[k]).resolve()
                if not p.is_file():
                    raise UsageError(f"model.{k}: no checkpoint at {p}")
                setattr(out, k, str(p))
        if out.mode not in MODES:
            raise UsageError(f"model.mode must be one of {MODES}, got {out.mode!r}")
        if out.standalone is None:
            if out.mode in ("both", "roi_only") and out.roi is None:
                raise UsageError(f"model.mode {out.mode} needs model.roi")
            if out.mode in ("both", "xroi_only") and out.xroi is None:
                raise UsageError(f"model.mode {out.mode} needs model.xroi")
        elif out.roi is not None or out.xroi is not None:
            raise UsageError("model.standalone excludes model.roi / model.xroi")
        return out


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    model: ModelSection | None
    train: TrainConfig
    perturb: list | None
    gradcam: dict
    report: dict
    seed: int = 0
    dtype: str = "f32"
    out_dir: str | None = None
    source: Path | None = None

    KEYS = ("dataset", "model", "train", "perturb", "gradcam", "report", "seed", "dtype", "out_dir")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    _reject_unknown("config", raw, ExperimentConfig.KEYS)
    base = path.parent
    try:
        seed = int(raw.get("seed", 0)) if seed_override is None else seed_override
        dtype = raw.get("dtype", "f32")
        if dtype not in DTYPES:
            raise UsageError(f"dtype must be one of {sorted(DTYPES)}")
        dataset = DatasetSection.from_dict(raw.get("dataset", {}), base)
        model = ModelSection.from_dict(raw["model"], base) if "model" in raw else None
        tdict = dict(raw.get("train", {}))
        tdict["seed"] = seed
        train_cfg = TrainConfig.from_dict(tdict)
        if train_cfg.distill is not None and train_cfg.distill.teacher_checkpoint:
            p = (base / train_cfg.distill.teacher_checkpoint).resolve()
            if not p.is_file():
                raise UsageError(f"train.distill.teacher_checkpoint: no file at {p}")
            train_cfg.distill.teacher_checkpoint = str(p)
        perturb = raw.get("perturb")
        if perturb is not None:
            _reject_unknown("perturb", perturb, ("specs",))
            perturb = [spec_from_dict(s) for s in perturb.get("specs", [])]
        gc = raw.get("gradcam", {})
        _reject_unknown("gradcam", gc, ("sample_ids", "branch", "class_index"))
        rep = raw.get("report", {})
        _reject_unknown("report", rep, ("metrics", "declines"))
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    out = raw.get("out_dir")
    if out is not None:
        out = str((base / out).resolve())
    return ExperimentConfig(dataset, model, train_cfg, perturb, gc, rep, seed, dtype, out, path)


# -- helpers --------------------------------------------------------------------
def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    # --force overwrites our files in place; nothing else in the directory is touched
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_data(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.synthetic is not None:
        items = generate_synthetic(ds.synthetic)
    else:
        items = load_dataset(ds.manifest)
    items, mapping = filter_classes(items, ds.excluded_classes)
    num_classes = len(mapping) if mapping else 0
    return to_arrays(items, "train"), to_arrays(items, "test"), num_classes, mapping


def _subset(cfg: ExperimentConfig, mapping: dict):
    if not cfg.dataset.subset:
        return None
    kept = [mapping[k] for k in cfg.dataset.subset if k in mapping]
    return kept or None


def _build(cfg: ExperimentConfig, num_classes: int, mode: str | None = None):
    m = cfg.model
    if m is None:
        raise UsageError("config has no model section")
    k = m.num_classes or num_classes
    if m.num_classes is not None and m.num_classes != num_classes:
        raise UsageError(f"model.num_classes={m.num_classes} but dataset has {num_classes} classes")
    if m.standalone is not None:
        return build_classifier(m.standalone, k, seed=cfg.seed, dtype=cfg.np_dtype)
    mode = mode or m.mode
    model = build_rvernet(m.roi, m.xroi, k, hidden=m.hidden, mode=mode, seed=cfg.seed,
                          dtype=cfg.np_dtype)
    # branch warm starts from a standalone classifier's backbone
    for attr, branch in (("roi_init", "roi"), ("xroi_init", "xroi")):
        path = getattr(m, attr)
        bb = model.roi_backbone if branch == "roi" else model.xroi_backbone
        if path is None or bb is None:
            continue
        values, _ = load_checkpoint(path)
        backbone_vals = {n[len("backbone/"):]: v for n, v in values.items() if n.startswith("backbone/")}
        try:
            load_parameters(bb.params, backbone_vals)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"model.{attr}: {exc}") from None
    return model


def _meta(model, cfg: ExperimentConfig, num_classes: int) -> dict:
    kind = "classifier" if isinstance(model, Classifier) else "rvernet"
    return {"kind": kind, "descriptor": model.descriptor(), "dtype": cfg.dtype,
            "seed": cfg.seed, "num_classes": num_classes,
            "train": cfg.train.to_dict()}


def model_from_checkpoint(path, dtype=None):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        values, meta = load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    desc = meta.get("descriptor")
    if not desc:
        raise UsageError(f"checkpoint {path} carries no model descriptor")
    dtype = dtype or DTYPES[meta.get("dtype", "f32")]
    if meta.get("kind") == "classifier":
        model = build_classifier(BackboneConfig.from_dict(desc["standalone"]), desc["num_classes"],
                                 dtype=dtype)
        model.distilled = bool(desc.get("distilled"))
    else:
        roi = BackboneConfig.from_dict(desc["roi"]) if desc.get("roi") else None
        xroi = BackboneConfig.from_dict(desc["xroi"]) if desc.get("xroi") else None
        model = build_rvernet(roi, xroi, desc["num_classes"], hidden=desc["hidden"],
                              mode=desc["mode"], dtype=dtype)
    try:
        load_parameters(model.parameters(), values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {path} does not match its descriptor: {exc}") from None
    return model, meta


def _teacher(cfg: ExperimentConfig):
    d = cfg.train.distill
    if d is None or not d.teacher_checkpoint:
        return None
    teacher, _ = model_from_checkpoint(d.teacher_checkpoint)
    if not isinstance(teacher, Classifier):
        raise UsageError("the distillation teacher must be a standalone classifier checkpoint")
    return teacher


def _train_and_save(cfg, model, tr, te, subset, out: Path, num_classes: int, teacher=None):
    def on_epoch(epoch, m):
        k = cfg.train.checkpoint_every
        if k and epoch % k == 0 and epoch != cfg.train.epochs:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / f"epoch{epoch:03d}.ckpt", m.parameters(),
                            _meta(m, cfg, num_classes))

    model, hist = train(model, tr, cfg.train, test=te, teacher=teacher, subset=subset,
                        on_epoch=on_epoch)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is not None:
        model.distilled = True
    save_checkpoint(out / CHECKPOINT_NAME, model.parameters(), _meta(model, cfg, num_classes))
    _write(out / "history.csv", hist.to_csv())
    _write(out / "history.json", hist.to_json())
    return model, hist


def _evaluate(model, te, num_classes, subset) -> MetricsReport:
    if len(te) == 0:
        raise UsageError("the test split is empty")
    return MetricsReport.from_predictions(predict(model, te), te.labels, num_classes, subset)


# -- commands -----------------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig, out: Path, args) -> None:
    spec = cfg.dataset.synthetic
    if spec is None:
        raise UsageError("gen-data needs dataset.synthetic")
    _prepare_out(out, args.force)
    save_dataset(generate_synthetic(spec), out, class_names(spec))
    _write(out / "spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True))


def cmd_train(cfg, out, args):
    tr, te, k, mapping = _load_data(cfg)
    teacher = _teacher(cfg)
    _prepare_out(out, args.force)
    model = _build(cfg, k)
    _train_and_save(cfg, model, tr, te, _subset(cfg, mapping), out, k, teacher)


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    p = Path(args.checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return p


def cmd_eval(cfg, out, args):
    ckpt = _need_checkpoint(args)
    model, _ = model_from_checkpoint(ckpt, cfg.np_dtype)
    tr, te, k, mapping = _load_data(cfg)
    if model.num_classes != k:
        raise UsageError(f"checkpoint has {model.num_classes} classes, dataset {k}")
    _prepare_out(out, args.force)
    rep = _evaluate(model, te, k, _subset(cfg, mapping))
    _write(out / "metrics.json", rep.to_json())
    _write(out / "metrics.csv", rep.to_csv())


def cmd_perturb(cfg, out, args):
    ckpt = _need_checkpoint(args)
    model, _ = model_from_checkpoint(ckpt, cfg.np_dtype)
    if not isinstance(model, RveRNetModel):
        raise UsageError("perturb needs a two-branch checkpoint")
    _, te, k, _ = _load_data(cfg)
    if len(te) == 0:
        raise UsageError("the test split is empty")
    specs = cfg.perturb if cfg.perturb is not None else default_specs(te.x1.shape[-1], seed=cfg.seed)
    try:
        # surface spec/image mismatches before anything is written
        for s in specs:
            apply_spec(s, te.x1[:1])
    except (ConfigurationError, DimensionError) as exc:
        raise UsageError(str(exc)) from None
    _prepare_out(out, args.force)
    rep = perturbation_eval(model, te, specs)
    _write(out / "decline.json", rep.to_json())
    _write(out / "decline.csv", rep.to_csv())


def cmd_ablate(cfg, out, args):
    m = cfg.model
    if m is None or m.standalone is not None or m.roi is None or m.xroi is None:
        raise UsageError("ablate needs model.roi and model.xroi")
    tr, te, k, mapping = _load_data(cfg)
    subset = _subset(cfg, mapping)
    _prepare_out(out, args.force)
    runs = []
    for mode in ("roi_only", "xroi_only", "both"):
        model = _build(cfg, k, mode=mode)
        model, _ = _train_and_save(cfg, model, tr, te, subset, out / mode, k)
        rep = _evaluate(model, te, k, subset)
        _write(out / mode / "metrics.json", rep.to_json())
        _write(out / mode / "metrics.csv", rep.to_csv())
        runs.append(({"name": mode, **model.descriptor()}, rep))
    rows = table_report(runs)
    _write(out / "ablation.csv", table_to_csv(rows))
    _write(out / "ablation.json", json.dumps(rows, indent=2, sort_keys=True))


def cmd_gradcam(cfg, out, args):
    ckpt = _need_checkpoint(args)
    model, _ = model_from_checkpoint(ckpt, cfg.np_dtype)
    branch = cfg.gradcam.get("branch", "roi")
    if branch not in ("roi", "xroi"):
        raise UsageError("gradcam.branch must be 'roi' or 'xroi'")
    _, te, k, _ = _load_data(cfg)
    ids = cfg.gradcam.get("sample_ids", [0])
    if not ids or any((not isinstance(i, int)) or i < 0 or i >= len(te) for i in ids):
        raise UsageError(f"gradcam.sample_ids must be test-split indices in [0, {len(te)})")
    sub = te.subset(np.asarray(ids))
    try:
        maps = gradcam(model, sub.x1, sub.x2, cfg.gradcam.get("class_index"), branch=branch)
    except UnsupportedArchitectureError as exc:
        raise UsageError(f"unsupported architecture: {exc}") from None
    _prepare_out(out, args.force)
    summary = []
    for i, hm in zip(ids, maps):
        name = f"sample{i:05d}_{branch}.png"
        save_heatmap_png(hm, out / name, te.x1.shape[-1])
        summary.append({"sample": i, "branch": branch, "class_index": hm.class_index,
                        "layer": hm.layer, "label": int(te.labels[i]), "png": name,
                        "argmax_cell": list(hm.argmax_cell)})
    _write(out / "gradcam.json", json.dumps(summary, indent=2, sort_keys=True))


def cmd_report(cfg, out, args):
    base = cfg.source.parent
    metric_paths = [base / p for p in cfg.report.get("metrics", [])]
    decline_paths = [base / p for p in cfg.report.get("declines", [])]
    if not metric_paths and not decline_paths:
        raise UsageError("report needs report.metrics and/or report.declines paths")
    missing = [str(p) for p in metric_paths + decline_paths if not p.is_file()]
    if missing:
        raise UsageError(f"report inputs not found: {missing}")
    runs = []
    for p in metric_paths:
        d = json.loads(p.read_text())
        rep = MetricsReport(**{k: d[k] for k in MetricsReport.__dataclass_fields__ if k in d})
        runs.append(({"name": str(p.parent.name or p.stem)}, rep))
    declines = []
    for p in decline_paths:
        d = json.loads(p.read_text())
        declines.append(DeclineReport(d["baseline_top1"], d["rows"], d.get("roi_kind"),
                                      d.get("xroi_kind"), d.get("descriptor", {})))
    _prepare_out(out, args.force)
    if runs:
        rows = table_report(runs)
        _write(out / "table.csv", table_to_csv(rows))
        _write(out / "table.json", json.dumps(rows, indent=2, sort_keys=True))
    if declines:
        agg = aggregate_by_architecture(declines)
        _write(out / "declines.csv", aggregate_to_csv(agg))
        _write(out / "declines.json", json.dumps(agg, indent=2, sort_keys=True))


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "perturb": cmd_perturb, "ablate": cmd_ablate, "gradcam": cmd_gradcam,
            "report": cmd_report}


# -- entry point -------------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvernet-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--checkpoint", help="model checkpoint for eval/perturb/gradcam")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _threads() -> int:
    raw = os.environ.get("RVERNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RVERNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RVERNET_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n_threads = _threads()
        cfg = load_config(args.config, args.seed)
        out = args.out or cfg.out_dir
        if not out:
            raise UsageError("no output directory: pass --out or set out_dir")
        with threadpool_limits(limits=n_threads):
            HANDLERS[args.command](cfg, Path(out), args)
    except UsageError as exc:
        print(f"rvernet-lab: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, DimensionError, DatasetError) as exc:
        print(f"rvernet-lab: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError, ArithmeticError, OSError, ValueError) as exc:
        print(f"rvernet-lab: runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
