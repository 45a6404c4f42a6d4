import json
from pathlib import Path

import numpy as np
import pytest

from rvernet_lab.cli import load_config, model_from_checkpoint, run
from rvernet_lab.tensor import load_checkpoint

TINY_DATA = {"synthetic": {"image_side": 32, "num_classes": 3, "samples_per_class": 6,
                           "test_per_class": 2, "seed": 7}}
CNN = {"kind": "mini_cnn", "feature_dim": 8, "width": 8, "depth": 1, "image_side": 32}
VIT = {"kind": "mini_vit", "feature_dim": 8, "width": 8, "depth": 1, "heads": 2,
       "patch_size": 16, "image_side": 32}
TRAIN = {"epochs": 2, "warmup_epochs": 1, "batch_size": 4}


def _config(tmp_path, name="cfg.json", **over):
    cfg = {"seed": 1, "dtype": "f64", "dataset": TINY_DATA,
           "model": {"roi": CNN, "xroi": CNN, "mode": "both"}, "train": TRAIN}
    cfg.update(over)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_twice_identical(tmp_path):
    cfg = _config(tmp_path)
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    manifest = json.loads(a["manifest.json"])
    assert len(manifest["samples"]) == 18


def test_gen_data_refuses_non_empty_dir_without_force(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "d"
    assert run(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert run(["gen-data", "--config", str(cfg), "--out", str(out)]) == 2
    assert run(["gen-data", "--config", str(cfg), "--out", str(out), "--force"]) == 0


def test_default_spec_counts():
    from rvernet_lab.data import SyntheticSpec
    s = SyntheticSpec()
    assert (s.num_classes, s.samples_per_class) == (6, 400)


def test_unknown_keys_rejected_without_writing(tmp_path):
    cfg = _config(tmp_path, trian={})
    out = tmp_path / "o"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    bad_model = _config(tmp_path, "m.json", model={"roi": {**CNN, "widht": 4}, "xroi": CNN})
    assert run(["train", "--config", str(bad_model), "--out", str(out)]) == 2
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert run(["train"]) == 2
    assert run(["bogus", "--config", "x"]) == 2
    assert run(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert run(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_threads_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("RVERNET_THREADS", "zero")
    assert run(["gen-data", "--config", str(_config(tmp_path)), "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = _config(root)
    assert run(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg, root / "run" / "model.ckpt"


def test_train_outputs(trained):
    root, _, ckpt = trained
    files = set(_tree(root / "run"))
    assert {"model.ckpt", "history.csv", "history.json"} <= files
    hist = json.loads((root / "run" / "history.json").read_text())
    assert len(hist["epoch"]) == 2
    _, meta = load_checkpoint(ckpt)
    assert meta["descriptor"]["mode"] == "both"


def test_train_byte_identical(trained, tmp_path):
    root, cfg, _ = trained
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert _tree(root / "run") == _tree(tmp_path / "again")


def test_seed_flag_overrides(trained, tmp_path):
    _, cfg, _ = trained
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seed", "5"]) == 0
    assert load_config(cfg, 5).seed == 5
    _, meta = load_checkpoint(tmp_path / "s" / "model.ckpt")
    assert meta["seed"] == 5


def test_roi_only_trains(tmp_path):
    cfg = _config(tmp_path, model={"roi": CNN, "mode": "roi_only"})
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    model, _ = model_from_checkpoint(tmp_path / "r" / "model.ckpt")
    assert model.xroi_backbone is None


def test_eval_and_missing_checkpoint(trained, tmp_path):
    _, cfg, ckpt = trained
    assert run(["eval", "--config", str(cfg), "--out", str(tmp_path / "e"),
                "--checkpoint", str(ckpt)]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["averaging"] == "macro" and m["subset"] == [0, 1]
    assert run(["eval", "--config", str(cfg), "--out", str(tmp_path / "e2"),
                "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    assert run(["eval", "--config", str(cfg), "--out", str(tmp_path / "e3")]) == 2
    assert not (tmp_path / "e2").exists()


def test_eval_overfit_oracle(tmp_path):
    # a tiny memorising model evaluated on its own training images
    data = {"synthetic": {"image_side": 32, "num_classes": 3, "samples_per_class": 4,
                          "test_per_class": 4, "seed": 3}}
    # both branches: the ambiguous pair shares x1, so roi alone cannot separate it
    cfg = _config(tmp_path, dataset=data,
                  train={"epochs": 60, "warmup_epochs": 1, "batch_size": 12, "flip_p": 0.0,
                         "label_smoothing": 0.0, "lr0": 0.01})
    # every sample sits in the test split
    from rvernet_lab.cli import _load_data
    c = load_config(cfg)
    tr, te, _, _ = _load_data(c)
    assert len(tr) == 0 and len(te) == 12
    # train directly on the test images through the library, then eval via CLI
    from rvernet_lab.cli import _build, _meta
    from rvernet_lab.tensor import save_checkpoint
    from rvernet_lab.train import train
    model = _build(c, 3)
    train(model, te, c.train)
    save_checkpoint(tmp_path / "m.ckpt", model.parameters(), _meta(model, c, 3))
    assert run(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev"),
                "--checkpoint", str(tmp_path / "m.ckpt")]) == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["top1"] == 100.0


def test_perturb_outputs(trained, tmp_path):
    _, cfg, ckpt = trained
    assert run(["perturb", "--config", str(cfg), "--out", str(tmp_path / "p"),
                "--checkpoint", str(ckpt)]) == 0
    rep = json.loads((tmp_path / "p" / "decline.json").read_text())
    labels = [r["label"] for r in rep["rows"]]
    assert "translocate(-4,9)@xroi" in labels  # reference offsets scaled to 32 px
    for r in rep["rows"]:
        assert r["delta"] == r["perturbed_top1"] - rep["baseline_top1"]


def test_perturb_empty_specs_and_bad_spec(trained, tmp_path):
    root, _, ckpt = trained
    empty = _config(root, "empty.json", perturb={"specs": []})
    assert run(["perturb", "--config", str(empty), "--out", str(tmp_path / "p"),
                "--checkpoint", str(ckpt)]) == 0
    assert json.loads((tmp_path / "p" / "decline.json").read_text())["rows"] == []
    bad = _config(root, "bad.json", perturb={"specs": [{"kind": "permute", "patch_side": 5}]})
    assert run(["perturb", "--config", str(bad), "--out", str(tmp_path / "q"),
                "--checkpoint", str(ckpt)]) == 2
    assert not (tmp_path / "q").exists()


def test_roi_only_perturbing_xroi_is_zero(tmp_path):
    cfg = _config(tmp_path, model={"roi": CNN, "mode": "roi_only"},
                  perturb={"specs": [{"kind": "translocate", "dx": 3, "dy": -4, "target": "xroi"},
                                     {"kind": "permute", "patch_side": 16, "target": "xroi"}]})
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert run(["perturb", "--config", str(cfg), "--out", str(tmp_path / "p"),
                "--checkpoint", str(tmp_path / "r" / "model.ckpt")]) == 0
    rows = json.loads((tmp_path / "p" / "decline.json").read_text())["rows"]
    assert [r["delta"] for r in rows] == [0.0, 0.0]


def test_gradcam_outputs_and_errors(trained, tmp_path):
    root, _, ckpt = trained
    ok = _config(root, "gc.json", gradcam={"sample_ids": [0, 1]})
    assert run(["gradcam", "--config", str(ok), "--out", str(tmp_path / "g"),
                "--checkpoint", str(ckpt)]) == 0
    assert sorted(p.name for p in (tmp_path / "g").glob("*.png")) == [
        "sample00000_roi.png", "sample00001_roi.png"]
    far = _config(root, "gc2.json", gradcam={"sample_ids": [999]})
    assert run(["gradcam", "--config", str(far), "--out", str(tmp_path / "g2"),
                "--checkpoint", str(ckpt)]) == 2


def test_gradcam_rejects_vit_branch(tmp_path, capsys):
    cfg = _config(tmp_path, model={"roi": VIT, "xroi": VIT}, train={**TRAIN, "epochs": 1, "warmup_epochs": 0})
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "v")]) == 0
    code = run(["gradcam", "--config", str(cfg), "--out", str(tmp_path / "g"),
                "--checkpoint", str(tmp_path / "v" / "model.ckpt")])
    assert code == 2
    assert "unsupported architecture" in capsys.readouterr().err


def test_ablate_and_report(tmp_path):
    cfg = _config(tmp_path, train={**TRAIN, "epochs": 1, "warmup_epochs": 0})
    assert run(["ablate", "--config", str(cfg), "--out", str(tmp_path / "ab")]) == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["name"] for r in rows] == ["roi_only", "xroi_only", "both"]
    assert all(r["best"] or r["worst"] or True for r in rows)
    # identical initial weights for a branch across legs
    a, _ = load_checkpoint(tmp_path / "ab" / "roi_only" / "model.ckpt")
    assert "roi/stem.w" in a
    rep_cfg = tmp_path / "report.json"
    rep_cfg.write_text(json.dumps({"dataset": TINY_DATA, "report": {
        "metrics": [f"ab/{m}/metrics.json" for m in ("roi_only", "xroi_only", "both")]}}))
    assert run(["report", "--config", str(rep_cfg), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table.csv").read_text().startswith("name,top1")
    missing = tmp_path / "report2.json"
    missing.write_text(json.dumps({"dataset": TINY_DATA, "report": {"metrics": ["nope.json"]}}))
    assert run(["report", "--config", str(missing), "--out", str(tmp_path / "rep2")]) == 2


def test_distill_then_finetune(tmp_path):
    deit = {**VIT, "kind": "mini_deit"}
    teacher_cfg = _config(tmp_path, "t.json", model={"standalone": CNN})
    assert run(["train", "--config", str(teacher_cfg), "--out", str(tmp_path / "t")]) == 0
    student_cfg = _config(tmp_path, "s.json", model={"standalone": deit},
                          train={**TRAIN, "distill": {"teacher_checkpoint": "t/model.ckpt"}})
    assert run(["train", "--config", str(student_cfg), "--out", str(tmp_path / "s")]) == 0
    student, meta = model_from_checkpoint(tmp_path / "s" / "model.ckpt")
    assert student.distilled and meta["descriptor"]["distilled"]
    fine = _config(tmp_path, "f.json", model={"roi": deit, "xroi": deit,
                                              "roi_init": "s/model.ckpt"})
    assert run(["train", "--config", str(fine), "--out", str(tmp_path / "f")]) == 0
    missing = _config(tmp_path, "f2.json", model={"roi": deit, "xroi": deit, "roi_init": "zz.ckpt"})
    assert run(["train", "--config", str(missing), "--out", str(tmp_path / "f2")]) == 2


def test_runtime_failure_exit_code(tmp_path):
    cfg = _config(tmp_path, dtype="f32", train={**TRAIN, "lr0": 1e30})
    code = run(["train", "--config", str(cfg), "--out", str(tmp_path / "nan")])
    assert code == 3
