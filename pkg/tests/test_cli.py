import hashlib
import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

import milexplain as mx
from milexplain.bench import trapezoid_auc
from milexplain.cli import main
from milexplain.data import decide_label


GEN_SECTION = {"num_bags": 12, "bag_size": 4, "image_size": 16,
               "num_classes": 3, "rng_seed": 0}
MODEL_KWARGS = {"embed_dim": 16, "attention_dim": 8, "base_width": 4}


def _write_config(path, section_name, section):
    with open(path, "w") as f:
        yaml.safe_dump({"schema_version": 1, section_name: section}, f)
    return str(path)


def _run(*args):
    return CliRunner().invoke(main, list(args))


@pytest.fixture(scope="session")
def cli_artifacts(tmp_path_factory):
    """Dataset + checkpoint produced through the CLI, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    gen_cfg = _write_config(root / "gen.yaml", "generate", GEN_SECTION)
    res = _run("generate", "--config", gen_cfg, "--out", str(root / "data"))
    assert res.exit_code == 0, res.output
    train_cfg = _write_config(root / "train.yaml", "train", {
        "dataset": str(root / "data"), "max_epochs": 2,
        "model": MODEL_KWARGS})
    res = _run("train", "--config", train_cfg, "--out", str(root / "run"))
    assert res.exit_code == 0, res.output
    return root


def test_generate_deterministic(tmp_path):
    cfg = _write_config(tmp_path / "g.yaml", "generate", GEN_SECTION)
    for name in ("a", "b"):
        res = _run("generate", "--config", cfg, "--out", str(tmp_path / name))
        assert res.exit_code == 0, res.output
    assert ((tmp_path / "a" / "manifest.json").read_bytes()
            == (tmp_path / "b" / "manifest.json").read_bytes())


def test_generate_passes_decidability(cli_artifacts):
    d = mx.load_dataset(cli_artifacts / "data")
    for bag in d.bags:
        assert decide_label(bag, d.num_classes) == bag.label


def test_generate_provenance(cli_artifacts):
    prov = json.loads((cli_artifacts / "data" / "provenance.json").read_text())
    digest = hashlib.sha256((cli_artifacts / "gen.yaml").read_bytes()).hexdigest()
    assert prov["config_digest"] == digest


def test_config_errors_exit_1(tmp_path):
    missing = tmp_path / "missing.yaml"
    assert _run("generate", "--config", str(missing),
                "--out", str(tmp_path / "o")).exit_code == 1

    bad_version = tmp_path / "v.yaml"
    bad_version.write_text(yaml.safe_dump({"schema_version": 9,
                                           "generate": GEN_SECTION}))
    assert _run("generate", "--config", str(bad_version),
                "--out", str(tmp_path / "o")).exit_code == 1

    no_section = tmp_path / "s.yaml"
    no_section.write_text(yaml.safe_dump({"schema_version": 1}))
    assert _run("generate", "--config", str(no_section),
                "--out", str(tmp_path / "o")).exit_code == 1

    unknown_field = _write_config(tmp_path / "u.yaml", "generate",
                                  {**GEN_SECTION, "bogus": 1})
    assert _run("generate", "--config", unknown_field,
                "--out", str(tmp_path / "o")).exit_code == 1


def _all_output(res):
    try:
        return res.output + res.stderr
    except ValueError:
        return res.output


def test_missing_required_field_named(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "t.yaml", "train", {"max_epochs": 1})
    res = _run("train", "--config", cfg, "--out", str(tmp_path / "o"))
    assert res.exit_code == 1
    assert "dataset" in _all_output(res)


def test_data_errors_exit_2(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "t.yaml", "train",
                        {"dataset": str(tmp_path / "nowhere"), "max_epochs": 1})
    res = _run("train", "--config", cfg, "--out", str(tmp_path / "o"))
    assert res.exit_code == 2

    # non-empty output directory without --force
    out = tmp_path / "occupied"
    out.mkdir()
    (out / "junk").write_text("x")
    tcfg = _write_config(tmp_path / "t2.yaml", "train", {
        "dataset": str(cli_artifacts / "data"), "max_epochs": 1,
        "model": MODEL_KWARGS})
    res = _run("train", "--config", tcfg, "--out", str(out))
    assert res.exit_code == 2


def test_runtime_errors_exit_3(tmp_path, cli_artifacts):
    # a bag with inconsistent instance shapes loads fine but cannot be
    # stacked for the forward pass
    insts = [
        mx.Instance(pixels=np.zeros((3, 16, 16), dtype=np.float32),
                    ground_truth_mask=None, instance_id="i0"),
        mx.Instance(pixels=np.zeros((3, 8, 8), dtype=np.float32),
                    ground_truth_mask=None, instance_id="i1"),
    ]
    bad = mx.Dataset(bags=[mx.Bag(instances=insts, label=0, bag_id="bag_x")],
                     num_classes=3)
    mx.save_dataset(bad, tmp_path / "bad")
    # iba calibrates noise statistics up front, outside the per-bag loop,
    # so the shape failure surfaces as a runtime error
    cfg = _write_config(tmp_path / "e.yaml", "explain", {
        "checkpoint": str(cli_artifacts / "run" / "checkpoint.pt"),
        "dataset": str(tmp_path / "bad"), "method": "iba"})
    res = _run("explain", "--config", cfg, "--out", str(tmp_path / "o"))
    assert res.exit_code == 3


def test_train_artifacts_and_digests(cli_artifacts):
    run = cli_artifacts / "run"
    for name in ("checkpoint.pt", "summary.json", "metrics_run0.json",
                 "train_log_run0.jsonl", "confusion_matrix.png",
                 "provenance.json"):
        assert (run / name).exists(), name
    summary = json.loads((run / "summary.json").read_text())
    prov = json.loads((run / "provenance.json").read_text())
    ckpt_digest = hashlib.sha256((run / "checkpoint.pt").read_bytes()).hexdigest()
    assert summary["checkpoint_digest"] == ckpt_digest
    assert prov["checkpoint_digest"] == ckpt_digest
    cfg_digest = hashlib.sha256((cli_artifacts / "train.yaml").read_bytes()).hexdigest()
    assert prov["config_digest"] == cfg_digest
    metrics = json.loads((run / "metrics_run0.json").read_text())
    assert metrics["config_digest"] == cfg_digest


def test_train_multi_run_summary(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "t.yaml", "train", {
        "dataset": str(cli_artifacts / "data"), "max_epochs": 1, "runs": 2,
        "model": MODEL_KWARGS})
    res = _run("train", "--config", cfg, "--out", str(tmp_path / "o"))
    assert res.exit_code == 0, res.output
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    accs = [json.loads((tmp_path / "o" / f"metrics_run{r}.json").read_text())
            ["accuracy"] for r in range(2)]
    assert summary["runs"] == 2
    assert summary["mean"]["accuracy"] == pytest.approx(np.mean(accs))
    assert summary["std"]["accuracy"] == pytest.approx(np.std(accs))


def test_explain_command(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "e.yaml", "explain", {
        "checkpoint": str(cli_artifacts / "run" / "checkpoint.pt"),
        "dataset": str(cli_artifacts / "data"), "method": "gradcam",
        "bags": ["bag_0000"]})
    out = tmp_path / "o"
    res = _run("explain", "--config", cfg, "--out", str(out))
    assert res.exit_code == 0, res.output
    assert (out / "bag_0000_gradcam.npz").exists()
    meta = json.loads((out / "bag_0000_gradcam.meta.json").read_text())
    assert meta["metadata"]["checkpoint_digest"] == hashlib.sha256(
        (cli_artifacts / "run" / "checkpoint.pt").read_bytes()).hexdigest()
    overlays = list((out / "overlays" / "bag_0000").glob("*.png"))
    assert len(overlays) == GEN_SECTION["bag_size"]

    # identical reruns produce byte-identical attribution metadata
    res = _run("explain", "--config", cfg, "--out", str(tmp_path / "o2"))
    assert res.exit_code == 0
    assert ((out / "bag_0000_gradcam.meta.json").read_bytes()
            == (tmp_path / "o2" / "bag_0000_gradcam.meta.json").read_bytes())


def test_explain_unknown_method_and_bag(tmp_path, cli_artifacts):
    base = {"checkpoint": str(cli_artifacts / "run" / "checkpoint.pt"),
            "dataset": str(cli_artifacts / "data")}
    cfg = _write_config(tmp_path / "a.yaml", "explain",
                        {**base, "method": "shap"})
    assert _run("explain", "--config", cfg,
                "--out", str(tmp_path / "o")).exit_code == 1
    cfg = _write_config(tmp_path / "b.yaml", "explain",
                        {**base, "method": "gradcam", "bags": ["nope"]})
    assert _run("explain", "--config", cfg,
                "--out", str(tmp_path / "o")).exit_code == 2


def test_bench_insertion_only(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "b.yaml", "bench", {
        "checkpoint": str(cli_artifacts / "run" / "checkpoint.pt"),
        "dataset": str(cli_artifacts / "data"), "methods": ["gradcam"],
        "metrics": ["insertion"], "max_bags": 2, "curve_steps": 4})
    out = tmp_path / "o"
    res = _run("bench", "--config", cfg, "--out", str(out))
    assert res.exit_code == 0, res.output
    table = (out / "auc_table.csv").read_text().strip().splitlines()
    assert table[0] == "method,mode,mean_auc,std_auc,num_bags"
    assert len(table) == 2 and table[1].startswith("gradcam,insertion,")
    # summary AUC equals recomputation from the per-bag cache
    summary = json.loads((out / "summary.json").read_text())
    cached = []
    for f in sorted((out / "cache" / "gradcam").glob("*.json")):
        points = json.loads(f.read_text())["insertion"]["points"]
        cached.append(trapezoid_auc([tuple(p) for p in points]))
    assert summary["methods"]["gradcam"]["insertion"]["mean_auc"] == (
        pytest.approx(np.mean(cached)))


def test_bench_roar_requires_train_section(tmp_path, cli_artifacts):
    cfg = _write_config(tmp_path / "b.yaml", "bench", {
        "checkpoint": str(cli_artifacts / "run" / "checkpoint.pt"),
        "dataset": str(cli_artifacts / "data"), "methods": ["gradcam"],
        "metrics": ["roar"]})
    assert _run("bench", "--config", cfg,
                "--out", str(tmp_path / "o")).exit_code == 1
