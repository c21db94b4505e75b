import json

import numpy as np
import pytest
import yaml

from univit import cli, training
from univit.encoder import EncoderConfig
from univit.evaluation import read_pgm
from univit.synthetic import LABELS

TINY = {
    "seed": 0,
    "encoder": {"depth": 1, "d": 12, "n_heads": 1, "mlp_ratio": 2, "patch": 4},
    "views": {"n_global": 2, "n_local": 2, "long_side_2d": 16, "long_side_3d": 8, "patch": 4},
    "objective": {"n_directions": 8},
    "stage": {"steps": 3, "batch_2d": 2, "batch_3d": 1},
    "optim": {"lr": 1e-3},
    "eval": {"n_boot": 20},
}
ENC = EncoderConfig(depth=1, d=12, n_heads=1, mlp_ratio=2, patch=4)


def write_config(path, data_root, **over):
    doc = {**TINY, "data": {"root": str(data_root)}, **over}
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(root), "--seed", "0", "--n-2d", "24", "--n-3d", "12",
                     "--test-frac", "0.5"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    cfg = write_config(run / "c.yaml", data)
    assert cli.main(["train", "--config", cfg, "--stage", "stage3", "--out", str(run / "s3")]) == 0
    return run, cfg


def test_gen_data_files_and_manifest(data, tmp_path):
    m = json.loads((data / "manifest.json").read_text())
    assert len(m["samples"]) == 36 and len(list(data.glob("*.mmv"))) == 36
    assert m["generator_seed"] == 0
    assert sum(r["split"] == "test" for r in m["samples"]) == 18
    row = m["samples"][0]
    assert set(row) >= {"id", "file", "modality", "labels", "label_mask", "split"}
    assert cli.main(["gen-data", "--out", str(tmp_path / "b"), "--n-2d", "24", "--n-3d", "12",
                     "--test-frac", "0.5"]) == 0
    for f in sorted(data.iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_gen_data_refuses_non_empty_dir(tmp_path):
    (tmp_path / "x").write_text("keep")
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n-2d", "1", "--n-3d", "0"]) == cli.EXIT_IO
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n-2d", "1", "--n-3d", "0", "--force"]) == 0


def test_gen_data_marginals(tmp_path):
    cli.main(["gen-data", "--out", str(tmp_path), "--n-2d", "1500", "--n-3d", "0"])
    y = np.array([r["labels"] for r in json.loads((tmp_path / "manifest.json").read_text())["samples"]])
    # 4 standard errors of Bernoulli(0.4) at n=1500
    assert np.abs(y.mean(0) - 0.4).max() < 0.051


def test_train_writes_resolved_config(trained):
    run, _ = trained
    resolved = yaml.safe_load((run / "s3" / "config.yaml").read_text())
    assert resolved["encoder"]["d"] == 12 and resolved["objective"]["lam"] == 0.025
    ck = training.load_params(run / "s3" / "final.ckpt", ENC)
    assert ck[1]["run_config"]["seed"] == 0
    lines = (run / "s3" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_train_stage1_is_2d_only(data, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", data)
    assert cli.main(["train", "--config", cfg, "--stage", "stage1", "--out", str(tmp_path / "s1")]) == 0
    recs = [json.loads(l) for l in (tmp_path / "s1" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["n_3d"] == 0 for r in recs)
    assert cli.main(["train", "--config", cfg, "--stage", "stage2", "--init-from", str(tmp_path / "s1" / "final.ckpt"),
                     "--out", str(tmp_path / "s2")]) == 0
    assert training.load_params(tmp_path / "s2" / "final.ckpt", ENC)[1]["stage"]["stage"] == "stage2_curriculum"


def test_train_error_codes(data, tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml", data)
    assert cli.main(["train", "--config", cfg, "--stage", "stage2", "--out", str(tmp_path / "a")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", cfg, "--stage", "stage2", "--init-from", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "a")]) == cli.EXIT_IO
    bad = tmp_path / "bad.yaml"
    bad.write_text("encoder:\n  widht: 3\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "a")]) == cli.EXIT_CONFIG

    real = training.compute_losses

    def poisoned(*a, **k):
        out = real(*a, **k)
        out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(training, "compute_losses", poisoned)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "nan")]) == cli.EXIT_NUMERIC


def test_seed_env_changes_run(data, tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml", data)
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    monkeypatch.setenv("MMV_SEED", "9")
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "b")])
    assert yaml.safe_load((tmp_path / "b" / "config.yaml").read_text())["seed"] == 9
    assert (tmp_path / "a" / "final.ckpt").read_bytes() != (tmp_path / "b" / "final.ckpt").read_bytes()


def test_eval_report_shape_and_determinism(trained, data, tmp_path):
    run, cfg = trained
    args = ["eval", "--checkpoint", str(run / "s3" / "final.ckpt"), "--data", str(data), "--config", cfg,
            "--probe-modality", "all"]
    assert cli.main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["metadata"]["probe"]["modality"] == "all"
    assert rep["metadata"]["dataset"]["generator_seed"] == 0
    assert rep["metadata"]["run_config"]["encoder"]["d"] == 12
    for ev in ("2d", "3d"):
        r = rep["by_eval_modality"][ev]
        assert sorted(r["per_label"]) == sorted(LABELS)
        assert len(r["macro_ci"]) == 2 and r["macro_ci"][0] <= r["macro"] <= r["macro_ci"][1]


def test_eval_robustness_and_refit(trained, data, tmp_path):
    run, cfg = trained
    shifted = tmp_path / "shifted"
    cli.main(["gen-data", "--out", str(shifted), "--n-2d", "16", "--n-3d", "8", "--test-frac", "0.5",
              "--domain", "shifted", "--seed", "2"])
    assert cli.main(["eval", "--checkpoint", str(run / "s3" / "final.ckpt"), "--data", str(data), "--config", cfg,
                     "--robustness", "--refit-data", str(shifted), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert sorted(rep["robustness"]) == ["2d", "3d", "all"]
    assert all(sorted(row) == ["2d", "3d"] for row in rep["robustness"].values())
    assert {"source_probe", "refit_probe"} <= set(rep["domain_adaptation"])


def test_eval_rejects_mismatched_encoder(trained, data, tmp_path):
    run, _ = trained
    other = write_config(tmp_path / "o.yaml", data, encoder={**TINY["encoder"], "d": 18, "n_heads": 1})
    assert cli.main(["eval", "--checkpoint", str(run / "s3" / "final.ckpt"), "--data", str(data),
                     "--config", other]) == cli.EXIT_IO


def test_bench_pack(data, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", data)
    assert cli.main(["bench-pack", "--synthetic-mix", "--config", cfg, "--repeats", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["outputs_equal"] and rep["padding_overhead"] > 1.0
    assert rep["n_samples"] == 3 * 4
    assert cli.main(["bench-pack", "--lengths-from", str(data), "--config", cfg, "--repeats", "1",
                     "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["padding_overhead"] >= 1.0


def test_bench_pack_uniform_lengths_ratio_one():
    rep = cli.bench_pack(np.array([0, 5, 10, 15]), n_heads=1, head_dim=6, repeats=1)
    assert rep["padding_overhead"] == 1.0 and rep["outputs_equal"]


def test_pca_map_2d_and_3d(trained, data, tmp_path):
    run, cfg = trained
    ck = str(run / "s3" / "final.ckpt")
    m = json.loads((data / "manifest.json").read_text())
    id2 = next(r["id"] for r in m["samples"] if r["modality"] == "xray2d")
    id3 = next(r["id"] for r in m["samples"] if r["modality"] == "ct3d")
    for tag, sid in (("a", id2), ("b", id2), ("c", id3)):
        assert cli.main(["pca-map", "--checkpoint", ck, "--sample-id", str(sid), "--data", str(data),
                         "--config", cfg, "--n-ref", "4", "--out", str(tmp_path / tag)]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.pgm")) == ["pc0.pgm", "pc1.pgm", "pc2.pgm"]
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    meta = json.loads((tmp_path / "c" / "pca_map.json").read_text())
    gz = meta["grid_shape"][0]
    assert gz == 2 and len(list((tmp_path / "c").glob("*.pgm"))) == 3 * gz
    assert read_pgm(tmp_path / "c" / "pc0_z00.pgm").shape == tuple(meta["grid_shape"][1:])


def test_pca_map_unknown_sample(trained, data, tmp_path):
    run, cfg = trained
    assert cli.main(["pca-map", "--checkpoint", str(run / "s3" / "final.ckpt"), "--sample-id", "9999",
                     "--data", str(data), "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_IO
