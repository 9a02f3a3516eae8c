import json
import shutil

import pytest

from siger import cli

FAST = ["--max-epochs", "3", "--batch", "1024"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "syn")]) == 0
    assert cli.main(["prepare", "--data", str(root / "syn"), "--out", str(root / "prep")]) == 0
    assert cli.main(["prepare", "--data", str(root / "syn"), "--out", str(root / "cold"),
                     "--mode", "cold-start"]) == 0
    return root


def _csv_rows(path):
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


# --------------------------------------------------------------------------
# synth / prepare


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--users", "200", "--items", "100", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("interactions.tsv", "interactions.users.tsv", "feat_v.bin", "feat_t.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_required_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth"])
    assert exc.value.code == 2


def test_refuses_non_empty_output(tmp_path, capsys):
    out = tmp_path / "x"
    out.mkdir()
    (out / "keep").write_text("1")
    assert cli.main(["synth", "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["synth", "--out", str(out), "--force"]) == 0


def test_manifest_contents(workspace):
    manifest = json.loads((workspace / "syn" / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 7
    assert set(manifest["dataset_hashes"]) == {"interactions.tsv", "feat_v.bin", "feat_t.bin"}
    assert "time" not in json.dumps(manifest).lower()


def test_prepare_writes_split(workspace):
    meta = json.loads((workspace / "prep" / "split.json").read_text())
    assert meta["mode"] == "general" and meta["cold_items"] is None
    cold = json.loads((workspace / "cold" / "split.json").read_text())
    assert len(cold["cold_items"]) == 20


def test_prepare_kcore(tmp_path, workspace):
    assert cli.main(["prepare", "--data", str(workspace / "syn"), "--out", str(tmp_path / "k"), "--kcore", "5"]) == 0
    data = cli.load_prepared(tmp_path / "k")
    assert data.features["v"].data.shape[0] == data.split.n_items


# --------------------------------------------------------------------------
# graphs


def test_build_graphs_beta_zero_and_cache(tmp_path, workspace, capsys):
    args = ["build-graphs", "--data", str(workspace / "prep"), "--cache", str(tmp_path), "--beta", "0"]
    assert cli.main(args) == 0
    assert "cache miss" in capsys.readouterr().err
    assert cli.main(args) == 0
    assert "cache hit" in capsys.readouterr().err
    (key,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    for m in ("v", "t"):
        assert (key / f"eisg_{m}.csr").read_bytes() == (key / f"semantic_{m}.csr").read_bytes()
        rows = _csv_rows(key / f"coverage_{m}.csv")
        assert sum(int(r["items"]) for r in rows) == 100
    for name in ("collab", "adjacency", "user_item", "knn_v", "semantic_t"):
        assert (key / f"{name}.csr").read_bytes().startswith(b"SIGER-CSR 1 ")
    assert json.loads((key / "manifest.json").read_text())["graph_cache_keys"] == [key.name]


def test_missing_feature_file_names_modality(tmp_path, workspace, capsys):
    shutil.copytree(workspace / "prep", tmp_path / "p")
    (tmp_path / "p" / "feat_v.bin").unlink()
    assert cli.main(["build-graphs", "--data", str(tmp_path / "p"), "--cache", str(tmp_path / "c")]) == 1
    assert "modality 'v'" in capsys.readouterr().err


def test_diagnose_coverage_single_modality(tmp_path, workspace):
    out = tmp_path / "cov.csv"
    assert cli.main(["diagnose-coverage", "--data", str(workspace / "prep"), "--cache", str(tmp_path),
                     "--modality", "t", "--out", str(out)]) == 0
    rows = _csv_rows(out)
    assert {r["modality"] for r in rows} == {"t"} and len(rows) == 6


# --------------------------------------------------------------------------
# train / evaluate


def test_train_no_mp_outputs(tmp_path, workspace):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(workspace / "prep"), "--out", str(out), "--variant", "no-mp",
                     "--cache", str(tmp_path / "c"), *FAST]) == 0
    rows = _csv_rows(out / "history.csv")
    assert len(rows) == 3 and all(float(r["l_p"]) == 0.0 for r in rows)
    for f in ("best.ckpt", "best.json", "manifest.json", "test_metrics.csv"):
        assert (out / f).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["variant"] == "no-mp" and manifest["config"]["loss"]["lambda_p"] == 0.0


def test_invalid_variant(tmp_path, workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", str(workspace / "prep"), "--out", str(tmp_path / "r"), "--variant", "bogus"])
    assert exc.value.code == 2
    assert "no-eisg" in capsys.readouterr().err


def test_manifest_replay_matches(tmp_path, workspace):
    first = tmp_path / "a"
    assert cli.main(["train", "--data", str(workspace / "prep"), "--out", str(first), "--seed", "4",
                     "--lr", "0.002", "--cache", str(tmp_path / "c"), *FAST]) == 0
    replay = tmp_path / "b"
    assert cli.main(["train", "--data", str(workspace / "prep"), "--out", str(replay),
                     "--config", str(first / "manifest.json"), "--cache", str(tmp_path / "c")]) == 0
    assert (first / "history.csv").read_bytes() == (replay / "history.csv").read_bytes()
    assert (first / "best.ckpt").read_bytes() == (replay / "best.ckpt").read_bytes()


def test_config_file_sections_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\nlr = 0.005\nseed = 3\n[graph]\nbeta = 0.2\n[loss]\ntau1 = 0.1\nmodel.dim = 16\n")
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg), "--seed", "9"])
    config = cli.resolve_config(args)
    assert config.lr == 0.005 and config.seed == 9 and config.graph.beta == 0.2
    assert config.loss.tau1 == 0.1 and config.model.dim == 16


def test_bad_config_value_is_usage_error(tmp_path, workspace):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[graph]\nbeta = 3\n")
    assert cli.main(["build-graphs", "--data", str(workspace / "prep"), "--config", str(cfg)]) == 2


def test_evaluate_general_and_cold(tmp_path, workspace):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(workspace / "prep"), "--out", str(run),
                     "--cache", str(tmp_path / "c"), *FAST]) == 0
    ckpt = str(run / "best.ckpt")
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--data", str(workspace / "prep"), "--out", str(tmp_path / "e"),
                     "--cache", str(tmp_path / "c")]) == 0
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--data", str(workspace / "cold"), "--out", str(tmp_path / "e"),
                     "--cache", str(tmp_path / "c")]) == 0
    general = _csv_rows(tmp_path / "e" / "metrics_test.csv")[0]
    cold = _csv_rows(tmp_path / "e" / "metrics_test-cold.csv")[0]
    assert general["split"] == "test" and cold["split"] == "test-cold"
    assert [k for k in general if k.startswith(("R@", "N@"))] == ["R@10", "R@20", "N@10", "N@20"]
    assert (tmp_path / "e" / "metrics_test.txt").read_text().startswith("variant")


def test_evaluate_missing_checkpoint(tmp_path, workspace):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(workspace / "prep")]) == 1


# --------------------------------------------------------------------------
# ablate / sweep


def test_ablate_tables(tmp_path, workspace):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--data", str(workspace / "prep"), "--out", str(out), "--seeds", "0,1",
                     "--variants", "full,no-eisg,text-only", "--cache", str(tmp_path / "c"), *FAST]) == 0
    text = (out / "ablation.txt").read_text()
    assert "[components]" in text and "[modalities]" in text
    assert "SIGER/EISG" in text and "SIGER/V" in text
    assert len(_csv_rows(out / "ablation.csv")) == 6


def test_ablate_rejects_unknown_variant(tmp_path, workspace):
    assert cli.main(["ablate", "--data", str(workspace / "prep"), "--out", str(tmp_path / "a"),
                     "--variants", "full,nope"]) == 2


def test_sweep_rows_and_reproducibility(tmp_path, workspace):
    grid = tmp_path / "grid.txt"
    grid.write_text("# collaborative neighbours\nkc = 2, 3, 5, 8, 10\n")
    outs = []
    for name in ("s1", "s2"):
        assert cli.main(["sweep", "--grid", str(grid), "--data", str(workspace / "prep"), "--out",
                         str(tmp_path / name), "--cache", str(tmp_path / "c"), "--max-epochs", "2"]) == 0
        outs.append((tmp_path / name / "sweep.csv").read_bytes())
    assert outs[0] == outs[1]
    assert len(_csv_rows(tmp_path / "s1" / "sweep.csv")) == 5


def test_sweep_empty_grid(tmp_path, workspace):
    grid = tmp_path / "grid.txt"
    grid.write_text("# nothing here\n")
    assert cli.main(["sweep", "--grid", str(grid), "--data", str(workspace / "prep"), "--out", str(tmp_path / "s")]) == 2


def test_sweep_unknown_key(tmp_path, workspace):
    grid = tmp_path / "grid.txt"
    grid.write_text("gamma = 1, 2\n")
    assert cli.main(["sweep", "--grid", str(grid), "--data", str(workspace / "prep"), "--out", str(tmp_path / "s")]) == 2
