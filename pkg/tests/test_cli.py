import json

import numpy as np
import pytest

from fewbit import tinydata
from fewbit.cli import main
from fewbit.report import load_report

SMALL = ["--count", "120", "--eval-count", "60"]
ENV = {}


def run(*argv, env=ENV):
    return main([str(a) for a in argv], env=env)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "--seed", 0, *SMALL, "--out", data) == 0
    model = root / "model"
    assert run("train", "--seed", 0, "--data", data, "--epochs", 1, "--n-bits", 4, "--out", model) == 0
    return root, data, model / "model.fcmp"


def test_gen_data_outputs_and_manifest(workspace):
    _, data, _ = workspace
    for name in ("train.toyv", "eval.toyv", "train.qa.tsv", "eval.qa.tsv"):
        assert (data / name).is_file()
    manifest = json.loads((data / "manifest-gen-data.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["count"] == 120
    assert len((data / "train.qa.tsv").read_text().splitlines()) == 240


def test_gen_data_byte_identical(tmp_path, workspace):
    _, data, _ = workspace
    assert run("gen-data", "--seed", 0, *SMALL, "--out", tmp_path) == 0
    for name in ("train.toyv", "eval.toyv", "train.qa.tsv", "manifest-gen-data.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_seed_from_environment(tmp_path):
    assert run("gen-data", *SMALL, "--out", tmp_path, env={"FEATCOMP_SEED": "4"}) == 0
    assert json.loads((tmp_path / "manifest-gen-data.json").read_text())["seed"] == 4


def test_missing_seed_names_key(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path) == 1
    assert "'seed'" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\ncolour: red\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == 1
    assert "unknown config key 'colour'" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "count": 40, "eval_count": 20}))
    assert run("gen-data", "--config", cfg, "--count", 60, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest-gen-data.json").read_text())
    assert manifest["config"]["count"] == 60 and manifest["config"]["eval_count"] == 20


def test_bad_value_and_unknown_command(tmp_path, capsys):
    assert run("gen-data", "--seed", "x", "--out", tmp_path) == 1
    assert "bad value for key 'seed'" in capsys.readouterr().err
    assert run("frobnicate") == 1


def test_missing_dataset_names_path(tmp_path, capsys):
    assert run("train", "--seed", 0, "--data", tmp_path / "nowhere", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "missing input file" in err and str(tmp_path / "nowhere" / "train.toyv") in err


def test_train_report(workspace):
    root, _, model = workspace
    rep = load_report(model.parent / "report.csv")
    assert rep.columns[:5] == ("task", "objective", "n_bits", "seed", "accuracy")
    assert rep.rows[0]["n_bits"] == 4


def test_pack_synthetic_table_row(tmp_path, capsys):
    assert run("pack", "--seed", 0, "--out", tmp_path) == 0
    info = json.loads((tmp_path / "pack.json").read_text())
    assert info["payload_bytes"] == 90_000
    assert (tmp_path / "codes.tiny").stat().st_size == 90_000 + tinydata.HEADER_SIZE
    assert "90000" in capsys.readouterr().out.replace(",", "")


def test_pack_model_codes(tmp_path, workspace):
    _, data, model = workspace
    assert run("pack", "--seed", 0, "--model", model, "--data", data, "--labels", "true", "--out", tmp_path) == 0
    bits, labels = tinydata.load(tmp_path / "codes.tiny")
    assert bits.shape == (120, 4) and labels.shape == (120,)


def test_sizes_random_floats(tmp_path):
    assert run("sizes", "--seed", 0, "--items", 500, "--out", tmp_path) == 0
    row = load_report(tmp_path / "sizes.csv").rows[0]
    assert row["coded_float_bytes"] >= 0.95 * row["raw_float_bytes"]
    assert row["packed_bytes"] == 625


def test_supsize(tmp_path, workspace):
    _, data, _ = workspace
    assert run("supsize", "--data", data, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "supsize.json").read_text())
    assert doc["bits_per_video"] > 0 and doc["num_videos"] == 120 and doc["codec"] == "bzip2"


def test_kanon_expected(tmp_path, capsys):
    assert run("kanon", "--n-users", 10 ** 7, "--bits", 10, "--out", tmp_path) == 0
    assert "9765.625" in capsys.readouterr().out
    assert json.loads((tmp_path / "kanon.json").read_text())["expected"]["k"] == 9765.625


def test_kanon_truncate(tmp_path):
    codes = np.random.default_rng(0).integers(0, 2, size=(500, 10), dtype=np.uint8)
    tinydata.save(tmp_path / "c.tiny", codes)
    assert run("kanon", "--codes", tmp_path / "c.tiny", "--truncate", 5, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "kanon.json").read_text())
    assert doc["truncated"]["min_bucket"] >= 5 and doc["truncated"]["bits"] == 5
    assert run("kanon", "--codes", tmp_path / "c.tiny", "--truncate", 501, "--out", tmp_path) == 1


def test_bam_writes_one_pgm_per_frame(tmp_path, workspace):
    _, data, model = workspace
    assert run("bam", "--seed", 0, "--model", model, "--data", data, "--videos", "0,2", "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 16
    assert run("bam", "--seed", 0, "--model", model, "--data", data, "--videos", 999, "--out", tmp_path) == 1


def test_words_top7(tmp_path, workspace, capsys):
    _, data, model = workspace
    assert run("words", "--seed", 0, "--model", model, "--data", data, "--out", tmp_path) == 0
    rep = load_report(tmp_path / "words.csv")
    words = set(rep.column("word"))
    assert len(words) == 11
    assert all(len(rep.where(word=w)) == 7 for w in words)
    assert "bounce:" in capsys.readouterr().out


def test_invert_gate_refuses_weak_net(tmp_path, capsys):
    assert run("invert", "--seed", 0, "--n-bits", 1, "--identities", 1, "--steps", 2, "--out", tmp_path) == 2
    assert "gate" in capsys.readouterr().err
    assert not list(tmp_path.glob("inversion_*"))


def test_invert_runs(tmp_path):
    assert run("invert", "--seed", 0, "--n-bits", 10, "--identities", 2, "--steps", 10, "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("inversion_id*.pgm"))) == 2
    assert len(load_report(tmp_path / "inversion.csv")) == 2


def test_gradcheck_exit_code(tmp_path):
    assert run("gradcheck", "--seed", 0, "--out", tmp_path) == 0
    rep = load_report(tmp_path / "gradcheck.csv")
    assert all(rep.column("passed"))


def test_transfer_self(tmp_path, workspace):
    _, data, _ = workspace
    assert run("transfer", "--seed", 0, "--data", data, "--epochs", 1, "--n-bits", 4, "--source", "motion",
               "--target", "motion", "--out", tmp_path) == 0
    rep = load_report(tmp_path / "transfer.csv")
    assert len(rep) == 1 and rep.rows[0]["source"] == "motion"


def test_sweep_small(tmp_path, workspace):
    _, data, _ = workspace
    assert run("sweep", "--seed", 0, "--data", data, "--epochs", 1, "--levels", "1,4", "--seeds", "0",
               "--out", tmp_path) == 0
    summary = load_report(tmp_path / "sweep_summary.csv")
    assert summary.column("name") == [1, 4, "floats", "q_only", "random"]
