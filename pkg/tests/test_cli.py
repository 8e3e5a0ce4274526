import csv
import json
from pathlib import Path

import numpy as np
import pytest

from vsm import checkpoint
from vsm.cli import main
from vsm.config import load_config, load_datasets
from vsm.data import sample_episode
from vsm.tensor import no_grad
from vsm.trainer import episode_loss

TINY = Path(__file__).resolve().parent.parent / "configs" / "tiny.toml"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(TINY), "--out", str(out)]) == 0
    return out


def test_train_writes_metrics_and_checkpoint(trained):
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert all(r["schema"] == 1 for r in records)
    evals = [r for r in records if r["kind"] == "eval"]
    assert len(evals) >= 1
    episodes = [r["episode"] for r in evals]
    assert episodes == sorted(episodes)
    assert records[-1]["kind"] == "test"
    assert (trained / "checkpoint.vsmc").is_file()


def test_rerun_is_byte_identical(trained, tmp_path):
    assert main(["train", "--config", str(TINY), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_seed_flag_changes_run(trained, tmp_path):
    assert main(["train", "--config", str(TINY), "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.jsonl").read_bytes() != (trained / "metrics.jsonl").read_bytes()


def test_eval_prints_and_repeats(trained, capsys):
    ckpt = str(trained / "checkpoint.vsmc")
    assert main(["eval", "--checkpoint", ckpt, "--episodes", "7"]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ckpt, "--episodes", "7"]) == 0
    assert capsys.readouterr().out == first
    assert "test accuracy" in first and "+-" in first
    assert main(["eval", "--checkpoint", ckpt, "--episodes", "1"]) == 0
    assert "degenerate" in capsys.readouterr().out


def test_eval_default_episode_count(trained, capsys):
    meta = checkpoint.load(trained / "checkpoint.vsmc")[1]
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.vsmc"), "--split", "val"]) == 0
    assert f"({meta['train']['eval_episodes']} episodes)" in capsys.readouterr().out


def test_corrupt_checkpoint_exit_code(trained, tmp_path, capsys):
    bad = tmp_path / "bad.vsmc"
    bad.write_bytes((trained / "checkpoint.vsmc").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(bad)]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.vsmc")]) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 2
    assert "missing.toml" in capsys.readouterr().err
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nway = 'x'\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "[train] way" in capsys.readouterr().err


def test_data_error_exit_3(tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text(TINY.read_text().replace("samples_per_class = 6", "samples_per_class = 2"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(tmp_path):
    cfg = tmp_path / "nan.toml"
    cfg.write_text(TINY.read_text().replace("learning_rate = 1e-3", "learning_rate = 1e30"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_ablate_grids(tmp_path):
    out = tmp_path / "alpha.csv"
    assert main(["ablate", "--config", str(TINY), "--grid", "alpha=0:1:0.1", "--shots", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 11 and rows[0]["alpha"] == "0.0" and rows[-1]["alpha"] == "1.0"

    cfg = tmp_path / "roomy.toml"
    cfg.write_text(TINY.read_text().replace("samples_per_class = 6", "samples_per_class = 8"))
    out = tmp_path / "modes.csv"
    assert main(["ablate", "--config", str(cfg), "--grid", "mode=protonet,vpn,vsm", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["mode"] for r in rows] == ["protonet", "vpn", "vsm"]
    assert {"acc_1shot", "acc_5shot"} <= set(rows[0])

    out = tmp_path / "update.csv"
    assert main(["ablate", "--config", str(TINY), "--grid", "mode=vsm,mean_update", "--shots", "1", "--out", str(out)]) == 0
    assert [r["mode"] for r in csv.DictReader(out.open())] == ["vsm", "mean_update"]


def test_empty_grid_exit_2(tmp_path):
    assert main(["ablate", "--config", str(TINY), "--grid", "", "--out", str(tmp_path / "x.csv")]) == 2




def test_dump_prototypes(trained, tmp_path):
    text = TINY.read_text().replace("way = 3", "way = 5").replace("n_test = 5", "n_test = 6")
    text = text.replace("[memory]", "n_prototype_samples = 1\n\n[memory]")
    cfg = tmp_path / "dump.toml"
    cfg.write_text(text)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    out = tmp_path / "protos.csv"
    ckpt = run / "checkpoint.vsmc"
    assert main(["dump-prototypes", "--checkpoint", str(ckpt), "--episodes", "1", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    header, body = rows[0], rows[1:]
    learner = checkpoint.load_learner(ckpt)
    d = learner.nets.dim
    assert header[:4] == ["episode", "class_id", "kind", "sample_index"]
    assert header[4:] == [f"f{i}" for i in range(d)]
    assert [r[2] for r in body].count("sample") == 5 and [r[2] for r in body].count("mean") == 5

    # posterior means recomputed in-process on the same episode
    test = load_datasets(load_config(cfg).data)["test"]
    rng = np.random.default_rng([0, 3, 0])
    c = learner.config
    learner.store.frozen = True
    episode = sample_episode(test, c.way, c.shot, c.eval_queries_per_class, rng)
    with no_grad():
        out_ = episode_loss(episode, learner.nets, learner.store, c.for_evaluation(), rng, False)
    means = [np.array(r[4:], float) for r in body if r[2] == "mean"]
    np.testing.assert_allclose(np.stack(means), out_.protos.mean.data, atol=1e-6)
    assert [int(r[1]) for r in body if r[2] == "mean"] == episode.class_ids


def test_dump_header_has_256_columns_for_table_encoder(tmp_path):
    cfg = tmp_path / "wide.toml"
    cfg.write_text(
        "[data]\nn_train = 6\nn_val = 0\nn_test = 5\nd_img = 28\nsamples_per_class = 3\n"
        "[train]\niterations = 0\nway = 5\nqueries_per_class = 1\nval_episodes = 1\n"
        "eval_episodes = 1\neval_queries_per_class = 1\nn_prototype_samples = 1\n"
    )
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    out = tmp_path / "p.csv"
    assert main(["dump-prototypes", "--checkpoint", str(run / "checkpoint.vsmc"), "--out", str(out)]) == 0
    header = next(csv.reader(out.open()))
    assert len(header) == 4 + 256
