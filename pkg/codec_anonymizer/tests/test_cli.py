import json

import pytest
import soundfile as sf

from main import run
from modules.checkpoint import load_checkpoint
from modules.evaluation import MetricReport, compute_eer, fold_eer, load_scores
from modules.trainer import LAST_CHECKPOINT, LOSS_LOG
from utils.config_utils import config_from_flat, save_run_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_corpus, tiny_run_flat):
    """A tiny config file plus one trained checkpoint shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir, _ = tiny_corpus
    cfg = config_from_flat({
        **tiny_run_flat,
        "data.manifest": str(corpus_dir / "manifest.jsonl"),
        "train.out_dir": str(root / "run"),
        "anon.pool": str(root / "run" / "pool.spkp"),
    })
    config_path = root / "run.yaml"
    save_run_config(cfg, config_path)

    assert run(["--config", str(config_path), "train", "--plot"]) == 0
    return {"root": root, "config": str(config_path), "corpus": corpus_dir,
            "checkpoint": str(root / "run" / LAST_CHECKPOINT)}


def test_train_writes_checkpoint_and_log(workspace):
    run_dir = workspace["root"] / "run"
    assert load_checkpoint(run_dir / LAST_CHECKPOINT).step == 2
    assert (run_dir / LOSS_LOG).exists()
    assert (run_dir / "loss_curve.png").exists()


def test_synth_data_writes_corpus(tmp_path):
    out = tmp_path / "synth"
    assert run(["--seed", "3", "synth-data", "--num-speakers", "2", "--utts", "2", "--duration", "0.5",
                "--out", str(out)]) == 0
    assert len(list((out / "wavs").glob("*.wav"))) == 4
    assert (out / "manifest.jsonl").exists()


def test_bad_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model.codebok_size: 8\n")
    assert run(["--config", str(path), "synth-data", "--out", str(tmp_path / "x")]) == 1


def test_unknown_command_exits_with_usage_code():
    assert run(["fly"]) == 1


def test_missing_manifest_exits_with_data_code(tmp_path):
    assert run(["train", "--manifest", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "run")]) == 2


def test_missing_pool_exits_with_data_code(workspace, tmp_path):
    code = run(["--config", workspace["config"], "anonymize", "--checkpoint", workspace["checkpoint"],
                "--pool", str(tmp_path / "absent.spkp"), "--input", str(workspace["corpus"] / "wavs"),
                "--out", str(tmp_path / "anon")])
    assert code == 2


def test_anonymize_empty_directory_is_a_no_op(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    code = run(["--config", workspace["config"], "anonymize", "--checkpoint", workspace["checkpoint"],
                "--keep-speaker", "--input", str(tmp_path / "empty"), "--out", str(tmp_path / "anon")])
    assert code == 0
    assert not (tmp_path / "anon").exists() or not list((tmp_path / "anon").iterdir())


def test_pool_anonymize_evaluate_pipeline(workspace, tmp_path):
    cfg, ckpt = workspace["config"], workspace["checkpoint"]
    wavs = workspace["corpus"] / "wavs"

    assert run(["--config", cfg, "build-pool", "--checkpoint", ckpt]) == 0
    assert (workspace["root"] / "run" / "pool.spkp").exists()

    for name in ("a", "b"):
        assert run(["--config", cfg, "anonymize", "--checkpoint", ckpt, "--input", str(wavs),
                    "--out", str(tmp_path / name)]) == 0
    inputs = sorted(wavs.glob("*.wav"))
    for wav in inputs:
        a, b = tmp_path / "a" / wav.name, tmp_path / "b" / wav.name
        assert a.read_bytes() == b.read_bytes()
        assert abs(sf.info(str(a)).frames - sf.info(str(wav)).frames) < 320

    report_path, scores_path = tmp_path / "report.json", tmp_path / "scores.txt"
    assert run(["--config", cfg, "evaluate", "--checkpoint", ckpt, "--out", str(report_path),
                "--scores-out", str(scores_path), "--trials-out", str(tmp_path / "trials.txt")]) == 0

    report = MetricReport.load(report_path)
    assert (report.eer, report.scores_reversed) == fold_eer(compute_eer(load_scores(scores_path))[0])
    assert report.num_trials == 12
    assert json.loads(report_path.read_text())["config"]["anon.num_selected"] == 1

    # the saved trial list reproduces the same scores
    assert run(["--config", cfg, "evaluate", "--checkpoint", ckpt, "--trials", str(tmp_path / "trials.txt"),
                "--out", str(tmp_path / "again.json")]) == 0
    assert MetricReport.load(tmp_path / "again.json").eer == report.eer
