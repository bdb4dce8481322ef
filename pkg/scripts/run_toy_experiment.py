# scripts/run_toy_experiment.py
"""
Desk-scale end-to-end run on the synthetic corpus, with pass/fail gates.

    python scripts/run_toy_experiment.py --out runs/toy_experiment

Renders 4 speakers x 8 utterances, holds one utterance per speaker out of
training, trains for train.steps, builds the pool and evaluates both arms.
Writes summary.json and loss_curve.png into --out; exits 1 if a gate fails.
"""

import sys
from pathlib import Path

import click
import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "codec_anonymizer"))

from modules.anonymizer import AnonSpec, build_pool, save_pool  # noqa: E402
from modules.checkpoint import load_model  # noqa: E402
from modules.corpus import Manifest, load_utterance, make_synthetic_corpus, save_manifest  # noqa: E402
from modules.evaluation import evaluate_privacy  # noqa: E402
from modules.trainer import LOSS_LOG, train  # noqa: E402
from utils.config_utils import config_from_flat, load_run_config  # noqa: E402
from utils.log_utils import get_logger, setup_logging  # noqa: E402
from utils.records import load_jsonl, save_json  # noqa: E402
from utils.viz_tools import plot_loss_curve  # noqa: E402

logger = get_logger("toy_experiment")

# --- Configuration ---
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "codec_anonymizer" / "config" / "toy_config.yaml"
NUM_SPEAKERS = 4
UTTS_PER_SPEAKER = 8
UTT_SECONDS = 2.0
CORPUS_SEED = 7
SEGMENTS_PER_HELD_OUT = 8

# gates
LOSS_RATIO_MAX = 0.5  # final / step-50 moving average of the total loss
LOSS_WINDOW = 20
HELD_OUT_ACCURACY_MIN = 0.9
EER_GAIN_MIN = 10.0  # absolute points, anonymized over original arm
TOKEN_MARGIN_MIN = 0.2  # token preservation over chance
F0_CORRELATION_MIN = 0.5


def split_held_out(manifest: Manifest):
    train_recs, held_out = [], []
    for recs in manifest.by_speaker().values():
        train_recs.extend(recs[:-1])
        held_out.append(recs[-1])
    return Manifest(train_recs, manifest.source), Manifest(held_out, manifest.source)


def loss_ratio(records) -> float:
    totals = np.array([r["total"] for r in records])
    steps = np.array([r["step"] for r in records])
    start = totals[(steps > 50 - LOSS_WINDOW // 2) & (steps <= 50 + LOSS_WINDOW // 2)].mean()
    end = totals[-LOSS_WINDOW:].mean()
    return float(end / start)


def held_out_accuracy(codec, held_out: Manifest, speaker_index, seg_len: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    dtype = next(codec.parameters()).dtype
    hits, total = 0, 0
    codec.eval()
    for rec in held_out.records:
        samples = load_utterance(held_out, rec.utt_id).samples
        for _ in range(SEGMENTS_PER_HELD_OUT):
            start = int(rng.integers(0, len(samples) - seg_len + 1))
            wave = torch.as_tensor(samples[start:start + seg_len], dtype=dtype).unsqueeze(0)
            with torch.no_grad():
                logits = codec.speaker_classify(codec.speaker_encode(codec.mel(wave)))
            hits += int(int(logits.argmax(dim=-1)) == speaker_index[rec.speaker])
            total += 1
    return hits / total


@click.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=DEFAULT_CONFIG)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--steps", type=click.IntRange(min=60), default=None, help="Overrides train.steps.")
def main(config_path: Path, out_dir: Path, steps):
    setup_logging()
    base = load_run_config(config_path)
    overrides = {"train.out_dir": str(out_dir / "run"), "anon.pool": str(out_dir / "run" / "pool.spkp"),
                 "train.log_every": 1}
    if steps is not None:
        overrides["train.steps"] = steps
    cfg = config_from_flat({**base.flat(), **overrides})

    logger.info(f"🎙️ Rendering {NUM_SPEAKERS}x{UTTS_PER_SPEAKER} synthetic utterances")
    corpus = make_synthetic_corpus(out_dir / "corpus", NUM_SPEAKERS, UTTS_PER_SPEAKER, CORPUS_SEED,
                                   sample_rate=cfg.model.mel.sample_rate, duration_s=UTT_SECONDS,
                                   hop_length=cfg.model.hop_length)
    train_set, held_out = split_held_out(corpus)
    save_manifest(train_set, out_dir / "corpus" / "train.jsonl")
    save_manifest(held_out, out_dir / "corpus" / "held_out.jsonl")

    result = train(cfg, train_set, out_dir=cfg.train.out_dir)
    run_dir = Path(cfg.train.out_dir)
    plot_loss_curve(run_dir / LOSS_LOG, out_dir / "loss_curve.png")

    codec, _, _ = load_model(result.checkpoint)
    pool = build_pool(train_set, codec)
    save_pool(pool, cfg.anon.pool)

    spec = AnonSpec.from_config(cfg.anon)
    anon = evaluate_privacy(corpus, codec, pool, spec, num_trials=cfg.anon.num_trials,
                            trial_seed=cfg.anon.seed, config_echo=cfg.flat()).report

    measured = {
        "loss_ratio": loss_ratio(load_jsonl(run_dir / LOSS_LOG)),
        "held_out_accuracy": held_out_accuracy(codec, held_out, train_set.speaker_index,
                                               cfg.segment_samples, cfg.train.seed),
        "eer_gain": anon.eer - anon.baseline_eer,
        "token_margin": anon.token_preservation - anon.token_chance_level,
        "f0_correlation": anon.f0_correlation,
    }
    gates = {
        "loss_ratio": measured["loss_ratio"] < LOSS_RATIO_MAX,
        "held_out_accuracy": measured["held_out_accuracy"] > HELD_OUT_ACCURACY_MIN,
        "eer_gain": measured["eer_gain"] >= EER_GAIN_MIN,
        "token_margin": measured["token_margin"] >= TOKEN_MARGIN_MIN,
        "f0_correlation": measured["f0_correlation"] > F0_CORRELATION_MIN,
    }
    save_json({"measured": measured, "passed": gates, "report": anon.to_json()}, out_dir / "summary.json")

    for name, ok in gates.items():
        log = logger.info if ok else logger.error
        log(f"{'✅' if ok else '❌'} {name}: {measured[name]:.4f}")
    sys.exit(0 if all(gates.values()) else 1)


if __name__ == "__main__":
    main()
