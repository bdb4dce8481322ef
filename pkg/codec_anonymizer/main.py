"""
Command-line entry point.

    python main.py --config config/toy_config.yaml synth-data --out ../data/toy
    python main.py --config config/toy_config.yaml train
    python main.py --config config/toy_config.yaml build-pool --checkpoint runs/toy/checkpoint_last.ckpt
    python main.py --config config/toy_config.yaml anonymize --checkpoint ... --input ../data/toy/wavs --out anon/
    python main.py --config config/toy_config.yaml evaluate --checkpoint ... --scores-out scores.txt

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
"""

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click
from tqdm import tqdm

from modules.anonymizer import Anonymizer, AnonSpec, build_pool, load_pool, save_pool, utterance_rng
from modules.checkpoint import load_model
from modules.corpus import load_manifest, make_synthetic_corpus
from modules.dsp import AudioBuffer, load_wav, save_wav
from modules.errors import CodecAnonymizerError, DataError, DataMissingError, exit_code_for
from modules.evaluation import evaluate_privacy, load_trials, save_scores, save_trials
from modules.trainer import LOSS_LOG, train
from utils.config_utils import RunConfig, load_run_config
from utils.log_utils import get_logger, setup_logging
from utils.viz_tools import plot_loss_curve, plot_score_distributions

logger = get_logger("codec_anonymizer")


# -------------------------
# Shared helpers
# -------------------------
def _config(ctx: click.Context) -> RunConfig:
    obj = ctx.obj
    if "config" not in obj:
        cfg = load_run_config(obj["config_path"]) if obj["config_path"] else RunConfig().check()
        obj["config"] = cfg.with_seed(obj["seed"])
    return obj["config"]


def _manifest_path(cfg: RunConfig, manifest: Optional[Path]) -> Path:
    path = manifest or (Path(cfg.data.manifest) if cfg.data.manifest else None)
    if path is None:
        raise DataMissingError("no manifest given (use --manifest or data.manifest in the config)")
    if not path.exists():
        raise DataMissingError(f"manifest not found: {path}")
    return path


def _pool_path(cfg: RunConfig, pool: Optional[Path]) -> Path:
    path = pool or (Path(cfg.anon.pool) if cfg.anon.pool else None)
    if path is None:
        raise DataMissingError("no speaker pool given (use --pool or anon.pool in the config)")
    return path


def _anon_spec(cfg: RunConfig, alpha: Optional[float], num_selected: Optional[int],
               passthrough: bool = False) -> AnonSpec:
    spec = AnonSpec.from_config(cfg.anon)
    if alpha is not None:
        spec.alpha = alpha
    if num_selected is not None:
        spec.num_selected = num_selected
    spec.passthrough = spec.passthrough or passthrough
    return spec


def _input_files(source: Path) -> List[Tuple[str, Path]]:
    """(utterance id, wav path) pairs from a directory of WAVs or a manifest."""
    if source.is_dir():
        return [(p.stem, p) for p in sorted(source.glob("*.wav"))]
    manifest = load_manifest(source)
    return [(rec.utt_id, rec.path) for rec in manifest.records]


# -------------------------
# CLI
# -------------------------
@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Flat dotted YAML run config.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Overrides train.seed and anon.seed.")
@click.option("--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], verbose: bool):
    setup_logging(logging.DEBUG if verbose else logging.INFO)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed)


@cli.command("train")
@click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Run directory (default train.out_dir).")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--plot", is_flag=True, help="Write loss_curve.png next to the loss log.")
@click.pass_context
def train_cmd(ctx, manifest, out_dir, resume, plot):
    """Train the codec, discriminator and teacher tokenizer."""
    cfg = _config(ctx)
    data = load_manifest(_manifest_path(cfg, manifest))
    result = train(cfg, data, out_dir=out_dir, resume=resume)
    logger.info(f"✅ Final checkpoint: {result.checkpoint}")
    if plot and result.steps_run:
        plot_loss_curve(result.checkpoint.parent / LOSS_LOG, result.checkpoint.parent / "loss_curve.png")


@cli.command("build-pool")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Pool file (default anon.pool).")
@click.pass_context
def build_pool_cmd(ctx, checkpoint, manifest, out_path):
    """Average per-speaker embeddings of a manifest into a pool file."""
    cfg = _config(ctx)
    codec, _, _ = load_model(checkpoint)
    pool = build_pool(load_manifest(_manifest_path(cfg, manifest)), codec, progress=cfg.train.progress)
    out_path = _pool_path(cfg, out_path)
    save_pool(pool, out_path)
    logger.info(f"💾 Pool ({len(pool)} speakers) -> {out_path}")


@cli.command("anonymize")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--pool", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--input", "source", type=click.Path(exists=True, path_type=Path), required=True,
              help="Directory of WAVs or a manifest.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--num-selected", type=click.IntRange(min=1), default=None)
@click.option("--passthrough", is_flag=True, help="Copy inputs unchanged (control arm).")
@click.option("--keep-speaker", is_flag=True, help="Resynthesize with the original speaker.")
@click.pass_context
def anonymize_cmd(ctx, checkpoint, pool, source, out_dir, alpha, num_selected, passthrough, keep_speaker):
    """Anonymize every input utterance; outputs keep the input file names."""
    cfg = _config(ctx)
    spec = _anon_spec(cfg, alpha, num_selected, passthrough)
    codec, _, _ = load_model(checkpoint)
    speaker_pool = None if (spec.passthrough or keep_speaker) else load_pool(_pool_path(cfg, pool))
    anonymizer = Anonymizer(codec, speaker_pool, spec)

    files = _input_files(source)
    if not files:
        logger.info("✅ No input files, nothing to do")
        return
    failures = 0
    for utt_id, wav_path in tqdm(files, desc="anonymize", disable=not cfg.train.progress):
        try:
            buf = load_wav(wav_path)
            buf = AudioBuffer(buf.samples, buf.sample_rate, utt_id)
            out = anonymizer.anonymize(buf, utterance_rng(spec.seed, utt_id), keep_speaker=keep_speaker)
            save_wav(out, out_dir / wav_path.name)
        except CodecAnonymizerError as e:
            failures += 1
            logger.error(f"❌ {wav_path}: {e}")
    logger.info(f"✅ Anonymized {len(files) - failures}/{len(files)} file(s) -> {out_dir}")
    if failures:
        raise DataError(f"{failures} of {len(files)} file(s) failed")


@cli.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--pool", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--trials", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Trial list; built from the manifest when omitted.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Report JSON (stdout when omitted).")
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--num-selected", type=click.IntRange(min=1), default=None)
@click.option("--passthrough", is_flag=True, help="Evaluate the unanonymized control arm.")
@click.option("--scores-out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--trials-out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--plot", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write a score histogram PNG.")
@click.pass_context
def evaluate_cmd(ctx, checkpoint, pool, manifest, trials, out_path, alpha, num_selected, passthrough,
                 scores_out, trials_out, plot):
    """Lazy-attacker EER plus utility proxies, as a JSON report."""
    cfg = _config(ctx)
    spec = _anon_spec(cfg, alpha, num_selected, passthrough)
    codec, _, _ = load_model(checkpoint)
    speaker_pool = None if spec.passthrough else load_pool(_pool_path(cfg, pool))
    result = evaluate_privacy(
        load_manifest(_manifest_path(cfg, manifest)), codec, speaker_pool, spec,
        trials=load_trials(trials) if trials else None,
        num_trials=cfg.anon.num_trials, trial_seed=cfg.anon.seed,
        config_echo=cfg.flat(), progress=cfg.train.progress,
    )
    if scores_out:
        save_scores(result.scores, scores_out)
    if trials_out:
        save_trials(result.trials, trials_out)
    if plot:
        plot_score_distributions(result.scores, plot, threshold=result.report.threshold)
    if out_path:
        result.report.save(out_path)
        logger.info(f"💾 Report -> {out_path}")
    else:
        click.echo(json.dumps(result.report.to_json(), indent=4, sort_keys=True))


@cli.command("synth-data")
@click.option("--num-speakers", type=click.IntRange(min=1), default=4)
@click.option("--utts", "utts_per_speaker", type=click.IntRange(min=1), default=8)
@click.option("--duration", type=click.FloatRange(min=0.1), default=2.0, help="Seconds per utterance.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
def synth_data_cmd(ctx, num_speakers, utts_per_speaker, duration, out_dir):
    """Render the deterministic synthetic corpus."""
    cfg = _config(ctx)
    make_synthetic_corpus(out_dir, num_speakers, utts_per_speaker, cfg.train.seed,
                          sample_rate=cfg.model.mel.sample_rate, duration_s=duration,
                          hop_length=cfg.model.hop_length)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures to exit codes instead of raising."""
    try:
        rv = cli.main(args=argv, prog_name="codec-anonymizer", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except CodecAnonymizerError as e:
        logger.error(f"❌ {e}")
        return exit_code_for(e)
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(run())
