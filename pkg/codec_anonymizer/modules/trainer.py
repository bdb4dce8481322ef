# modules/trainer.py
"""
Training loop: alternating discriminator / generator AdamW steps over
two-segment batches, teacher fitting, periodic checkpoints and a
JSON-lines loss log.

Every step draws its batch from rng streams keyed by (seed, step), so a
run resumed from a checkpoint continues exactly as an uninterrupted one.
"""

import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from tqdm import tqdm

from modules.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from modules.codec import DisentangledCodec
from modules.corpus import Batch, Manifest, load_utterance, make_batch
from modules.discriminator import MultiScaleDiscriminator
from modules.dsp import AudioBuffer, extract_f0_with
from modules.errors import CheckpointInvalidError, DataMissingError, NonFiniteLossError
from modules.losses import (
    LossReport,
    adv_losses,
    check_finite,
    commit_loss,
    emo_loss,
    lin_loss,
    match_length,
    rec_loss,
    spk_loss,
    total_loss,
)
from modules.residual_vq import codebook_perplexity
from modules.teacher_tokenizer import MfccExtractor, TeacherTokenizer
from utils.config_utils import RunConfig, config_from_flat
from utils.log_utils import get_logger
from utils.records import append_jsonl

logger = get_logger(__name__)

LOSS_LOG = "loss_log.jsonl"
LAST_CHECKPOINT = "checkpoint_last.ckpt"
WARM_START_STREAM = 1  # rng key suffix of the k-means warm-start batch


def checkpoint_name(step: int) -> str:
    return f"checkpoint_{step:06d}.ckpt"


def set_reference_mode(seed: int, enabled: bool) -> None:
    """Single-threaded deterministic kernels and seeded global torch RNG."""
    torch.manual_seed(seed)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))


@dataclass
class TrainResult:
    checkpoint: Path
    steps_run: int
    final_step: int
    last_report: Optional[LossReport]


class Trainer:
    def __init__(self, cfg: RunConfig, manifest: Manifest, out_dir: Optional[str | Path] = None,
                 resume: Optional[str | Path] = None):
        if len(manifest) == 0:
            raise DataMissingError(f"training manifest {manifest.source or cfg.data.manifest} is empty")
        self.cfg = cfg
        self.manifest = manifest
        self.out_dir = Path(out_dir or cfg.train.out_dir)
        self.seed = cfg.train.seed
        self.seg_len = cfg.segment_samples
        self.hop = cfg.model.hop_length
        self.audio_cache: Dict[str, AudioBuffer] = {}
        self.epoch_steps = max(1, math.ceil(len(manifest) / cfg.data.batch_size))

        set_reference_mode(self.seed, cfg.train.reference_mode)
        self.codec = DisentangledCodec(cfg.model, num_speakers=len(manifest.speakers))
        self.disc = MultiScaleDiscriminator(cfg.model.discriminator_channels, cfg.model.discriminator_scales)
        opt = cfg.optim
        self.gen_opt = torch.optim.AdamW(self.codec.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2),
                                         weight_decay=opt.weight_decay)
        self.disc_opt = torch.optim.AdamW(self.disc.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2),
                                          weight_decay=opt.weight_decay)
        self.gen_sched = torch.optim.lr_scheduler.ExponentialLR(self.gen_opt, gamma=opt.lr_decay)
        self.disc_sched = torch.optim.lr_scheduler.ExponentialLR(self.disc_opt, gamma=opt.lr_decay)
        self.teacher = TeacherTokenizer(MfccExtractor(cfg.model.mel), cfg.model.teacher_vocab, self.hop)
        self.step = 0
        self._last_perplexity = (0.0, 0.0)

        if resume is not None:
            self._restore(load_checkpoint(resume))
        else:
            self._fresh_start()

    # --- setup ---
    def _fresh_start(self) -> None:
        for rec in self.manifest.records:
            load_utterance(self.manifest, rec.utt_id, self.audio_cache)
        self.teacher.fit(self.audio_cache.values(), self.seed)
        # checkpoints hold float32 centroids; fresh and resumed runs must tokenize alike
        self.teacher.centroids = self.teacher.centroids.astype(np.float32).astype(np.float64)

        rng = np.random.default_rng([self.seed, 0, WARM_START_STREAM])
        batch = make_batch(self.manifest, self.seg_len, self.cfg.data.batch_size, rng, self.audio_cache)
        with torch.no_grad():
            waves = batch.waves_a()
            frames = self.codec.speech_encode(waves)
            speaker = self.codec.speaker_encode(self.codec.mel(waves))
            self.codec.bottleneck.kmeans_warm_start(self.codec.subtract_speaker(frames, speaker), self.seed)
        logger.info(f"✅ Codebooks warm-started from {batch.waves_a().numel() // self.hop} frames")

        log_path = self.out_dir / LOSS_LOG
        if log_path.exists():
            log_path.unlink()

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.speakers != self.manifest.speakers:
            raise CheckpointInvalidError(
                f"checkpoint speakers {ckpt.speakers} differ from manifest speakers {self.manifest.speakers}"
            )
        saved = config_from_flat(ckpt.config)
        if saved.model != self.cfg.model:
            raise CheckpointInvalidError("checkpoint model config differs from the run config")
        self.codec.load_state_dict(ckpt.model)
        self.disc.load_state_dict(ckpt.discriminator)
        self.gen_opt.load_state_dict(ckpt.optimizers["gen"])
        self.disc_opt.load_state_dict(ckpt.optimizers["disc"])
        self.gen_sched.load_state_dict(ckpt.schedulers["gen"])
        self.disc_sched.load_state_dict(ckpt.schedulers["disc"])
        self.teacher.centroids = ckpt.teacher_centroids
        self.step = ckpt.step
        logger.info(f"🧭 Resuming at step {self.step}")

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.flat(),
            step=self.step,
            speakers=self.manifest.speakers,
            model=self.codec.state_dict(),
            discriminator=self.disc.state_dict(),
            teacher_centroids=self.teacher.centroids,
            optimizers={"gen": self.gen_opt.state_dict(), "disc": self.disc_opt.state_dict()},
            schedulers={"gen": self.gen_sched.state_dict(), "disc": self.disc_sched.state_dict()},
        )

    # --- one step ---
    def _distillation_targets(self, batch: Batch):
        tokens, hz, voiced = [], [], []
        for pair in batch.pairs:
            tokens.append(self.teacher.tokenize(pair.seg_a))
            f0 = extract_f0_with(pair.seg_a, self.hop, self.cfg.model.f0)
            hz.append(f0.hz)
            voiced.append(f0.voiced)
        return (torch.as_tensor(np.stack(tokens)), torch.as_tensor(np.stack(hz), dtype=torch.float32),
                torch.as_tensor(np.stack(voiced)))

    def train_step(self) -> LossReport:
        step = self.step
        rng = np.random.default_rng([self.seed, step])
        generator = _step_generator(self.seed, step)
        batch = make_batch(self.manifest, self.seg_len, self.cfg.data.batch_size, rng, self.audio_cache)
        x_a, x_b, labels = batch.waves_a(), batch.waves_b(), batch.labels()
        tokens, f0_hz, voiced = self._distillation_targets(batch)

        self.codec.train()
        self.disc.train()
        out = self.codec(x_a, generator=generator)
        x_hat = match_length(out.reconstruction, x_a.shape[-1])

        # discriminator
        real_scores, real_feats = self.disc(x_a)
        fake_scores, _ = self.disc(x_hat.detach())
        _, disc_loss, _ = adv_losses(real_scores, fake_scores, fake_scores, real_feats, real_feats)
        check_finite({"disc": disc_loss})
        self.disc_opt.zero_grad(set_to_none=True)
        disc_loss.backward()
        self._clip(self.disc)
        self.disc_opt.step()

        # generator
        real_scores, real_feats = self.disc(x_a)
        fake_scores, fake_feats = self.disc(x_hat)
        gen_adv, _, feat_match = adv_losses(real_scores, [s.detach() for s in fake_scores], fake_scores,
                                            real_feats, fake_feats)
        s_b = self.codec.speaker_encode(self.codec.mel(x_b))
        logits, proj = self.codec.distillation_inputs(out.quantization)
        terms = {
            "rec": rec_loss(x_a, x_hat, self.cfg.model.mel),
            "adv": gen_adv,
            "feature_match": feat_match,
            "com": commit_loss(out.quantization),
            "spk": spk_loss(out.speaker, s_b, labels, self.codec.speaker_classify),
            "lin": lin_loss(logits, tokens),
            "emo": emo_loss(f0_hz.to(proj.dtype), voiced, proj),
        }
        total = total_loss(terms, self.cfg.loss)
        self.gen_opt.zero_grad(set_to_none=True)
        total.backward()
        self._clip(self.codec)
        self.gen_opt.step()
        self._check_parameters()

        self.step += 1
        if self.step % self.epoch_steps == 0:
            self.gen_sched.step()
            self.disc_sched.step()

        report = LossReport.from_terms({k: v.detach() for k, v in terms.items()}, disc_loss.detach(), total.detach())
        self._last_perplexity = (codebook_perplexity(out.quantization, 0), codebook_perplexity(out.quantization, 1))
        return report

    def _clip(self, module: torch.nn.Module) -> None:
        if self.cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(module.parameters(), self.cfg.optim.grad_clip)

    def _check_parameters(self) -> None:
        for net_name, net in (("codec", self.codec), ("discriminator", self.disc)):
            for name, tensor in list(net.named_parameters()) + list(net.named_buffers()):
                if not torch.isfinite(tensor).all():
                    raise NonFiniteLossError(f"{net_name} tensor '{name}' became non-finite at step {self.step + 1}")

    # --- loop ---
    def fit(self) -> TrainResult:
        total_steps = self.cfg.train.steps
        self.out_dir.mkdir(parents=True, exist_ok=True)
        start = self.step
        last_path = self.out_dir / LAST_CHECKPOINT
        if start >= total_steps:
            logger.info(f"✅ Nothing to do: checkpoint already at step {start} of {total_steps}")
            return TrainResult(checkpoint=last_path, steps_run=0, final_step=start, last_report=None)

        report = None
        bar = tqdm(range(start, total_steps), desc="train", disable=not self.cfg.train.progress,
                   initial=start, total=total_steps)
        for _ in bar:
            report = self.train_step()
            if self.step % self.cfg.train.log_every == 0 or self.step == total_steps:
                ppl1, ppl2 = self._last_perplexity
                append_jsonl(report.to_record(self.step, lr=self.gen_sched.get_last_lr()[0],
                                              perplexity_l1=ppl1, perplexity_l2=ppl2),
                             self.out_dir / LOSS_LOG)
                bar.set_postfix(total=f"{report.total:.3f}", rec=f"{report.rec:.3f}")
                logger.debug(f"step {self.step}: total {report.total:.4f} disc {report.disc:.4f} "
                             f"ppl {ppl1:.1f}/{ppl2:.1f}")
            if self.step % self.cfg.train.checkpoint_every == 0 or self.step == total_steps:
                path = save_checkpoint(self.checkpoint(), self.out_dir / checkpoint_name(self.step))
                shutil.copyfile(path, last_path)

        logger.info(f"✅ Training done: {self.step - start} steps, final total loss {report.total:.4f}")
        return TrainResult(checkpoint=last_path, steps_run=self.step - start, final_step=self.step,
                           last_report=report)


def train(cfg: RunConfig, manifest: Manifest, out_dir: Optional[str | Path] = None,
          resume: Optional[str | Path] = None) -> TrainResult:
    return Trainer(cfg, manifest, out_dir, resume).fit()
