"""Joint training of enhancer, denoiser, extractor and AAM head."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .config import RunConfig, TrainConfig
from .diffusion import ScoreUNet, ode_denoise, score_matching_loss
from .enhancer import Enhancer, enhancement_loss
from .errors import CheckpointError, DiffSVError, NonFiniteLoss, SamplerDiverged, TrainingHalted
from .extractor import ResNetExtractor, assemble_hierarchical
from .features import BatchSpec, DatasetManifest, make_training_batch, speaker_index
from .objectives import AamHead, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DIFFSVCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")
LOSS_COLUMNS = ("step", "lr", "l_enh", "l_dif", "l_spk", "l_total")


class DiffSV(nn.Module):
    """Enhancer -> denoiser -> extractor, assembled according to the ablation flags."""

    def __init__(self, cfg: RunConfig, num_speakers: int):
        super().__init__()
        self.cfg = cfg
        tr = cfg.training
        self.use_frontend = not tr.baseline
        self.use_denoiser = self.use_frontend and (tr.use_denoiser or not tr.hierarchical)
        self.hierarchical = self.use_frontend and tr.hierarchical
        self.enhancer = Enhancer(cfg.enhancer) if self.use_frontend else None
        self.denoiser = ScoreUNet(cfg.diffusion.unet()) if self.use_denoiser else None
        ext_cfg = cfg.extractor
        ext_cfg = type(ext_cfg)(**{**ext_cfg.__dict__, "in_channels": 3 if self.hierarchical else 1})
        self.extractor = ResNetExtractor(ext_cfg)
        self.head = AamHead(num_speakers, ext_cfg.embedding_dim, cfg.objectives.s, cfg.objectives.m)
        self.schedule = cfg.diffusion.schedule()

    def denoise(self, x_hat: torch.Tensor, steps: int, seed: Optional[int] = None) -> torch.Tensor:
        d = self.cfg.diffusion
        return ode_denoise(x_hat, self.denoiser, steps, self.schedule, init=d.init, seed=seed, t_min=d.t_min)

    def frontend(self, x: torch.Tensor, steps: int, seed: Optional[int] = None):
        """Return ``(x_hat, z0, x_tilde)`` for a noisy batch ``x``."""
        if not self.use_frontend:
            return None, None, x
        x_hat = self.enhancer(x)
        if not self.hierarchical:
            z0 = self.denoise(x_hat, steps, seed)
            return x_hat, z0, z0
        if self.use_denoiser:
            with torch.no_grad():
                z0 = self.denoise(x_hat.detach(), steps, seed)
        else:
            z0 = x_hat
        return x_hat, z0, assemble_hierarchical(x, x_hat, z0)

    @torch.no_grad()
    def embed(self, x: torch.Tensor, steps: Optional[int] = None, seed: Optional[int] = None) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            steps = steps or self.cfg.diffusion.eval_steps
            _, _, x_tilde = self.frontend(x, steps, seed)
            return self.extractor(x_tilde)
        finally:
            self.train(was)

    def groups(self) -> Dict[str, List[nn.Parameter]]:
        g = {"extractor": list(self.extractor.parameters()) + list(self.head.parameters())}
        if self.enhancer is not None:
            g["enhancer"] = list(self.enhancer.parameters())
        if self.denoiser is not None:
            g["denoiser"] = list(self.denoiser.parameters())
        return g


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_max`` to ``lr_min`` over ``lr_cycles`` equal restarts."""
    cycle_len = max(1, math.ceil(total_steps / cfg.lr_cycles))
    pos = step % cycle_len
    progress = pos / max(cycle_len - 1, 1)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, amsgrad=True)


def compute_losses(model: DiffSV, x, y, labels, generator: torch.Generator, phase: str = "joint"):
    """Forward pass and loss terms for one batch.

    ``phase`` is ``"joint"`` (unified training), ``"frontend"`` (enhancer and
    denoiser only) or ``"extractor"`` (frozen front-end, speaker loss only).
    Returns a dict with tensors or ``None`` for absent terms.
    """
    cfg = model.cfg
    tr, d = cfg.training, cfg.diffusion
    labels = torch.as_tensor(labels, dtype=torch.long)
    out = {"enh": None, "dif": None, "spk": None}
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=generator))

    if not model.use_frontend:
        out["spk"] = model.head(model.extractor(x), labels)
        out["total"] = total_loss(l_spk=out["spk"])
        return out

    if phase == "extractor":
        with torch.no_grad():
            _, _, x_tilde = model.frontend(x, d.train_steps, seed)
        out["spk"] = model.head(model.extractor(x_tilde), labels)
        out["total"] = total_loss(l_spk=out["spk"])
        return out

    x_hat = model.enhancer(x)
    if tr.use_enh_loss or phase == "frontend":
        out["enh"] = enhancement_loss(x_hat, y)
    if model.denoiser is not None:
        out["dif"] = score_matching_loss(model.denoiser, y, x_hat.detach(), model.schedule, generator,
                                         t_min=d.t_min, weighting=d.weighting)
    if phase == "frontend":
        out["total"] = total_loss(out["enh"], out["dif"])
        return out

    if not model.hierarchical:
        # no stop-gradient: the sampler stays in the graph
        z0 = model.denoise(x_hat, d.train_steps, seed)
        x_tilde = z0
    elif model.denoiser is not None:
        with torch.no_grad():
            z0 = model.denoise(x_hat.detach(), d.train_steps, seed)
        x_tilde = assemble_hierarchical(x, x_hat, z0)
    else:
        x_tilde = assemble_hierarchical(x, x_hat, x_hat)
    out["spk"] = model.head(model.extractor(x_tilde), labels)
    out["total"] = total_loss(out["enh"], out["dif"], out["spk"])
    return out


def _clip(model: DiffSV, max_norm: float) -> None:
    for params in model.groups().values():
        grads = [p for p in params if p.grad is not None]
        if grads:
            torch.nn.utils.clip_grad_norm_(grads, max_norm)


def _grads_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)


def train_step(model: DiffSV, optimizer, x, y, labels, lr: float, step_seed: int, phase: str = "joint"):
    """One AMSGrad update.  Returns the loss values as floats (``nan`` when absent).

    Raises :class:`NonFiniteLoss` or :class:`SamplerDiverged` without touching
    the parameters when the step produces non-finite values.
    """
    torch.manual_seed(step_seed)
    gen = torch.Generator().manual_seed(step_seed + 1)
    model.train()
    if phase == "extractor":
        model.enhancer.eval()
        if model.denoiser is not None:
            model.denoiser.eval()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    try:
        losses = compute_losses(model, x, y, labels, gen, phase)
    except DiffSVError as exc:
        if exc.code == "non-finite-activation":
            raise NonFiniteLoss("spk", float("nan")) from exc
        raise
    losses["total"].backward()
    if not _grads_finite(model):
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLoss("gradient", float("nan"))
    _clip(model, model.cfg.training.grad_clip)
    optimizer.step()
    return {k: (float(v.detach()) if v is not None else float("nan")) for k, v in losses.items()}


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainResult:
    status: str = "ok"  # "ok" | "diverged"
    reason: str = ""
    epochs_run: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "ok"


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0xD1FF]).generate_state(1)[0] & 0x7FFFFFFF)


class Trainer:
    """Owns the model, optimizer and data order; every step is a pure function
    of ``(parameters, optimizer state, seed, global step)``."""

    def __init__(self, cfg: RunConfig, manifest: DatasetManifest, noise_manifest: DatasetManifest,
                 run_dir=None, dtype=torch.float32):
        self.cfg = cfg
        self.manifest = list(manifest)
        self.noise_manifest = list(noise_manifest)
        self.speakers = sorted(speaker_index(self.manifest))
        self.dtype = dtype
        torch.manual_seed(cfg.training.seed)
        self.model = DiffSV(cfg, len(self.speakers)).to(dtype)
        self.optimizer = make_optimizer(self.model, cfg.training.lr_max)
        self.step = 0
        self.epoch = 0
        self.history: List[dict] = []
        self.run_dir = Path(run_dir) if run_dir else None
        self._nonfinite = 0

    # data ------------------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.manifest) / self.cfg.training.batch_size))

    @property
    def phases(self) -> List[str]:
        tr = self.cfg.training
        if tr.baseline or tr.unified:
            return ["joint"]
        return ["frontend", "extractor"]

    @property
    def total_epochs(self) -> int:
        return self.cfg.training.epochs * len(self.phases)

    def phase_of(self, epoch: int) -> str:
        return self.phases[min(epoch // self.cfg.training.epochs, len(self.phases) - 1)]

    def batch(self, epoch: int, index: int):
        tr = self.cfg.training
        n, b = len(self.manifest), tr.batch_size
        order = np.random.default_rng([tr.seed, epoch, 0xBA7C]).permutation(n)
        idx = np.resize(order, self.steps_per_epoch * b)[index * b : (index + 1) * b]
        spec = BatchSpec(b, tr.crop_frames, tuple(tr.snr_range), tuple(tr.gain_range), utt_indices=idx)
        seed = int(np.random.SeedSequence([tr.seed, epoch, index]).generate_state(1)[0])
        noisy, clean, labels = make_training_batch(self.manifest, self.noise_manifest, spec, seed,
                                                   self.cfg.features)
        return noisy.to_tensor(self.dtype), clean.to_tensor(self.dtype), labels

    # stepping ----------------------------------------------------------------
    def lr_for(self, step: int) -> float:
        per_phase = self.steps_per_epoch * self.cfg.training.epochs
        return lr_at(step % per_phase, per_phase, self.cfg.training)

    def run_step(self) -> dict:
        """Advance one optimizer step; returns the logged row (``status`` key marks skipped steps)."""
        epoch, index = divmod(self.step, self.steps_per_epoch)
        x, y, labels = self.batch(epoch, index)
        lr = self.lr_for(self.step)
        phase = self.phase_of(epoch)
        row = {"step": self.step, "lr": lr, "epoch": epoch, "phase": phase}
        try:
            losses = train_step(self.model, self.optimizer, x, y, labels, lr,
                                _step_seed(self.cfg.training.seed, self.step), phase)
            self._nonfinite = 0
            row.update({"l_enh": losses["enh"], "l_dif": losses["dif"], "l_spk": losses["spk"],
                        "l_total": losses["total"], "status": "ok"})
        except (NonFiniteLoss, SamplerDiverged) as exc:
            self.optimizer.zero_grad(set_to_none=True)
            self._nonfinite += 1
            log.warning("step %d skipped: %s", self.step, exc)
            row.update({"l_enh": float("nan"), "l_dif": float("nan"), "l_spk": float("nan"),
                        "l_total": float("nan"), "status": str(exc)})
        self.step += 1
        self.epoch = self.step // self.steps_per_epoch
        self.history.append(row)
        self._log_row(row)
        if self._nonfinite >= self.cfg.training.max_nonfinite:
            raise TrainingHalted(f"{self._nonfinite} consecutive non-finite steps; last: {row['status']}")
        return row

    def fit(self, epochs: Optional[int] = None, on_epoch=None) -> TrainResult:
        """Train until ``epochs`` (default: the configured total) have completed.

        Divergence is reported through the result rather than raised.
        """
        target = self.total_epochs if epochs is None else min(epochs, self.total_epochs)
        try:
            while self.epoch < target:
                self.run_step()
                if self.step % self.steps_per_epoch == 0:
                    log.info("epoch %d/%d: %s", self.epoch, target, self.epoch_summary(self.epoch - 1))
                    if on_epoch is not None:
                        on_epoch(self)
        except TrainingHalted as exc:
            return TrainResult("diverged", str(exc), self.epoch, self.history)
        return TrainResult("ok", "", self.epoch, self.history)

    def epoch_summary(self, epoch: int) -> dict:
        rows = [r for r in self.history if r["epoch"] == epoch and r["status"] == "ok"]
        out = {}
        for key in ("l_enh", "l_dif", "l_spk", "l_total"):
            vals = [r[key] for r in rows if not math.isnan(r[key])]
            out[key] = float(np.mean(vals)) if vals else float("nan")
        return out

    def _log_row(self, row):
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "losses.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(LOSS_COLUMNS)
            w.writerow([row["step"], f"{row['lr']:.10g}"] + [
                "" if math.isnan(row[k]) else f"{row[k]:.8g}" for k in LOSS_COLUMNS[2:]])

    # checkpoints -------------------------------------------------------------
    def state(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "config": self.cfg.to_dict(),
            "speakers": list(self.speakers),
            "step": self.step,
            "epoch": self.epoch,
            "nonfinite": self._nonfinite,
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": _numpy_rng_state(),
            "dtype": str(self.dtype).replace("torch.", ""),
        }

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.state())

    @classmethod
    def from_checkpoint(cls, path, manifest, noise_manifest, run_dir=None) -> "Trainer":
        state = load_checkpoint(path)
        cfg = RunConfig.from_dict(state["config"])
        trainer = cls(cfg, manifest, noise_manifest, run_dir, dtype=getattr(torch, state["dtype"]))
        if trainer.speakers != state["speakers"]:
            raise CheckpointError("speaker set differs from the checkpoint", code="speaker-mismatch")
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.step, trainer.epoch = state["step"], state["epoch"]
        trainer._nonfinite = state["nonfinite"]
        torch.set_rng_state(state["torch_rng"])
        return trainer


def _numpy_rng_state():
    name, keys, pos, has_gauss, cached = np.random.get_state()
    return {"name": name, "keys": torch.from_numpy(keys.astype(np.int64)), "pos": int(pos),
            "has_gauss": int(has_gauss), "cached": float(cached)}


def save_checkpoint(path, state: dict) -> None:
    """Write ``MAGIC | version | payload length | sha256 | torch-serialized payload``."""
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(payload), hashlib.sha256(payload).digest())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}", code="missing-checkpoint") from None
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for header ({len(raw)} bytes)")
    magic, version, length, digest = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}",
                              code="version-mismatch")
    payload = raw[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {length} bytes)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    state = torch.load(io.BytesIO(payload), weights_only=True)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: payload version {state.get('format_version')}", code="version-mismatch")
    return state


def load_model(path) -> DiffSV:
    """Rebuild an inference model from a checkpoint (eval mode)."""
    state = load_checkpoint(path)
    cfg = RunConfig.from_dict(state["config"])
    model = DiffSV(cfg, len(state["speakers"])).to(getattr(torch, state["dtype"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model
