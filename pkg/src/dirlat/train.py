"""Four-stage training schedule, checkpointing and run logging.

Stages run in the fixed order recon -> recon_kl -> clf_init -> joint. Each
stage builds fresh optimizers (Adam for the VAE, plain SGD for the
classifier heads) and draws its randomness from a stream derived from
``(seed, "stage", stage_id)``, so resuming at a stage boundary reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numerics
from .classify import ClassifierEnsemble, ensemble_bce, evaluate
from .config import STAGE_IDS, Config, derive_seed, rng_for
from .data import LabeledImages
from .model import DirVAE, ModelConfig, Posterior, l1_reconstruction_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DIRLAT-CKPT-v1"
RUNLOG_SCHEMA = "dirlat-runlog-v1"
PLATEAU_TOL = 1e-3  # relative val-BCE improvement below this counts as a plateau

STAGE_LOSSES = {
    "recon": frozenset({"l1"}),
    "recon_kl": frozenset({"l1", "kl"}),
    "clf_init": frozenset({"bce"}),
    "joint": frozenset({"l1", "kl", "bce"}),
}
STAGE_TRAINABLE = {
    "recon": frozenset({"vae"}),
    "recon_kl": frozenset({"vae"}),
    "clf_init": frozenset({"classifiers"}),
    "joint": frozenset({"vae", "classifiers"}),
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    id: str
    epochs: int
    losses: frozenset
    trainable: frozenset
    kl_weight: float = 1.0
    kl_warmup: bool = False

    def validate(self) -> None:
        if self.id not in STAGE_LOSSES:
            raise TrainingError(f"unknown stage {self.id!r}")
        if self.losses != STAGE_LOSSES[self.id] or self.trainable != STAGE_TRAINABLE[self.id]:
            raise TrainingError(
                f"stage {self.id}: losses {sorted(self.losses)} / trainable {sorted(self.trainable)} "
                f"do not match the schedule"
            )
        if self.epochs < 0 or self.kl_weight < 0:
            raise TrainingError(f"stage {self.id}: negative epochs or kl weight")


@dataclass(frozen=True)
class TrainPlan:
    stages: tuple[Stage, ...]
    batch_size: int = 64
    vae_lr: float = 1e-4
    clf_lr: float = 1e-2
    seed: int = 0

    def validate(self) -> None:
        if tuple(s.id for s in self.stages) != STAGE_IDS:
            raise TrainingError(f"stages must be exactly {STAGE_IDS} in order")
        for s in self.stages:
            s.validate()
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainPlan":
        t = cfg.train
        stages = tuple(
            Stage(sid, int(getattr(t.epochs, sid)), STAGE_LOSSES[sid], STAGE_TRAINABLE[sid],
                  kl_weight=float(t.kl_weight), kl_warmup=bool(t.kl_warmup) and sid == "recon_kl")
            for sid in STAGE_IDS
        )
        plan = cls(stages, int(t.batch_size), float(t.vae_lr), float(t.clf_lr), int(cfg.seed))
        plan.validate()
        return plan


@dataclass
class RunLog:
    """Line-delimited JSON records; mirrored to ``path`` when given."""

    seed: int
    config_hash: str
    path: Path | None = None
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> dict:
        rec = {"schema": RUNLOG_SCHEMA, "seed": self.seed, "config_hash": self.config_hash, **record}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def epochs(self, stage: str | None = None) -> list[dict]:
        return [r for r in self.records if r.get("event") == "epoch" and (stage is None or r["stage"] == stage)]


@dataclass
class TrainData:
    train: LabeledImages
    val: LabeledImages | None = None


# a trace hook receives (stage_id, raw term values, weights, total objective)
Trace = Callable[[str, dict, dict, float], None]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _to_tensor(arr: np.ndarray, like: torch.nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(arr, dtype=dtype)


def _check_finite(total: torch.Tensor, terms: dict, stage: str, epoch: int, batch: int) -> None:
    if not torch.isfinite(total):
        detail = ", ".join(f"{k}={float(torch.as_tensor(v).detach()):.4g}" for k, v in terms.items())
        raise TrainingError(f"non-finite loss in stage {stage} epoch {epoch} batch {batch}: {detail}")


def _debug_simplex(model: DirVAE, code: torch.Tensor) -> None:
    if __debug__ and model.prior_kind == "dirichlet":
        numerics.check_simplex(code.detach(), atol=1e-4)


@torch.no_grad()
def encode_all(model: DirVAE, images: np.ndarray, batch_size: int = 256):
    posts = []
    for i in range(0, len(images), batch_size):
        posts.append(model.encode(_to_tensor(images[i:i + batch_size], model)))
    kind = posts[0].kind
    cat = lambda attr: None if getattr(posts[0], attr) is None else torch.cat([getattr(p, attr) for p in posts])
    return Posterior(kind, cat("concentration"), cat("mean"), cat("log_variance"))


@torch.no_grad()
def predict_dataset(model: DirVAE, ensemble: ClassifierEnsemble, images: np.ndarray) -> np.ndarray:
    """Class probabilities at the deterministic posterior-mean latent."""
    post = encode_all(model, images)
    code = model.mean_latent(post).code
    return ensemble(code.to(ensemble.weight.dtype)).double().numpy()


def validation_metrics(model, ensemble, data: LabeledImages | None) -> dict:
    if data is None or len(data) == 0:
        return {}
    probs = predict_dataset(model, ensemble, data.images)
    rep = evaluate(probs, data.labels, data.class_names)
    bce = float(ensemble_bce(torch.as_tensor(probs), torch.as_tensor(data.labels, dtype=torch.float64)))
    return {"val_mean_auc": rep.mean_auc, "val_emr": rep.exact_match_rate, "val_hamming": rep.hamming_loss,
            "val_bce": bce}


def _vae_epoch(stage: Stage, plan: TrainPlan, model, ensemble, data: LabeledImages, rng, opts, epoch: int,
               steps_done: int, total_steps: int, trace: Trace | None) -> tuple[dict, int]:
    sums = {k: 0.0 for k in ("l1", "kl", "bce", "total")}
    n_batches = 0
    for b, idx in enumerate(_batches(len(data), plan.batch_size, rng)):
        x = _to_tensor(data.images[idx], model)
        post = model.encode(x)
        code = model.sample_latent(post, model.draw_noise(len(idx), rng))
        _debug_simplex(model, code.code)
        recon = model.decode(code)
        terms = {"l1": l1_reconstruction_loss(x, recon)}
        weights = {}
        if "kl" in stage.losses:
            w = stage.kl_weight
            if stage.kl_warmup and total_steps:
                w = w * min(1.0, (steps_done + 1) / total_steps)
            terms["kl"] = model.kl(post).mean()
            weights["kl"] = w
        if "bce" in stage.losses:
            y = torch.as_tensor(data.labels[idx], dtype=code.code.dtype)
            terms["bce"] = ensemble_bce(ensemble(code.code), y)
        total = terms["l1"]
        if "kl" in terms:
            total = total + weights["kl"] * terms["kl"]
        if "bce" in terms:
            total = total + terms["bce"]
        _check_finite(total, terms, stage.id, epoch, b)
        if trace is not None:
            trace(stage.id, {k: float(v.detach()) for k, v in terms.items()}, dict(weights), float(total.detach()))
        for opt in opts:
            opt.zero_grad(set_to_none=True)
        total.backward()
        for opt in opts:
            opt.step()
        steps_done += 1
        n_batches += 1
        for k, v in terms.items():
            sums[k] += float(v.detach())
        sums["total"] += float(total.detach())
    means = {k: v / max(n_batches, 1) for k, v in sums.items() if k == "total" or k in terms}
    return means, steps_done


def _clf_init(stage: Stage, plan: TrainPlan, model, ensemble, data: LabeledImages, rng, log: RunLog,
              trace: Trace | None, val: LabeledImages | None) -> None:
    # VAE is frozen: posteriors are computed once, fresh latent samples per batch
    post = encode_all(model, data.images)
    labels = torch.as_tensor(data.labels, dtype=ensemble.weight.dtype)
    opt = torch.optim.SGD(ensemble.parameters(), lr=plan.clf_lr)

    def run(epoch_tag: str, classes: list[int] | None):
        best_val = math.inf
        for epoch in range(stage.epochs):
            total_sum, nb = 0.0, 0
            for b, idx in enumerate(_batches(len(data), plan.batch_size, rng)):
                sub = post.index(torch.as_tensor(idx))
                with torch.no_grad():
                    code = model.sample_latent(sub, model.draw_noise(len(idx), rng)).code
                probs = ensemble(code.to(ensemble.weight.dtype))
                y = labels[idx]
                if classes is not None:
                    probs, y = probs[:, classes], y[:, classes]
                bce = ensemble_bce(probs, y)
                _check_finite(bce, {"bce": bce}, stage.id, epoch, b)
                if trace is not None:
                    trace(stage.id, {"bce": float(bce.detach())}, {}, float(bce.detach()))
                opt.zero_grad(set_to_none=True)
                bce.backward()
                opt.step()
                total_sum += float(bce.detach())
                nb += 1
            metrics = validation_metrics(model, ensemble, val)
            extra = {}
            if "val_bce" in metrics:
                # fixed budget; a plateau is only logged, never used to stop early
                extra["plateau"] = metrics["val_bce"] > best_val * (1 - PLATEAU_TOL)
                best_val = min(best_val, metrics["val_bce"])
            log.append(event="epoch", stage=stage.id, phase=epoch_tag, epoch=epoch,
                       bce=total_sum / max(nb, 1), total=total_sum / max(nb, 1),
                       **metrics, **extra, wall_time=time.time())

    for c in range(ensemble.num_classes):
        run(f"independent:{ensemble.class_names[c]}", [c])
    run("ensemble", None)


def run_stage(stage: Stage, plan: TrainPlan, model: DirVAE, ensemble: ClassifierEnsemble, data: TrainData,
              log: RunLog, trace: Trace | None = None, on_epoch: Callable[[dict], None] | None = None) -> None:
    """Run one stage in place; only the stage's trainable components change."""
    stage.validate()
    if len(data.train) == 0:
        raise TrainingError("empty training split")
    rng = rng_for(plan.seed, "stage", stage.id)
    log.append(event="stage_start", stage=stage.id, epochs=stage.epochs, losses=sorted(stage.losses),
               trainable=sorted(stage.trainable), wall_time=time.time())
    if stage.epochs == 0:
        log.append(event="stage_end", stage=stage.id, wall_time=time.time())
        return
    vae_params = [p for n, p in model.named_parameters()]
    for p in vae_params:
        p.requires_grad_("vae" in stage.trainable)
    for p in ensemble.parameters():
        p.requires_grad_("classifiers" in stage.trainable)
    try:
        if stage.id == "clf_init":
            _clf_init(stage, plan, model, ensemble, data.train, rng, log, trace, data.val)
        else:
            opts = []
            if "vae" in stage.trainable:
                opts.append(torch.optim.Adam(vae_params, lr=plan.vae_lr))
            if "classifiers" in stage.trainable:
                opts.append(torch.optim.SGD(ensemble.parameters(), lr=plan.clf_lr))
            n_batches = math.ceil(len(data.train) / plan.batch_size)
            total_steps = n_batches * stage.epochs
            steps = 0
            for epoch in range(stage.epochs):
                means, steps = _vae_epoch(stage, plan, model, ensemble, data.train, rng, opts, epoch, steps,
                                          total_steps, trace)
                rec = log.append(event="epoch", stage=stage.id, epoch=epoch, **means,
                                 **validation_metrics(model, ensemble, data.val), wall_time=time.time())
                if on_epoch is not None:
                    on_epoch(rec)
    finally:
        for p in list(model.parameters()) + list(ensemble.parameters()):
            p.requires_grad_(True)
    log.append(event="stage_end", stage=stage.id, wall_time=time.time())


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: DirVAE
    ensemble: ClassifierEnsemble
    cursor: int
    completed: list[str]
    config: dict
    config_hash: str
    seed: int


def save_checkpoint(path, model: DirVAE, ensemble: ClassifierEnsemble, cursor: int, config: dict | None = None,
                    config_hash: str = "", seed: int = 0) -> Path:
    """Write a single versioned archive; written to a temp file then renamed."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "model_config": dict(vars(model.config)),
        "class_names": list(ensemble.class_names),
        "prior_concentration": float(model.config.prior_concentration),
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "ensemble_state": {k: v.detach().clone() for k, v in ensemble.state_dict().items()},
        "cursor": int(cursor),
        "completed": list(STAGE_IDS[:cursor]),
        "config_json": json.dumps(config or {}, sort_keys=True),
        "config_hash": config_hash,
        "seed": int(seed),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for corrupt archives
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        found = payload.get("magic") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(f"checkpoint version mismatch: expected {CHECKPOINT_MAGIC}, found {found!r}")
    try:
        mcfg = ModelConfig(**payload["model_config"])
        model = DirVAE(mcfg)
        model.load_state_dict(payload["model_state"])
        ensemble = ClassifierEnsemble(mcfg.latent_dim, payload["class_names"])
        ensemble.load_state_dict(payload["ensemble_state"])
    except (KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(model, ensemble, int(payload["cursor"]), list(payload["completed"]),
                      json.loads(payload["config_json"]), payload["config_hash"], int(payload["seed"]))


# --------------------------------------------------------------------------
# Full schedule
# --------------------------------------------------------------------------


def build_model(cfg: Config, class_names) -> tuple[DirVAE, ClassifierEnsemble]:
    """Fresh model and zero-initialized heads; weight init seeded from the run seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        model = DirVAE(cfg.model)
    return model, ClassifierEnsemble(cfg.model.latent_dim, class_names)


@dataclass
class TrainResult:
    model: DirVAE
    ensemble: ClassifierEnsemble
    log: RunLog
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def train_full(plan: TrainPlan, model: DirVAE, ensemble: ClassifierEnsemble, data: TrainData,
               out_dir=None, start_stage: int = 0, config: Config | None = None,
               trace: Trace | None = None) -> TrainResult:
    """Run stages ``start_stage..3``; checkpoint after each stage and on new best val AUC."""
    plan.validate()
    cfg_dict = config.to_dict() if config is not None else {}
    cfg_hash = config.hash() if config is not None else ""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = RunLog(plan.seed, cfg_hash, out / "runlog.jsonl" if out is not None else None)
    if start_stage:
        log.append(event="resume", from_stage=STAGE_IDS[start_stage] if start_stage < 4 else "done",
                   skipped=list(STAGE_IDS[:start_stage]))
    best = {"auc": -math.inf, "path": None}

    def on_epoch(rec: dict, cursor: int):
        auc = rec.get("val_mean_auc")
        if out is not None and auc is not None and auc > best["auc"]:
            best["auc"] = auc
            best["path"] = save_checkpoint(out / "best.ckpt", model, ensemble, cursor, cfg_dict, cfg_hash, plan.seed)
            log.append(event="checkpoint", kind="best", stage=rec["stage"], epoch=rec["epoch"], val_mean_auc=auc)

    final = None
    for i, stage in enumerate(plan.stages):
        if i < start_stage:
            continue
        run_stage(stage, plan, model, ensemble, data, log, trace, on_epoch=lambda r, i=i: on_epoch(r, i))
        if stage.id == "clf_init" and stage.epochs:
            on_epoch({"stage": stage.id, "epoch": stage.epochs - 1,
                      **validation_metrics(model, ensemble, data.val)}, i + 1)
        if out is not None:
            final = save_checkpoint(out / f"stage{i + 1}_{stage.id}.ckpt", model, ensemble, i + 1, cfg_dict,
                                    cfg_hash, plan.seed)
            log.append(event="checkpoint", kind="stage", stage=stage.id, path=final.name)
    if out is not None:
        final = save_checkpoint(out / "final.ckpt", model, ensemble, len(plan.stages), cfg_dict, cfg_hash, plan.seed)
    log.append(event="done", wall_time=time.time())
    return TrainResult(model, ensemble, log, final, best["path"])
