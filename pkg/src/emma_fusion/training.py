"""Two-stage EMMA training and the equivariance audit.

Stage 1 fits the pseudo-sensing U-Nets ``A_i``/``A_v`` that map a
pseudo ground-truth fusion back to each source. Stage 2 freezes them and
trains U-Fuser ``F`` per step as::

    f = F(i, v)                      # fusion
    f_t = T_g f                      # one random g per sample
    f_hat_t = F(A_i(f_t), A_v(f_t))  # re-fusion of pseudo measurements
    loss = L(A_i(f), i) + a1 L(A_v(f), v) + a2 L(f_t, f_hat_t)
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import transforms
from .config import TrainConfig
from .errors import ConfigError, InputError, ShapeError, TrainingError
from .imaging import Dataset, ScenePair, crop_random_patch
from .losses import (
    composite_distance,
    emma_total_loss,
    sensing_reconstruction_loss,
    sobel,
    traditional_fusion_loss,
)
from .networks import build_fuser, build_sensor, save_checkpoint

log = logging.getLogger(__name__)

GRADIENT_FLOOR = 0.5
GRADIENT_SMOOTHING = 1.0


def make_pseudo_gt(i: np.ndarray, v: np.ndarray, rule: str = "gradient_weighted") -> np.ndarray:
    """Classical fusion used as the stage-1 training target.

    ``gradient_weighted`` mixes the sources per pixel with weights
    proportional to their Gaussian-smoothed Sobel magnitude plus a constant
    floor, so flat regions fall back to the average.
    """
    i = np.asarray(i, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if i.shape != v.shape:
        raise ShapeError(f"shape mismatch: {i.shape} vs {v.shape}")
    if rule == "max":
        out = np.maximum(i, v)
    elif rule == "average":
        out = 0.5 * (i + v)
    elif rule == "gradient_weighted":
        gi = ndimage.gaussian_filter(np.hypot(*sobel(i)), GRADIENT_SMOOTHING, mode="reflect")
        gv = ndimage.gaussian_filter(np.hypot(*sobel(v)), GRADIENT_SMOOTHING, mode="reflect")
        wi = (gi + GRADIENT_FLOOR) / (gi + gv + 2 * GRADIENT_FLOOR)
        out = wi * i + (1.0 - wi) * v
    else:
        raise InputError(f"unknown pseudo ground-truth rule {rule!r}")
    return np.clip(out, 0.0, 1.0)


@dataclass
class TrainReport:
    stage: int
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    equivariance_trace: list[dict] = field(default_factory=list)
    final_checkpoint: str | None = None
    wall_clock_seconds: float = 0.0

    def to_json(self) -> dict:
        """Serializable form. Wall-clock time is left out so reports are reproducible."""
        out = asdict(self)
        out.pop("wall_clock_seconds")
        return out

    def series(self, key: str) -> list[float]:
        return [rec[key] for rec in self.epochs]


def _as_batch(images: Sequence[np.ndarray], dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)[:, None]).to(dtype)


def _state_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check_finite(value: torch.Tensor, stage: int, epoch: int, step: int, what: str):
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {what} at stage {stage}, epoch {epoch + 1}, step {step}")


def _seeds(seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(4)]


class _JsonLog:
    def __init__(self, directory: str | None, name: str):
        self.path = None
        if directory:
            Path(directory).mkdir(parents=True, exist_ok=True)
            self.path = Path(directory) / name
            self.path.write_text("")

    def write(self, record: dict):
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr_initial, betas=config.adam_betas, eps=config.adam_eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _finish(report: TrainReport, config: TrainConfig, t0: float):
    report.wall_clock_seconds = time.perf_counter() - t0
    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": report.wall_clock_seconds}) + "\n")


# --------------------------------------------------------------------------
# stage 1


def _sensing_eval(a_i, a_v, pairs: Sequence[ScenePair], rule: str, dtype) -> tuple[float, float]:
    with torch.no_grad():
        i = _as_batch([p.modality_a for p in pairs], dtype)
        v = _as_batch([p.modality_b for p in pairs], dtype)
        f = _as_batch([make_pseudo_gt(p.modality_a, p.modality_b, rule) for p in pairs], dtype)
        return (
            float(sensing_reconstruction_loss(a_i(f), i)),
            float(sensing_reconstruction_loss(a_v(f), v)),
        )


def train_sensing_stage(config: TrainConfig, dataset: Dataset, dtype=torch.float32):
    """Fit ``A_i`` and ``A_v`` with an l2 loss against pseudo ground truth.

    Returns ``(a_i, a_v, report)``. Each epoch record carries the mean
    training losses and the held-out MSE of both sensors (the training pairs
    stand in when the dataset has no held-out split).
    """
    if config.stage != 1:
        raise ConfigError("train_sensing_stage needs a stage-1 config")
    if not dataset.pairs:
        raise InputError("dataset has no training pairs")
    t0 = time.perf_counter()
    init_i, init_v, data_seed, _ = _seeds(config.seed)
    a_i = build_sensor(config.sensor_arch(), init_i).to(dtype)
    a_v = build_sensor(config.sensor_arch(), init_v).to(dtype)
    rng = np.random.default_rng(data_seed)
    params = [*a_i.parameters(), *a_v.parameters()]
    opt = make_optimizer(params, config)
    report = TrainReport(stage=1, seed=config.seed, config_hash=config.config_hash())
    jlog = _JsonLog(config.checkpoint_dir, "train_log.jsonl")
    heldout = dataset.heldout or dataset.pairs
    step = 0

    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = {"loss_i": 0.0, "loss_v": 0.0}
        n_batches = 0
        for idx in _batches(len(dataset.pairs), config.batch_size, rng):
            crops = [crop_random_patch(dataset.pairs[j], config.patch_size, rng) for j in idx]
            i = _as_batch([c.modality_a for c in crops], dtype)
            v = _as_batch([c.modality_b for c in crops], dtype)
            f = _as_batch([make_pseudo_gt(c.modality_a, c.modality_b, config.pseudo_gt_rule) for c in crops], dtype)
            loss_i = sensing_reconstruction_loss(a_i(f), i)
            loss_v = sensing_reconstruction_loss(a_v(f), v)
            loss = loss_i + loss_v
            _check_finite(loss, 1, epoch, step, "sensing loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n_batches += 1
            sums["loss_i"] += loss_i.item()
            sums["loss_v"] += loss_v.item()
            jlog.write({"stage": 1, "epoch": epoch + 1, "step": step, "lr": lr,
                        "loss_i": loss_i.item(), "loss_v": loss_v.item()})
        held_i, held_v = _sensing_eval(a_i, a_v, heldout, config.pseudo_gt_rule, dtype)
        record = {"epoch": epoch + 1, "lr": lr, **{k: s / n_batches for k, s in sums.items()},
                  "heldout_mse_i": held_i, "heldout_mse_v": held_v}
        report.epochs.append(record)
        log.info("stage 1 epoch %d: %s", epoch + 1, record)

    if config.checkpoint_dir:
        root = Path(config.checkpoint_dir)
        save_checkpoint(a_i, root / "a_i", "sensor", init_i, step)
        save_checkpoint(a_v, root / "a_v", "sensor", init_v, step)
        report.final_checkpoint = "."
    _finish(report, config, t0)
    return a_i, a_v, report


# --------------------------------------------------------------------------
# equivariance audit


def equivariance_audit(
    fuser: Callable,
    sensors: tuple[Callable, Callable],
    images: Sequence[tuple],
    group_config: transforms.GroupConfig,
    n_samples: int,
    seed: int = 0,
) -> float:
    """Mean composite distance between F(A(T_g f)) and T_g F(A(f)), f = F(i, v).

    ``images`` holds ``(i, v)`` pairs as 2-D arrays or ``(1, 1, H, W)``
    tensors. Samples cycle through the pairs; one transform is drawn per
    sample from ``group_config`` with a generator seeded by ``seed``.
    With ``n_samples == 0`` the result is 0 and a ``RuntimeWarning`` is issued.
    """
    if n_samples <= 0 or not images:
        warnings.warn("equivariance audit over zero samples; reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    a_i, a_v = sensors
    rng = np.random.default_rng(seed)
    cache = {}
    total = 0.0
    with torch.no_grad():
        for k in range(n_samples):
            idx = k % len(images)
            if idx not in cache:
                i, v = (_to_4d(x) for x in images[idx])
                f = fuser(i, v)
                cache[idx] = (f, fuser(a_i(f), a_v(f)))
            f, refused = cache[idx]
            g = transforms.sample(rng, group_config)
            f_t = transforms.apply(g, f)
            lhs = fuser(a_i(f_t), a_v(f_t))
            total += float(composite_distance(lhs, transforms.apply(g, refused)))
    return total / n_samples


def _to_4d(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.from_numpy(np.asarray(x, dtype=np.float64))
    while t.ndim < 4:
        t = t.unsqueeze(0)
    return t


def _audit_images(pairs: Sequence[ScenePair], dtype) -> list[tuple]:
    return [
        (torch.from_numpy(p.modality_a[None, None]).to(dtype), torch.from_numpy(p.modality_b[None, None]).to(dtype))
        for p in pairs
    ]


# --------------------------------------------------------------------------
# stage 2


def _freeze(module: torch.nn.Module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _transform_each(x: torch.Tensor, gs) -> torch.Tensor:
    return torch.stack([transforms.apply(g, x[k]) for k, g in enumerate(gs)])


def fuser_step_loss(config: TrainConfig, fuser, a_i, a_v, i, v, gs):
    """Loss for one batch under ``config.ablation``; returns ``(total, terms)``."""
    ablation = config.ablation
    weights = config.loss_weights()
    f = fuser(i, v)

    if ablation == "traditional":
        total = traditional_fusion_loss(f, i, v)
        return total, {"traditional": total}
    if ablation == "traditional_plus_DA":
        i_t, v_t = _transform_each(i, gs), _transform_each(v, gs)
        plain = traditional_fusion_loss(f, i, v)
        augmented = traditional_fusion_loss(fuser(i_t, v_t), i_t, v_t)
        return plain + augmented, {"traditional": plain, "traditional_augmented": augmented}

    def equivariance_pair():
        f_t = _transform_each(f, gs)
        if config.detach_target:
            f_t = f_t.detach()
        return f_t, fuser(a_i(f_t), a_v(f_t))

    if ablation == "no_sensing":
        f_t, f_hat_t = equivariance_pair()
        trad = traditional_fusion_loss(f, i, v)
        equi = composite_distance(f_t, f_hat_t)
        return trad + weights.alpha2 * equi, {"traditional": trad, "equivariance": equi}

    if weights.alpha2 == 0:
        # term is still logged, outside the graph
        with torch.no_grad():
            f_t, f_hat_t = equivariance_pair()
    else:
        f_t, f_hat_t = equivariance_pair()
    return emma_total_loss(f, f_t, f_hat_t, i, v, a_i(f), a_v(f), weights)


def train_fuser_stage(config: TrainConfig, dataset: Dataset, frozen_sensors, dtype=torch.float32):
    """Train U-Fuser against frozen sensors; returns ``(fuser, report)``.

    The report's ``equivariance_trace`` holds the audit error on the
    held-out pairs before training (epoch 0), every ``audit_every`` epochs,
    and after the last epoch.
    """
    if config.stage != 2:
        raise ConfigError("train_fuser_stage needs a stage-2 config")
    if frozen_sensors is None or len(frozen_sensors) != 2 or any(s is None for s in frozen_sensors):
        raise ConfigError("stage 2 needs both frozen sensing modules")
    if not dataset.pairs:
        raise InputError("dataset has no training pairs")
    t0 = time.perf_counter()
    a_i, a_v = frozen_sensors
    a_i, a_v = a_i.to(dtype), a_v.to(dtype)
    _freeze(a_i)
    _freeze(a_v)
    digests = (_state_digest(a_i), _state_digest(a_v))

    init_seed, data_seed, audit_seed, _ = _seeds(config.seed + 1_000_003)
    fuser = build_fuser(config.fuser_arch(), init_seed).to(dtype)
    rng = np.random.default_rng(data_seed)
    group = config.group_config()
    opt = make_optimizer(fuser.parameters(), config)
    report = TrainReport(stage=2, seed=config.seed, config_hash=config.config_hash())
    jlog = _JsonLog(config.checkpoint_dir, "train_log.jsonl")
    audit_imgs = _audit_images(dataset.heldout or dataset.pairs, dtype)

    def audit(epoch):
        fuser.eval()
        err = equivariance_audit(fuser, (a_i, a_v), audit_imgs, group, config.audit_samples, audit_seed)
        fuser.train()
        report.equivariance_trace.append({"epoch": epoch, "error": err})

    audit(0)
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        for pg in opt.param_groups:
            pg["lr"] = lr
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in _batches(len(dataset.pairs), config.batch_size, rng):
            crops = [crop_random_patch(dataset.pairs[j], config.patch_size, rng) for j in idx]
            gs = [transforms.sample(rng, group) for _ in crops]
            i = _as_batch([c.modality_a for c in crops], dtype)
            v = _as_batch([c.modality_b for c in crops], dtype)
            total, terms = fuser_step_loss(config, fuser, a_i, a_v, i, v, gs)
            _check_finite(total, 2, epoch, step, "total loss")
            for name, value in terms.items():
                _check_finite(value, 2, epoch, step, name)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            n_batches += 1
            values = {"total": total.item(), **{k: t.item() for k, t in terms.items()}}
            for k, val in values.items():
                sums[k] = sums.get(k, 0.0) + val
            jlog.write({"stage": 2, "epoch": epoch + 1, "step": step, "lr": lr,
                        "transforms": [g.to_json() for g in gs], **values})
        record = {"epoch": epoch + 1, "lr": lr, **{k: s / n_batches for k, s in sums.items()}}
        report.epochs.append(record)
        log.info("stage 2 epoch %d: %s", epoch + 1, record)
        last = epoch + 1 == config.epochs
        if last or (config.audit_every and (epoch + 1) % config.audit_every == 0):
            audit(epoch + 1)

    if (_state_digest(a_i), _state_digest(a_v)) != digests:
        raise TrainingError("sensing modules changed during stage 2")
    fuser.eval()
    if config.checkpoint_dir:
        root = Path(config.checkpoint_dir)
        save_checkpoint(fuser, root / "fuser", "fuser", init_seed, step)
        report.final_checkpoint = "fuser"
    _finish(report, config, t0)
    return fuser, report


def fuse_images(fuser, i: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Run a trained fuser on one pair of 2-D images."""
    param = next(fuser.parameters())
    with torch.no_grad():
        f = fuser(_to_4d(i).to(param.dtype), _to_4d(v).to(param.dtype))
    return f[0, 0].double().numpy()
