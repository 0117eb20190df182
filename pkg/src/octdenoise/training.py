"""MAE/Adam training loop, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .image_core import DatasetManifest, load_bscan, validate_manifest
from .network import (DenoisingNet, NetworkConfig, WeightStore, build_network, get_weights,
                      save_weights)


class NumericalAbort(RuntimeError):
    """Raised on a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    patch_height: int = 0
    patch_width: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def mae_loss(prediction, target):
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}")
    if isinstance(prediction, torch.Tensor):
        return (prediction - target).abs().mean()
    return float(np.mean(np.abs(np.asarray(prediction) - np.asarray(target))))


@dataclass
class OptimizerState:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor]) -> "OptimizerState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
              state: OptimizerState, config: TrainConfig) -> OptimizerState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(config.learning_rate * (m / corr1) / ((v / corr2).sqrt() + config.adam_epsilon))
    return state


# -- data -------------------------------------------------------------------

def load_pairs(manifest: DatasetManifest, split: str = "train"):
    """Stack (noisy, clean) pairs mapped to [-1, 1], as float32 arrays."""
    entries = manifest.split(split)
    noisy = np.stack([load_bscan(manifest.resolve(e.noisy_path)).pixels for e in entries])
    clean = np.stack([load_bscan(manifest.resolve(e.clean_path)).pixels for e in entries])
    return noisy * 2.0 - 1.0, clean * 2.0 - 1.0


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _crop(noisy, clean, idx, config: TrainConfig, rng):
    if not config.patch_height or not config.patch_width:
        return noisy[idx], clean[idx]
    ph, pw = config.patch_height, config.patch_width
    h, w = noisy.shape[1:]
    if ph > h or pw > w:
        raise ValueError(f"patch {ph}x{pw} larger than images {h}x{w}")
    xs, ys = [], []
    for i in idx:
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        xs.append(noisy[i, top:top + ph, left:left + pw])
        ys.append(clean[i, top:top + ph, left:left + pw])
    return np.stack(xs), np.stack(ys)


# -- checkpoints ------------------------------------------------------------

def _rng_state_hex(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8").hex()


def restore_rng(hex_state: str) -> np.random.Generator:
    state = json.loads(bytes.fromhex(hex_state).decode("utf-8"))
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def write_checkpoint(path, net: nn.Module, config: TrainConfig, step: int, rng) -> None:
    path = Path(path)
    save_weights(get_weights(net), path)
    lines = [f"{k}={v!r}" for k, v in asdict(config).items()]
    lines += [f"step={step}", f"rng_state={_rng_state_hex(rng)}"]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def read_checkpoint_sidecar(path) -> dict:
    out = {}
    for line in Path(path).with_suffix(".txt").read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


# -- training ---------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    epoch: int
    loss: float
    wall_ms: float


@dataclass
class TrainResult:
    net: DenoisingNet
    weights: WeightStore
    log: List[LogRow] = field(default_factory=list)

    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.log:
            by_epoch.setdefault(row.epoch, []).append(row.loss)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def write_log(rows: List[LogRow], path, workers: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# workers={workers}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "epoch", "loss", "wall_ms"))
        for r in rows:
            writer.writerow((r.step, r.epoch, repr(r.loss), f"{r.wall_ms:.3f}"))


def train(manifest: DatasetManifest, net_config: NetworkConfig, config: TrainConfig,
          out_dir=None, on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit the network to map noisy -> clean training pairs with MAE and Adam.

    Checkpoints (when ``out_dir`` is set) go to ``ckpt_<step>.octw`` every
    ``checkpoint_every`` steps and ``final.octw`` at the end. A non-finite
    loss raises :class:`NumericalAbort` without overwriting checkpoints.
    """
    net = build_network(net_config, seed=config.seed)
    result = TrainResult(net, get_weights(net))
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if config.epochs == 0:
        if out_dir is not None:
            write_checkpoint(out_dir / "final.octw", net, config, 0, rng)
        return result

    report = validate_manifest(manifest, check_files=False)
    if report.straddling_subjects:
        raise ValueError(f"subjects in both splits: {report.straddling_subjects}")
    noisy, clean = load_pairs(manifest, "train")
    if len(noisy) == 0:
        raise ValueError("manifest has no training pairs")

    params = {name: p for name, p in net.named_parameters()}
    state = OptimizerState.zeros_like(params)
    net.train(True)
    step = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for idx in epoch_batches(len(noisy), config.batch_size, rng):
            t0 = time.perf_counter()
            x, y = _crop(noisy, clean, idx, config, rng)
            x = torch.from_numpy(np.ascontiguousarray(x))[:, None]
            y = torch.from_numpy(np.ascontiguousarray(y))[:, None]
            loss = mae_loss(net(x), y)
            if not torch.isfinite(loss):
                raise NumericalAbort(f"non-finite loss at step {step + 1}")
            grads = torch.autograd.grad(loss, list(params.values()))
            adam_step(params, dict(zip(params, grads)), state, config)
            step += 1
            value = float(loss.detach())
            epoch_losses.append(value)
            result.log.append(LogRow(step, epoch, value, 1000.0 * (time.perf_counter() - t0)))
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                write_checkpoint(out_dir / f"ckpt_{step:06d}.octw", net, config, step, rng)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(epoch_losses)))

    net.train(False)
    result.weights = get_weights(net)
    if out_dir is not None:
        write_checkpoint(out_dir / "final.octw", net, config, step, rng)
        write_log(result.log, out_dir / "train_log.csv", config.workers)
    return result


# -- gradient verification --------------------------------------------------

TOY_CONFIG = NetworkConfig(width_scale=1 / 8, levels=2, input_height=16, input_width=16)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error_small: float
    n_checked: int
    n_total: int
    tolerance: float
    abs_tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.max_abs_error_small < self.abs_tolerance

    def lines(self) -> List[str]:
        return [
            f"parameters checked: {self.n_checked} of {self.n_total}",
            f"max relative error: {self.max_rel_error:.3e} (tolerance {self.tolerance:g})",
            f"max absolute error on small gradients: {self.max_abs_error_small:.3e} "
            f"(tolerance {self.abs_tolerance:g})",
            f"worst element: {self.worst}",
            "PASS" if self.passed else "FAIL",
        ]


def check_gradients(module: nn.Module, inputs: torch.Tensor, targets: torch.Tensor,
                    tolerance: float = 1e-4, step: float = 1e-5, sample: Optional[int] = None,
                    seed: int = 0, corrupt: bool = False, small: float = 1e-3,
                    abs_tolerance: float = 1e-6) -> GradCheckReport:
    """Compare autograd MAE gradients with central finite differences.

    Elements whose gradient magnitude is below ``small`` are judged on
    absolute error instead of relative error. ``corrupt`` doubles the
    largest analytic entry to confirm that faults are caught.
    """
    module = module.double()
    module.train(True)
    x, y = inputs.double(), targets.double()
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = mae_loss(module(x), y)
    analytic = [g.detach().clone() for g in torch.autograd.grad(loss, [p for _, p in params])]

    index = [(k, j) for k, (_, p) in enumerate(params) for j in range(p.numel())]
    if sample is not None and sample < len(index):
        picks = np.random.default_rng(seed).choice(len(index), size=sample, replace=False)
        index = [index[i] for i in sorted(picks)]
    if corrupt:
        k, j = max(index, key=lambda kj: abs(float(analytic[kj[0]].view(-1)[kj[1]])))
        analytic[k].view(-1)[j] *= 2.0

    max_rel, max_abs, worst = 0.0, 0.0, ""
    with torch.no_grad():
        for k, j in index:
            flat = params[k][1].view(-1)
            orig = float(flat[j])
            flat[j] = orig + step
            up = float(mae_loss(module(x), y))
            flat[j] = orig - step
            down = float(mae_loss(module(x), y))
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            exact = float(analytic[k].view(-1)[j])
            scale = max(abs(numeric), abs(exact))
            if scale < small:
                max_abs = max(max_abs, abs(numeric - exact))
            else:
                rel = abs(numeric - exact) / scale
                if rel > max_rel:
                    max_rel, worst = rel, f"{params[k][0]}[{j}] analytic={exact:.6e} numeric={numeric:.6e}"
    return GradCheckReport(max_rel, max_abs, len(index), sum(p.numel() for _, p in params),
                           tolerance, abs_tolerance, worst)


def gradient_check(config: NetworkConfig = TOY_CONFIG, tolerance: float = 1e-4,
                   sample: Optional[int] = None, seed: int = 0, corrupt: bool = False,
                   batch: int = 2) -> GradCheckReport:
    """Finite-difference check of the full network on a toy config in 64-bit."""
    net = build_network(config, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    shape = (batch, 1, config.input_height, config.input_width)
    x = torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1
    y = torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1
    return check_gradients(net, x, y, tolerance=tolerance, sample=sample, seed=seed, corrupt=corrupt)
