"""
Composite shape/mean loss, gradients, Adam training loop and a
finite-difference gradient checker
"""

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .conditioning import ConditionedInput
from .errors import ConfigError, DivergedLoss, EmptyTrainSet, FrozenBackboneModified, NonFiniteGradient
from .logger import get_logger
from .model import DTYPE, ModelConfig, Prediction, PredictionBatch, ReprogrammedRegressor, init_model, stack_inputs
from .wafer_data import SpatialProfile

logger = get_logger('training')

Sample = Tuple[ConditionedInput, SpatialProfile]

# Gradients below this fraction of the largest analytic gradient are compared absolutely
GRAD_NOISE_FLOOR = 1e-8


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    grad_clip: Optional[float] = None

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.lam < 0:
            return False, "train.lambda must be >= 0"
        if self.lr <= 0:
            return False, "train.lr must be > 0"
        if self.epochs < 0:
            return False, "train.epochs must be >= 0"
        if self.batch_size < 1:
            return False, "train.batch_size must be >= 1"
        if self.grad_clip is not None and self.grad_clip <= 0:
            return False, "train.grad_clip must be > 0 when set"
        return True, None


@dataclass
class LossBreakdown:
    """Per-wafer loss terms in um^2; total = shape_loss + lam * mean_loss."""

    shape_loss: float
    mean_loss: float
    total: float


def decompose_target(profile: SpatialProfile) -> Tuple[np.ndarray, float]:
    """Split a depth profile into its zero-mean shape s and mean m (s + m == depth)."""
    m = float(np.mean(profile.depth))
    return profile.depth - m, m


def loss(pred: Prediction, target: SpatialProfile, lam: float) -> LossBreakdown:
    """||s_hat - s||^2 (sum over the 89 points) + lam * (m_hat - m)^2, in physical units."""
    s, m = decompose_target(target)
    shape_loss = float(np.sum((np.asarray(pred.shape) - s) ** 2))
    mean_loss = float((pred.mean - m) ** 2)
    return LossBreakdown(shape_loss=shape_loss, mean_loss=mean_loss, total=shape_loss + lam * mean_loss)


def targets_tensor(profiles: Sequence[SpatialProfile]) -> Tuple[torch.Tensor, torch.Tensor]:
    parts = [decompose_target(p) for p in profiles]
    s = torch.as_tensor(np.stack([p[0] for p in parts]), dtype=DTYPE)
    m = torch.as_tensor(np.array([p[1] for p in parts]), dtype=DTYPE)
    return s, m


def loss_terms(batch: PredictionBatch, s: torch.Tensor, m: torch.Tensor,
               lam: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-averaged (total, shape, mean) loss tensors."""
    shape_loss = ((batch.shape - s) ** 2).sum(dim=-1).mean()
    mean_loss = ((batch.mean - m) ** 2).mean()
    return shape_loss + lam * mean_loss, shape_loss, mean_loss


def _loss_on(model: ReprogrammedRegressor, x: torch.Tensor, prompt: torch.Tensor,
             s: torch.Tensor, m: torch.Tensor, lam: float):
    return loss_terms(model(x, prompt), s, m, lam)


def backward(model: ReprogrammedRegressor, inputs: Sequence[ConditionedInput],
             targets: Sequence[SpatialProfile], lam: float) -> Dict[str, torch.Tensor]:
    """
    Gradients of the batch-averaged loss for every trainable tensor. The
    frozen backbone is not part of the result.
    """
    x, prompt = stack_inputs(inputs)
    s, m = targets_tensor(targets)
    named = model.named_trainable()
    total, _, _ = _loss_on(model, x, prompt, s, m, lam)
    grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)

    result: Dict[str, torch.Tensor] = {}
    for (name, param), grad in zip(named, grads):
        grad = torch.zeros_like(param) if grad is None else grad.detach()
        if not torch.all(torch.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        result[name] = grad
    return result


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochRecord:
    epoch: int
    split: str
    shape_loss: float
    mean_loss: float
    total: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def add(self, epoch: int, split: str, breakdown: LossBreakdown):
        self.records.append(EpochRecord(epoch, split, breakdown.shape_loss,
                                        breakdown.mean_loss, breakdown.total))

    def totals(self, split: str = 'train') -> List[float]:
        return [r.total for r in self.records if r.split == split]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.records],
                            columns=['epoch', 'split', 'shape_loss', 'mean_loss', 'total'])

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator='\n')

    def write_csv(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_csv())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_csv().encode('utf-8')).hexdigest()


def evaluate_loss(model: ReprogrammedRegressor, samples: Sequence[Sample], lam: float,
                  batch_size: int = 32) -> LossBreakdown:
    """Loss terms averaged over samples, without gradient tracking."""
    shape_sum = mean_sum = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x, prompt = stack_inputs([c for c, _ in chunk])
            s, m = targets_tensor([t for _, t in chunk])
            _, shape_loss, mean_loss = _loss_on(model, x, prompt, s, m, lam)
            shape_sum += float(shape_loss) * len(chunk)
            mean_sum += float(mean_loss) * len(chunk)
    shape_avg, mean_avg = shape_sum / len(samples), mean_sum / len(samples)
    return LossBreakdown(shape_avg, mean_avg, shape_avg + lam * mean_avg)


def fit(samples: Sequence[Sample], config: TrainConfig, model_config: ModelConfig,
        val_samples: Optional[Sequence[Sample]] = None,
        progress_callback: Optional[Callable] = None) -> Tuple[ReprogrammedRegressor, TrainingHistory]:
    """
    Train the reprogramming and projection modules with Adam; the backbone
    stays frozen. Deterministic for a fixed seed.

    Args:
        samples: (conditioned input, target profile) pairs
        config: Training settings
        model_config: Model settings
        val_samples: Optional held-out pairs tracked in the history as split 'val'
        progress_callback: Called as callback('epoch', epoch=..., total=..., loss=...)

    Returns:
        tuple: (trained model, per-epoch history)
    """
    if not samples:
        raise EmptyTrainSet("fit needs at least one training sample")
    ok, msg = config.validate()
    if not ok:
        raise ConfigError(msg, field=msg.split()[0])

    inputs = [c for c, _ in samples]
    profiles = [t for _, t in samples]
    mean_prior = float(np.mean([p.depth for p in profiles]))
    n_channels, n_t = inputs[0].matrix.shape
    model = init_model(model_config, n_channels, n_t, mean_prior=mean_prior)
    frozen_checksum = model.backbone.checksum()

    history = TrainingHistory()
    if config.epochs == 0:
        return model, history

    x_all, prompt_all = stack_inputs(inputs)
    s_all, m_all = targets_tensor(profiles)
    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)
    n = len(samples)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            optimizer.zero_grad()
            total, _, _ = _loss_on(model, x_all[idx], prompt_all[idx], s_all[idx], m_all[idx], config.lam)
            if not torch.isfinite(total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            total.backward()
            for name, p in model.named_trainable():
                if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                    raise NonFiniteGradient(f"non-finite gradient for {name} at epoch {epoch}")
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()

        train_loss = evaluate_loss(model, samples, config.lam)
        if not np.isfinite(train_loss.total):
            raise DivergedLoss(f"non-finite training loss after epoch {epoch}")
        history.add(epoch, 'train', train_loss)
        if val_samples:
            history.add(epoch, 'val', evaluate_loss(model, val_samples, config.lam))

        logger.debug(f"epoch {epoch}/{config.epochs}: shape {train_loss.shape_loss:.4f} "
                     f"mean {train_loss.mean_loss:.4f} total {train_loss.total:.4f}")
        if progress_callback:
            progress_callback('epoch', epoch=epoch, total=config.epochs, loss=train_loss.total)

    if model.backbone.checksum() != frozen_checksum:
        raise FrozenBackboneModified("backbone parameters changed during training")
    return model, history


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class CoordinateCheck:
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class TensorGradCheck:
    name: str
    max_rel_error: float
    coords: List[CoordinateCheck]


@dataclass
class GradCheckReport:
    tensors: List[TensorGradCheck]
    h: float

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol

    def as_dict(self) -> dict:
        return {
            'h': self.h,
            'max_rel_error': self.max_rel_error,
            'tensors': [
                {'name': t.name, 'max_rel_error': t.max_rel_error, 'n_coords': len(t.coords),
                 'coords': [c.__dict__ for c in t.coords]}
                for t in self.tensors
            ],
        }


def grad_check(model: ReprogrammedRegressor, inputs: Sequence[ConditionedInput],
               targets: Sequence[SpatialProfile], lam: float, h: float = 1e-5,
               n_coords: int = 200, seed: int = 0,
               grad_hook: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on up to n_coords
    random coordinates per trainable tensor.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, scale) where
    scale is the largest sampled analytic magnitude in that tensor, i.e. the
    error is normwise per tensor. scale never drops below GRAD_NOISE_FLOOR
    times the largest analytic gradient of the whole model, so a tensor whose
    true gradient is zero is not scored against float64 round-off.

    Args:
        grad_hook: Optional transform applied to each analytic gradient before
            comparison (used to inject corrupted gradients in tests)
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step must be > 0, got {h}", field='h')
    if n_coords < 1:
        raise ConfigError(f"n_coords must be >= 1, got {n_coords}", field='coords')

    analytic = backward(model, inputs, targets, lam)
    if grad_hook is not None:
        analytic = {name: grad_hook(name, g) for name, g in analytic.items()}

    x, prompt = stack_inputs(inputs)
    s, m = targets_tensor(targets)

    def objective() -> float:
        with torch.no_grad():
            return float(_loss_on(model, x, prompt, s, m, lam)[0])

    global_scale = max(float(g.abs().max()) for g in analytic.values() if g.numel())
    floor = max(GRAD_NOISE_FLOOR * global_scale, np.finfo(float).tiny)

    rng = np.random.default_rng(seed)
    tensors: List[TensorGradCheck] = []
    for name, param in model.named_trainable():
        flat = param.data.view(-1)
        grad = analytic[name].reshape(-1)
        count = min(n_coords, flat.numel())
        picks = np.sort(rng.choice(flat.numel(), size=count, replace=False))

        pairs = []
        for i in picks.tolist():
            original = flat[i].item()
            flat[i] = original + h
            f_plus = objective()
            flat[i] = original - h
            f_minus = objective()
            flat[i] = original
            pairs.append((int(i), float(grad[i]), (f_plus - f_minus) / (2 * h)))

        scale = max(max(abs(a) for _, a, _ in pairs), floor)
        coords = [
            CoordinateCheck(i, a, num, abs(a - num) / max(abs(a), abs(num), scale))
            for i, a, num in pairs
        ]
        tensors.append(TensorGradCheck(name, max(c.rel_error for c in coords), coords))
        logger.debug(f"grad check {name}: max rel error {tensors[-1].max_rel_error:.2e}")

    return GradCheckReport(tensors=tensors, h=h)
