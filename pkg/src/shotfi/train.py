"""Source training, SSL pre-training and the two adaptation procedures.

Adaptation entry points only ever receive a model and an :class:`UnlabeledView`
of the target split. The classifier is frozen and its parameter hash is
checked on exit.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import LabeledArrays, UnlabeledView
from .losses import (conditional_entropy_loss, cpc_loss, im_multi_objective, im_standard_objective,
                     pseudo_label_loss, pseudo_label_round, rotate180, rotation_ce, rotation_loss)
from .matching import matched_cross_entropy
from .metrics import multiuser_report, singleuser_report
from .nets import CpcStack, SampleTooShortError, SetModel, cpc_mask, parameter_hash

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    """Frozen-classifier or label-privacy contract broken."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    lambda_ent: float = 1.0
    lambda_rot: float = 0.5
    lambda_cpc: float = 0.0
    lambda_cls: float = 0.0
    label_smoothing: float = 0.2
    deterministic: bool = False
    gent: str = "occupancy"              # "occupancy" or "standard"
    rot_pretrain_epochs: int = 70
    rot_pretrain_lr: float = 1e-3
    cpc_pretrain_epochs: int = 70
    cpc_lr: float = 1e-3
    cpc_batch_size: int = 32
    cpc_tau: float = 0.07
    cpc_similarity: str = "cosine"
    cpc_mask_prob: float = 0.5
    cpc_mask_ratio: float = 0.15

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_ent", "lambda_rot", "lambda_cpc", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.learning_rate <= 0 or self.cpc_lr <= 0 or self.rot_pretrain_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.gent not in ("occupancy", "standard"):
            raise ValueError(f"gent must be 'occupancy' or 'standard', got {self.gent!r}")
        if min(self.epochs, self.rot_pretrain_epochs, self.cpc_pretrain_epochs) < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        unknown = set(kw) - set(d)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# Defaults per stage.
MU_SOURCE = TrainConfig(epochs=50, batch_size=64, learning_rate=1e-3, label_smoothing=0.2)
MU_ADAPT = TrainConfig(epochs=50, batch_size=64, learning_rate=1e-4, lambda_ent=1.0, lambda_rot=0.5)
SU_SOURCE = TrainConfig(epochs=30, batch_size=32, learning_rate=0.1, optimizer="sgd", momentum=0.9,
                        weight_decay=5e-4, label_smoothing=0.1)
SU_ADAPT = TrainConfig(epochs=70, batch_size=32, learning_rate=1e-4, lambda_cls=0.1, lambda_ent=1.0,
                       lambda_rot=0.3, lambda_cpc=0.3, gent="standard")


def deterministic_requested(config: TrainConfig) -> bool:
    return config.deterministic or os.environ.get("SHOTFI_DETERMINISTIC") == "1"


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    return np.random.default_rng(seed)


def _optimizer(params, cfg: TrainConfig, lr: Optional[float] = None):
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    idx = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield idx[s:s + batch_size]


def _finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss in {where}: {loss.item()}")


@torch.no_grad()
def predict(model: SetModel, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode softmax probabilities and bottleneck features."""
    was = model.training
    model.eval()
    probs, feats = [], []
    for s in range(0, len(x), batch_size):
        b = model.embed(torch.as_tensor(x[s:s + batch_size]))
        probs.append(torch.softmax(model.classifier(b), dim=-1).numpy())
        feats.append(b.numpy())
    model.train(was)
    return np.concatenate(probs), np.concatenate(feats)


def evaluate(model: SetModel, data: LabeledArrays):
    probs, _ = predict(model, data.x)
    return multiuser_report(probs, data.y) if model.multiuser else singleuser_report(probs, data.y)


# ---------------------------------------------------------------- source

@dataclass
class SourceResult:
    model: SetModel
    losses: list = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train_source(source: LabeledArrays, arch: dict, config: TrainConfig,
                 on_epoch: Optional[Callable[[int, float], None]] = None) -> SourceResult:
    rng = seed_everything(config.seed, deterministic_requested(config))
    model = SetModel(arch)
    model.norm.fit(source.x)
    opt = _optimizer(model.parameters(), config)
    model.train()
    losses = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(source), config.batch_size, rng):
            x = torch.as_tensor(source.x[idx])
            logits = model(x)
            if not torch.isfinite(logits).all():
                raise TrainingError(f"non-finite logits in source epoch {epoch}")
            if model.multiuser:
                loss = matched_cross_entropy(logits, source.y[idx], smoothing=config.label_smoothing)
            else:
                loss = F.cross_entropy(logits, torch.as_tensor(source.y[idx]),
                                       label_smoothing=config.label_smoothing)
            _finite(loss, f"source epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        if on_epoch:
            on_epoch(epoch, losses[-1])
    model.eval()
    return SourceResult(model, losses)


def train_source_multiuser(source: LabeledArrays, arch: dict, config: TrainConfig = MU_SOURCE, **kw):
    if arch["kind"] != "multiuser":
        raise ValueError("multi-user source training needs a multiuser architecture")
    return train_source(source, arch, config, **kw)


def train_source_singleuser(source: LabeledArrays, arch: dict, config: TrainConfig = SU_SOURCE, **kw):
    if arch["kind"] != "singleuser":
        raise ValueError("single-user source training needs a singleuser architecture")
    return train_source(source, arch, config, **kw)


# ---------------------------------------------------------------- SSL pre-training

def pretrain_rotation(model: SetModel, target: UnlabeledView, epochs: int = 70, lr: float = 1e-3,
                      batch_size: int = 64, seed: int = 0) -> list[float]:
    """Train only the rotation head; F and B stay frozen in eval mode.

    Bottleneck features of both orientations are computed once and reused.
    """
    rng = np.random.default_rng(seed)
    was = model.training
    model.eval()
    with torch.no_grad():
        up, turned = [], []
        for s in range(0, len(target), 256):
            x = torch.as_tensor(target.x[s:s + 256])
            up.append(model.embed(x))
            turned.append(model.embed(rotate180(x)))
        up, turned = torch.cat(up), torch.cat(turned)
    head = model.rot_head
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(up), batch_size, rng):
            idx = torch.as_tensor(idx)
            loss = rotation_ce(head, up[idx], up[idx], turned[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(up))
    model.train(was)
    return history


@dataclass
class CpcResult:
    cpc: CpcStack
    losses: list
    skipped: int = 0


def _cpc_batch_loss(cpc: CpcStack, x: torch.Tensor, rng: np.random.Generator, cfg: TrainConfig):
    x = cpc_mask(x, rng, cpc.window, cfg.cpc_mask_prob, cfg.cpc_mask_ratio)
    anchors = cpc.sample_anchors(len(x), x.shape[-1], rng)
    _, true_z, pred_z = cpc.encode(x, anchors)
    return cpc_loss(pred_z, true_z, cfg.cpc_tau, cfg.cpc_similarity)


def pretrain_cpc(target: UnlabeledView, config: TrainConfig, cpc: Optional[CpcStack] = None,
                 epochs: Optional[int] = None, lr: Optional[float] = None) -> CpcResult:
    """Fit the CPC stack on unlabeled grids. Grids too short for one anchor are skipped."""
    rng = seed_everything(config.seed + 1, deterministic_requested(config))
    x_all = target.x
    if cpc is None:
        cpc = CpcStack(x_all.shape[2])
    try:
        cpc.anchor_range(x_all.shape[-1])
    except SampleTooShortError as exc:
        log.warning("CPC pre-training skipped: %s", exc)
        return CpcResult(cpc, [], skipped=len(x_all))
    cpc.norm.fit(x_all)
    opt = torch.optim.Adam(cpc.parameters(), lr=config.cpc_lr if lr is None else lr)
    cpc.train()
    history = []
    for _ in range(config.cpc_pretrain_epochs if epochs is None else epochs):
        total = 0.0
        for idx in _batches(len(x_all), config.cpc_batch_size, rng):
            loss = _cpc_batch_loss(cpc, torch.as_tensor(x_all[idx]), rng, config)
            _finite(loss, "CPC pre-training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(x_all))
    return CpcResult(cpc, history)


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptationReport:
    history: list = field(default_factory=list)         # per-epoch loss terms
    probe: list = field(default_factory=list)           # per-epoch probe metrics (observational)
    rotation_pretrain: list = field(default_factory=list)
    classifier_hash_before: str = ""
    classifier_hash_after: str = ""
    label_access_count: int = 0
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _check_contracts(model: SetModel, target: UnlabeledView, report: AdaptationReport) -> None:
    report.classifier_hash_after = parameter_hash(model.classifier)
    report.label_access_count = target.label_access_count
    if report.classifier_hash_after != report.classifier_hash_before:
        raise ContractViolation("classifier parameters changed during adaptation")
    if target.label_access_count:
        raise ContractViolation(f"target labels were accessed {target.label_access_count} time(s)")


def _prepare(model: SetModel, target: UnlabeledView):
    if not isinstance(target, UnlabeledView):
        raise TypeError("adaptation takes an UnlabeledView of the target split")
    model = copy.deepcopy(model)
    for p in model.classifier.parameters():
        p.requires_grad_(False)
    return model, AdaptationReport(classifier_hash_before=parameter_hash(model.classifier))


def _probe(model: SetModel, probe: Optional[LabeledArrays], report: AdaptationReport) -> None:
    if probe is not None:
        report.probe.append(evaluate(model, probe).to_dict())


def _im_term(P: torch.Tensor, multiuser: bool, gent: str) -> torch.Tensor:
    if multiuser and gent == "occupancy":
        return im_multi_objective(P)
    return im_standard_objective(P)


def adapt_multiuser(model: SetModel, target: UnlabeledView, config: TrainConfig = MU_ADAPT,
                    probe: Optional[LabeledArrays] = None, cpc: Optional[CpcStack] = None):
    """Frozen-classifier adaptation of F, B and the rotation head.

    Per batch: lambda_ent * IM + lambda_rot * L_rot (+ lambda_cpc * L_cpc when a
    CPC stack is supplied). Returns (adapted model, report).
    """
    if not model.multiuser:
        raise ValueError("adapt_multiuser needs a multi-user model")
    return _adapt(model, target, config, probe, cpc, pseudo_labels=False)


def adapt_multiuser_with_cpc(model: SetModel, target: UnlabeledView, config: TrainConfig,
                             probe: Optional[LabeledArrays] = None, cpc: Optional[CpcStack] = None):
    if cpc is None:
        cpc = pretrain_cpc(target, config).cpc
    return adapt_multiuser(model, target, config, probe, cpc)


def adapt_singleuser(model: SetModel, target: UnlabeledView, config: TrainConfig = SU_ADAPT,
                     probe: Optional[LabeledArrays] = None, cpc: Optional[CpcStack] = None,
                     pseudo_labels: bool = True):
    """Pseudo-labelled adaptation: pseudo-labels are recomputed at the start of every epoch."""
    if model.multiuser:
        raise ValueError("adapt_singleuser needs a single-user model")
    return _adapt(model, target, config, probe, cpc, pseudo_labels=pseudo_labels)


def _adapt(model, target, config, probe, cpc, pseudo_labels):
    rng = seed_everything(config.seed, deterministic_requested(config))
    model, report = _prepare(model, target)
    use_rot = config.lambda_rot > 0
    use_cpc = config.lambda_cpc > 0 and cpc is not None
    if use_cpc:
        try:
            cpc.anchor_range(target.x.shape[-1])
        except SampleTooShortError as exc:
            log.warning("CPC term disabled: %s", exc)
            use_cpc = False
    if use_rot and config.rot_pretrain_epochs:
        report.rotation_pretrain = pretrain_rotation(
            model, target, config.rot_pretrain_epochs, config.rot_pretrain_lr, config.batch_size, config.seed)
    params = list(model.backbone.parameters()) + list(model.bottleneck.parameters())
    if use_rot:
        params += list(model.rot_head.parameters())
    if use_cpc:
        cpc = copy.deepcopy(cpc)
        cpc.train()
        params += list(cpc.parameters())
    opt = _optimizer(params, config)
    _probe(model, probe, report)

    for epoch in range(config.epochs):
        pl = None
        if pseudo_labels and config.lambda_cls > 0:
            probs, feats = predict(model, target.x)
            pl, _ = pseudo_label_round(feats, probs)
        model.train()
        sums = {"total": 0.0, "ent": 0.0, "im": 0.0, "rot": 0.0, "cpc": 0.0, "cls": 0.0}
        n_seen = 0
        for idx in _batches(len(target), config.batch_size, rng):
            x = torch.as_tensor(target.x[idx])
            b = model.embed(x)
            logits = model.classifier(b)
            P = torch.softmax(logits, dim=-1)
            im = _im_term(P, model.multiuser, config.gent)
            loss = config.lambda_ent * im
            terms = {"im": im.item(), "ent": conditional_entropy_loss(P).item()}
            if use_rot:
                rot = rotation_loss(x, model.embed, model.rot_head, base=b)
                loss = loss + config.lambda_rot * rot
                terms["rot"] = rot.item()
            if use_cpc:
                c = _cpc_batch_loss(cpc, x, rng, config)
                loss = loss + config.lambda_cpc * c
                terms["cpc"] = c.item()
            if pl is not None:
                cls = pseudo_label_loss(logits, pl[idx])
                loss = loss + config.lambda_cls * cls
                terms["cls"] = cls.item()
            _finite(loss, f"adaptation epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            terms["total"] = loss.item()
            for k, v in terms.items():
                sums[k] += v * len(idx)
            n_seen += len(idx)
        report.history.append({k: v / n_seen for k, v in sums.items()})
        model.eval()
        _probe(model, probe, report)
    model.eval()
    _check_contracts(model, target, report)
    return model, report


__all__ = ["TrainConfig", "MU_SOURCE", "MU_ADAPT", "SU_SOURCE", "SU_ADAPT", "train_source_multiuser",
           "train_source_singleuser", "pretrain_rotation", "pretrain_cpc", "adapt_multiuser",
           "adapt_multiuser_with_cpc", "adapt_singleuser", "AdaptationReport", "ContractViolation",
           "TrainingError", "evaluate", "predict", "seed_everything"]
