"""Network components: feature extractors, bottleneck, slot / class heads,
rotation head, the CPC stack, and checkpoint I/O."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .losses import rotate180

CHECKPOINT_VERSION = 1


class SampleTooShortError(ValueError):
    pass


def _conv_block(cin, cout, k, s, padding, dropout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=s, padding=padding),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.01),
        nn.Dropout(dropout),
    )


class MultiUserBackbone(nn.Module):
    """Three conv blocks (kernels 27/15/7, strides 7/3/1, 32/64/128 channels) and GAP.

    ``same_padding=False`` reproduces the unpadded layout used for full-size
    (1, 270, 3000) inputs; small synthetic grids need ``same_padding=True``.
    """

    out_dim = 128

    def __init__(self, same_padding: bool = False, dropout: float = 0.2):
        super().__init__()
        spec = [(1, 32, 27, 7), (32, 64, 15, 3), (64, 128, 7, 1)]
        self.blocks = nn.Sequential(*[
            _conv_block(ci, co, k, s, k // 2 if same_padding else 0, dropout) for ci, co, k, s in spec])
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + idt)


class ResNet18Backbone(nn.Module):
    """ResNet-18 topology with a single-channel stem. ``width=64`` is the standard size."""

    def __init__(self, width: int = 64):
        super().__init__()
        w = width
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, 7, 2, 3, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1))
        layers, cin = [], w
        for i, cout in enumerate([w, 2 * w, 4 * w, 8 * w]):
            stride = 1 if i == 0 else 2
            layers += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = 8 * w

    def forward(self, x):
        return self.pool(self.layers(self.stem(x))).flatten(1)


class Bottleneck(nn.Linear):
    pass


class SlotClassifier(nn.Module):
    def __init__(self, d_b: int, M: int, K: int):
        super().__init__()
        self.M, self.K = M, K
        self.fc = nn.Linear(d_b, M * (K + 1))

    def forward(self, b):
        return self.fc(b).view(-1, self.M, self.K + 1)


class SingleClassifier(nn.Linear):
    pass


class RotationHead(nn.Linear):
    def __init__(self, d_b: int, init_std: float = 1e-3):
        super().__init__(2 * d_b, 2)
        nn.init.normal_(self.weight, std=init_std)
        nn.init.zeros_(self.bias)


class InputNorm(nn.Module):
    """Per-feature-row standardization with statistics frozen from the source split."""

    def __init__(self, n_features: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(n_features, 1))
        self.register_buffer("std", torch.ones(n_features, 1))

    def fit(self, x: np.ndarray):
        # x: (N, 1, F, T)
        self.mean.copy_(torch.as_tensor(x.mean(axis=(0, 1, 3))[:, None], dtype=torch.float32))
        self.std.copy_(torch.as_tensor(x.std(axis=(0, 1, 3))[:, None] + 1e-6, dtype=torch.float32))

    def forward(self, x):
        return (x - self.mean) / self.std


class SetModel(nn.Module):
    """F -> B -> C with a rotation head and input normalization.

    ``arch`` is the plain-dict descriptor stored in checkpoints.
    """

    def __init__(self, arch: dict):
        super().__init__()
        self.arch = dict(arch)
        kind = arch["kind"]
        self.norm = InputNorm(arch["n_features"])
        if kind == "multiuser":
            self.backbone = MultiUserBackbone(arch.get("same_padding", False), arch.get("dropout", 0.2))
            d_b = arch.get("d_b", 128)
            self.bottleneck = Bottleneck(self.backbone.out_dim, d_b)
            self.classifier = SlotClassifier(d_b, arch["M"], arch["K"])
        elif kind == "singleuser":
            self.backbone = ResNet18Backbone(arch.get("width", 64))
            d_b = arch.get("d_b", 512)
            self.bottleneck = Bottleneck(self.backbone.out_dim, d_b)
            self.classifier = SingleClassifier(d_b, arch["K"])
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        self.rot_head = RotationHead(d_b)

    @property
    def multiuser(self) -> bool:
        return self.arch["kind"] == "multiuser"

    def embed(self, x):
        return self.bottleneck(self.backbone(self.norm(x)))

    def forward(self, x):
        return self.classifier(self.embed(x))


def multiuser_arch(n_features: int, M: int = 6, K: int = 9, same_padding: bool = False) -> dict:
    return {"kind": "multiuser", "n_features": n_features, "M": M, "K": K, "d_b": 128,
            "same_padding": same_padding, "dropout": 0.2}


def singleuser_arch(n_features: int, K: int = 6, width: int = 64) -> dict:
    return {"kind": "singleuser", "n_features": n_features, "K": K, "d_b": 512, "width": width}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class CpcStack(nn.Module):
    """Window encoder g, GRU context h, horizon predictors W_k and a shared projection.

    Input grids (N, 1, F, T) are cut into W = T // window non-overlapping windows.
    """

    def __init__(self, n_features: int, window: int = 10, horizon: int = 9, min_context: int = 8,
                 enc_dim: int = 256, hidden: int = 512, proj_dim: int = 256,
                 proj_init_std: float = 1e-4):
        super().__init__()
        self.window, self.horizon, self.min_context = window, horizon, min_context
        self.norm = InputNorm(n_features)
        self.encoder = nn.Sequential(
            nn.Conv1d(n_features, enc_dim, window, stride=window), nn.ReLU(),
            nn.Conv1d(enc_dim, enc_dim, 1))
        self.gru = nn.GRU(enc_dim, hidden, batch_first=True)
        self.predictors = nn.ModuleList([nn.Linear(hidden, enc_dim) for _ in range(horizon)])
        self.proj = nn.Linear(enc_dim, proj_dim)
        # near-identical embeddings at init: InfoNCE starts at ln N instead of a random offset
        nn.init.normal_(self.proj.weight, std=proj_init_std)

    def n_windows(self, T: int) -> int:
        return T // self.window

    def anchor_range(self, T: int) -> tuple[int, int]:
        W = self.n_windows(T)
        if W < self.min_context + self.horizon:
            raise SampleTooShortError(
                f"{W} windows; need at least {self.min_context + self.horizon}")
        return self.min_context, W - self.horizon

    def windows(self, x):
        """(N, 1, F, T) -> (N, W, enc_dim)."""
        x = self.norm(x)[:, 0]
        W = self.n_windows(x.shape[-1])
        return self.encoder(x[..., :W * self.window]).transpose(1, 2)

    def encode(self, x, anchors):
        """Context at each sample's anchor plus true and predicted futures.

        ``anchors`` holds 1-based window counts: context covers windows
        1..t and the targets are windows t+1..t+K_p. Returns c (N, hidden),
        z and z_hat (K_p, N, proj_dim).
        """
        lo, hi = self.anchor_range(x.shape[-1])
        anchors = torch.as_tensor(anchors, dtype=torch.long)
        if anchors.min() < lo or anchors.max() > hi:
            raise ValueError(f"anchors must lie in [{lo}, {hi}]")
        z = self.windows(x)
        ctx, _ = self.gru(z)
        rows = torch.arange(len(z))
        c = ctx[rows, anchors - 1]
        true = torch.stack([z[rows, anchors + k] for k in range(self.horizon)])
        pred = torch.stack([W(c) for W in self.predictors])
        return c, self.proj(true), self.proj(pred)

    def sample_anchors(self, n: int, T: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.anchor_range(T)
        return rng.integers(lo, hi + 1, size=n)


def cpc_mask(x: torch.Tensor, rng: np.random.Generator, window: int = 10,
             prob: float = 0.5, ratio: float = 0.15) -> torch.Tensor:
    """With probability ``prob`` per sample, zero round(ratio * window) random
    timesteps inside every window."""
    N, T = x.shape[0], x.shape[-1]
    W = T // window
    n_drop = int(round(ratio * window))
    keep = np.ones((N, T), dtype=np.float32)
    hit = rng.random(N) < prob
    for i in np.flatnonzero(hit):
        for w in range(W):
            keep[i, w * window + rng.choice(window, n_drop, replace=False)] = 0.0
    if not hit.any():
        return x
    return x * torch.as_tensor(keep, device=x.device).view(N, *([1] * (x.dim() - 2)), T)


def save_checkpoint(path, model: SetModel, seed: int, cpc: Optional[CpcStack] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "seed": int(seed),
        "state_dict": model.state_dict(),
        "norm_stats": {"mean": model.norm.mean.clone(), "std": model.norm.std.clone()},
        "cpc": None if cpc is None else {"config": cpc_config(cpc), "state_dict": cpc.state_dict()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def cpc_config(cpc: CpcStack) -> dict:
    return {"n_features": cpc.norm.mean.shape[0], "window": cpc.window, "horizon": cpc.horizon,
            "min_context": cpc.min_context, "enc_dim": cpc.proj.in_features,
            "hidden": cpc.gru.hidden_size, "proj_dim": cpc.proj.out_features}


def load_checkpoint(path) -> tuple[SetModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format_version')!r}")
    model = SetModel(payload["arch"])
    model.load_state_dict(payload["state_dict"])
    return model, payload


def load_cpc(payload: dict) -> Optional[CpcStack]:
    if payload.get("cpc") is None:
        return None
    cpc = CpcStack(**payload["cpc"]["config"])
    cpc.load_state_dict(payload["cpc"]["state_dict"])
    return cpc


__all__ = ["MultiUserBackbone", "ResNet18Backbone", "Bottleneck", "SlotClassifier", "SingleClassifier",
           "RotationHead", "SetModel", "CpcStack", "cpc_mask", "rotate180", "multiuser_arch",
           "singleuser_arch", "count_parameters", "parameter_hash", "save_checkpoint",
           "load_checkpoint", "load_cpc", "SampleTooShortError"]
