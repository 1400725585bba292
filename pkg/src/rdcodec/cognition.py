"""Contrastive proxy for machine perception.

A small convolutional encoder is pretrained in-repo with a momentum key
encoder and a FIFO queue of negatives. Once frozen it scores reconstructions
during codec training, and a linear probe on its embeddings stands in for a
downstream classifier.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxyConfig:
    dim: int = 128
    width: int = 32
    queue_size: int = 4096
    tau: float = 0.07
    momentum: float = 0.99
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- augmentation ---------------------------------------------------------

def augment(
    x: torch.Tensor,
    generator: torch.Generator | None = None,
    strength: float = 1.0,
    shuffle: float = 0.8,
) -> torch.Tensor:
    """Random resized crop, flip, colour jitter and channel shuffle on a ``B x 3 x H x W`` batch.

    Differentiable in ``x``. ``strength=0`` is the identity.
    """
    b = x.shape[0]
    dtype = x.dtype

    def u(lo, hi):
        return lo + (hi - lo) * torch.rand(b, generator=generator, dtype=dtype)

    if strength == 0:
        return x
    scale = torch.sqrt(u(1 - 0.6 * strength, 1.0))
    aspect = torch.exp(u(-0.25 * strength, 0.25 * strength))
    sx = torch.clamp(scale * torch.sqrt(aspect), max=1.0)
    sy = torch.clamp(scale / torch.sqrt(aspect), max=1.0)
    tx = (1 - sx) * u(-1.0, 1.0)
    ty = (1 - sy) * u(-1.0, 1.0)
    flip = torch.where(torch.rand(b, generator=generator) < 0.5, -1.0, 1.0).to(dtype)
    theta = torch.zeros(b, 2, 3, dtype=dtype)
    theta[:, 0, 0] = sx * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = sy
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)

    bright = u(1 - 0.4 * strength, 1 + 0.4 * strength).view(b, 1, 1, 1)
    contrast = u(1 - 0.4 * strength, 1 + 0.4 * strength).view(b, 1, 1, 1)
    sat = u(1 - 0.8 * strength, 1 + 0.4 * strength).view(b, 1, 1, 1)
    out = out * bright
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * contrast + mean
    gray = out.mean(dim=1, keepdim=True)
    out = (out - gray) * sat + gray
    # channel permutation stands in for hue jitter
    perm = torch.stack([torch.randperm(3, generator=generator) for _ in range(b)])
    shuffle = torch.rand(b, generator=generator) < shuffle * strength
    perm = torch.where(shuffle[:, None], perm, torch.arange(3).expand(b, 3))
    return torch.gather(out, 1, perm[:, :, None, None].expand_as(out))


# -- encoder, queue, loss ---------------------------------------------------

class ContrastiveEncoder(nn.Module):
    """Convolutional backbone plus projection head emitting unit vectors.

    The contrastive loss sees the projected unit vectors; linear probes read
    the backbone features underneath, as in the usual linear-evaluation setup.
    """

    def __init__(self, dim: int = 128, width: int = 32):
        super().__init__()
        w = width
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Sequential(nn.Linear(4 * w, 4 * w), nn.ReLU(), nn.Linear(4 * w, dim))
        self.dim = dim
        self.feature_dim = 4 * w
        self.frozen = False

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.backbone(x)), dim=-1)

    def freeze(self) -> "ContrastiveEncoder":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class NegativeQueue:
    """Ring buffer of detached unit vectors with FIFO eviction."""

    def __init__(self, size: int, dim: int):
        self.size = int(size)
        self._buf = torch.zeros(self.size, dim)
        self._cursor = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.size

    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach().reshape(-1, self._buf.shape[1]).to(self._buf.dtype)
        for k in keys[-self.size:]:
            self._buf[self._cursor] = k
            self._cursor = (self._cursor + 1) % self.size
            self._count = min(self._count + 1, self.size)

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self._count < self.size:
            return self._buf[: self._count].clone()
        return torch.cat([self._buf[self._cursor:], self._buf[: self._cursor]]).clone()


def info_nce(q: torch.Tensor, k_plus: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE loss; the positive is included in the normalizing sum."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q2 = q.reshape(-1, q.shape[-1])
    k2 = k_plus.reshape(-1, k_plus.shape[-1]).to(q2.dtype)
    pos = (q2 * k2).sum(dim=-1, keepdim=True)
    neg = q2 @ negatives.to(q2.dtype).T if negatives.numel() else q2.new_zeros(q2.shape[0], 0)
    logits = torch.cat([pos, neg], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


class MomentumPair:
    """Query encoder, its EMA key copy and the negative queue."""

    def __init__(self, encoder: ContrastiveEncoder, queue_size: int, momentum: float):
        self.encoder = encoder
        self.key_encoder = copy.deepcopy(encoder)
        for p in self.key_encoder.parameters():
            p.requires_grad_(False)
        self.momentum = float(momentum)
        self.queue = NegativeQueue(queue_size, encoder.dim)

    def embed_pair(self, x_aug1: torch.Tensor, x_aug2: torch.Tensor):
        q = self.encoder(x_aug1)
        with torch.no_grad():
            k_plus = self.key_encoder(x_aug2)
        return q, k_plus

    @torch.no_grad()
    def momentum_update(self) -> None:
        m = self.momentum
        for pk, pq in zip(self.key_encoder.parameters(), self.encoder.parameters()):
            pk.mul_(m).add_(pq.detach(), alpha=1 - m)


def pretrain_proxy(images: np.ndarray, cfg: ProxyConfig, log_every: int = 100) -> ContrastiveEncoder:
    """Self-supervised pretraining of the proxy encoder; returns it frozen."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc = ContrastiveEncoder(cfg.dim, cfg.width)
    pair = MomentumPair(enc, cfg.queue_size, cfg.momentum)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    data = torch.from_numpy(images)
    for step in range(cfg.steps):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        x = data[idx]
        q, k = pair.embed_pair(augment(x, gen), augment(x, gen))
        loss = info_nce(q, k, pair.queue.contents(), cfg.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        pair.momentum_update()
        pair.queue.enqueue(k)
        if log_every and step % log_every == 0:
            log.info("proxy step %d info_nce %.4f", step, loss.item())
    return enc.freeze()


# -- linear probe -------------------------------------------------------------

class LinearProbe(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc(emb)


@torch.no_grad()
def embed(encoder: ContrastiveEncoder, images, batch_size: int = 256) -> torch.Tensor:
    """Backbone features of ``images`` (the probe's input)."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return torch.cat([encoder.features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def train_probe(
    encoder: ContrastiveEncoder,
    images,
    labels,
    num_classes: int,
    seed: int = 0,
    steps: int = 300,
    weight_decay: float = 1e-4,
) -> LinearProbe:
    """Fit a linear probe on frozen backbone features; the encoder is only read.

    Training runs on standardized features and the standardization is folded
    back into the affine map afterwards.
    """
    torch.manual_seed(seed)
    feats = embed(encoder, images)
    mean = feats.mean(dim=0)
    std = feats.std(dim=0).clamp_min(1e-6)
    z = (feats - mean) / std
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    probe = LinearProbe(feats.shape[1], num_classes)
    opt = torch.optim.Adam(probe.parameters(), lr=0.05, weight_decay=weight_decay)
    for _ in range(steps):
        loss = F.cross_entropy(probe(z), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        probe.fc.weight.div_(std)
        probe.fc.bias.sub_(probe.fc.weight @ mean)
    return probe.eval()


@torch.no_grad()
def probe_accuracy(images, labels, probe: nn.Module, encoder: ContrastiveEncoder) -> float:
    feats = embed(encoder, images)
    logits = probe(feats)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise ValueError(f"label {int(labels.max())} outside {logits.shape[1]} probe classes")
    if labels.numel() == 0:
        return 0.0
    return float((logits.argmax(dim=1) == labels).double().mean())
