"""Triplet + distillation embedding network for enhanced ridge maps."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import InvalidArgument, MiningFailed
from .tensor_ops import to_tensor
from .training import check_finite, log, seed_everything, stack

TAG = "embedder"
DEFAULT_INPUT = {128: 256, 256: 512}


@dataclass
class EmbedConfig:
    backbone: str = "small"          # "small" (6 conv layers) or "resnet18"
    dim: int = 128
    input_size: int = 0              # 0: 256 for 128-d, 512 for 256-d
    width: int = 16                  # base channel count of the small backbone
    margin: float = 0.2
    alpha: float = 0.7
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 20
    triplets_per_identity: int = 6
    aug_shift: float = 3.0
    aug_rotate: float = 4.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidArgument("margin must be > 0")
        if self.alpha < 0:
            raise InvalidArgument("distillation weight must be >= 0")
        if self.backbone not in ("small", "resnet18"):
            raise InvalidArgument(f"unknown backbone {self.backbone!r}")
        if not self.input_size:
            if self.dim not in DEFAULT_INPUT:
                raise InvalidArgument("input_size required for dimensions other than 128/256")
            self.input_size = DEFAULT_INPUT[self.dim]

    def to_meta(self) -> dict:
        return asdict(self)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SmallBackbone(nn.Module):
    """Six conv layers in three stride-2 blocks, then a 4x4 average pool."""

    def __init__(self, width: int = 16):
        super().__init__()
        c = width
        self.blocks = nn.ModuleList([
            nn.Sequential(_conv(1, c, 2), _conv(c, c)),
            nn.Sequential(_conv(c, 2 * c, 2), _conv(2 * c, 2 * c)),
            nn.Sequential(_conv(2 * c, 4 * c, 2), _conv(4 * c, 4 * c)),
        ])
        self.out_features = 4 * c * 16

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 4), 1)

    @property
    def last_block(self) -> str:
        return f"backbone.blocks.{len(self.blocks) - 1}"


class ResNet18Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.out_features = 512

    def forward(self, x):
        return self.net(x)

    @property
    def last_block(self) -> str:
        return "backbone.net.layer4"


class EmbeddingModel(nn.Module):
    def __init__(self, cfg: EmbedConfig | None = None):
        super().__init__()
        self.cfg = cfg or EmbedConfig()
        self.backbone = SmallBackbone(self.cfg.width) if self.cfg.backbone == "small" else ResNet18Backbone()
        self.head = nn.Linear(self.backbone.out_features, self.cfg.dim)

    def forward(self, x):
        return F.normalize(self.head(self.backbone(x)), dim=1)


@torch.no_grad()
def embed_forward(model: EmbeddingModel, img) -> np.ndarray:
    """Unit-norm embedding of one grayscale image of ``input_size`` squared."""
    s = model.cfg.input_size
    if np.ndim(img) != 2 or np.shape(img) != (s, s):
        raise InvalidArgument(f"embedder expects a {s}x{s} grayscale image, got {np.shape(img)}")
    model.eval()
    return model(to_tensor(img)).double().numpy()[0]


@torch.no_grad()
def embed_batch(model: EmbeddingModel, images, batch: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        out.append(model(stack(images[i:i + batch])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.dim))


def cosine_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return 1.0 - (x * y).sum(dim=-1)


def triplet_loss(za, zp, zn, margin: float = 0.2) -> torch.Tensor:
    """Batch mean of ``max(0, d(a, p) - d(a, n) + m)`` with ``d = 1 - x.y``."""
    return torch.relu(cosine_distance(za, zp) - cosine_distance(za, zn) + margin).mean()


def distill_loss(za, zp, zn, ta, tp, tn) -> torch.Tensor:
    """``1 - mean(cos(z_a, t_a), cos(z_p, t_p), cos(z_n, t_n))``, batch-averaged."""
    cos = [F.cosine_similarity(z, t, dim=-1, eps=1e-12) for z, t in ((za, ta), (zp, tp), (zn, tn))]
    return (1.0 - (cos[0] + cos[1] + cos[2]) / 3.0).mean()


def combined_loss(za, zp, zn, ta, tp, tn, margin: float = 0.2, alpha: float = 0.7) -> torch.Tensor:
    return triplet_loss(za, zp, zn, margin) + alpha * distill_loss(za, zp, zn, ta, tp, tn)


def fine_tune_loss(ea, ep, en, delta: float = 0.08, w_t: float = 0.75, w_i: float = 0.25) -> torch.Tensor:
    """Soft-margin triplet on cosine distances plus an anchor/positive cosine term."""
    cos_ap = F.cosine_similarity(ea, ep, dim=-1, eps=1e-12)
    cos_an = F.cosine_similarity(ea, en, dim=-1, eps=1e-12)
    d_ap, d_an = 1.0 - cos_ap, 1.0 - cos_an
    return (w_t * F.softplus(d_ap - d_an + delta) + w_i * (1.0 - cos_ap)).mean()


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    kind: str = "semi-hard"   # "semi-hard", "hard" or "random"


def mine_semi_hard(emb, labels, margin: float = 0.2, k: int = 6, seed: int = 0) -> list[Triplet]:
    """Up to ``k`` triplets per identity.

    Semi-hard triplets (``d_ap < d_an < d_ap + m``) come first, ordered by
    ``d_an`` then indices; any deficit is filled with the largest-violation
    hard triplets (``d_an <= d_ap``), then with seeded random triplets
    (drawn with replacement, so every identity with a pair yields ``k``).
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        raise MiningFailed("need at least two identities")
    dist = 1.0 - emb @ emb.T
    rng = np.random.default_rng(seed)
    out: list[Triplet] = []
    any_pair = False
    for ident in ids:
        members = np.flatnonzero(labels == ident)
        others = np.flatnonzero(labels != ident)
        if members.size < 2:
            continue
        any_pair = True
        pairs = [(a, p) for a in members for p in members if a != p]
        semi, hard = [], []
        for a, p in pairs:
            d_ap = dist[a, p]
            d_an = dist[a, others]
            for n, dn in zip(others, d_an):
                if d_ap < dn < d_ap + margin:
                    semi.append((dn, a, p, n))
                elif dn <= d_ap:
                    hard.append((-(d_ap - dn + margin), a, p, n))
        semi.sort()
        hard.sort()
        chosen = [Triplet(int(a), int(p), int(n), "semi-hard") for _, a, p, n in semi[:k]]
        for _, a, p, n in hard[: k - len(chosen)]:
            chosen.append(Triplet(int(a), int(p), int(n), "hard"))
        while len(chosen) < k:
            a, p = pairs[int(rng.integers(len(pairs)))]
            n = others[int(rng.integers(others.size))]
            chosen.append(Triplet(int(a), int(p), int(n), "random"))
        out.extend(chosen)
    if not any_pair:
        raise MiningFailed("no identity has two samples")
    return out


def brute_force_semi_hard(emb, labels, margin: float) -> set:
    """Every semi-hard ``(a, p, n)`` by plain enumeration (test oracle)."""
    emb = np.asarray(emb, dtype=np.float64)
    n = len(labels)
    found = set()
    for a in range(n):
        for p in range(n):
            if a == p or labels[a] != labels[p]:
                continue
            d_ap = 1.0 - float(np.dot(emb[a], emb[p]))
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                d_an = 1.0 - float(np.dot(emb[a], emb[q]))
                if d_ap < d_an < d_ap + margin:
                    found.add((a, p, q))
    return found


class Teacher(nn.Module):
    """Frozen embedding function plus a trainable linear projection to the student dimension."""

    def __init__(self, net: nn.Module, teacher_dim: int, student_dim: int, seed: int = 0):
        super().__init__()
        self.net = net
        self.net.requires_grad_(False)
        self.net.eval()
        self.projection = nn.Linear(teacher_dim, student_dim, bias=False)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(teacher_dim)
            self.projection.weight.copy_((torch.rand(self.projection.weight.shape, generator=gen) * 2 - 1) * bound)

    def train(self, mode: bool = True):
        super().train(mode)
        self.net.eval()
        return self

    def forward(self, x):
        with torch.no_grad():
            t = self.net(x)
        return F.normalize(self.projection(t), dim=1)

    @classmethod
    def from_student(cls, model: EmbeddingModel, student_dim: int | None = None, seed: int = 0) -> "Teacher":
        """Self-distillation surrogate: a frozen copy of an earlier student."""
        frozen = copy.deepcopy(model)
        return cls(frozen, model.cfg.dim, student_dim or model.cfg.dim, seed)


def augment(img: np.ndarray, rng: np.random.Generator, cfg: EmbedConfig) -> np.ndarray:
    """Random shift/rotation (replicate border) and Gaussian noise."""
    h, w = img.shape
    out = img
    if cfg.aug_shift > 0 or cfg.aug_rotate > 0:
        angle = rng.uniform(-cfg.aug_rotate, cfg.aug_rotate)
        tx, ty = rng.uniform(-cfg.aug_shift, cfg.aug_shift, size=2)
        mat = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, 1.0)
        mat[:, 2] += (tx, ty)
        out = cv2.warpAffine(img.astype(np.float64), mat, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REPLICATE)
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def freeze_except(model: nn.Module, prefixes) -> list[str]:
    """Disable gradients outside ``prefixes``; returns names of frozen leaf modules."""
    prefixes = tuple(prefixes)
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith(prefixes))
    frozen = []
    for name, mod in model.named_modules():
        if name and not any(name.startswith(pre) or pre.startswith(name + ".") for pre in prefixes) \
                and not list(mod.children()):
            frozen.append(name)
    return frozen


def set_train_mode(model: nn.Module, frozen_modules) -> None:
    model.train()
    mods = dict(model.named_modules())
    for name in frozen_modules:
        mods[name].eval()


def train_embedder(images, labels, cfg: EmbedConfig | None = None, teacher: Teacher | None = None,
                   model: EmbeddingModel | None = None, trainable=None):
    """Per epoch: embed everything, re-mine triplets, optimise triplet + alpha * distill.

    ``model`` continues training an existing network; ``trainable`` restricts
    updates to parameters whose names start with one of the given prefixes
    (the rest stay bit-identical, batch-norm statistics included).
    """
    cfg = cfg or EmbedConfig()
    images = [np.asarray(im, dtype=np.float64) for im in images]
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise InvalidArgument("need at least two identities")
    s = cfg.input_size
    if any(im.shape != (s, s) for im in images):
        raise InvalidArgument(f"embedder images must be {s}x{s}")
    rng = seed_everything(cfg.seed)
    model = model if model is not None else EmbeddingModel(cfg)
    use_teacher = teacher is not None and cfg.alpha > 0
    if teacher is not None and not use_teacher:
        log.info("distillation weight is 0; teacher ignored")
    frozen = freeze_except(model, trainable) if trainable is not None else []
    params = [p for p in model.parameters() if p.requires_grad]
    if use_teacher:
        params += list(teacher.projection.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        emb = embed_batch(model, images)
        triplets = mine_semi_hard(emb, labels, cfg.margin, cfg.triplets_per_identity,
                                  seed=int(rng.integers(2**31)))
        kinds = {k: sum(t.kind == k for t in triplets) for k in ("semi-hard", "hard", "random")}
        order = rng.permutation(len(triplets))
        set_train_mode(model, frozen)
        if use_teacher:
            teacher.train()
        sums = {"loss": 0.0, "triplet": 0.0, "distill": 0.0}
        for i in range(0, order.size, cfg.batch_size):
            batch = [triplets[j] for j in order[i:i + cfg.batch_size]]
            idx = [t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch]
            x = stack([augment(images[j], rng, cfg) for j in idx])
            z = model(x)
            nb = len(batch)
            za, zp, zn = z[:nb], z[nb:2 * nb], z[2 * nb:]
            l_trip = triplet_loss(za, zp, zn, cfg.margin)
            loss = l_trip
            l_dist = torch.zeros(())
            if use_teacher:
                t = teacher(x)
                l_dist = distill_loss(za, zp, zn, t[:nb], t[nb:2 * nb], t[2 * nb:])
                loss = l_trip + cfg.alpha * l_dist
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += loss.item() * nb
            sums["triplet"] += l_trip.item() * nb
            sums["distill"] += l_dist.item() * nb
        sched.step()
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"]}
        row.update({k: v / max(1, len(triplets)) for k, v in sums.items()})
        row.update({f"n_{k.replace('-', '_')}": v for k, v in kinds.items()})
        check_finite(row["loss"], epoch)
        history.append(row)
        log.info("embed epoch %d loss %.5f (semi-hard %d)", epoch, row["loss"], kinds["semi-hard"])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, history


def contact_fine_tune(model: EmbeddingModel, images, labels, cfg: EmbedConfig | None = None,
                      teacher: Teacher | None = None):
    """Adapt a copy of ``model`` to contact prints: head and last backbone block only."""
    tuned = copy.deepcopy(model)
    cfg = cfg or tuned.cfg
    return train_embedder(images, labels, cfg, teacher, model=tuned,
                          trainable=("head", tuned.backbone.last_block))


def save_embedder(path, model: EmbeddingModel) -> None:
    checkpoint.save_module(path, TAG, model, model.cfg.to_meta())


def load_embedder(path) -> EmbeddingModel:
    meta, tensors = checkpoint.load(path, TAG)
    model = EmbeddingModel(EmbedConfig(**meta))
    checkpoint.load_state(model, tensors)
    return model.eval()
