"""Small helpers shared by the three training loops."""

from __future__ import annotations

import copy
import logging
import math
import os

import numpy as np
import torch

from .errors import InvalidArgument, TrainingFailed

log = logging.getLogger("f2p")


def configure_threads() -> int:
    """Honour ``F2P_THREADS`` for torch intra-op parallelism; returns the cap."""
    n = int(os.environ.get("F2P_THREADS", "1") or 1)
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def split_indices(n: int, fractions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/val/test split; at least one training item, val falls back to train."""
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise InvalidArgument(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    if n < 1:
        raise InvalidArgument("no samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    if len(fractions) == 2:
        fractions = fractions + (0.0,)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = max(1, n - n_val - n_test)
    n_val = min(n_val, n - n_train)
    n_test = n - n_train - n_val
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    if val.size == 0:
        val = train
    return train, val, test


def check_finite(value: float, epoch: int, what: str = "loss") -> None:
    if not math.isfinite(value):
        raise TrainingFailed(f"non-finite {what}", epoch)


def batches(indices, batch_size: int, rng: np.random.Generator | None = None):
    idx = np.asarray(indices)
    if rng is not None:
        idx = idx[rng.permutation(idx.size)]
    for i in range(0, idx.size, batch_size):
        yield idx[i:i + batch_size]


class BestState:
    """Keeps a copy of the parameters with the lowest validation score."""

    def __init__(self):
        self.score = math.inf
        self.state = None
        self.epoch = 0

    def update(self, module: torch.nn.Module, score: float, epoch: int) -> bool:
        if score < self.score:
            self.score = score
            self.state = copy.deepcopy(module.state_dict())
            self.epoch = epoch
            return True
        return False

    def restore(self, module: torch.nn.Module) -> None:
        if self.state is not None:
            module.load_state_dict(self.state)


def stack(images, dtype=torch.float32) -> torch.Tensor:
    """List of ``(H, W)`` / ``(H, W, C)`` arrays to a ``(N, C, H, W)`` tensor."""
    arrs = []
    for a in images:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        arrs.append(a.transpose(2, 0, 1))
    return torch.as_tensor(np.stack(arrs), dtype=dtype)


def accumulate(total: dict, comps: dict, weight: float) -> None:
    for k, v in comps.items():
        total[k] = total.get(k, 0.0) + float(v) * weight
