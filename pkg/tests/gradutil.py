"""Central finite-difference gradient checks in float64."""

import numpy as np
import torch


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn(x).item()
            flat[i] = old - h
            down = fn(x).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(fn, *inputs: torch.Tensor, h: float = 1e-6) -> float:
    """max over inputs of ||g_analytic - g_fd||_inf / max(||g_analytic||_inf, ||g_fd||_inf, 1e-10)."""
    leaves = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    for k, (x, ga) in enumerate(zip(leaves, grads)):
        ga = torch.zeros_like(x) if ga is None else ga
        xs = [l.detach().clone() for l in leaves]

        def one(v, k=k, xs=xs):
            args = list(xs)
            args[k] = v
            return fn(*args)
        gf = fd_gradient(one, xs[k].clone(), h)
        scale = max(ga.abs().max().item(), gf.abs().max().item(), 1e-10)
        worst = max(worst, (ga - gf).abs().max().item() / scale)
    return worst


def rand(seed: int, *shape) -> torch.Tensor:
    return torch.as_tensor(np.random.default_rng(seed).random(shape), dtype=torch.float64)
