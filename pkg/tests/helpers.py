"""Shared test utilities: central finite differences and random draws."""
import numpy as np
import torch


def numeric_grad(fn, x, step=1e-5):
    """Central-difference gradient of scalar ``fn`` at ``x`` (float64 tensor)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def grad_rel_error(fn, x, step=1e-5):
    a = analytic_grad(fn, x)
    n = numeric_grad(fn, x, step)
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale


def random_rotation(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    return torch.tensor(q)
