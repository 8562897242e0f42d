"""Central finite-difference gradient oracle shared by the gradient tests."""

import torch


def fd_relative_error(fn, inputs, h=1e-5, seed=0):
    """Compare autograd against central differences for a random projection of fn.

    ``inputs`` are float64 tensors; returns the norm-wise relative error
    ||g_auto - g_fd|| / max(||g_fd||, ||g_auto||) over all inputs together.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    weight = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (fn(*xs) * weight).sum()

    auto = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    auto = [torch.zeros_like(x) if g is None else g for g, x in zip(auto, inputs)]
    numeric = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar(*inputs).item()
                flat[i] = orig - h
                down = scalar(*inputs).item()
                flat[i] = orig
                g.view(-1)[i] = (up - down) / (2 * h)
            numeric.append(g)
    a = torch.cat([g.flatten() for g in auto])
    n = torch.cat([g.flatten() for g in numeric])
    denom = max(n.norm().item(), a.norm().item(), 1e-12)
    return (a - n).norm().item() / denom
