"""Finite-difference gradient oracle shared by the model test suites.

Central differences in float64 give an autograd-independent estimate of
every parameter gradient. The two routes must agree to rel err < 1e-4.
"""

import torch


def max_relative_grad_error(loss_fn, params, h=1e-5, max_elements=None):
    """Compare autograd gradients of loss_fn() against central differences.

    loss_fn rebuilds the scalar loss from the current parameter values on
    every call. params must be float64 leaf tensors. When max_elements is
    set, elements are subsampled with a deterministic stride per tensor.
    Returns the worst relative error over all checked elements.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("finite differences need float64 parameters")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in params
    ]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            gflat = g.view(-1)
            n = flat.numel()
            if max_elements is not None and n > max_elements:
                stride = max(1, n // max_elements)
                indices = range(0, n, stride)
            else:
                indices = range(n)
            for i in indices:
                orig = flat[i].item()
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * step)
                auto = gflat[i].item()
                denom = max(abs(fd), abs(auto), 1e-6)
                worst = max(worst, abs(fd - auto) / denom)
    return worst
