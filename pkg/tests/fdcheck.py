"""Central finite-difference oracle shared by the gradient tests."""

import torch


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_input_gradient(fn, inputs, index: int = 0, eps: float = 1e-6, probes: int = 6, seed: int = 0):
    """Compare autograd and central differences on a few random entries of ``inputs[index]``.

    ``fn`` maps float64 tensors to a scalar. Returns the worst relative error.
    """
    inputs = [t.detach().clone().double() for t in inputs]
    target = inputs[index].requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(*inputs), target)
    gen = torch.Generator().manual_seed(seed)
    flat = target.detach().view(-1)
    worst = 0.0
    for k in torch.randint(flat.numel(), (probes,), generator=gen).tolist():
        with torch.no_grad():
            orig = flat[k].item()
            flat[k] = orig + eps
            up = fn(*inputs).item()
            flat[k] = orig - eps
            down = fn(*inputs).item()
            flat[k] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(grad.view(-1)[k].item(), numeric))
    return worst


def check_parameter_gradient(loss_fn, param: torch.nn.Parameter, index: int = 0, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences for one entry of ``param``."""
    param.grad = None
    loss_fn().backward()
    analytic = param.grad.view(-1)[index].item()
    flat = param.data.view(-1)
    with torch.no_grad():
        orig = flat[index].item()
        flat[index] = orig + eps
        up = loss_fn().item()
        flat[index] = orig - eps
        down = loss_fn().item()
        flat[index] = orig
    return relative_error(analytic, (up - down) / (2 * eps))
