"""Finite-difference oracles shared by the gradient tests."""
import torch

from concretegan.nn import ComponentParams


def numeric_grad(loss_fn, params: ComponentParams, name: str, h: float = 1e-6) -> torch.Tensor:
    """Central differences of ``loss_fn(params)`` w.r.t. every entry of ``params[name]``."""
    t = params[name]
    out = torch.zeros_like(t)
    flat = t.detach().view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        # evaluated with autograd on: some losses differentiate internally
        flat[i] = old + h
        up = loss_fn(params).item()
        flat[i] = old - h
        down = loss_fn(params).item()
        flat[i] = old
        out.view(-1)[i] = (up - down) / (2 * h)
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    # the floor keeps exactly-zero gradients (e.g. a bias that cancels) from dividing noise by noise
    scale = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / scale


def check_all(loss_fn, params: ComponentParams, analytic, tol: float, h: float = 1e-6) -> dict[str, float]:
    """Relative error per tensor; asserts each is below ``tol``."""
    errs = {}
    for name in params.tensors:
        errs[name] = relative_error(analytic[name], numeric_grad(loss_fn, params, name, h))
    bad = {k: v for k, v in errs.items() if not v < tol}
    assert not bad, f"gradient mismatch: {bad}"
    return errs
