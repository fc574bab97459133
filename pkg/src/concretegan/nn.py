"""Neural building blocks shared by every component.

Parameters live in :class:`ComponentParams`, a flat name -> tensor map with a
component tag.  All layers are plain functions of (inputs, params) so losses
can be differentiated with :func:`grad`, including the second-order path the
gradient penalty needs.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import torch
import torch.nn.functional as F

COMPONENT_TAGS = ("encoder", "decoder", "code_generator", "code_discriminator", "text_discriminator")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; ``component`` names the culprit."""

    def __init__(self, component: str, what: str = "loss", iteration: int | None = None):
        self.component = component
        self.what = what
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite {what} in component {component!r}{where}")


class ComponentParams:
    """Named dense tensors belonging to one model component."""

    def __init__(self, tag: str, tensors: Mapping[str, torch.Tensor]):
        if tag not in COMPONENT_TAGS:
            raise ValueError(f"unknown component tag {tag!r}")
        self.tag = tag
        self.tensors: dict[str, torch.Tensor] = {}
        for name, t in tensors.items():
            t = t.detach().clone()
            if not torch.isfinite(t).all():
                raise NonFiniteError(tag, f"parameter {name}")
            self.tensors[name] = t.requires_grad_(True)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    @property
    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def clone(self) -> "ComponentParams":
        return ComponentParams(self.tag, self.tensors)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.tensors.items()}

    def to(self, dtype: torch.dtype) -> "ComponentParams":
        return ComponentParams(self.tag, {k: v.to(dtype) for k, v in self.tensors.items()})


@dataclass
class GradientBundle:
    """Per-tensor gradients aligned with one :class:`ComponentParams`."""

    tag: str
    grads: dict[str, torch.Tensor]

    @property
    def norm(self) -> float:
        return math.sqrt(sum(float((g.double() ** 2).sum()) for g in self.grads.values()))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle(self.tag, {k: g * factor for k, g in self.grads.items()})


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def uniform_(shape, gen: torch.Generator, dtype, scale: float = 0.08) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2.0 - 1.0) * scale


def gaussian_(shape, gen: torch.Generator, dtype, fan_in: int, gain: float = 1.0) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=dtype) * (gain / math.sqrt(fan_in))


def init_gru(prefix: str, in_dim: int, hidden: int, gen, dtype) -> dict[str, torch.Tensor]:
    """GRU weights acting on the concatenation [x, h]: (in_dim + hidden, hidden) per gate."""
    d = in_dim + hidden
    out = {}
    for gate in ("z", "r", "h"):
        out[f"{prefix}W_{gate}"] = uniform_((d, hidden), gen, dtype)
        out[f"{prefix}b_{gate}"] = torch.zeros(hidden, dtype=dtype)
    return out


def init_residual_mlp(prefix: str, width: int, n_layers: int, gen, dtype) -> dict[str, torch.Tensor]:
    out = {}
    for i in range(n_layers):
        out[f"{prefix}W{i}"] = gaussian_((width, width), gen, dtype, width)
        out[f"{prefix}b{i}"] = torch.zeros(width, dtype=dtype)
    return out


def init_linear(prefix: str, in_dim: int, out_dim: int, gen, dtype, gain: float = 1.0) -> dict[str, torch.Tensor]:
    return {
        f"{prefix}W": gaussian_((in_dim, out_dim), gen, dtype, in_dim, gain),
        f"{prefix}b": torch.zeros(out_dim, dtype=dtype),
    }


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _gru_weights(params: Mapping[str, torch.Tensor], prefix: str):
    return [params[f"{prefix}{n}_{g}"] for g in ("z", "r", "h") for n in ("W", "b")]


def gru_step(x: torch.Tensor, h: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str = "") -> torch.Tensor:
    """One GRU update.

    z = sigmoid(W_z [x, h] + b_z), r = sigmoid(W_r [x, h] + b_r),
    h~ = tanh(W_h [x, r*h] + b_h), h' = (1 - z) * h + z * h~.
    """
    W_z, b_z, W_r, b_r, W_h, b_h = _gru_weights(params, prefix)
    if x.shape[-1] + h.shape[-1] != W_z.shape[0] or h.shape[-1] != W_z.shape[1]:
        raise ValueError(
            f"gru_step: input {tuple(x.shape)} / hidden {tuple(h.shape)} do not match weights {tuple(W_z.shape)}"
        )
    return gru_step_split(x @ W_z[: x.shape[-1]], x @ W_r[: x.shape[-1]], x @ W_h[: x.shape[-1]], h, params, prefix)


def gru_step_split(xz, xr, xh, h, params, prefix: str = "") -> torch.Tensor:
    """GRU update with the input projections already applied (they can be batched over time)."""
    W_z, b_z, W_r, b_r, W_h, b_h = _gru_weights(params, prefix)
    n_in = W_z.shape[0] - W_z.shape[1]
    z = torch.sigmoid(xz + h @ W_z[n_in:] + b_z)
    r = torch.sigmoid(xr + h @ W_r[n_in:] + b_r)
    h_tilde = torch.tanh(xh + (r * h) @ W_h[n_in:] + b_h)
    return (1.0 - z) * h + z * h_tilde


def gru_input_projections(x: torch.Tensor, params, prefix: str = ""):
    """x @ W_{z,r,h}[:in] for any leading shape."""
    n_in = x.shape[-1]
    return tuple(x @ params[f"{prefix}W_{g}"][:n_in] for g in ("z", "r", "h"))


def gru_unroll(x_seq: torch.Tensor, h0: torch.Tensor, params, prefix: str = "") -> torch.Tensor:
    """Run the GRU over (B, T, in) inputs; returns hidden states (B, T, H)."""
    xz, xr, xh = gru_input_projections(x_seq, params, prefix)
    h, out = h0, []
    for t in range(x_seq.shape[1]):
        h = gru_step_split(xz[:, t], xr[:, t], xh[:, t], h, params, prefix)
        out.append(h)
    return torch.stack(out, dim=1)


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def linear(x: torch.Tensor, params, prefix: str) -> torch.Tensor:
    W, b = params[f"{prefix}W"], params[f"{prefix}b"]
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear {prefix!r}: input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b


def residual_mlp(x: torch.Tensor, params, prefix: str = "", n_layers: int = 2, slope: float = 0.2) -> torch.Tensor:
    """Stack of y = LeakyReLU(W x + b) + x blocks."""
    for i in range(n_layers):
        W = params[f"{prefix}W{i}"]
        if x.shape[-1] != W.shape[0]:
            raise ValueError(f"residual_mlp: input width {x.shape[-1]} != {W.shape[0]}")
        x = leaky_relu(x @ W + params[f"{prefix}b{i}"], slope) + x
    return x


# ---------------------------------------------------------------------------
# gradients and optimization
# ---------------------------------------------------------------------------


def grad(
    loss_fn: Callable[[ComponentParams], torch.Tensor],
    params: ComponentParams,
    create_graph: bool = False,
) -> tuple[torch.Tensor, GradientBundle]:
    """Evaluate ``loss_fn(params)`` and its gradient w.r.t. every tensor of ``params``.

    Tensors the loss does not depend on get zero gradients.
    """
    loss = loss_fn(params)
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError(params.tag, "loss")
    names = list(params.tensors)
    gs = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
    bundle = {}
    for n, g in zip(names, gs):
        if g is None:
            g = torch.zeros_like(params[n])
        if not torch.isfinite(g).all():
            raise NonFiniteError(params.tag, f"gradient of {n}")
        bundle[n] = g
    return loss, GradientBundle(params.tag, bundle)


def grad_many(loss: torch.Tensor, components: list[ComponentParams]) -> list[GradientBundle]:
    """Gradients of one scalar loss w.r.t. several components at once."""
    if not torch.isfinite(loss):
        raise NonFiniteError("+".join(c.tag for c in components), "loss")
    flat = [(c, n) for c in components for n in c.tensors]
    gs = torch.autograd.grad(loss, [c[n] for c, n in flat], allow_unused=True)
    out = {c.tag: {} for c in components}
    for (c, n), g in zip(flat, gs):
        g = torch.zeros_like(c[n]) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(c.tag, f"gradient of {n}")
        out[c.tag][n] = g
    return [GradientBundle(c.tag, out[c.tag]) for c in components]


def clip_gradients(grads: GradientBundle | list[GradientBundle], max_norm: float = 5.0):
    """Rescale so the global l2 norm (over all bundles passed) is at most ``max_norm``."""
    bundles = [grads] if isinstance(grads, GradientBundle) else list(grads)
    total = math.sqrt(sum(b.norm ** 2 for b in bundles))
    if total > max_norm:
        bundles = [b.scaled(max_norm / total) for b in bundles]
    return bundles[0] if isinstance(grads, GradientBundle) else bundles


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": {k: t.clone() for k, t in self.m.items()},
            "v": {k: t.clone() for k, t in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamState":
        return cls(d["beta1"], d["beta2"], d["eps"], int(d["step"]), dict(d["m"]), dict(d["v"]))


def adam_update(params: ComponentParams, grads: GradientBundle, lr: float, state: AdamState) -> None:
    """One bias-corrected Adam step, in place on ``params`` and ``state``."""
    if grads.tag != params.tag:
        raise ValueError(f"gradients for {grads.tag!r} applied to {params.tag!r}")
    for name, g in grads.grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(params.tag, f"gradient of {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, g in grads.grads.items():
            g = g.detach()
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(g)
                state.v[name] = torch.zeros_like(g)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            params[name].sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
