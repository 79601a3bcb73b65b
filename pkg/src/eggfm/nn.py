"""Small float64 MLP substrate shared by the five learned networks.

Autodiff is delegated to torch; everything here is the thin layer the rest of
the package relies on: a conditioned MLP, sinusoidal conditioning
embeddings, gradient/JVP helpers that also differentiate through inputs, an
Adam + global-norm-clip + EMA update, and a plain checkpoint format.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import blob

DTYPE = torch.float64
ROLES = ("score", "energy", "geodesic", "embedding", "flow")
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss, gradient or state became NaN/inf; carries the stage that produced it."""

    def __init__(self, stage: str, step: int | None = None, detail: str = ""):
        self.stage = stage
        self.step = step
        where = stage if step is None else f"{stage} (step {step})"
        super().__init__(f"non-finite value in {where}" + (f": {detail}" if detail else ""))


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, found: tuple, expected: tuple):
        self.name = name
        super().__init__(f"layer {name!r}: checkpoint shape {found} does not match config shape {expected}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


# --------------------------------------------------------------------------- embeddings

@dataclass(frozen=True)
class SinusoidalEmbedding:
    """Maps a scalar conditioner to 2*n_freq features [sin(f_k u), cos(f_k u)].

    ``u`` is log(sigma) for noise scales, t for time and the integer index for
    cluster ids. Frequencies are geometric between 1 and ``max_freq``.
    """

    n_freq: int = 32
    kind: str = "time"
    max_freq: float = 16.0

    def __post_init__(self):
        if self.n_freq < 1:
            raise ValueError("n_freq must be positive")
        if self.kind not in ("noise_scale", "time", "cluster_id"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2 * self.n_freq

    def freqs(self) -> Tensor:
        if self.n_freq == 1:
            return torch.ones(1, dtype=DTYPE)
        return torch.logspace(0.0, math.log10(self.max_freq), self.n_freq, dtype=DTYPE)

    def __call__(self, value) -> Tensor:
        u = as_tensor(value)
        if self.kind == "noise_scale":
            u = torch.log(u)
        if u.dim() == 0:
            u = u.reshape(1)
        if u.dim() == 1:
            u = u[:, None]
        ang = u * self.freqs()
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


# --------------------------------------------------------------------------- networks

@dataclass(frozen=True)
class ModelSpec:
    """Architecture metadata stored alongside every set of weights.

    ``n_layers`` counts linear maps: input->hidden, (n_layers-2) hidden->hidden,
    hidden->output. ``cond_dim`` is the total width of embedded conditioners
    concatenated to the input. ``input_skip`` adds the raw input to the output.
    """

    role: str
    in_dim: int
    out_dim: int
    hidden_dim: int = 512
    n_layers: int = 4
    residual: bool = False
    cond_dim: int = 0
    input_skip: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for name in ("in_dim", "out_dim", "hidden_dim", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 2:
            raise ValueError("n_layers must be at least 2 (input and output maps)")
        if self.residual and self.n_layers < 3:
            raise ValueError("residual blocks need at least one hidden->hidden layer")
        if self.input_skip and self.in_dim != self.out_dim:
            raise ValueError("input_skip requires in_dim == out_dim")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for each linear map in order."""
        shapes = [(self.hidden_dim, self.in_dim + self.cond_dim)]
        shapes += [(self.hidden_dim, self.hidden_dim)] * (self.n_layers - 2)
        shapes.append((self.out_dim, self.hidden_dim))
        return shapes


class MLP(nn.Module):
    """SiLU MLP; with ``residual`` each hidden block is h + silu(W h + b)."""

    def __init__(self, spec: ModelSpec, seed: int | None = None, zero_last: bool = False):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.layers = nn.ModuleList()
        for out_f, in_f in spec.layer_shapes():
            lin = nn.Linear(in_f, out_f, dtype=DTYPE)
            bound = 1.0 / math.sqrt(in_f)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            self.layers.append(lin)
        if zero_last:
            with torch.no_grad():
                self.layers[-1].weight.zero_()
                self.layers[-1].bias.zero_()

    def forward(self, x: Tensor, *cond: Tensor) -> Tensor:
        spec = self.spec
        if x.shape[-1] != spec.in_dim:
            raise ValueError(f"{spec.role} net expects input dim {spec.in_dim}, got {x.shape[-1]}")
        if cond:
            width = sum(c.shape[-1] for c in cond)
            if width != spec.cond_dim:
                raise ValueError(f"{spec.role} net expects conditioner width {spec.cond_dim}, got {width}")
            lead = x.shape[:-1]
            h = torch.cat([x, *(c.expand(*lead, c.shape[-1]) for c in cond)], dim=-1)
        elif spec.cond_dim:
            raise ValueError(f"{spec.role} net expects conditioner width {spec.cond_dim}, got none")
        else:
            h = x
        h = nn.functional.silu(self.layers[0](h))
        for lin in self.layers[1:-1]:
            z = nn.functional.silu(lin(h))
            h = h + z if spec.residual else z
        out = self.layers[-1](h)
        if spec.input_skip:
            out = out + x
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}


def freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


# --------------------------------------------------------------------------- gradients

def check_finite(value: Tensor, stage: str, step: int | None = None) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteError(stage, step)


def gradients(
    params: Sequence[Tensor],
    loss_fn: Callable[[], Tensor],
    stage: str = "loss",
    step: int | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Evaluate a scalar loss and its exact reverse-mode gradient.

    Parameters the loss does not touch get zero gradients.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError(f"{stage}: loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, stage, step)
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return loss.detach(), out


def input_grad(fn: Callable[[Tensor], Tensor], x: Tensor, create_graph: bool = True) -> tuple[Tensor, Tensor]:
    """Value and d(sum fn)/dx for a per-row scalar function."""
    x = x if x.requires_grad else x.detach().requires_grad_(True)
    y = fn(x)
    (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return y, g


def jvp(fn: Callable[[Tensor], Tensor], x: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """(fn(x), J_fn(x) v) by the double-vjp trick; differentiable w.r.t. parameters."""
    x = x.detach().requires_grad_(True)
    y = fn(x)
    u = torch.zeros_like(y, requires_grad=True)
    (g,) = torch.autograd.grad(y, x, grad_outputs=u, create_graph=True, allow_unused=True)
    if g is None or not g.requires_grad:
        return y, torch.zeros_like(y)
    (jv,) = torch.autograd.grad(g, u, grad_outputs=v, create_graph=True, allow_unused=True)
    if jv is None:
        return y, torch.zeros_like(y)
    return y, jv


# --------------------------------------------------------------------------- optimiser

@dataclass
class OptState:
    """Adam moments, global-norm clip threshold and EMA shadow of the weights."""

    params: list[Tensor]
    lr: float = 1e-4
    grad_clip: float = 10.0
    ema_decay: float = 0.999
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)
    ema: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.exp_avg:
            self.exp_avg = [torch.zeros_like(p) for p in self.params]
            self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]
        if not self.ema:
            self.ema = [p.detach().clone() for p in self.params]


def make_opt(model: nn.Module, lr: float = 1e-4, grad_clip: float = 10.0, ema_decay: float = 0.999) -> OptState:
    return OptState(list(model.parameters()), lr=lr, grad_clip=grad_clip, ema_decay=ema_decay)


def global_norm(tensors: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float((t.double() ** 2).sum()) for t in tensors))


def clip_by_global_norm(grads: list[Tensor], max_norm: float) -> list[Tensor]:
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("gradient clip", detail="gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


@torch.no_grad()
def train_step(opt: OptState, grads: list[Tensor]) -> None:
    """Clip, Adam update and EMA shadow update, in place."""
    grads = clip_by_global_norm(grads, opt.grad_clip)
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v, s in zip(opt.params, grads, opt.exp_avg, opt.exp_avg_sq, opt.ema):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(opt.eps)
        p.addcdiv_(m, denom, value=-opt.lr / c1)
        s.mul_(opt.ema_decay).add_(p, alpha=1.0 - opt.ema_decay)


def ema_copy(model: MLP, opt: OptState) -> MLP:
    """Frozen copy of ``model`` carrying the EMA shadow weights."""
    twin = copy.deepcopy(model)
    with torch.no_grad():
        for p, s in zip(twin.parameters(), opt.ema):
            p.copy_(s)
    return freeze(twin)


def fit(
    model: nn.Module,
    opt: OptState,
    loss_fn: Callable[[int], Tensor],
    steps: int,
    stage: str,
) -> list[float]:
    """Run ``steps`` updates of ``loss_fn(step)``; returns the loss trace."""
    params = opt.params
    trace = []
    for step in range(steps):
        loss, grads = gradients(params, lambda: loss_fn(step), stage=stage, step=step)
        train_step(opt, grads)
        trace.append(float(loss))
    return trace


# --------------------------------------------------------------------------- checkpoints

def config_hash(config) -> str:
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(
    model: MLP,
    opt: OptState | None = None,
    *,
    seed: int | None = None,
    config_hash: str | None = None,
    meta: dict | None = None,
) -> bytes:
    arrays = model.arrays()
    names = list(arrays)
    header = {
        "format": "eggfm-checkpoint",
        "version": CHECKPOINT_VERSION,
        "role": model.spec.role,
        "spec": asdict(model.spec),
        "layer_shapes": [list(s) for s in model.spec.layer_shapes()],
        "seed": seed,
        "config_hash": config_hash,
        "meta": meta or {},
        "has_opt": opt is not None,
    }
    if opt is not None:
        header["opt"] = {
            "step": opt.step, "lr": opt.lr, "grad_clip": opt.grad_clip,
            "ema_decay": opt.ema_decay, "betas": list(opt.betas), "eps": opt.eps,
        }
        for tag, bank in (("ema", opt.ema), ("exp_avg", opt.exp_avg), ("exp_avg_sq", opt.exp_avg_sq)):
            for name, t in zip(names, bank):
                arrays[f"{tag}/{name}"] = t.detach().cpu().numpy()
    return blob.dumps("checkpoint", header, arrays)


@dataclass
class Checkpoint:
    model: MLP
    opt: OptState | None
    seed: int | None
    config_hash: str | None
    meta: dict


def load_checkpoint(data: bytes, spec: ModelSpec | None = None) -> Checkpoint:
    """Rebuild a model (and optimiser state, if saved) from checkpoint bytes.

    With ``spec`` the stored weights must fit that architecture exactly;
    the first offending layer is named in the raised ShapeMismatchError.
    """
    try:
        header, arrays = blob.loads(data, kind="checkpoint")
    except blob.BlobError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    stored = ModelSpec(**header["spec"])
    target = spec or stored
    if spec is not None and spec.role != stored.role:
        raise CheckpointError(f"checkpoint holds a {stored.role!r} net, config expects {spec.role!r}")
    model = MLP(target)
    state = model.state_dict()
    for name, ref in state.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks array {name!r}")
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise ShapeMismatchError(name, tuple(arrays[name].shape), tuple(ref.shape))
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    opt = None
    if header.get("has_opt"):
        o = header["opt"]
        names = list(state)
        params = list(model.parameters())
        opt = OptState(
            params, lr=o["lr"], grad_clip=o["grad_clip"], ema_decay=o["ema_decay"],
            betas=tuple(o["betas"]), eps=o["eps"], step=o["step"],
            exp_avg=[torch.from_numpy(arrays[f"exp_avg/{n}"]) for n in names],
            exp_avg_sq=[torch.from_numpy(arrays[f"exp_avg_sq/{n}"]) for n in names],
            ema=[torch.from_numpy(arrays[f"ema/{n}"]) for n in names],
        )
    return Checkpoint(model, opt, header.get("seed"), header.get("config_hash"), header.get("meta", {}))
