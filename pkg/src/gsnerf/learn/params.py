"""Parameter registry, reverse-mode gradients, Adam and the learning-rate schedule.

Gradients come from torch autograd; the store gives every parameter a single
owner (the top-level submodule it lives in) and keeps the optimizer state so
checkpoints can round-trip it.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import torch
import torch.nn as nn

LR_START = 5e-4
LR_END = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class GradientError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Non-finite gradient or loss; names the offending parameter when known."""


@dataclass
class ParamStore:
    params: dict[str, nn.Parameter]
    owners: dict[str, str]
    step: int = 0
    seed: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    _last_loss: object = field(default=None, repr=False)

    @classmethod
    def from_module(cls, module: nn.Module, seed: int = 0) -> "ParamStore":
        params, owners = {}, {}
        for name, p in module.named_parameters():
            if name in params:
                raise ValueError(f"parameter {name} registered twice")
            params[name] = p
            owners[name] = name.split(".", 1)[0]
        return cls(params, owners, seed=seed)

    def names(self, owner: str | None = None) -> list[str]:
        return [n for n in self.params if owner is None or self.owners[n] == owner]

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "seed": self.seed,
            "params": {n: p.detach().clone() for n, p in self.params.items()},
            "exp_avg": {n: t.clone() for n, t in self.exp_avg.items()},
            "exp_avg_sq": {n: t.clone() for n, t in self.exp_avg_sq.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state["params"])
        extra = set(state["params"]) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint parameters differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        with torch.no_grad():
            for n, p in self.params.items():
                src = state["params"][n]
                if src.shape != p.shape:
                    raise ValueError(f"{n}: checkpoint shape {tuple(src.shape)} != {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))
        self.step = int(state["step"])
        self.seed = int(state.get("seed", self.seed))
        self.exp_avg = {n: t.to(self.params[n].dtype) for n, t in state.get("exp_avg", {}).items()}
        self.exp_avg_sq = {n: t.to(self.params[n].dtype) for n, t in state.get("exp_avg_sq", {}).items()}


def backward(total: torch.Tensor, store: ParamStore) -> None:
    """Fill gradients of every store parameter from a scalar loss; unreachable ones get zeros."""
    if total.dim() != 0:
        raise GradientError("backward needs a scalar loss")
    if store._last_loss is not None and store._last_loss() is total:
        raise GradientError("backward called twice on the same forward graph")
    store._last_loss = weakref.ref(total)
    store.zero_grad()
    names = list(store.params)
    grads = torch.autograd.grad(total, [store.params[n] for n in names], allow_unused=True)
    for n, g in zip(names, grads):
        p = store.params[n]
        p.grad = torch.zeros_like(p) if g is None else g


def lr_schedule(step: int, total_steps: int, lr_start: float = LR_START, lr_end: float = LR_END) -> float:
    """Exponential decay from lr_start at step 0 to lr_end at total_steps."""
    if total_steps <= 0:
        return lr_start
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_start * math.exp(frac * math.log(lr_end / lr_start))


@torch.no_grad()
def adam_step(store: ParamStore, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update using the gradients held by the store."""
    for n, p in store.params.items():
        g = store.grad(n)
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {n}")
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for n, p in store.params.items():
        g = store.grad(n)
        m = store.exp_avg.setdefault(n, torch.zeros_like(p))
        v = store.exp_avg_sq.setdefault(n, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
