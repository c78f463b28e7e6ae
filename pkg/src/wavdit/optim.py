"""AdamW with decoupled weight decay and the warmup + linear-decay schedule."""

from __future__ import annotations

import math

import torch


def lr_schedule(step: int, warmup: int = 1000, lr_hi: float = 1e-4, lr_lo: float = 1e-5,
                total_steps: int = 100_000) -> float:
    """Linear ramp ``0 -> lr_hi`` over ``warmup`` steps, then linear ``lr_hi -> lr_lo``."""
    if total_steps <= warmup:
        raise ValueError("total_steps must exceed warmup")
    if step < warmup:
        return lr_hi * step / warmup
    frac = min(1.0, (step - warmup) / (total_steps - warmup))
    return lr_hi + (lr_lo - lr_hi) * frac


def adamw_step(params: dict, grads: dict, state: dict, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, weight_decay: float = 0.0, eps: float = 1e-8) -> bool:
    """In-place AdamW update of ``params`` (name -> tensor).

    ``state`` holds ``step`` plus per-name first/second moments. If any
    gradient is non-finite nothing is changed and False is returned.
    """
    for g in grads.values():
        if g is not None and not torch.isfinite(g).all():
            return False
    step = state.get("step", 0) + 1
    state["step"] = step
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = m_all.get(name)
            v = v_all.get(name)
            if m is None:
                m = m_all[name] = torch.zeros_like(p)
                v = v_all[name] = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return True


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a named parameter dict."""

    def __init__(self, named_params, beta1=0.9, beta2=0.95, weight_decay=0.0, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay, self.eps = weight_decay, eps
        self.state: dict = {"step": 0, "m": {}, "v": {}}

    def step(self, grads: dict, lr: float) -> bool:
        return adamw_step(self.params, grads, self.state, lr, self.beta1, self.beta2,
                          self.weight_decay, self.eps)

    def state_tensors(self, prefix: str) -> dict:
        out = {}
        for key in ("m", "v"):
            for name, t in self.state[key].items():
                out[f"{prefix}.{key}.{name}"] = t
        return out

    def load_state_tensors(self, prefix: str, tensors: dict, step: int) -> None:
        self.state = {"step": step, "m": {}, "v": {}}
        for key in ("m", "v"):
            head = f"{prefix}.{key}."
            for name, arr in tensors.items():
                if name.startswith(head):
                    self.state[key][name[len(head):]] = torch.from_numpy(arr.copy())
