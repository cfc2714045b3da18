"""Adam with decoupled weight decay and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerState:
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


class Adam:
    """Adam/AdamW.

    ``param_groups`` is a list of dicts with keys ``params``, ``lr`` and
    optionally ``weight_decay``; a bare iterable of parameters is one group.
    """

    def __init__(self, param_groups, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        param_groups = list(param_groups)
        if not param_groups or not isinstance(param_groups[0], dict):
            param_groups = [{"params": param_groups}]
        self.param_groups = []
        for group in param_groups:
            self.param_groups.append({
                "params": list(group["params"]),
                "lr": float(group.get("lr", lr)),
                "weight_decay": float(group.get("weight_decay", weight_decay)),
            })
        self.state = OptimizerState(betas=tuple(betas), eps=eps)
        for group in self.param_groups:
            for p in group["params"]:
                self.state.exp_avg[id(p)] = np.zeros_like(p.data)
                self.state.exp_avg_sq[id(p)] = np.zeros_like(p.data)

    def parameters(self) -> Iterable[Parameter]:
        for group in self.param_groups:
            yield from group["params"]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for group in self.param_groups:
            lr, wd = group["lr"], group["weight_decay"]
            for p in group["params"]:
                g = p.grad
                m = st.exp_avg[id(p)]
                v = st.exp_avg_sq[id(p)]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                if lr == 0:
                    continue
                if wd:
                    p.data -= lr * wd * p.data
                update = (m / c1) / (np.sqrt(v / c2) + st.eps)
                p.data -= (lr * update).astype(p.dtype)

