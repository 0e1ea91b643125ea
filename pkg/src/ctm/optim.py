"""Adam with bias correction and per-parameter freezing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ctm.errors import ContractError
from ctm.tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, frozen: Iterable[str] = ()):
        self.params = dict(params)
        frozen = set(frozen)
        unknown = frozen - self.params.keys()
        if unknown:
            raise ContractError(f"cannot freeze unknown parameters {sorted(unknown)}")
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)
            self.state.frozen[name] = name in frozen

    def freeze(self, name: str, frozen: bool = True) -> None:
        self.state.frozen[name] = frozen

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        live = [n for n, p in self.params.items() if not st.frozen[n]]
        missing = [n for n in live if self.params[n].grad is None]
        if missing:
            raise ContractError(f"adam_step: no gradient for trainable parameters {missing[:5]}")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name in live:
            p = self.params[name]
            g = p.grad
            if g.shape != p.shape:
                raise ContractError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
            m = st.m[name]
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def checksum(params: Mapping[str, Tensor] | Iterable[Tensor]) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    if isinstance(params, Mapping):
        items = sorted(params.items())
    else:
        items = [(str(i), t) for i, t in enumerate(params)]
    for name, t in items:
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
