"""AdamW with decoupled weight decay and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import TrainingError, ValidationError
from .nn import GROUPS, Parameter


@dataclass
class AdamWConfig:
    lr_seg: float = 5e-5
    lr_fuse: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr_seg", "lr_fuse", "weight_decay", "eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")

    def lr_for(self, group: str) -> float:
        return self.lr_seg if group == "segmentation" else self.lr_fuse


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """``p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)``, lr chosen by ``p.group``."""

    def __init__(self, params: Iterable[Parameter] | Iterable[tuple[str, Parameter]],
                 config: AdamWConfig | None = None):
        items = list(params)
        named = [it if isinstance(it, tuple) else (it.name or f"param{i}", it) for i, it in enumerate(items)]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.config = config or AdamWConfig()
        self.state = OptimizerState()
        for name, p in named:
            if getattr(p, "group", None) not in GROUPS:
                raise ValidationError(f"parameter {name!r} has no valid group")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, allow_missing: bool = False) -> None:
        missing = [n for n, p in zip(self.names, self.params) if p.grad is None]
        if missing and not allow_missing:
            raise TrainingError(f"adamw_step: {len(missing)} parameters have no gradient (e.g. {missing[0]})")
        c = self.config
        st = self.state
        st.step += 1
        bc1 = 1.0 - c.beta1 ** st.step
        bc2 = 1.0 - c.beta2 ** st.step
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = st.m.get(i)
            v = st.v.get(i)
            if m is None:
                m = st.m[i] = np.zeros_like(p.data)
                v = st.v[i] = np.zeros_like(p.data)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            lr = c.lr_for(p.group)
            # decoupled decay uses the pre-update weights
            with np.errstate(over="ignore", invalid="ignore"):
                update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
                new = p.data - lr * c.weight_decay * p.data - lr * update
            if not np.isfinite(new).all():
                raise TrainingError(f"adamw_step: parameter {self.names[i]!r} became non-finite")
            p.data = new
