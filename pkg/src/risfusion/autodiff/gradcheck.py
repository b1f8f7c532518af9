"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..rng import SplitMix64
from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    """Per-block maximum relative error between analytic and numeric gradients.

    The error of a block is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)`` over the checked entries. The floor (default 1e-6)
    keeps blocks whose true gradient is zero, such as an attention key bias
    under softmax shift invariance, from reporting round-off noise as a
    relative error of 1.
    """

    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}

    def merge(self, other: "GradcheckReport", prefix: str = "") -> None:
        for name, err in other.errors.items():
            self.errors[prefix + name] = err
            self.checked[prefix + name] = other.checked[name]
            self.refined[prefix + name] = other.refined.get(name, 0)

    def __str__(self) -> str:
        lines = []
        for name, err in self.errors.items():
            extra = f", {self.refined[name]} re-measured" if self.refined.get(name) else ""
            lines.append(f"{'PASS' if err <= self.tolerance else 'FAIL'} {name}: {err:.3e} "
                         f"({self.checked[name]} entries{extra})")
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-4,
                   entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``tensor`` (flat entries or all)."""
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(idx), dtype=np.float64)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            out[n] = (up - down) / (2.0 * step)
    return out


def gradcheck(fn: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float = 1e-4,
              step: float = 1e-4, max_entries: int | None = None, seed: int = 0,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare backward() gradients of ``fn`` with central finite differences.

    ``params`` maps block names to leaf tensors that ``fn`` closes over; they
    must hold float64 data. With ``max_entries`` set, larger blocks are checked
    on a seeded random subset of entries.

    Entries that disagree at ``step`` are measured again at ``step / 100``
    and counted in ``report.refined``. A step that straddles a relu or abs
    kink gives a meaningless central difference, and the smaller step
    resolves it; a wrong analytic gradient disagrees at every step.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck: block {name!r} must be float64, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
                for name, t in params.items()}

    rng = SplitMix64(seed)
    report = GradcheckReport(tolerance=tolerance)
    for name, t in params.items():
        size = t.data.size
        entries = None
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.permutation(size)[:max_entries])
        idx = np.arange(size) if entries is None else entries
        numeric = numerical_grad(fn, t, step=step, entries=idx)
        a = analytic[name][idx]
        scale = max(np.abs(analytic[name]).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        bad = np.abs(a - numeric) > tolerance * scale
        if bad.any():
            numeric[bad] = numerical_grad(fn, t, step=step / 100.0, entries=idx[bad])
        diff = np.abs(a - numeric).max(initial=0.0)
        report.errors[name] = float(diff / scale)
        report.checked[name] = len(numeric)
        report.refined[name] = int(bad.sum())
    return report
