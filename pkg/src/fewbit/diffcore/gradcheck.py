"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functional
from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.max_rel_error.items()]
        lines += [f"{name}: {n} probes skipped at relu kinks" for name, n in self.skipped.items() if n]
        lines += [f"FAIL {msg}" for msg in self.failures]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|); pairs that are both below ``floor``
    are judged absolutely, scoring 0 when |a - n| < floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    tiny = scale < floor
    out = np.where(tiny, 0.0, diff / np.where(tiny, 1.0, scale))
    out[tiny & (diff >= floor)] = np.inf
    return out


def _evaluate(fn, record: bool):
    if not record:
        return float(fn().data), None
    saved, functional._kink_log = functional._kink_log, []
    try:
        value = float(fn().data)
        return value, functional._kink_log
    finally:
        functional._kink_log = saved


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], names: Sequence[str] | None = None,
               step: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-7,
               max_elements: int | None = None, seed: int = 0, kink_guard: bool = False) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current values of ``tensors`` each
    call.  ``max_elements`` caps how many entries per tensor are probed
    (chosen with a seeded generator).  With ``kink_guard`` a probe whose
    +/- evaluations switch any relu unit on or off is skipped (the function
    is not differentiable across it) and counted in ``report.skipped``;
    every probe being skipped is a failure.
    """
    names = list(names) if names is not None else [t.name or f"t{i}" for i, t in enumerate(tensors)]
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)

    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = fn()
    if not np.all(np.isfinite(out.data)):
        report.failures.append("forward: non-finite output")
        return report
    out.backward()
    analytic = {id(t): np.array(t.grad, copy=True) for t in tensors}
    base_masks = _evaluate(fn, kink_guard)[1]

    for name, t in zip(names, tensors):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        grad = analytic[id(t)].reshape(-1)
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            report.failures.append(f"{name}: non-finite analytic gradient at flat index {bad}")
            continue
        numeric = np.empty(idx.size)
        smooth = np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp, masks_p = _evaluate(fn, kink_guard)
            flat[i] = orig - step
            fm, masks_m = _evaluate(fn, kink_guard)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"{name}: non-finite loss when perturbing flat index {int(i)}")
                break
            numeric[j] = (fp - fm) / (2 * step)
            if kink_guard:
                smooth[j] = _same(masks_p, base_masks) and _same(masks_m, base_masks)
        else:
            if kink_guard:
                report.skipped[name] = int((~smooth).sum())
                if not smooth.any():
                    report.failures.append(f"{name}: every probe straddles a relu kink")
                    continue
                idx, numeric = idx[smooth], numeric[smooth]
            err = relative_error(grad[idx], numeric, floor)
            worst = float(err.max()) if err.size else 0.0
            report.max_rel_error[name] = worst
            if worst > tolerance:
                at = int(idx[int(err.argmax())])
                report.failures.append(
                    f"{name}: rel err {worst:.3e} > {tolerance:.1e} at flat index {at} "
                    f"(analytic {grad[at]:.6e}, numeric {numeric[int(err.argmax())]:.6e})")
    return report
