"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    h: float
    params: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_err(self):
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    @property
    def failures(self):
        return [p for p in self.params.values() if not p.passed]

    def lines(self):
        out = []
        for p in self.params.values():
            flag = "ok  " if p.passed else "FAIL"
            out.append(f"{flag} {p.name:<40s} rel={p.max_rel_err:.3e} abs={p.max_abs_err:.3e}")
        return out


def grad_check(f, params, h=1e-5, tol=1e-4, floor=1e-6):
    """Compare ``backward`` gradients with central differences.

    Parameters
    ----------
    f : callable
        Zero-argument function that rebuilds the graph and returns a scalar
        :class:`Tensor`. Must be deterministic.
    params : dict[str, Tensor] or list[Tensor]
        Leaves to check. Leaves with ``requires_grad=False`` are skipped and
        do not appear in the report.
    h : float
        Finite-difference step.
    tol : float
        Pass threshold on the relative error
        ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if not isinstance(params, dict):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    for p in trainable.values():
        p.grad = None
    loss = f()
    loss.backward()
    report = GradCheckReport(tol=tol, h=h)
    for name, p in trainable.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = diff / scale
        worst = int(np.argmax(rel)) if rel.size else 0
        max_rel = float(rel.max()) if rel.size else 0.0
        report.params[name] = ParamCheck(
            name=name,
            max_rel_err=max_rel,
            max_abs_err=float(diff.max()) if diff.size else 0.0,
            worst_index=np.unravel_index(worst, p.shape) if rel.size else (),
            passed=max_rel < tol,
        )
        p.grad = None
    return report
