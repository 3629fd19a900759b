"""Central finite-difference checks for hand-written gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

H = 1e-5


def numeric_grad(loss_fn, arrays, h=H):
    """Full central-difference gradient of ``loss_fn()`` w.r.t. each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            gflat[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def directional_fd(loss_fn, arrays, directions, h=H):
    """(L(theta + h d) - L(theta - h d)) / 2h for a joint direction over several arrays."""
    for a, d in zip(arrays, directions):
        a += h * d
    lp = loss_fn()
    for a, d in zip(arrays, directions):
        a -= 2 * h * d
    lm = loss_fn()
    for a, d in zip(arrays, directions):
        a += h * d
    return (lp - lm) / (2 * h)


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


@dataclass
class CheckResult:
    name: str
    worst: float
    n_points: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def check_directional(name, loss_fn, grad_fn, arrays, rng, n_points=20, tol=1e-4, h=H):
    """Compare analytic and finite-difference directional derivatives.

    ``grad_fn()`` returns gradients aligned with ``arrays``.  Each point
    re-randomises a direction per array and checks every array block on its
    own plus the joint direction.
    """
    worst = 0.0
    for _ in range(n_points):
        grads = grad_fn()
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        # one block at a time, then all together
        for k in range(len(arrays) + 1):
            sel = [d if (k == len(arrays) or j == k) else np.zeros_like(d) for j, d in enumerate(dirs)]
            analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, sel))
            numeric = directional_fd(loss_fn, arrays, sel, h)
            scale = max(abs(analytic), abs(numeric))
            if scale < 1e-9:
                continue
            worst = max(worst, abs(analytic - numeric) / scale)
        for a in arrays:
            a += 0.1 * rng.standard_normal(a.shape) * (np.std(a) + 1e-3)
    return CheckResult(name, worst, n_points, tol)
