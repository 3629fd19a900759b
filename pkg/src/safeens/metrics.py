"""Array-level classification metrics shared by training and evaluation."""
from __future__ import annotations

import numpy as np


def class_accuracies(pred_safe, true_safe) -> dict:
    """Safe/unsafe accuracies in percent plus per-cell counts."""
    pred_safe = np.asarray(pred_safe, dtype=bool)
    true_safe = np.asarray(true_safe, dtype=bool)
    n_safe = int(true_safe.sum())
    n_unsafe = int((~true_safe).sum())
    ok_safe = int((pred_safe & true_safe).sum())
    ok_unsafe = int((~pred_safe & ~true_safe).sum())
    return {
        "safe_acc": 100.0 * ok_safe / n_safe if n_safe else float("nan"),
        "unsafe_acc": 100.0 * ok_unsafe / n_unsafe if n_unsafe else float("nan"),
        "n_safe": n_safe,
        "n_unsafe": n_unsafe,
        "correct_safe": ok_safe,
        "correct_unsafe": ok_unsafe,
    }


def balanced(acc: dict) -> float:
    return 0.5 * (acc["safe_acc"] + acc["unsafe_acc"])
