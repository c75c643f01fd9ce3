"""Shared oracles and utilities for the test suite."""

import numpy as np


def numeric_grad(loss_fn, params, name, eps=1e-6):
    """Central finite differences of loss_fn w.r.t. params[name]."""
    base = params[name]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = base[idx]
        base[idx] = old + eps
        lp = loss_fn()
        base[idx] = old - eps
        lm = loss_fn()
        base[idx] = old
        grad[idx] = (lp - lm) / (2 * eps)
    return grad


def assert_grads_close(loss_fn, params, analytic, names, eps=1e-6,
                       rtol=1e-4, atol=5e-8):
    """Check analytic gradients against central finite differences.

    Passes when |analytic - numeric| <= atol + rtol * max|numeric| per
    tensor; atol absorbs finite-difference noise on zero gradients.
    """
    for name in names:
        num = numeric_grad(loss_fn, params, name, eps=eps)
        err = np.abs(analytic[name] - num).max()
        scale = np.abs(num).max()
        assert err <= atol + rtol * scale, (
            f"{name}: max err {err:.3e} vs scale {scale:.3e}")


def rank_auc(positive, negative):
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(pos == neg)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def brute_force_eer(bonafide, spoof):
    """O(n^2) midpoint-sweep EER in plain Python: the independent oracle.

    Same convention as the implementation: thresholds at +/-inf and all
    midpoints of adjacent sorted unique scores; FRR = #bonafide < t;
    FAR = #spoof >= t; EER = (FAR + FRR) / 2 at min |FAR - FRR|, ties to
    the lower threshold.
    """
    bona = sorted(float(s) for s in bonafide)
    spf = sorted(float(s) for s in spoof)
    uniq = sorted(set(bona) | set(spf))
    thresholds = [float("-inf")]
    for a, b in zip(uniq[:-1], uniq[1:]):
        thresholds.append((a + b) / 2.0)
    thresholds.append(float("inf"))
    best = None
    for t in thresholds:
        frr = sum(1 for s in bona if s < t) / len(bona)
        far = sum(1 for s in spf if s >= t) / len(spf)
        diff = abs(far - frr)
        if best is None or diff < best[0]:
            best = (diff, (far + frr) / 2.0, t)
    return best[1], best[2]
