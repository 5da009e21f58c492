"""Closed-form least-squares trajectory alignment (Umeyama construction)."""

from __future__ import annotations

import numpy as np


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity (or rigid) transform mapping src onto dst.

    Returns (s, R, t) minimizing sum ||dst_i - (s R src_i + t)||^2; s is fixed
    to 1 for rigid alignment. Both inputs are (N, 3) with N >= 3 for a
    well-determined rotation.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("expected matching (N, 3) arrays")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def apply_alignment(points, s, R, t):
    points = np.asarray(points, dtype=float)
    return s * points @ R.T + t


def align(src, dst, mode="sim"):
    """Convenience wrapper; mode is one of 'sim', 'rigid', 'none'."""
    if mode == "none":
        return 1.0, np.eye(3), np.zeros(3)
    if mode not in ("sim", "rigid"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    return umeyama(src, dst, with_scale=(mode == "sim"))
