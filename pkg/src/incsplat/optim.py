"""First-order adaptive moment optimizer with per-group learning rates and
optional row masking (used to restrict anchor updates to a frustum)."""

from __future__ import annotations

import numpy as np


class Adam:
    """Updates the arrays in `params` in place.

    `params` maps names to numpy arrays (any dtype; moments are float64).
    `lrs` maps names to learning rates; groups without one use `default_lr`.
    Per-call `lr_scale` implements schedules; `row_mask` restricts the
    update and moment accumulation of a group to the given leading-axis
    rows so unmasked rows stay bit-identical.
    """

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 default_lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-15):
        self.params = params
        self.lrs = dict(lrs)
        self.default_lr = default_lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = {k: np.zeros(v.shape[0] if v.ndim else 1, dtype=np.int64)
                  for k, v in params.items()}

    def add_param(self, name: str, array: np.ndarray, lr: float = None) -> None:
        self.params[name] = array
        if lr is not None:
            self.lrs[name] = lr
        self.m[name] = np.zeros(array.shape)
        self.v[name] = np.zeros(array.shape)
        self.t[name] = np.zeros(array.shape[0] if array.ndim else 1, dtype=np.int64)

    def grow_rows(self, name: str, new_array: np.ndarray) -> None:
        """Re-bind a group whose leading axis grew; new rows start with
        fresh moments."""
        old_n = self.m[name].shape[0]
        n = new_array.shape[0]
        pad = (n - old_n,) + self.m[name].shape[1:]
        self.params[name] = new_array
        self.m[name] = np.concatenate([self.m[name], np.zeros(pad)])
        self.v[name] = np.concatenate([self.v[name], np.zeros(pad)])
        self.t[name] = np.concatenate([self.t[name],
                                       np.zeros(n - old_n, dtype=np.int64)])

    def drop_rows(self, name: str, keep: np.ndarray, new_array: np.ndarray) -> None:
        self.params[name] = new_array
        self.m[name] = self.m[name][keep]
        self.v[name] = self.v[name][keep]
        self.t[name] = self.t[name][keep]

    def step(self, grads: dict[str, np.ndarray],
             lr_scale: float = 1.0,
             row_masks: dict[str, np.ndarray] = None) -> None:
        for name, g in grads.items():
            if g is None:
                continue
            p = self.params[name]
            lr = self.lrs.get(name, self.default_lr) * lr_scale
            m, v, t = self.m[name], self.v[name], self.t[name]
            rows = None if row_masks is None else row_masks.get(name)
            if rows is None:
                t += 1
                m += (1 - self.beta1) * (g - m)
                v += (1 - self.beta2) * (g * g - v)
                tb = t.reshape((-1,) + (1,) * (p.ndim - 1)) if p.ndim else t
                mhat = m / (1 - self.beta1 ** tb)
                vhat = v / (1 - self.beta2 ** tb)
                p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            else:
                t[rows] += 1
                m[rows] += (1 - self.beta1) * (g[rows] - m[rows])
                v[rows] += (1 - self.beta2) * (g[rows] * g[rows] - v[rows])
                tb = t[rows].reshape((-1,) + (1,) * (p.ndim - 1))
                mhat = m[rows] / (1 - self.beta1 ** tb)
                vhat = v[rows] / (1 - self.beta2 ** tb)
                p[rows] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
