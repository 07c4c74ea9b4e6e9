"""Evaluation of control-dependent callbacks under strict or relaxed controls."""

from __future__ import annotations

from typing import Union

import numpy as np

from .problem import RelaxedControl, StrictControl

Control = Union[RelaxedControl, StrictControl]


def mix(control: Control, step: int, fn, *args):
    """``fn(*args, a)`` integrated against the control's measure at ``step``.

    Relaxed rows are summed over their nonzero weights in grid order; a unit
    weight contributes the callback value itself, so a one-hot row reproduces
    the strict evaluation bit for bit.
    """
    if isinstance(control, RelaxedControl):
        row = control.weights[step]
        acc = None
        for j in np.flatnonzero(row):
            val = np.asarray(fn(*args, control.grid.points[j]), dtype=float)
            w = row[j]
            term = val if w == 1.0 else w * val
            acc = term if acc is None else acc + term
        return acc
    if not control.per_path:
        return np.asarray(fn(*args, control.grid.points[control.indices[step]]), dtype=float)
    return _mix_per_path(control, step, fn, args)


def _mix_per_path(control: StrictControl, step: int, fn, args):
    idx = control.indices[step]
    paths = idx.shape[0]
    out = None
    for j in np.unique(idx):
        mask = idx == j
        sub = [a[mask] if isinstance(a, np.ndarray) and a.ndim and a.shape[0] == paths else a for a in args]
        val = np.asarray(fn(*sub, control.grid.points[j]), dtype=float)
        if out is None:
            out = np.empty((paths,) + val.shape[1:])
        out[mask] = val
    return out


def control_steps(control: Control) -> int:
    return control.steps
