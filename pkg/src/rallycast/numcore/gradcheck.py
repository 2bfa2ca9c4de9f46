"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``; NaN entries in ``numeric`` are ignored."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(numeric)
    if not keep.any():
        return 0.0
    analytic, numeric = analytic[keep], numeric[keep]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-4,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Central differences of scalar ``fn()`` w.r.t. selected entries of ``param``.

    An entry whose stencil moves any relu input across zero gets NaN: the
    difference quotient straddles a kink and says nothing about the gradient.
    """
    if indices is None:
        indices = list(np.ndindex(*param.shape))
    with record_kinks() as base:
        fn()
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = param.data[idx]
        param.data[idx] = orig + h
        with record_kinks() as pat_plus:
            plus = fn().item()
        param.data[idx] = orig - h
        with record_kinks() as pat_minus:
            minus = fn().item()
        param.data[idx] = orig
        if _same_pattern(base, pat_plus) and _same_pattern(base, pat_minus):
            out[k] = (plus - minus) / (2.0 * h)
        else:
            out[k] = np.nan
    return out, list(indices)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    skipped: dict[str, int] | None = None,
) -> dict[str, float]:
    """Compare autodiff against finite differences; returns max relative error per parameter.

    With ``max_entries`` set, only that many randomly chosen entries of each
    parameter are perturbed (the analytic gradient is still computed in full).
    Entries whose stencil crosses a relu kink are left out of the comparison
    and counted in ``skipped`` when a dict is given.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        all_idx = list(np.ndindex(*p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num, idx = numeric_grad(fn, p, h=h, indices=all_idx)
        ana = np.array([analytic[name][i] for i in idx])
        errors[name] = relative_error(ana, num)
        if skipped is not None:
            skipped[name] = int(np.isnan(num).sum())
    return errors
