"""Reverse-mode gradients and a central-difference verifier for them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError

Program = Callable[[], Tensor]


def evaluate_with_gradients(
    program: Program, params: Mapping[str, Tensor], seed_adjoint=None
) -> tuple[float, dict[str, np.ndarray]]:
    """Run ``program`` on a fresh tape and return its value and parameter gradients.

    ``program`` takes no arguments and closes over the tensors in ``params``.
    """
    with Tape() as tape:
        out = program()
    if out.shape != (1, 1):
        raise ContractError(f"program must end in a scalar, got shape {out.shape}")
    tape.backward(out, seed_adjoint)
    return out.item(), tape.gradients(dict(params))


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(
    program: Program,
    param: Tensor,
    step: float = 1e-5,
    entries: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of ``program`` w.r.t. the given flat entries of ``param``.

    The parameter is perturbed in place and restored afterwards.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else np.asarray(entries)
    out = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = program().item()
        flat[i] = orig - step
        fm = program().item()
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(
    program: Program,
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central differences entry by entry.

    With ``max_entries`` set, each parameter is checked on at most that many
    randomly chosen entries instead of all of them.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    _, grads = evaluate_with_gradients(program, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    per_param: dict[str, float] = {}
    total = 0
    for name, p in params.items():
        size = p.data.size
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            entries = np.arange(size)
        numeric = numeric_gradient(program, p, step, entries)
        analytic = grads[name].reshape(-1)[entries]
        err = relative_error(analytic, numeric)
        per_param[name] = float(err.max()) if err.size else 0.0
        total += entries.size
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, total)
