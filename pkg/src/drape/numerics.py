"""Optimizer and gradient verification on top of the autodiff tape.

A parameter set is a plain ``{name: Tensor}`` dict with stable shapes;
gradient records are ``{name: ndarray}`` aligned to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward


def make_params(named_arrays):
    """Wrap named arrays as trainable tensors."""
    return {name: Tensor(np.asarray(a), requires_grad=True)
            for name, a in named_arrays.items()}


def grads_of(loss, params):
    """Backward from ``loss`` and harvest one gradient per parameter.

    Parameters not reachable from the loss get zero gradients.
    """
    for p in params.values():
        p.grad = None
    backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; mutates params and state in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for '{name}'")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    passed: bool
    per_param: dict  # name -> (max_rel_err, coords_checked)

    def table(self):
        lines = [f"{'parameter':<28} {'checked':>8} {'max_rel_err':>14}"]
        for name, (err, n) in self.per_param.items():
            lines.append(f"{name:<28} {n:>8} {err:>14.3e}")
        lines.append(f"{'WORST ' + self.worst_param:<37} {self.max_rel_err:>14.3e} "
                     f"-> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# Central differences cancel: the difference of two loss evaluations only
# resolves ~this many ulps of the loss value, so coordinates with less
# influence than that are compared at the noise scale instead of relatively.
_FD_NOISE_ULPS = 64.0


def gradcheck(loss_fn, params, step=1e-5, tolerance=1e-4, budget=200, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn(params)`` must rebuild the graph from the current parameter
    data. Checks up to ``budget`` coordinates, sampled deterministically
    across parameters. Relative error uses max(|a|, |b|, floor) with the
    floor set so the finite-difference cancellation noise at this loss
    magnitude and step maps to an error of at most ~tolerance / ulps.
    """
    loss0 = loss_fn(params)
    scale = abs(float(loss0.data))
    noise = _FD_NOISE_ULPS * np.spacing(max(scale, 1e-30)) / (2.0 * step)
    floor = max(1e-8, noise / tolerance)
    analytic = grads_of(loss0, params)
    names = sorted(params)
    sizes = {n: params[n].data.size for n in names}
    total = sum(sizes.values())
    rng = np.random.default_rng(seed)

    coords = []
    if total <= budget:
        for n in names:
            coords.extend((n, i) for i in range(sizes[n]))
    else:
        # proportional allocation, at least one coordinate per parameter
        alloc = {n: max(1, int(round(budget * sizes[n] / total))) for n in names}
        while sum(alloc.values()) > budget:
            biggest = max(names, key=lambda n: alloc[n])
            alloc[biggest] -= 1
        for n in names:
            k = min(alloc[n], sizes[n])
            idx = rng.choice(sizes[n], size=k, replace=False)
            coords.extend((n, int(i)) for i in sorted(idx))

    per_param = {n: [0.0, 0] for n in names}
    max_err, worst = 0.0, names[0] if names else ""
    for name, flat in coords:
        p = params[name]
        orig = p.data.flat[flat]
        p.data.flat[flat] = orig + step
        hi = float(loss_fn(params).data)
        p.data.flat[flat] = orig - step
        lo = float(loss_fn(params).data)
        p.data.flat[flat] = orig
        fd = (hi - lo) / (2.0 * step)
        an = float(analytic[name].flat[flat])
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        per_param[name][1] += 1
        if err > per_param[name][0]:
            per_param[name][0] = err
        if err > max_err:
            max_err, worst = err, name
    return GradCheckReport(
        max_rel_err=max_err,
        worst_param=worst,
        passed=max_err < tolerance,
        per_param={n: tuple(v) for n, v in per_param.items()},
    )
