"""Finite-difference verification of reverse-mode gradients.

The oracle perturbs parameter elements by +-h, re-evaluates the scalar
function, and compares the central difference against the tape gradient.
All arithmetic inside the function stays in float32; the difference
quotient itself is formed in float64 from the actually-stored perturbed
values, which removes the step-quantization error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad

REL_ERR_FLOOR = 1e-6
SUBSAMPLE_LIMIT = 10_000


KINK_FRACTION_CAP = 0.1


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_err: float
    worst_analytic: float
    worst_numeric: float
    n_kink: int = 0


@dataclass
class GradCheckReport:
    tol: float
    h: float
    floor: float = REL_ERR_FLOOR
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def n_checked(self) -> int:
        return sum(p.n_checked for p in self.params)

    @property
    def n_kink(self) -> int:
        return sum(p.n_kink for p in self.params)

    @property
    def passed(self) -> bool:
        if self.max_rel_err > self.tol:
            return False
        # a flood of kink exemptions means the instance is unusable, not ok
        return self.n_kink <= KINK_FRACTION_CAP * self.n_checked

    def lines(self) -> list[str]:
        out = []
        for p in self.params:
            status = "ok" if p.max_rel_err <= self.tol else "FAIL"
            kink = f" kink={p.n_kink}" if p.n_kink else ""
            out.append(
                f"  {status:4s} {p.name:28s} n={p.n_checked:<5d} max_rel={p.max_rel_err:.3e}"
                f" (analytic={p.worst_analytic:+.4e} numeric={p.worst_numeric:+.4e}){kink}"
            )
        return out


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-3,
    tol: float = 1e-2,
    max_elements: int = SUBSAMPLE_LIMIT,
    seed: int = 0,
    floor: float = REL_ERR_FLOOR,
    kink_guard: bool = False,
) -> GradCheckReport:
    """Compare the tape gradient of f() against central differences.

    f must rebuild its forward pass from the current parameter values on
    every call and return a scalar Tensor. Every element is checked when
    the total parameter count is at most max_elements; beyond that a
    seeded random subsample of max_elements elements is used. floor is
    the denominator floor of the relative error; raise it when checking
    float32 graphs whose smallest gradients sit below the noise of the
    difference quotient.

    kink_guard handles piecewise-linear graphs (relu): when the bracket
    [x-h, x+h] straddles a slope discontinuity the central quotient
    matches neither branch and the element would fail spuriously. With
    the guard on, such an element is excused if the tape gradient agrees
    with one of the two one-sided quotients (a true local slope, checked
    at 2*tol since one-sided differences carry O(h) truncation). Excused
    elements are counted as n_kink; a report with more than
    KINK_FRACTION_CAP of its elements excused fails regardless.
    """
    for _, p in params:
        p.zero_grad()
    root = f()
    root.backward()
    f0 = root.data.item()
    analytic = {}
    for name, p in params:
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    sizes = [p.data.size for _, p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if total > max_elements:
        picks = np.sort(rng.choice(total, size=max_elements, replace=False))
    else:
        picks = np.arange(total)

    report = GradCheckReport(tol=tol, h=h, floor=floor)
    offsets = np.cumsum([0] + sizes)
    with no_grad():
        for (name, p), lo, hi in zip(params, offsets[:-1], offsets[1:]):
            idxs = picks[(picks >= lo) & (picks < hi)] - lo
            flat = p.data.reshape(-1)
            worst = (0.0, 0.0, 0.0)
            n_kink = 0
            ga = analytic[name].reshape(-1)
            for idx in idxs:
                orig = flat[idx]
                x0 = float(orig)
                flat[idx] = orig + np.float32(h)
                hp = float(flat[idx])
                f1 = f().data.item()
                flat[idx] = orig - np.float32(h)
                hm = float(flat[idx])
                f2 = f().data.item()
                flat[idx] = orig
                numeric = (f1 - f2) / (hp - hm)
                a = float(ga[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if rel > tol and kink_guard:
                    q_fwd = (f1 - f0) / (hp - x0)
                    q_bwd = (f0 - f2) / (x0 - hm)
                    rel_side = min(
                        abs(a - q) / max(abs(a), abs(q), floor) for q in (q_fwd, q_bwd)
                    )
                    if rel_side <= 2.0 * tol:
                        n_kink += 1
                        continue
                if rel > worst[0]:
                    worst = (rel, a, numeric)
            report.params.append(
                ParamCheck(
                    name=name,
                    n_checked=len(idxs),
                    max_rel_err=worst[0],
                    worst_analytic=worst[1],
                    worst_numeric=worst[2],
                    n_kink=n_kink,
                )
            )
    return report


# ---------------------------------------------------------------------------
# standard check batteries
# ---------------------------------------------------------------------------


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize a tensor with fixed mixing weights so that structural
    mistakes (transposed axes, swapped taps) cannot cancel out."""
    from . import autodiff as ad

    return ad.sum_all(ad.mul(t, Tensor(weights)))


def _mix(rng: np.random.Generator, shape) -> np.ndarray:
    signs = rng.integers(0, 2, size=shape) * 2 - 1
    return (rng.uniform(0.5, 1.5, size=shape) * signs).astype(np.float32)


def op_battery(seed: int = 0, h: float = 1e-3, tol: float = 1e-2) -> list[tuple[str, GradCheckReport]]:
    """Gradient checks for every differentiable op on small random instances.

    Ops that are (multi)linear in the checked input have zero truncation
    error under central differences, so they use a large step (0.05) that
    suppresses float32 round-off noise; curved ops use max(h, 1e-2).

    Per-op relative-error floors sit at the float32 noise level of the
    difference quotient (linear 5e-3, curved up to 5e-2): elements whose
    true gradient sits below the floor cannot be measured by a float32
    oracle at any step size. Their correctness is covered by the float64
    reference-implementation tests; here they are held to the absolute
    budget tol*floor instead.
    """
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    h_lin = max(h, 5e-2)
    h_smooth = max(h, 1e-2)

    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float32), requires_grad=True)

    checks: list[tuple[str, GradCheckReport]] = []

    def run(name, f, params, step, floor=5e-3, **kw):
        checks.append((name, grad_check(f, params, h=step, tol=tol, floor=floor, **kw)))

    a, b = t(3, 5, 4), t(3, 5, 4)
    mix = _mix(rng, (3, 5, 4))
    run("add", lambda: _weighted_sum(ad.add(a, b), mix), [("a", a), ("b", b)], h_lin)
    run("mul", lambda: _weighted_sum(ad.mul(a, b), mix), [("a", a), ("b", b)], h_lin)
    den = t(3, 5, 4, lo=0.5, hi=1.5)
    run("div", lambda: _weighted_sum(ad.div(a, den), mix), [("a", a), ("b", den)], h_smooth,
        floor=1e-2)
    run("add_scalar", lambda: _weighted_sum(ad.add_scalar(a, 0.7), mix), [("a", a)], h_lin)
    run("mul_scalar", lambda: _weighted_sum(ad.mul_scalar(a, -1.3), mix), [("a", a)], h_lin)

    # keep inputs away from the relu kink at 0 by more than the step size
    r_data = rng.uniform(0.1, 1.0, size=(2, 6, 6)).astype(np.float32)
    r_data *= (rng.integers(0, 2, size=r_data.shape) * 2 - 1).astype(np.float32)
    xr = Tensor(r_data, requires_grad=True)
    mix_r = _mix(rng, (2, 6, 6))
    run("relu", lambda: _weighted_sum(ad.relu(xr), mix_r), [("x", xr)], min(h_lin, 0.08))

    x = t(3, 6, 6)
    run("sum_all", lambda: ad.sum_all(x), [("x", x)], h_lin)

    xc = t(2, 7, 7)
    wc = t(3, 2, 3, 3)
    bc = t(3)
    mix_c = _mix(rng, (3, 7, 7))
    run(
        "conv2d",
        lambda: _weighted_sum(ad.conv2d(xc, wc, bc, padding=1), mix_c),
        [("x", xc), ("w", wc), ("b", bc)],
        h_lin,
    )
    mix_s = _mix(rng, (3, 4, 4))
    run(
        "conv2d_stride2",
        lambda: _weighted_sum(ad.conv2d(xc, wc, bc, stride=2, padding=1), mix_s),
        [("x", xc), ("w", wc), ("b", bc)],
        h_lin,
    )
    mix_d = _mix(rng, (3, 7, 7))
    run(
        "conv2d_dilation2",
        lambda: _weighted_sum(ad.conv2d(xc, wc, bc, dilation=2, padding=2), mix_d),
        [("x", xc), ("w", wc), ("b", bc)],
        h_lin,
    )

    xp = t(3, 6, 6)
    mix_p = _mix(rng, (3, 3, 3))
    mix_g = _mix(rng, (3,))
    run("avg_pool2d", lambda: _weighted_sum(ad.avg_pool2d(xp, 2), mix_p), [("x", xp)], h_lin)
    run("global_avg_pool", lambda: _weighted_sum(ad.global_avg_pool(xp), mix_g), [("x", xp)], h_lin)

    xm = t(4, 5, 5, lo=0.2, hi=1.0)
    soft = rng.uniform(0.3, 1.0, size=(5, 5)).astype(np.float32)
    mix_m = _mix(rng, (4,))
    run(
        "masked_avg_pool",
        lambda: _weighted_sum(ad.masked_avg_pool(xm, soft), mix_m),
        [("x", xm)],
        h_lin,
    )

    xz = t(3, 5, 5)
    mix_u = _mix(rng, (3, 8, 9))
    mix_dn = _mix(rng, (3, 3, 2))
    run(
        "bilinear_resize_up",
        lambda: _weighted_sum(ad.bilinear_resize(xz, 8, 9), mix_u),
        [("x", xz)],
        h_lin,
    )
    run(
        "bilinear_resize_down",
        lambda: _weighted_sum(ad.bilinear_resize(xz, 3, 2), mix_dn),
        [("x", xz)],
        h_lin,
    )

    xa = t(3, 4, 4)
    plane = t(4, 4)
    vec = t(3)
    mix_cc = _mix(rng, (7, 4, 4))
    run(
        "concat_channels",
        lambda: _weighted_sum(ad.concat_channels(xa, plane, vec), mix_cc),
        [("x", xa), ("plane", plane), ("vec", vec)],
        h_lin,
    )

    xn = t(3, 6, 6)
    gamma = t(3, lo=0.5, hi=1.5)
    beta = t(3, lo=-0.5, hi=0.5)
    mix_n = _mix(rng, (3, 6, 6))
    run(
        "instance_norm",
        lambda: _weighted_sum(ad.instance_norm(xn, gamma, beta), mix_n),
        [("x", xn), ("gamma", gamma), ("beta", beta)],
        h_smooth,
        floor=5e-2,
    )

    # small instance: the cosine map is curved, and float32 difference
    # quotients on large instances drown its near-zero gradient entries
    xf = t(3, 3, 3, lo=0.2, hi=1.0)
    z = t(3, lo=0.2, hi=1.0)
    mix_f = _mix(rng, (3, 3))
    run(
        "cosine_sim_map",
        lambda: _weighted_sum(ad.cosine_sim_map(xf, z), mix_f),
        [("x", xf), ("z", z)],
        max(h, 1.5e-2),
        floor=5e-2,
    )

    logits = t(2, 6, 6)
    target = rng.integers(0, 2, size=(6, 6)).astype(np.uint8)
    run(
        "softmax_cross_entropy",
        lambda: ad.softmax_cross_entropy(logits, target),
        [("logits", logits)],
        h_smooth,
        floor=1e-2,
    )
    return checks


def dual_loss_check(
    input_size: int = 32,
    feature_channels: int = 16,
    h: float = 2.5e-3,
    tol: float = 3e-2,
    floor: float = 3e-2,
    max_elements: int = 400,
    seed: int = 0,
) -> GradCheckReport:
    """End-to-end check: FD oracle against the tape gradient of the dual
    episode loss through the whole network on one synthetic episode.

    The step is smaller than in the per-op battery: through a deep relu
    stack the dominant FD error is kink crossing, which grows with h,
    while the float32 evaluation noise of the scalar loss stays near
    machine epsilon. Elements parked on a kink are handled by the
    kink guard of grad_check; the floor reflects the remaining one-sided
    truncation scale."""
    from .data import SyntheticConfig, render_sample
    from .model import ModelConfig, ModelParams, forward_dual
    from .train import loss_dual

    data_cfg = SyntheticConfig(
        image_size=input_size,
        n_classes=2,
        samples_per_class=2,
        train_classes=(0,),
        test_classes=(1,),
    )
    query = render_sample(data_cfg, 0, 0, seed=seed)
    support = render_sample(data_cfg, 0, 1, seed=seed)
    params = ModelParams(
        ModelConfig(input_size=input_size, feature_channels=feature_channels), seed=seed
    )

    def f():
        pred = forward_dual(query.image, [support.image], [support.mask], params)
        return loss_dual(pred, query.mask, support.mask, use_dpr=True)

    return grad_check(
        f,
        params.named_tensors(),
        h=h,
        tol=tol,
        max_elements=max_elements,
        seed=seed,
        floor=floor,
        kink_guard=True,
    )
