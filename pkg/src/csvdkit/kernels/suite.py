"""Self-verification of the kernels: identities, oracles and gradient checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .attention import AttentionWeights, gated_attention_backward, gated_attention_forward
from .gradcheck import fd_report
from .losses import (
    TverskyParams,
    UncertaintyState,
    cldice_loss,
    exclusion_loss,
    total_loss,
    tversky_loss,
)
from .skeleton import soft_skeleton

GRAD_TOL = 1e-6
CLDICE_TOL = 1e-5
# larger step: roundoff dominates on small-gradient coordinates at 1e-6
CLDICE_STEP = 1e-5
ORACLE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    threshold: float
    instances: int
    detail: dict = field(default_factory=dict)


def attention_oracle(f_lac, f_epvs, w: AttentionWeights):
    """Voxel-by-voxel loop evaluation of the gated attention formula."""
    C, D, H, W = f_lac.shape
    ci = w.c_int
    out = np.empty_like(f_lac)
    gate = np.empty((D, H, W))
    for z in range(D):
        for y in range(H):
            for x in range(W):
                a = f_lac[:, z, y, x]
                b = f_epvs[:, z, y, x]
                acc = 0.0
                for c in range(ci):
                    q = sum(w.wq[c, j] * a[j] for j in range(C))
                    k = sum(w.wk[c, j] * b[j] for j in range(C))
                    acc += q * k
                g = 1.0 / (1.0 + math.exp(-acc / math.sqrt(ci)))
                gate[z, y, x] = g
                for c in range(C):
                    v = sum(w.wv[c, j] * b[j] for j in range(C))
                    out[c, z, y, x] = a[c] + g * v
    return out, gate


def _smooth_probs(rng, shape):
    p = ndimage.gaussian_filter(rng.random(shape), sigma=(0, 1, 1, 1), mode="nearest")
    p = (p - p.min()) / (p.max() - p.min() + 1e-12)
    return 0.05 + 0.9 * p


def check_zero_init(rng, n=50) -> CheckResult:
    bad = 0
    for _ in range(n):
        f_lac = rng.normal(size=(8, 4, 4, 4))
        f_epvs = rng.normal(size=(8, 4, 4, 4))
        w = AttentionWeights.init(8, 4, rng)
        f_hat, _ = gated_attention_forward(f_lac, f_epvs, w)
        bad += f_hat.tobytes() != f_lac.tobytes()
    return CheckResult("zero_init_identity", bad == 0, float(bad), 0.0, n, {"mismatching_instances": bad})


def check_attention_oracle(rng, n=20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        C = 4 * int(rng.integers(1, 3))
        shape = (C, *rng.integers(1, 4, size=3))
        w = AttentionWeights(rng.normal(size=(C // 4, C)), rng.normal(size=(C // 4, C)), rng.normal(size=(C, C)), 4)
        f_lac, f_epvs = rng.normal(size=shape), rng.normal(size=shape)
        got, gate = gated_attention_forward(f_lac, f_epvs, w)
        ref, ref_gate = attention_oracle(f_lac, f_epvs, w)
        worst = max(worst, float(np.max(np.abs(got - ref))), float(np.max(np.abs(gate - ref_gate))))
    return CheckResult("attention_oracle", worst <= ORACLE_TOL, worst, ORACLE_TOL, n)


def check_attention_gradient(rng, n=5) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        shape = (4, 2, 2, 2)
        w = AttentionWeights(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 4)), 4)
        f_lac, f_epvs, up = (rng.normal(size=shape) for _ in range(3))
        grads = gated_attention_backward(up, f_lac, f_epvs, w)

        def wrt_lac(x):
            return float(np.sum(up * gated_attention_forward(x, f_epvs, w)[0])), grads["f_lac"]

        def wrt_epvs(x):
            return float(np.sum(up * gated_attention_forward(f_lac, x, w)[0])), grads["f_epvs"]

        for fn, pt in ((wrt_lac, f_lac), (wrt_epvs, f_epvs)):
            worst = max(worst, fd_report(fn, pt, 1e-6).max_rel_error)
    return CheckResult("attention_gradient", worst < GRAD_TOL, worst, GRAD_TOL, n)


def check_tversky(rng, n=20, perturb: float = 0.0) -> CheckResult:
    worst, masked_nonzero = 0.0, 0
    params = TverskyParams()
    for _ in range(n):
        p = rng.uniform(0.02, 0.98, size=(1, 4, 4, 4))
        g = (rng.random(p.shape) < 0.4).astype(float)
        valid = (rng.random(p.shape) < 0.8).astype(float)

        def fn(x):
            value, grad = tversky_loss(x, g, valid, params)
            return value, grad * (1.0 + perturb)

        worst = max(worst, fd_report(fn, p, 1e-6).max_rel_error)
        masked_nonzero += int(np.count_nonzero(fn(p)[1][valid == 0]))
    ok = worst < GRAD_TOL and masked_nonzero == 0
    return CheckResult("tversky_gradient", ok, worst, GRAD_TOL, n, {"nonzero_masked_grad": masked_nonzero})


def check_cldice(rng, n=20, iterations=5) -> CheckResult:
    worst, excluded, masked_nonzero = 0.0, 0, 0
    for i in range(n):
        shape = (1, 6, 6, 6)
        p = _smooth_probs(rng, shape)
        g = (ndimage.gaussian_filter(rng.random(shape), sigma=(0, 1, 1, 1)) > 0.5).astype(float)
        valid = None
        if i % 2:
            valid = np.ones(shape)
            valid[..., :1] = 0.0
        sg = soft_skeleton(g if valid is None else g * valid, iterations)

        def fn(x):
            return cldice_loss(x, g, iterations, valid=valid, skel_g=sg)

        rep = fd_report(fn, p, CLDICE_STEP, kink_tol=1e-3)
        worst = max(worst, rep.max_rel_error)
        excluded += rep.n_excluded
        if valid is not None:
            masked_nonzero += int(np.count_nonzero(fn(p)[1][valid == 0]))
    ok = worst < CLDICE_TOL and masked_nonzero == 0
    return CheckResult(
        "cldice_gradient",
        ok,
        worst,
        CLDICE_TOL,
        n,
        {"excluded_tie_coordinates": excluded, "nonzero_masked_grad": masked_nonzero},
    )


def check_exclusion(rng, n=20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        a = rng.uniform(0.05, 0.95, size=(1, 4, 4, 4))
        b = rng.uniform(0.05, 0.95, size=(1, 4, 4, 4))
        ga = exclusion_loss(a, b)[1]
        gb = exclusion_loss(a, b)[2]
        worst = max(worst, fd_report(lambda x: (exclusion_loss(x, b)[0], ga), a, 1e-4).max_rel_error)
        worst = max(worst, fd_report(lambda x: (exclusion_loss(a, x)[0], gb), b, 1e-4).max_rel_error)
    return CheckResult("exclusion_gradient", worst < GRAD_TOL, worst, GRAD_TOL, n)


def check_total_loss(rng, n=20) -> CheckResult:
    worst = 0.0
    keys = ("s_epvs", "s_lac", "l_epvs", "l_lac", "l_excl")
    for _ in range(n):
        x0 = np.array([*rng.normal(size=2), *rng.uniform(0.05, 1.0, size=3)])
        lam = float(rng.uniform(0, 2))

        def fn(x):
            state = UncertaintyState(x[0], x[1], lam)
            value, g = total_loss(x[2], x[3], x[4], state)
            return value, np.array([g[k] for k in keys])

        worst = max(worst, fd_report(fn, x0, 1e-6).max_rel_error)
    return CheckResult("total_loss_gradient", worst < GRAD_TOL, worst, GRAD_TOL, n)


def check_anchors() -> CheckResult:
    g = np.zeros((1, 4, 4, 4))
    g[0, 1:3, 1:3, 1:3] = 1.0
    tv = tversky_loss(g, g)[0]
    ex = exclusion_loss(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2, 2), 0.5))[0]
    tot = total_loss(0.37, 0.81, 0.5, UncertaintyState(0.0, 0.0, 0.0))[0]
    errs = {"tversky_identical": abs(tv), "exclusion_half": abs(ex - 0.25), "total_reduces": abs(tot - (0.37 + 0.81))}
    ok = errs["tversky_identical"] < 1e-9 and errs["exclusion_half"] == 0.0 and errs["total_reduces"] == 0.0
    return CheckResult("loss_anchors", ok, max(errs.values()), 0.0, 1, errs)


def run_kernel_checks(seed: int = 0, perturb_gradient: float = 0.0) -> list[CheckResult]:
    """Run every check; ``perturb_gradient`` scales the Tversky gradient (test hook)."""
    rng = np.random.default_rng(seed)
    return [
        check_zero_init(rng),
        check_attention_oracle(rng),
        check_attention_gradient(rng),
        check_tversky(rng, perturb=perturb_gradient),
        check_cldice(rng),
        check_exclusion(rng),
        check_total_loss(rng),
        check_anchors(),
    ]


def report(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": [asdict(r) for r in results],
    }
