import numpy as np
import pytest

from csvdkit.kernels import pooling, suite
from csvdkit.kernels.attention import AttentionWeights, gated_attention_backward, gated_attention_forward
from csvdkit.kernels.gradcheck import NonFiniteError, fd_report, finite_difference_check
from csvdkit.kernels.losses import (
    ShapeError,
    TverskyParams,
    UncertaintyState,
    cldice_loss,
    deep_supervision_aggregate,
    exclusion_loss,
    total_loss,
    tversky_loss,
)
from csvdkit.kernels.skeleton import SkeletonTape, soft_skeleton, soft_skeleton_backward
from csvdkit.kernels.tensorio import read_tensor, write_tensor
from csvdkit.volume import VoxelGrid, affine_from_spacing


def naive_pool(x, better):
    """Per-voxel window scan with first-offset tie winner."""
    C, D, H, W = x.shape
    out = np.empty_like(x)
    for c, z, y, w in np.ndindex(x.shape):
        best = None
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    zz, yy, ww = z + dz, y + dy, w + dx
                    if 0 <= zz < D and 0 <= yy < H and 0 <= ww < W:
                        v = x[c, zz, yy, ww]
                        if best is None or better(v, best):
                            best = v
        out[c, z, y, w] = best
    return out


def test_pooling_matches_naive_and_both_paths_agree(monkeypatch):
    x = np.random.default_rng(0).integers(0, 3, (2, 4, 5, 3)).astype(float)  # many ties
    mx, smx = pooling.max_pool3(x)
    mn, smn = pooling.min_pool3(x)
    np.testing.assert_array_equal(mx, naive_pool(x, np.greater))
    np.testing.assert_array_equal(mn, naive_pool(x, np.less))
    assert np.all(x.ravel()[smx] == mx)
    monkeypatch.setattr(pooling, "STACK_LIMIT", 0)
    mx2, smx2 = pooling.max_pool3(x)
    assert mx2.tobytes() == mx.tobytes() and np.array_equal(smx2, smx)


def test_skeleton_of_binary_line_is_the_line():
    x = np.zeros((1, 5, 5, 9))
    x[0, 2, 2, 1:8] = 1
    s = soft_skeleton(x)
    np.testing.assert_array_equal(s, x)
    assert soft_skeleton(x, iterations=0).max() == 1


def test_skeleton_stays_in_unit_interval():
    p = np.random.default_rng(1).random((2, 6, 6, 6))
    s = soft_skeleton(p, 5)
    assert s.min() >= 0 and s.max() <= 1


def test_skeleton_backward_matches_fd():
    rng = np.random.default_rng(2)
    p = suite._smooth_probs(rng, (1, 5, 5, 5))
    w = rng.normal(size=p.shape)

    def fn(x):
        tape = SkeletonTape(x.shape)
        s = soft_skeleton(x, 3, tape)
        return float(np.sum(w * s)), soft_skeleton_backward(w, tape)

    rep = fd_report(fn, p, 1e-6, kink_tol=1e-4)
    assert rep.max_rel_error < 1e-6
    assert rep.n_checked > rep.n_excluded


def test_tversky_values():
    g = np.zeros((1, 3, 3, 3))
    g[0, 1, 1, 1] = 1
    assert tversky_loss(g, g)[0] == pytest.approx(0.0, abs=1e-9)
    p = np.full(g.shape, 0.5)
    tp, fp, fn = 0.5, 13.0, 0.5
    eps = 1e-5
    ref = 1 - (tp + eps) / (tp + 0.1 * fp + 0.9 * fn + eps)
    assert tversky_loss(p, g)[0] == pytest.approx(ref, abs=1e-15)
    with pytest.raises(ShapeError):
        tversky_loss(p, g[..., :2])
    with pytest.raises(ValueError):
        TverskyParams(epsilon=0)


def test_masked_voxels_get_zero_gradient():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 0.9, (1, 4, 4, 4))
    g = (rng.random(p.shape) < 0.5).astype(float)
    v = (rng.random(p.shape) < 0.7).astype(float)
    assert np.all(tversky_loss(p, g, v)[1][v == 0] == 0)
    assert np.all(cldice_loss(p, g, valid=v)[1][v == 0] == 0)
    # masked voxels do not influence the value either
    q = p.copy()
    q[v == 0] = 0.123
    assert tversky_loss(q, g, v)[0] == tversky_loss(p, g, v)[0]


def test_cldice_perfect_and_gradient():
    g = np.zeros((1, 5, 5, 9))
    g[0, 2, 2, 1:8] = 1
    assert cldice_loss(g, g)[0] == pytest.approx(0.0, abs=1e-9)
    res = suite.check_cldice(np.random.default_rng(4), n=4)
    assert res.passed, res


def test_exclusion_and_total_loss():
    assert exclusion_loss(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2, 2), 0.5))[0] == 0.25
    v, grads = total_loss(0.3, 0.7, 0.2, UncertaintyState(0.0, 0.0, 0.0))
    assert v == 0.3 + 0.7
    v, grads = total_loss(0.3, 0.7, 0.2, UncertaintyState(np.log(2.0), 0.0, 1.0))
    assert v == pytest.approx(0.15 + np.log(2.0) + 0.7 + 0.2)
    assert grads["s_epvs"] == pytest.approx(1 - 0.15)
    with pytest.raises(ValueError):
        UncertaintyState(lambda_excl=-1)


def test_deep_supervision_aggregate():
    assert deep_supervision_aggregate([1.0, 2.0, 4.0]) == pytest.approx((1 + 1 + 1) / 1.75)
    with pytest.raises(ShapeError):
        deep_supervision_aggregate([1.0, 2.0])


def test_attention_zero_init_is_identity():
    rng = np.random.default_rng(5)
    w = AttentionWeights.init(8, 4, rng)
    f_lac, f_epvs = rng.normal(size=(2, 8, 3, 3, 3))
    out, gate = gated_attention_forward(f_lac, f_epvs, w)
    assert out.tobytes() == f_lac.tobytes()
    assert gate.shape == (3, 3, 3) and np.all((gate > 0) & (gate < 1))


def test_attention_shapes_checked():
    with pytest.raises(ShapeError):
        AttentionWeights(np.zeros((1, 6)), np.zeros((1, 6)), np.zeros((6, 6)), 4)
    w = AttentionWeights.init(8)
    with pytest.raises(ShapeError):
        gated_attention_forward(np.zeros((4, 2, 2, 2)), np.zeros((4, 2, 2, 2)), w)


def test_attention_weight_gradients():
    rng = np.random.default_rng(6)
    w = AttentionWeights(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), rng.normal(size=(8, 8)), 4)
    f_lac, f_epvs, up = rng.normal(size=(3, 8, 2, 2, 2))
    grads = gated_attention_backward(up, f_lac, f_epvs, w)
    for name in ("wq", "wk", "wv"):

        def fn(m, name=name):
            ws = {"wq": w.wq, "wk": w.wk, "wv": w.wv, name: m}
            out = gated_attention_forward(f_lac, f_epvs, AttentionWeights(ws["wq"], ws["wk"], ws["wv"], 4))[0]
            return float(np.sum(up * out)), grads[name]

        assert finite_difference_check(fn, getattr(w, name)) < 1e-6


def test_fd_harness_detects_wrong_gradient_and_nan():
    def good(x):
        return float(np.sum(x**3)), 3 * x**2

    def bad(x):
        return float(np.sum(x**3)), 3.001 * x**2

    x = np.linspace(0.5, 1.5, 6)
    assert finite_difference_check(good, x) < 1e-8
    assert finite_difference_check(bad, x) > 1e-4
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        fd_report(lambda x: (float(np.sum(np.log(x))), 1 / x), np.array([1.0, 0.0]))


def test_fd_kink_exclusion():
    def relu_sum(x):
        return float(np.sum(np.maximum(x, 0))), (x > 0).astype(float)

    rep = fd_report(relu_sum, np.array([0.0, 1.0, -1.0]), 1e-6, kink_tol=1e-3)
    assert rep.n_excluded == 1 and rep.max_rel_error < 1e-9


def test_suite_checks_individually():
    rng = np.random.default_rng(0)
    for res in (
        suite.check_zero_init(rng, n=5),
        suite.check_attention_oracle(rng, n=3),
        suite.check_attention_gradient(rng, n=2),
        suite.check_tversky(rng, n=3),
        suite.check_exclusion(rng, n=3),
        suite.check_total_loss(rng, n=3),
        suite.check_anchors(),
    ):
        assert res.passed, res
    assert not suite.check_tversky(rng, n=2, perturb=1e-3).passed


def test_tensor_io_round_trip(tmp_path):
    t = np.random.default_rng(7).random((2, 3, 4, 5))
    write_tensor(t, tmp_path / "t.t4d")
    back, grid = read_tensor(tmp_path / "t.t4d")
    assert grid is None and back.tobytes() == t.tobytes()

    like = VoxelGrid(np.zeros((5, 4, 3)), affine_from_spacing((1, 2, 3)))
    write_tensor(t[:1], tmp_path / "t.nii.gz", like=like)
    back, grid = read_tensor(tmp_path / "t.nii.gz")
    assert back.tobytes() == t[:1].tobytes() and grid.spacing == (1, 2, 3)
    (tmp_path / "bad.t4d").write_bytes(b"T4D1" + b"\0" * 8)
    with pytest.raises(ShapeError):
        read_tensor(tmp_path / "bad.t4d")
