import math

import numpy as np
import pytest

from gpemu import autodiff as ad
from gpemu.autodiff import CholeskyError, Tape, Tensor, backward

from gradcheck import check_primitive, primitive_cases, random_spd


@pytest.mark.parametrize("case", primitive_cases(), ids=lambda c: c[0])
def test_primitive_gradients(case):
    name, sampler, builder, sym = case
    worst = check_primitive(name, sampler, builder, sym, n_instances=10)
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


def test_square_derivative():
    tape = Tape()
    x = tape.leaf(3.0)
    y = ad.mul(x, x)
    g = backward(tape, y)
    assert g.wrt(x) == pytest.approx(6.0)


def test_softmax_uniform():
    out = ad.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0))


def test_softmax_then_sum_grad_is_zero():
    tape = Tape()
    x = tape.leaf(np.array([0.3, -1.2, 2.0]))
    out = ad.tsum(ad.softmax_lastdim(x))
    g = backward(tape, out)
    np.testing.assert_allclose(g.wrt(x), np.zeros(3), atol=1e-12)


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_cholesky_2x2_value():
    out = ad.cholesky(Tensor([[4.0, 2.0], [2.0, 3.0]]))
    expected = np.array([[2.0, 0.0], [1.0, math.sqrt(2.0)]])
    np.testing.assert_allclose(out.data, expected, rtol=1e-14)
    np.testing.assert_allclose(out.data @ out.data.T, [[4.0, 2.0], [2.0, 3.0]], atol=1e-14)


@pytest.mark.parametrize("n", [2, 8, 31, 64])
def test_cholesky_roundtrip(n):
    rng = np.random.default_rng(n)
    k = random_spd(rng, n)
    low = ad.cholesky(Tensor(k)).data
    np.testing.assert_allclose(low @ low.T, k, atol=1e-8 * max(1.0, np.abs(k).max()))
    assert np.allclose(np.triu(low, 1), 0.0)


def test_cholesky_failure_names_pivot():
    k = np.eye(3)
    k[2, 2] = -1.0
    with pytest.raises(CholeskyError) as err:
        ad.cholesky(Tensor(k))
    assert err.value.pivot == 2
    assert "pivot 2" in str(err.value)


def test_cholesky_rejects_asymmetric():
    k = np.array([[1.0, 0.5], [0.2, 1.0]])
    with pytest.raises(ValueError, match="asymmetric"):
        ad.cholesky(Tensor(k))


def test_triangular_solve_roundtrip():
    rng = np.random.default_rng(5)
    k = random_spd(rng, 6)
    low = np.linalg.cholesky(k)
    z = rng.standard_normal(6)
    f = low @ z
    back = ad.triangular_solve(Tensor(low), Tensor(f)).data
    np.testing.assert_allclose(back, z, atol=1e-10)


def test_backward_rejects_nonscalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = ad.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(1.0)
    b = t2.leaf(2.0)
    with pytest.raises(ValueError, match="different tapes"):
        ad.add(a, b)


def test_constant_folding_produces_constants():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.eye(2))
    out = ad.matmul(a, b)
    assert out.tape is None and out.nid == -1


def test_reused_node_accumulates():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = ad.add(ad.mul(x, x), ad.mul(3.0, x))  # x^2 + 3x
    g = backward(tape, ad.tsum(y))
    np.testing.assert_allclose(g.wrt(x), 2.0 * np.array([1.0, 2.0]) + 3.0)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(4))
    y = tape.leaf(np.ones(2))
    g = backward(tape, ad.tsum(ad.mul(x, x)))
    np.testing.assert_array_equal(g.wrt(y), np.zeros(2))


def test_gradient_determinism():
    def run():
        rng = np.random.default_rng(7)
        tape = Tape()
        k = tape.leaf(random_spd(rng, 8))
        z = tape.leaf(rng.standard_normal(8))
        low = ad.cholesky(k)
        f = ad.matmul(low, z)
        out = ad.tsum(ad.mul(f, f))
        g = backward(tape, out)
        return g.wrt(k).tobytes(), g.wrt(z).tobytes()

    assert run() == run()


def test_cholesky_grad_matches_fd_oracle():
    # central differences on sum(cholesky(K)) with symmetric perturbations
    rng = np.random.default_rng(11)
    k = random_spd(rng, 5)
    tape = Tape()
    kt = tape.leaf(k)
    g = backward(tape, ad.tsum(ad.cholesky(kt))).wrt(kt)
    h = 1e-5
    for _ in range(10):
        v = rng.standard_normal((5, 5))
        v = 0.5 * (v + v.T)
        v /= np.linalg.norm(v)
        fp = np.linalg.cholesky(k + h * v).sum()
        fm = np.linalg.cholesky(k - h * v).sum()
        fd = (fp - fm) / (2 * h)
        analytic = float((g * v).sum())
        assert abs(fd - analytic) / max(1.0, abs(fd)) < 1e-4
