"""Tests for the symmetric order-4 tensor algebra"""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from src.core.exceptions import TensorError
from src.core.models import IsoParams, ModelKind, TensorKind
from src.services.tensor_algebra import (
    SymMat2, Tensor4Sym, apply, apply_many, canonical, check_elliptic, compose_tensor,
    frob_dd, make_isotropic, model_basis,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
sym_mats = st.builds(SymMat2, finite, finite, finite)


def close(a: SymMat2, b: SymMat2, tol: float = 1e-12) -> bool:
    return np.allclose(a.as_array(), b.as_array(), rtol=0.0, atol=tol * max(1.0, np.abs(b.as_array()).max()))


class TestApply:
    A = SymMat2(1.0, 4.0, 2.0)

    def test_identity(self):
        assert close(apply(canonical(TensorKind.IDENT), self.A), SymMat2(1.0, 4.0, 2.0))

    def test_dilatation_is_trace_projector(self):
        assert close(apply(canonical(TensorKind.DILAT), self.A), SymMat2(5.0, 5.0, 0.0))

    def test_c1(self):
        assert close(apply(canonical(TensorKind.C1), self.A), SymMat2(1.0, 0.0, 0.0))

    def test_c2(self):
        assert close(apply(canonical(TensorKind.C2), self.A), SymMat2(0.0, 4.0, 0.0))

    def test_c3(self):
        assert close(apply(canonical(TensorKind.C3), self.A), SymMat2(0.0, 0.0, 2.0))

    def test_apply_many_matches_apply(self):
        t = make_isotropic(IsoParams(mu=1.5, lam=0.7))
        stack = np.array([[1.0, 4.0, 2.0], [0.0, -1.0, 0.5]])
        out = apply_many(t, stack)
        for row, res in zip(stack, out):
            assert np.allclose(apply(t, SymMat2(*row)).as_array(), res, atol=1e-14)


class TestMakeIsotropic:
    def test_pure_shear(self):
        assert np.array_equal(make_isotropic(IsoParams(mu=1.0, lam=0.0)).v, np.diag([2.0, 2.0, 2.0]))

    def test_unit_pair(self):
        expected = np.array([[3.0, 1.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.0, 2.0]])
        assert np.allclose(make_isotropic(IsoParams(mu=1.0, lam=1.0)).v, expected, atol=1e-15)

    def test_hand_evaluation(self):
        t = make_isotropic(IsoParams(mu=2.0, lam=3.0))
        assert close(apply(t, SymMat2(1.0, 0.0, 0.0)), SymMat2(7.0, 3.0, 0.0))

    def test_lambda_alias(self):
        assert IsoParams(mu=1.0, **{"lambda": 2.0}).lam == 2.0

    def test_rejects_zero_mu(self):
        with pytest.raises(TensorError):
            make_isotropic(IsoParams(mu=0.0, lam=1.0))

    def test_random_matrices(self, rng):
        mu, lam = 1.3, 0.4
        t = make_isotropic(IsoParams(mu=mu, lam=lam))
        for row in rng.normal(size=(100, 3)):
            a = SymMat2(*row)
            expected = SymMat2(2 * mu * a.a11 + lam * a.trace(), 2 * mu * a.a22 + lam * a.trace(), 2 * mu * a.a12)
            assert close(apply(t, a), expected)


class TestFrobenius:
    def test_examples(self):
        assert frob_dd(SymMat2(1, 1, 0), SymMat2(1, 1, 0)) == 2.0
        assert frob_dd(SymMat2(0, 0, 1), SymMat2(0, 0, 1)) == 2.0
        assert frob_dd(SymMat2(1, 2, 3), SymMat2(4, 5, 6)) == 50.0

    def test_norm_matches(self):
        a = SymMat2(1.0, -2.0, 0.5)
        assert a.norm() ** 2 == pytest.approx(frob_dd(a, a))

    def test_matrix_roundtrip_of_symmetric_part(self):
        a = SymMat2.from_matrix(np.array([[1.0, 3.0], [1.0, 2.0]]))
        assert a == SymMat2(1.0, 2.0, 2.0)
        assert np.array_equal(a.matrix(), np.array([[1.0, 2.0], [2.0, 2.0]]))


class TestTensorProperties:
    @given(a=sym_mats, b=sym_mats, kind=st.sampled_from(list(TensorKind)))
    @hsettings(max_examples=60, deadline=None)
    def test_canonical_tensors_are_self_adjoint(self, a, b, kind):
        t = canonical(kind)
        assert t == t.T
        lhs = frob_dd(apply(t, a), b)
        rhs = frob_dd(a, apply(t.T, b))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12 * (1.0 + a.norm() * b.norm()))

    @given(a=sym_mats)
    @hsettings(max_examples=60, deadline=None)
    def test_operator_norm_bound(self, a):
        t = make_isotropic(IsoParams(mu=0.8, lam=2.5))
        assert apply(t, a).norm() <= t.op_norm() * a.norm() * (1 + 1e-12) + 1e-12

    @given(a=sym_mats)
    @hsettings(max_examples=60, deadline=None)
    def test_projectors_sum_to_identity(self, a):
        total = canonical(TensorKind.C1) + canonical(TensorKind.C2) + canonical(TensorKind.C3)
        assert close(apply(total, a), a)

    def test_rejects_non_symmetric(self):
        with pytest.raises(TensorError):
            Tensor4Sym(np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(TensorError):
            Tensor4Sym(np.eye(2))

    def test_values_are_read_only(self):
        t = canonical(TensorKind.IDENT)
        with pytest.raises(ValueError):
            t.v[0, 0] = 5.0

    def test_ellipticity(self):
        assert canonical(TensorKind.IDENT).is_elliptic()
        assert not canonical(TensorKind.DILAT).is_elliptic()


class TestModels:
    def test_bases(self):
        assert len(model_basis(ModelKind.SHEAR)) == 1
        lame = model_basis(ModelKind.LAME)
        assert lame[0] == 2.0 * canonical(TensorKind.IDENT)
        assert lame[1] == canonical(TensorKind.DILAT)
        assert len(model_basis(ModelKind.ANISO)) == 3

    def test_compose_lame_matches_isotropic(self):
        mu = np.array([1.0, 2.0])
        lam = np.array([0.5, 3.0])
        stack = compose_tensor([mu, lam], model_basis(ModelKind.LAME))
        assert stack.shape == (2, 3, 3)
        for t in range(2):
            assert np.allclose(stack[t], make_isotropic(IsoParams(mu=mu[t], lam=lam[t])).v)

    def test_compose_rejects_count_mismatch(self):
        with pytest.raises(TensorError):
            compose_tensor([np.ones(3)], model_basis(ModelKind.LAME))

    def test_check_elliptic(self):
        good = np.stack([np.eye(3), 2 * np.eye(3)])
        check_elliptic(good)
        bad = np.stack([np.eye(3), canonical(TensorKind.DILAT).v])
        with pytest.raises(TensorError):
            check_elliptic(bad)
