import numpy as np
import pytest
from scipy.special import erf

from measnet import autodiff as ad
from measnet.autodiff import Tensor
from measnet.experts import SCOPES, ExpertBank, apply_expert, make_bank

RNG = np.random.default_rng(0)


def f64_bank(n=3, c=4, hidden=None, seed=0, scope="pixel"):
    return make_bank(n, c, 2 * c if hidden is None else hidden, seed,
                     scope=scope, dtype=np.float64)


def np_gelu(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def set_identity_region(bank, j, shift=12.0):
    """Make expert j the identity on moderate inputs: shift the GELU
    argument deep into its linear region and shift back after."""
    c = bank.channels
    p = bank.experts[j]
    assert bank.hidden == c, "identity trick needs hidden == C"
    p["w1"].data[:] = np.eye(c)
    p["b1"].data[:] = shift
    p["w2"].data[:] = np.eye(c)
    p["b2"].data[:] = -shift


class TestMakeBank:
    def test_same_seed_identical(self):
        a, b = f64_bank(seed=7), f64_bank(seed=7)
        for pa, pb in zip(a.experts, b.experts):
            for k in pa:
                assert np.array_equal(pa[k].data, pb[k].data)

    def test_different_seeds_differ(self):
        a, b = f64_bank(seed=1), f64_bank(seed=2)
        assert max(np.abs(pa["w1"].data - pb["w1"].data).max()
                   for pa, pb in zip(a.experts, b.experts)) > 0

    def test_experts_pairwise_distinct(self):
        bank = f64_bank(n=4)
        mats = [p["w1"].data for p in bank.experts]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(mats[i], mats[j])

    def test_param_count(self):
        bank = f64_bank(n=3, c=4, hidden=8)
        assert bank.param_count() == 3 * (4 * 8 + 8 + 8 * 4 + 4)
        got = sum(p.size for _, p in bank.named_params("experts.pixel"))
        assert got == bank.param_count()

    def test_checkpoint_names(self):
        names = [n for n, _ in f64_bank(n=2).named_params("experts.pixel")]
        assert names == ["experts.pixel.0.w1", "experts.pixel.0.b1",
                         "experts.pixel.0.w2", "experts.pixel.0.b2",
                         "experts.pixel.1.w1", "experts.pixel.1.b1",
                         "experts.pixel.1.w2", "experts.pixel.1.b2"]

    def test_bad_args_rejected(self):
        with pytest.raises(ValueError):
            make_bank(0, 4, 8, seed=0)
        with pytest.raises(ValueError):
            make_bank(2, 4, 0, seed=0)
        with pytest.raises(ValueError, match="scope"):
            make_bank(2, 4, 8, seed=0, scope="mid")

    def test_scopes_cover_three_banks(self):
        assert SCOPES == ("pixel", "low", "high")


class TestApplyExpert:
    def test_zero_params_zero_output(self):
        bank = f64_bank()
        for p in bank.experts[1].values():
            p.data[:] = 0.0
        x = Tensor(RNG.standard_normal((5, 4)))
        assert np.allclose(apply_expert(bank, 1, x).data, 0.0)

    def test_identity_region_preserves_input(self):
        bank = f64_bank(c=4, hidden=4)
        set_identity_region(bank, 0)
        x = Tensor(RNG.uniform(-2, 2, size=(6, 4)))
        np.testing.assert_allclose(apply_expert(bank, 0, x).data, x.data,
                                   atol=1e-9)

    def test_matches_two_matmul_oracle(self):
        bank = f64_bank(n=2, c=5, hidden=7)
        x = RNG.standard_normal((1, 1, 5))
        p = bank.experts[1]
        want = np_gelu(x @ p["w1"].data + p["b1"].data) @ p["w2"].data + p["b2"].data
        got = apply_expert(bank, 1, Tensor(x)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_position_wise(self):
        bank = f64_bank()
        x = RNG.standard_normal((8, 4))
        perm = RNG.permutation(8)
        a = apply_expert(bank, 0, Tensor(x[perm])).data
        b = apply_expert(bank, 0, Tensor(x)).data[perm]
        np.testing.assert_allclose(a, b, atol=0)

    def test_out_of_range_rejected(self):
        bank = f64_bank(n=3)
        with pytest.raises(ValueError, match="out of range"):
            apply_expert(bank, 3, Tensor(np.zeros((2, 4))))

    def test_trailing_width_checked(self):
        with pytest.raises(ValueError, match="trailing"):
            apply_expert(f64_bank(c=4), 0, Tensor(np.zeros((2, 5))))

    def test_grad_through_weighted_pair(self):
        bank = f64_bank(n=2, c=3, hidden=6)
        x = Tensor(RNG.standard_normal((4, 3)), requires_grad=True)
        w = Tensor(np.array([0.7, 0.3]), requires_grad=True)

        def f():
            mix = (apply_expert(bank, 0, x) * ad.narrow(w, 0, 0, 1)
                   + apply_expert(bank, 1, x) * ad.narrow(w, 0, 1, 1))
            return (mix * mix).sum()

        params = {"x": x, "w": w}
        params.update({n: p for n, p in bank.named_params("e")})
        report = ad.grad_check(f, params)
        assert report.passed, str(report)
