import numpy as np
import pytest

from planarbfm import autodiff as ad
from planarbfm import nn
from planarbfm.autodiff import Parameter
from planarbfm.errors import ContractError
from planarbfm.gradcheck import finite_diff_check


def test_quadratic_exact():
    with ad.precision("float64"):
        theta = Parameter("theta", np.array([1.0, -2.0, 0.5]))

        def f():
            t = theta.tensor()
            return ad.mul(ad.tsum(ad.mul(t, t)), 0.5)

        assert finite_diff_check(f, [theta], eps=1e-4) < 1e-9


def test_mlp_loss_under_1e_4():
    rng = np.random.default_rng(42)
    with ad.precision("float64"):
        mlp = nn.MLP("m", 4, (8, 8), 3, rng, activation="tanh")
        x = rng.standard_normal((5, 4))

        def f():
            out = mlp(ad.lift(x))
            return ad.tmean(ad.mul(out, out))

        assert finite_diff_check(f, mlp.parameters(), eps=1e-4) < 1e-4


def test_eps_zero_rejected():
    theta = Parameter("t", np.ones(2))
    with pytest.raises(ContractError):
        finite_diff_check(lambda: ad.tsum(theta.tensor()), [theta], eps=0.0)


def test_nondeterministic_f_rejected():
    theta = Parameter("t", np.ones(1, dtype=np.float64))
    counter = {"n": 0}

    def f():
        counter["n"] += 1
        return ad.mul(ad.tsum(theta.tensor()), float(counter["n"]))

    with pytest.raises(ContractError):
        finite_diff_check(f, [theta])


def test_unreachable_param_rejected():
    a = Parameter("a", np.ones(2))
    b = Parameter("b", np.ones(2))
    with pytest.raises(ContractError):
        finite_diff_check(lambda: ad.tsum(a.tensor()), [b])


def test_max_entries_subsampling():
    rng = np.random.default_rng(0)
    with ad.precision("float64"):
        w = Parameter("w", rng.standard_normal((20, 20)))

        def f():
            t = w.tensor()
            return ad.tsum(ad.mul(t, t))

        err = finite_diff_check(f, [w], max_entries=10, rng=np.random.default_rng(1))
        assert err < 1e-9
