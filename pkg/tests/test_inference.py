import numpy as np
import pytest

from latentchoice.inference import covariance_from_hessian, hessian_statistics, numerical_hessian, parameter_table
from latentchoice.parameters import Block, ParameterSet


def params_with(values, fixed=None, reference=None):
    labels = [f"p{k}" for k in range(len(values))]
    return ParameterSet([Block.build("b", values, labels, fixed, reference)])


def test_numerical_hessian_of_quadratic():
    a = np.array([[-4.0, 1.0], [1.0, -2.0]])
    hess = numerical_hessian(lambda x: a @ x, np.array([0.3, -0.7]))
    np.testing.assert_allclose(hess, a, atol=1e-8)


def test_covariance_is_inverse_information():
    hess = np.array([[-4.0, 1.0], [1.0, -2.0]])
    cov, flagged = covariance_from_hessian(hess)
    np.testing.assert_allclose(cov, np.linalg.inv(-hess))
    assert not flagged.any()


def test_singular_direction_is_flagged():
    hess = np.array([[-1.0, -1.0, 0.0], [-1.0, -1.0, 0.0], [0.0, 0.0, -2.0]])
    cov, flagged = covariance_from_hessian(hess)
    assert flagged.tolist() == [True, True, False]
    assert np.isnan(cov[0, 0])
    assert cov[2, 2] == pytest.approx(0.5)


def test_parameter_table_t_statistic():
    # t = value / std err, e.g. -0.609 / 0.112
    params = params_with([-0.609, 0.0, 2.0], fixed=[False, False, True], reference=[False, False, True])
    cov = np.diag([0.112 ** 2, 1.0])
    stats = parameter_table(params, cov, np.zeros(2, dtype=bool))
    assert stats[0].std_err == pytest.approx(0.112)
    assert stats[0].t_stat == pytest.approx(-5.4375)
    assert stats[1].t_stat == 0.0
    assert stats[2].reference and stats[2].std_err is None


def test_hessian_statistics_for_gaussian_mean():
    data = np.array([1.0, 2.0, 4.0, 5.0])
    params = params_with([data.mean()])

    def free_gradient(x):
        return np.array([np.sum(data - x[0])])

    stats, cov = hessian_statistics(params, free_gradient)
    assert cov[0, 0] == pytest.approx(1 / data.size)
    assert stats[0].t_stat == pytest.approx(3.0 / 0.5)
