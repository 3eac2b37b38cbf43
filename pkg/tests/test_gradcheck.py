import numpy as np

from rlhf_lab import gradcheck
from rlhf_lab.gradcheck import central_difference, relative_error, run_gradchecks


def test_central_difference_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(central_difference(lambda v: float(v @ v), x), 2 * x, atol=1e-9)


def test_relative_error_scaling():
    err, worst = relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2]))
    assert worst == 1
    assert abs(err - 0.2 / 2.2) <= 1e-15
    assert relative_error(np.zeros(3), np.zeros(3)) == (0.0, 0)


def test_all_checks_pass():
    results = run_gradchecks(seed=0, num_instances=20)
    assert len(results) == 20 * len(gradcheck.CHECKS)
    assert all(r.passed for r in results)


def test_corrupted_gradient_fails(monkeypatch):
    def broken(seed):
        g, n = gradcheck._check_sft(seed)
        return g * 1.01, n

    monkeypatch.setitem(gradcheck.CHECKS, ("policy_opt", "sft_gradient"), broken)
    failed = [r for r in run_gradchecks(num_instances=3) if not r.passed]
    assert failed and {r.operation for r in failed} == {"sft_gradient"}
