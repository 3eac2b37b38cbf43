"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line. The lines are repeated in
the pytest terminal summary, and ``python tests/test_acceptance.py`` runs the
criteria without pytest.
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import brute_force_output_probs, bt_fisher_sd, random_instance  # noqa: E402
from rlhf_lab.analysis import CoverageSweepConfig, coverage_sweep, performance_gap  # noqa: E402
from rlhf_lab.cli import main as cli_main  # noqa: E402
from rlhf_lab.feedback import collect_preferences, ranking_to_pairs  # noqa: E402
from rlhf_lab.gradcheck import run_gradchecks  # noqa: E402
from rlhf_lab.mdp import GenerationMdp  # noqa: E402
from rlhf_lab.oracle import OracularReward, RewardSpec, exact_performance, make_reward, mc_performance  # noqa: E402
from rlhf_lab.policy import Policy  # noqa: E402
from rlhf_lab.policy_opt import (  # noqa: E402
    OptimConfig,
    closed_form_policy,
    exact_value,
    kl_to_pre,
    total_variation,
    train_policy,
)
from rlhf_lab.reward_model import RewardModel, TrainConfig, bt_nll_and_grad, center_per_context, train  # noqa: E402

RESULTS: list[str] = []


def _report(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert passed, line


def _imperfect(mdp, oracle, seed, scale=1.0):
    noise = np.random.default_rng(seed).normal(scale=scale, size=oracle.table().shape)
    return OracularReward.from_table(mdp, oracle.table() + noise)


def test_criterion_01_ppo_reaches_closed_form():
    mdp = GenerationMdp.uniform(4, 3, 2)
    worst = []
    for seed in range(5):
        r = make_reward(mdp, RewardSpec(seed=100 + seed))
        pre = Policy.random(mdp, 200 + seed)
        target = closed_form_policy(mdp, pre, r, 1.0)
        cfg = OptimConfig(algorithm="ppo", step_size=1.0, batch_size=64, num_iters=5000, beta=1.0, seed=seed)
        pol, _ = train_policy(mdp, r, pre, cfg)
        worst.append(float(total_variation(mdp, pol, target).max()))
    ok = sum(tv <= 0.05 for tv in worst)
    _report(1, "PPO fixed point", ok == 5, f"{ok}/5 seeds, max TV {max(worst):.2e} <= 0.05")


def test_criterion_02_bt_recovery():
    mdp = GenerationMdp.uniform(2, 2, 2)
    r = make_reward(mdp, RewardSpec(seed=0))
    data = collect_preferences(mdp, r, [0, 1], 200, seed=0)
    cfg = TrainConfig(objective="bt_nll", step_size=2e-3, num_epochs=20_000, l2_weight=1e-4, convergence_tol=1e-9)
    model, _ = train(RewardModel.tabular(mdp), data, cfg)
    err = float(np.abs(center_per_context(model.table()) - center_per_context(r.table())).max())
    # the MLE's own sampling spread at this draw count, for reading a failure
    sd = float(bt_fisher_sd(r.table(), 200).max())
    _report(2, "BT recovery, 200 draws per pair", err <= 0.05,
            f"max centered error {err:.4f} <= 0.05; asymptotic SD per entry {sd:.3f}")


def test_criterion_03_perfect_reward_null():
    exact, fitted = [], []
    for seed in range(5):
        mdp, r, _, pre = random_instance(seed, vocab=2, horizon=2)
        exact.append(performance_gap(mdp, r, r, pre, 1.0).delta_j)
        from rlhf_lab.feedback import collect_ratings

        data = collect_ratings(mdp, r, list(mdp.contexts), mdp.num_outputs, seed)
        model, _ = train(RewardModel.tabular(mdp), data, TrainConfig(step_size=0.25, num_epochs=500, convergence_tol=1e-14))
        fitted.append(performance_gap(mdp, r, model, pre, 1.0).delta_j)
    ok = max(exact) <= 1e-12 and max(fitted) <= 1e-6
    _report(3, "perfect-reward null", ok, f"exact {max(exact):.1e} <= 1e-12, fitted {max(fitted):.1e} <= 1e-6")


def test_criterion_04_coverage_trend():
    mdp = GenerationMdp.uniform(2, 2, 8)
    r = make_reward(mdp, RewardSpec(seed=0))
    res = coverage_sweep(mdp, r, [0.25, 0.5, 0.75, 1.0], CoverageSweepConfig(), seeds=range(10), pre=Policy.random(mdp, 1))
    dj, ood = res.column("delta_j_mean"), res.column("ood_mse_mean")
    ok = dj[-1] == dj.min() and np.all(ood[-1] <= ood)
    _report(4, "coverage trend", ok, "mean dJ " + ", ".join(f"{v:.3g}" for v in dj)
            + "; mean OOD MSE " + ", ".join(f"{v:.3g}" for v in ood))


def test_criterion_05_beta_tradeoff():
    grid = [0.1, 1.0, 10.0, 100.0]
    worst_kl, worst_j = -np.inf, -np.inf
    for seed in range(10):
        mdp, r, _, pre = random_instance(seed)
        phi = _imperfect(mdp, r, seed)
        kl = [kl_to_pre(mdp, closed_form_policy(mdp, pre, phi, b), pre) for b in grid]
        j = [exact_performance(mdp, closed_form_policy(mdp, pre, r, b), r) for b in grid]
        worst_kl = max(worst_kl, max(np.diff(kl)))
        worst_j = max(worst_j, max(np.diff(j)))
    ok = worst_kl <= 1e-9 and worst_j <= 1e-9
    _report(5, "beta trade-off", ok, f"largest KL increase {worst_kl:.1e}, largest J increase {worst_j:.1e}, tol 1e-9")


def test_criterion_06_gradient_oracles():
    results = run_gradchecks(seed=0, num_instances=20, tol=1e-4)
    ops = sorted({f"{r.module}.{r.operation}" for r in results})
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    _report(6, "gradient oracles", ok, f"{len(ops)} operations x 20 instances, max rel err {worst:.1e} <= 1e-4")


def test_criterion_07_estimator_consistency():
    z, brute = [], []
    for seed in range(10):
        mdp, r, pol, _ = random_instance(seed)
        exact = exact_performance(mdp, pol, r)
        est, se = mc_performance(mdp, pol, r, 100_000, seed)
        z.append(abs(est - exact) / se)
        paths = brute_force_output_probs(mdp, pol)
        loop = sum(mdp.dist[c] * paths[c, o] * r.table()[c, o]
                   for c in range(mdp.num_contexts) for o in range(mdp.num_outputs))
        brute.append(abs(loop - exact))
    ok = max(z) <= 4 and max(brute) <= 1e-12
    _report(7, "estimator consistency", ok, f"max |z| {max(z):.2f} <= 4, brute-force gap {max(brute):.1e} <= 1e-12")


def test_criterion_08_pair_expansion():
    rng = np.random.default_rng(0)
    bad = []
    for n in range(2, 13):
        for _ in range(20):
            ranking = rng.permutation(1000)[:n].tolist()
            if len(ranking_to_pairs(0, ranking)) != n * (n - 1) // 2:
                bad.append(n)
    _report(8, "pair expansion", not bad, f"N in 2..12, 20 random rankings each, {len(bad)} mismatches")


def test_criterion_09_advantage_identities():
    adv, start = 0.0, 0.0
    for seed in range(10):
        mdp, r, pol, pre = random_instance(seed)
        vf = exact_value(mdp, pol, r)
        adv = max(adv, float(np.abs((pol.probs * vf.advantages).sum(axis=-1)).max()))
        start = max(start, abs(mdp.dist @ vf.initial_values() - exact_performance(mdp, pol, r)))
    ok = adv <= 1e-10 and start <= 1e-10
    _report(9, "advantage identities", ok, f"max |E[A]| {adv:.1e}, max |E[V(s1)] - J| {start:.1e}, tol 1e-10")


def test_criterion_10_gauge_invariance():
    loss_gap, tv, dj_gap = 0.0, 0.0, 0.0
    for seed in range(10):
        mdp, r, _, pre = random_instance(seed)
        phi = _imperfect(mdp, r, seed)
        k = np.random.default_rng(seed + 1).normal(scale=5.0, size=mdp.num_contexts)
        shifted = phi.shifted(k)
        prefs = collect_preferences(mdp, r, list(mdp.contexts), 2, seed).preferences
        a, _ = bt_nll_and_grad(RewardModel.tabular(mdp).with_params(phi.table().ravel()), prefs, 0.0)
        b, _ = bt_nll_and_grad(RewardModel.tabular(mdp).with_params(shifted.table().ravel()), prefs, 0.0)
        loss_gap = max(loss_gap, abs(a - b))
        p, q = closed_form_policy(mdp, pre, phi, 1.0), closed_form_policy(mdp, pre, shifted, 1.0)
        tv = max(tv, float(total_variation(mdp, p, q).max()))
        dj_gap = max(dj_gap, abs(performance_gap(mdp, r, phi, pre, 1.0).delta_j
                                 - performance_gap(mdp, r, shifted, pre, 1.0).delta_j))
    ok = loss_gap <= 1e-10 and tv <= 1e-10 and dj_gap <= 1e-10
    _report(10, "gauge invariance", ok, f"loss {loss_gap:.1e}, TV {tv:.1e}, dJ {dj_gap:.1e}, tol 1e-10")


def test_criterion_11_end_to_end_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = {
            "seed": 7,
            "mdp": {"vocab_size": 3, "horizon": 2, "num_contexts": 3},
            "feedback": {"mode": "bt_stochastic", "kappa": 0.67, "preference_samples": 5},
            "reward_model": {"objective": "bt_nll", "step_size": 0.02, "l2_weight": 1e-4},
            "policy": {"num_iters": 300, "batch_size": 32},
        }
        (tmp / "c.json").write_text(json.dumps(cfg))
        codes = [cli_main(["run", str(tmp / "c.json"), "--output-dir", str(tmp / d)]) for d in ("a", "b")]
        names = sorted(p.name for p in (tmp / "a").iterdir())
        same = all((tmp / "a" / n).read_bytes() == (tmp / "b" / n).read_bytes() for n in names)
        same = same and names == sorted(p.name for p in (tmp / "b").iterdir())
    _report(11, "end-to-end determinism", codes == [0, 0] and same, f"{len(names)} files compared byte-for-byte")


if __name__ == "__main__":
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failures += 1
    sys.exit(1 if failures else 0)
