import math

import numpy as np
import pytest
from scipy import stats

from ewall.batch import (
    DiscreteEnvironment,
    DiscreteTaskDistribution,
    VcDeltaParams,
    erm_zero_one,
    ewa_tl_run,
    learning_to_learn,
    vc_delta,
)
from ewall.bounds import eta_finite
from ewall.core import ContractError, InputError, LossFunction, TaskDataset
from ewall.meta import FiniteRepresentationSet, MetaConfig
from ewall.within_task import (
    ExponentialWeights,
    FiniteHypothesisClass,
    LinearHypothesisClass,
    LinearRepresentation,
    OnlineGradient,
)

import oracles


def _oga_setup(seed, T=5, m=4, d=2):
    rng = np.random.default_rng(seed)
    tasks = [TaskDataset(rng.uniform(-1, 1, (m, d)), rng.uniform(-1, 1, m), task_index=t + 1)
             for t in range(T)]
    reps = FiniteRepresentationSet([LinearRepresentation(np.eye(d))])
    learner = OnlineGradient(LinearHypothesisClass(d, 1.0), LossFunction.squared(1.0), 0.1)
    return tasks, reps, learner


def test_ltl_single_training_task():
    tasks, reps, learner = _oga_setup(0, T=1)
    new = _oga_setup(1, T=1)[0][0]
    pred = learning_to_learn(tasks, reps, learner, MetaConfig(1.0, 4.0), new)
    assert pred.task_draw == 1 and pred.rep_index == 0


def test_ltl_one_round_gives_initial_hypothesis():
    tasks, reps, learner = _oga_setup(2)
    new = TaskDataset(np.array([[0.3, -0.2]]), [0.5])
    pred = learning_to_learn(tasks, reps, learner, MetaConfig(1.0, 4.0), new)
    assert pred.round_draw == 1
    np.testing.assert_array_equal(pred.hypothesis, [0.0, 0.0])
    np.testing.assert_array_equal(pred.predict(np.ones((3, 2))), np.zeros(3))


def test_ltl_predictor_is_frozen():
    tasks, reps, learner = _oga_setup(3)
    new = _oga_setup(4)[0][0]
    pred = learning_to_learn(tasks, reps, learner, MetaConfig(1.0, 4.0, seed=3), new)
    X = np.random.default_rng(5).uniform(-1, 1, (7, 2))
    np.testing.assert_array_equal(pred.predict(X), pred.predict(X))


def test_ltl_errors():
    tasks, reps, learner = _oga_setup(6)
    with pytest.raises(InputError):
        learning_to_learn(tasks, reps, learner, MetaConfig(1.0, 4.0),
                          TaskDataset(np.ones((2, 3)), [0.0, 0.0]))
    with pytest.raises(InputError):
        learning_to_learn([], reps, learner, MetaConfig(1.0, 4.0), tasks[0])


def ltl_uniformity_pvalue(n_trials, T=5, m=4):
    tasks, reps, learner = _oga_setup(7, T=T, m=m)
    new = _oga_setup(8, T=1, m=m)[0][0]
    rng = np.random.default_rng(9)
    counts = np.zeros((T, m))
    for _ in range(n_trials):
        pred = learning_to_learn(tasks, reps, learner, MetaConfig(1.0, 4.0), new, rng)
        counts[pred.task_draw - 1, pred.round_draw - 1] += 1
    return stats.chisquare(counts.reshape(-1)).pvalue


def test_ltl_draws_are_uniform():
    assert ltl_uniformity_pvalue(2000) > 0.01


def _discrete(seed):
    rng = np.random.default_rng(seed)
    points, tasks, weights = oracles.random_discrete_environment(rng, n_tasks=2, support=2)
    K, p, H = 2, 1, 3
    reps = [rng.normal(size=(2, p)) for _ in range(K)]
    thetas = rng.uniform(-1.5, 1.5, (H, p))
    return tasks, weights, reps, thetas


def test_ltl_matches_exact_enumeration():
    """Monte-Carlo risk of the package strategy agrees with the exact oracle."""
    tasks, weights, reps, thetas = _discrete(10)
    m, T = 2, 3
    loss = LossFunction.squared(1.0)
    eta = eta_finite(loss.value_bound, 2, T)
    lhs, _ = oracles.ltl_exact(tasks, weights, reps, thetas, m, T, eta, 0.125, 1.0)
    env = DiscreteEnvironment([DiscreteTaskDistribution(*t) for t in tasks], weights)
    rs = FiniteRepresentationSet([LinearRepresentation(G) for G in reps])
    learner = ExponentialWeights(FiniteHypothesisClass.linear(thetas), loss, 0.125)
    rng = np.random.default_rng(11)
    risks = []
    for _ in range(3000):
        train, _ = env.sample_tasks(T, m, rng)
        j = rng.choice(len(tasks), p=weights)
        new = env.tasks[j].sample(m, rng)
        pred = learning_to_learn(train, rs, learner, MetaConfig(eta, loss.value_bound), new, rng)
        risks.append(env.tasks[j].risk(pred.predict, loss))
    risks = np.array(risks)
    se = risks.std(ddof=1) / math.sqrt(risks.size)
    assert abs(risks.mean() - lhs) < 4 * se + 1e-12


def test_vc_delta_examples():
    # high-precision decimal evaluation of the formula at V=2, m=100, eps=0.05
    assert vc_delta(2, 100, 0.05) == pytest.approx(1.1168658650581121, abs=1e-12)
    for m in (5, 50, 500):
        assert vc_delta(2, 2 * m, 0.05) < vc_delta(2, m, 0.05)
    # d/dV of V ln(2me/V) is ln(2m/V) > 0 on V < 2m
    for m in (20, 100):
        for V in range(1, m):
            assert vc_delta(V + 1, m, 0.1) > vc_delta(V, m, 0.1)
    with pytest.raises(InputError):
        vc_delta(2, 100, 1.0)
    with pytest.raises(InputError):
        VcDeltaParams(2, 0.0)


def test_erm_realizable_class():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(30, 2))
    y = np.where(X[:, 0] >= 0, 1.0, -1.0)
    hc = FiniteHypothesisClass.signs([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
    j, r = erm_zero_one(TaskDataset(X, y), LinearRepresentation(np.eye(2)), hc)
    assert (j, r) == (1, 0.0)
    ones = FiniteHypothesisClass.constants([1.0])
    assert erm_zero_one(TaskDataset(X, np.ones(30)), LinearRepresentation(np.eye(2)),
                        ones) == (0, 0.0)


def test_erm_matches_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(20):
        X = rng.normal(size=(25, 3))
        y = rng.choice([-1.0, 1.0], size=25)
        G = rng.normal(size=(3, 2))
        thetas = rng.normal(size=(6, 2))
        j, r = erm_zero_one(TaskDataset(X, y), LinearRepresentation(G),
                            FiniteHypothesisClass.signs(thetas))
        risks = [np.mean([oracles.sign((x @ G) @ th) != yy for x, yy in zip(X, y)])
                 for th in thetas]
        assert r == min(risks)
        assert j == risks.index(min(risks))


def _tl_scenario(seed, T, m=100):
    """Balanced labels given by the sign of the first coordinate; g1 exposes
    that coordinate, g2 maps everything to 0 so every sign predicts +1 and
    errs on exactly half the points."""
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(T):
        X = rng.normal(size=(m, 3))
        X[:, 0] = np.abs(X[:, 0]) * np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
        tasks.append(TaskDataset(X, np.where(X[:, 0] >= 0, 1.0, -1.0), task_index=t + 1))
    reps = FiniteRepresentationSet([LinearRepresentation(np.eye(3)[:, :2]),
                                    LinearRepresentation(np.zeros((3, 2)))])
    hc = FiniteHypothesisClass.signs([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    return tasks, reps, hc


def tl_concentration(T=200, m=100, seed=14):
    tasks, reps, hc = _tl_scenario(seed, T, m)
    vc = VcDeltaParams(2, 0.05)
    C = 1.0 + vc_delta(2, m, 0.05 / T)
    res = ewa_tl_run(tasks, reps, hc, MetaConfig(eta_finite(C, 2, T), C, seed=seed), vc)
    risks = res.extras["empirical_risk"]
    return res.posteriors[-1][0], risks


def test_tl_concentrates_on_realizable_representation():
    mass, risks = tl_concentration()
    assert np.all(risks[:, 0] == 0.0)
    assert np.all(risks[:, 1] >= 0.4)
    assert mass > 0.99


def test_tl_zero_eta_keeps_prior():
    tasks, reps, hc = _tl_scenario(15, 5)
    res = ewa_tl_run(tasks, reps, hc, MetaConfig(0.0, 3.0, prior=[0.3, 0.7]),
                     VcDeltaParams(2))
    for post in res.posteriors:
        np.testing.assert_allclose(post, [0.3, 0.7], rtol=1e-14)


def test_tl_equal_widths_reduce_to_risk_weights():
    tasks, reps, hc = _tl_scenario(16, 6, m=40)
    C = 1.0 + vc_delta(2, 40, 0.05 / 6)
    res = ewa_tl_run(tasks, reps, hc, MetaConfig(0.7, C), VcDeltaParams(2))
    closed = oracles.softmax_neg(res.extras["empirical_risk"].sum(axis=0), 0.7)
    np.testing.assert_allclose(res.posteriors[-1], closed, rtol=1e-10)


def test_tl_bound_violation_is_contract_error():
    tasks, reps, hc = _tl_scenario(17, 3, m=40)
    with pytest.raises(ContractError):
        ewa_tl_run(tasks, reps, hc, MetaConfig(1.0, 1.0), VcDeltaParams(2))


def test_environment_sampling_is_reproducible():
    rng = np.random.default_rng(18)
    _, tasks, weights = oracles.random_discrete_environment(rng)
    env = DiscreteEnvironment([DiscreteTaskDistribution(*t) for t in tasks], weights)
    a, wa = env.sample_tasks(4, 3, np.random.default_rng(1))
    b, wb = env.sample_tasks(4, 3, np.random.default_rng(1))
    assert wa == wb and a == b


def test_discrete_task_risk_is_exact():
    task = DiscreteTaskDistribution([[0.0], [1.0]], [0.0, 1.0], [0.25, 0.75])
    loss = LossFunction.squared(1.0)
    assert task.risk(lambda X: np.zeros(len(X)), loss) == 0.75
    with pytest.raises(InputError):
        DiscreteTaskDistribution([[0.0]], [0.0], [0.5])
