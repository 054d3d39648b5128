import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tabml.bayes import GaussianParamVector, kl_value, sample
from tabml.episodes import EpisodeSpec, SynthConfig, episode_indices, generate_synthetic
from tabml.evaluation import metrics
from tabml.topic import MetaTrainProfile, TopicProfile, adaptive_init, adaptive_steps, adaptive_z

finite = st.floats(-3, 3, allow_nan=False)
vec = arrays(np.float64, 6, elements=finite)
TASK = generate_synthetic(SynthConfig(tasks=1, shots_per_task=40, clues_per_shot=2, seed=9))[0]


@given(vec, vec, vec, vec)
def test_kl_is_nonnegative_and_zero_on_itself(m1, v1, m2, v2):
    q, p = GaussianParamVector(m1, v1), GaussianParamVector(m2, v2)
    assert kl_value(q, p) >= -1e-12
    assert abs(kl_value(q, q)) < 1e-12


@given(vec, vec, vec, vec, st.permutations(range(6)))
def test_kl_is_permutation_invariant(m1, v1, m2, v2, perm):
    perm = list(perm)
    a = kl_value(GaussianParamVector(m1, v1), GaussianParamVector(m2, v2))
    b = kl_value(GaussianParamVector(m1[perm], v1[perm]), GaussianParamVector(m2[perm], v2[perm]))
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


@given(arrays(np.int64, st.integers(1, 30), elements=st.integers(0, 1)), st.randoms(use_true_random=False))
def test_metrics_bounded_and_order_free(bits, rnd):
    truths = np.roll(bits, 1)
    m = metrics(bits, truths)
    assert all(0.0 <= x <= 1.0 for x in (m.recall, m.precision, m.accuracy))
    perm = list(range(bits.size))
    rnd.shuffle(perm)
    assert metrics(bits[perm], truths[perm]) == m


@given(vec, vec, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_adaptive_z_in_unit_interval_and_scale_free(a, b, s, t):
    z = adaptive_z(TopicProfile({}, a), MetaTrainProfile(b, {}))
    assert 0.0 <= z <= 1.0
    z2 = adaptive_z(TopicProfile({}, a * s), MetaTrainProfile(b * t, {}))
    assert abs(z - z2) < 1e-9


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 5), st.integers(0, 10))
def test_adaptive_steps_bounded_and_non_increasing(z1, z2, k_min, extra):
    k_max = k_min + extra
    lo, hi = sorted((z1, z2))
    a, b = adaptive_steps(lo, k_min, k_max), adaptive_steps(hi, k_min, k_max)
    assert k_min <= b <= a <= k_max


@given(vec, vec, finite, st.integers(0, 2**31))
def test_sample_shifts_with_the_mean(mu, lv, delta, seed):
    a = sample(GaussianParamVector(mu, lv), seed)
    b = sample(GaussianParamVector(mu + delta, lv), seed)
    np.testing.assert_allclose(b.phi, a.phi + delta, atol=1e-12)


@given(vec, vec, st.integers(0, 2**31))
def test_full_similarity_init_is_the_global_posterior(mu, lv, seed):
    theta = GaussianParamVector(mu, lv)
    assert adaptive_init(theta, 1.0, seed).equals(theta)


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_episode_shots_are_unique_and_balanced(n_sup, n_qry, seed):
    if n_sup + n_qry > 20:
        return
    sup, qry = episode_indices(TASK, EpisodeSpec(n_sup, 2, n_qry, seed))
    assert len(set(sup) | set(qry)) == len(sup) + len(qry) == 2 * (n_sup + n_qry)
    labels = np.array([s.label for s in TASK.shots])
    assert labels[sup].sum() == n_sup and labels[qry].sum() == n_qry
