from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from morphsim.connectivity import (
    CSV_COLUMNS,
    ConnectivityGrid,
    connectivity_probability,
    gumbel_top_k,
    sweep_grid,
    write_grid_csv,
)
from morphsim.selection import CandidateScores, sample_biased, softmax_weights


def test_edgeless_is_disconnected():
    assert connectivity_probability(10, 0, 0, trials=20) == 0.0


def test_complete_graph_is_connected():
    assert connectivity_probability(12, 0, 11, trials=20) == 1.0


def test_small_random_set_suffices():
    assert connectivity_probability(100, 1, 2, clusters=10, trials=1000) >= 0.99


def test_deterministic_and_grid_consistent():
    a = connectivity_probability(30, 1, 0, trials=200, seed=4)
    b = connectivity_probability(30, 1, 0, trials=200, seed=4)
    grid = sweep_grid(ConnectivityGrid(30, (0, 1, 2), (0, 1), trials=200, seed=4))
    assert a == b == next(r.probability for r in grid if (r.d_s, r.d_r) == (1, 0))


def test_one_point_grid():
    rows = sweep_grid(ConnectivityGrid(8, (1,), (1,), trials=10))
    assert len(rows) == 1 and 0.0 <= rows[0].probability <= 1.0


@pytest.mark.parametrize("bad", [dict(trials=0), dict(d_s=(5,), d_r=(5,)), dict(d_s=())])
def test_grid_validation(bad):
    args = dict(n=8, d_s=(1,), d_r=(1,), trials=10)
    args.update(bad)
    with pytest.raises(ValueError):
        ConnectivityGrid(**args)


def test_monotone_in_random_degree():
    trials = 400
    rows = sweep_grid(ConnectivityGrid(60, (0, 1, 2), (0, 1, 2, 3), trials=trials, seed=1))
    by = {(r.d_s, r.d_r): r.probability for r in rows}
    for ds in (0, 1, 2):
        for dr in (1, 2, 3):
            assert by[(ds, dr)] >= by[(ds, dr - 1)] - 0.02
    assert all(0.0 <= p <= 1.0 for p in by.values())


def test_homogeneous_fingerprints_biased_like_random():
    # one cluster: biased and uniform selection should be indistinguishable
    biased = connectivity_probability(50, 1, 0, clusters=1, trials=1000, seed=3)
    rand = connectivity_probability(50, 0, 1, clusters=1, trials=1000, seed=3)
    assert abs(biased - rand) <= 0.05


def test_gumbel_matches_sequential_softmax():
    sims = np.array([0.9, 0.1, -0.4, 0.3, 0.0])
    beta, draws = 2.0, 20_000
    rng = np.random.default_rng(11)
    logits = -beta * sims
    gumbel = Counter(tuple(gumbel_top_k(logits[None, :], 2, rng)[0]) for _ in range(draws))
    sc = CandidateScores.from_mapping(dict(enumerate(sims.tolist())))
    seq = Counter(tuple(sample_biased(sc, 2, beta, rng)) for _ in range(draws))
    # exact ordered-pair probabilities of sequential sampling
    p = softmax_weights(sc, set(), beta)
    pairs = [(i, j) for i in range(5) for j in range(5) if i != j]
    exact = {(i, j): p[i] * p[j] / (1 - p[i]) for i, j in pairs}
    for counts in (gumbel, seq):
        obs = [counts[q] for q in pairs]
        exp = [exact[q] * draws for q in pairs]
        assert chisquare(obs, exp).pvalue > 0.01


def test_grid_csv_golden_header(tmp_path):
    rows = sweep_grid(ConnectivityGrid(6, (0,), (0, 1), trials=5))
    write_grid_csv(tmp_path / "c.csv", rows)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "n,d_s,d_r,probability,std_error,trials"
    assert ",".join(CSV_COLUMNS) == lines[0]
    assert lines[1] == "6,0,0,0,0,5"
