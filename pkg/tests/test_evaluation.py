import json

import numpy as np
import pytest

from nipslab import tensor as T
from nipslab.darcy import greens_kernel
from nipslab.dataset import build_darcy_corpus, stack_samples, training_samples
from nipslab.estimator import NIPSOperator
from nipslab.evaluation import (SweepError, evaluate, kernel_error,
                                permutation_stability, sweep, system_stack, write_table)


@pytest.fixture(scope="module")
def corpus():
    return build_darcy_corpus(4, 5, 7, seed=2)


@pytest.fixture(scope="module")
def model(corpus):
    G, U = stack_samples(training_samples(corpus[:3], 4, 2, seed=0))
    return NIPSOperator(d_k=4, modes=3, epochs=2, batch_size=2).fit(G, U)


def test_kernel_error_trivial_cases(corpus):
    b = corpus[0].b
    K = greens_kernel(b)
    assert kernel_error(K, b) == 0.0
    assert kernel_error(np.zeros_like(K), b) == 1.0
    # boundary rows carry no information and are ignored
    K2 = K.copy()
    K2[0] = 1e9
    assert kernel_error(K2, b) == 0.0
    with pytest.raises(ValueError):
        kernel_error(np.zeros((25, 25)), b)


def test_zero_filter_gives_unit_forward_error(corpus, model):
    zeroed = [dict(layer) for layer in model.params_]
    zeroed[-1]["R"] = T.tensor(np.zeros_like(zeroed[-1]["R"].data))
    twin = NIPSOperator(**model.get_params())
    twin.config_, twin.params_ = model.config_, zeroed
    twin.g_scale_, twin.u_scale_ = model.g_scale_, model.u_scale_
    rep = evaluate(twin, corpus[3:], 4)
    assert rep.E_forward == pytest.approx(1.0)
    assert rep.E_inverse == pytest.approx(1.0)


def test_factorized_and_materialized_errors_agree(corpus, model):
    G, U = system_stack(corpus[3:], 4)
    factorized = model.errors(G, U)
    K = model.kernel(G, U)
    pred = model.config_.h ** 2 * K @ G
    direct = np.linalg.norm(pred - U, axis=1) / np.linalg.norm(U, axis=1)
    assert np.abs(factorized - direct.mean(axis=1)).max() < 1e-12


def test_report_means_and_json(corpus, model):
    rep = evaluate(model, corpus[3:], 4, dataset_digest="abc")
    assert rep.E_forward == np.mean(rep.forward_errors)
    assert rep.E_inverse == np.mean(rep.kernel_errors)
    assert all(e >= 0 for e in rep.forward_errors + rep.kernel_errors)
    data = json.loads(rep.to_json())
    assert data["dataset_digest"] == "abc" and data["system_ids"] == [3]
    assert rep.to_json() == evaluate(model, corpus[3:], 4, dataset_digest="abc").to_json()


def test_evaluation_needs_enough_pairs(corpus, model):
    with pytest.raises(ValueError):
        system_stack(corpus, 6)


def test_permutation_stability(corpus, model):
    assert permutation_stability(model, corpus[3], 4, 1) == 0.0
    spread = permutation_stability(model, corpus[3], 4, 4)
    assert spread > 0
    assert spread == permutation_stability(model, corpus[3], 4, 4)
    with pytest.raises(ValueError):
        permutation_stability(model, corpus[3], 4, 0)


def test_sweep_writes_table_and_tags_failures(tmp_path, corpus):
    base = dict(d_k=2, modes=2, epochs=1, batch_size=4)
    rows = sweep("n_rand", [1, 2], base, corpus[:3], corpus[3:], d=3,
                 csv_path=tmp_path / "s.csv")
    assert [r["value"] for r in rows] == [1, 2]
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "value,E_forward,E_inverse,final_loss" and len(lines) == 3
    with pytest.raises(SweepError, match="d_k=0"):
        sweep("d_k", [0], base, corpus[:3], corpus[3:], d=3)
    with pytest.raises(ValueError):
        sweep("width", [1], base, corpus[:3], corpus[3:], d=3)


def test_resolution_sweep(corpus):
    fine = build_darcy_corpus(1, 4, 9, seed=2, first_id=10)
    rows = sweep("resolution", [7, 9], dict(d_k=2, modes=2, epochs=1), corpus[:3],
                 {7: corpus[3:], 9: fine}, d=3)
    assert [r["value"] for r in rows] == [7, 9]
    assert rows[0]["final_loss"] == rows[1]["final_loss"]


def test_write_table_precision(tmp_path):
    write_table([{"a": 1, "b": 1 / 3}], tmp_path / "t.csv", ["a", "b"])
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "1,0.33333333333333331"
