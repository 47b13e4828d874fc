import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nipslab import model as M
from nipslab import tensor as T
from nipslab.dataset import build_darcy_corpus, stack_samples, training_samples
from nipslab.estimator import NIPSOperator
from nipslab.model import ModelConfig
from nipslab.randfield import split_rng
from nipslab.trainer import (TrainConfig, TrainingReport, adam_step, fit,
                             init_adam, relative_l2_loss, sample_loss)



@pytest.fixture(scope="module")
def smoke_data():
    recs = build_darcy_corpus(1, 4, 7, seed=0)
    return stack_samples(training_samples(recs, 4, 8, seed=0))


def test_loss_trivial_values(rng):
    u = rng.standard_normal((2, 9, 3))
    assert relative_l2_loss(T.tensor(u), u).data.item() == 0.0
    assert relative_l2_loss(T.tensor(np.zeros_like(u)), u).data.item() == pytest.approx(1.0)
    assert relative_l2_loss(T.tensor(2 * u), u).data.item() == pytest.approx(1.0)


def test_loss_contract_errors(rng):
    u = rng.standard_normal((9, 3))
    bad = u.copy()
    bad[:, 1] = 0
    with pytest.raises(ValueError, match="zero norm"):
        relative_l2_loss(T.tensor(u), bad)
    with pytest.raises(ValueError):
        relative_l2_loss(T.tensor(u[:, :2]), u)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_loss_invariant_to_joint_column_permutation(seed, perm):
    rng = np.random.default_rng(seed)
    pred, target = rng.standard_normal((2, 1, 16, 4))
    perm = list(perm)
    a = relative_l2_loss(T.tensor(pred), target).data.item()
    b = relative_l2_loss(T.tensor(pred[..., perm]), target[..., perm]).data.item()
    assert a == pytest.approx(b, rel=1e-14)


def test_adam_first_step_closed_form():
    cfg = TrainConfig(learning_rate=0.01)
    w0 = np.array([0.3, -1.2, 2.0])
    g = np.array([0.5, -3e-4, 0.0])
    params = [{"w": T.tensor(w0.copy(), requires_grad=True)}]
    state = init_adam(params)
    adam_step(params, [g], state, cfg)
    # step 1: bias-corrected moments equal g and g^2
    expected = w0 - 0.01 * g / (np.abs(g) + cfg.eps_adam)
    np.testing.assert_allclose(params[0]["w"].data, expected, rtol=1e-14, atol=0)
    assert params[0]["w"].data[2] == w0[2]
    assert state.step == 1


def test_adam_complex_parameters_use_modulus():
    cfg = TrainConfig(learning_rate=0.1)
    params = [{"R": T.tensor(np.array([1 + 1j]), requires_grad=True)}]
    state = init_adam(params)
    g = np.array([3 - 4j])
    adam_step(params, [g], state, cfg)
    np.testing.assert_allclose(params[0]["R"].data, 1 + 1j - 0.1 * g / (5 + cfg.eps_adam))


def test_training_loss_gradient_matches_finite_differences():
    cfg = ModelConfig(n=5, d=3, d_k=2, layers=2, modes=(2, 2))
    rng = split_rng(2)
    params = M.init_params(cfg, rng)
    G = rng.standard_normal((2, 25, 3))
    U = rng.standard_normal((2, 25, 3))
    with T.Tape() as tape:
        loss = sample_loss(params, cfg, G, U)
    grads = tape.backward(loss)
    pick = split_rng(3)
    for layer in params:
        for name, p in layer.items():
            analytic = grads[p]
            flat = p.data.reshape(-1)
            for i in pick.choice(flat.size, size=3, replace=False):
                units = (1.0, 1j) if p.is_complex else (1.0,)
                for unit in units:
                    orig = flat[i]
                    flat[i] = orig + 1e-6 * unit
                    up = sample_loss(params, cfg, G, U).data.item()
                    flat[i] = orig - 1e-6 * unit
                    down = sample_loss(params, cfg, G, U).data.item()
                    flat[i] = orig
                    fd = (up - down) / 2e-6
                    an = analytic.reshape(-1)[i]
                    an = an.real if unit == 1.0 else an.imag
                    assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8), (name, i)


def test_zero_epochs_reports_initial_loss_only(smoke_data):
    G, U = smoke_data
    cfg = ModelConfig(n=7, d=4, d_k=4, modes=(4, 4))
    params = M.init_params(cfg, split_rng(0))
    report, state = fit(params, cfg, G, U, TrainConfig(epochs=0))
    assert report.losses == [] and report.epochs_run == 0
    assert 0 < report.initial_loss and report.final_loss == report.initial_loss
    assert state.step == 0


def test_smoke_training_reduces_loss_tenfold(smoke_data):
    G, U = smoke_data
    est = NIPSOperator(n_layers=3, d_k=16, modes=None, learning_rate=2e-2, epochs=200,
                       batch_size=4, lr_decay_every=0).fit(G, U)
    rep = est.report_
    assert len(rep.losses) == 200
    assert rep.final_loss < 0.1 * rep.initial_loss


def test_identical_runs_are_identical(smoke_data):
    G, U = smoke_data
    with T.single_threaded():
        a = NIPSOperator(d_k=4, modes=None, epochs=3, batch_size=4).fit(G, U)
        b = NIPSOperator(d_k=4, modes=None, epochs=3, batch_size=4).fit(G, U)
    assert a.report_.losses == b.report_.losses
    for x, y in zip(M.param_list(a.params_), M.param_list(b.params_)):
        assert x.data.tobytes() == y.data.tobytes()


def test_resume_from_checkpoint_is_bit_exact(tmp_path, smoke_data):
    G, U = smoke_data
    kw = dict(d_k=4, modes=None, epochs=6, batch_size=3, lr_decay_every=2)
    with T.single_threaded():
        full = NIPSOperator(**kw).fit(G, U)
        saved = {}

        def keep(est, epoch):
            if epoch == 3:
                est.save(tmp_path / "e3.ckpt")
                saved["epoch"] = epoch

        NIPSOperator(**kw).fit(G, U, checkpoint_fn=keep, checkpoint_every=1)
        resumed = NIPSOperator.load(tmp_path / "e3.ckpt").set_params(warm_start=True).fit(G, U)
    assert saved["epoch"] == 3
    assert resumed.report_.losses == full.report_.losses
    for x, y in zip(M.param_list(full.params_), M.param_list(resumed.params_)):
        assert x.data.tobytes() == y.data.tobytes()
    assert resumed.adam_.step == full.adam_.step


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostic(smoke_data):
    G, U = smoke_data
    cfg = ModelConfig(n=7, d=4, d_k=4, modes=(4, 4))
    params = M.init_params(cfg, split_rng(0))
    params[0]["W_Q"].data[:] = np.inf
    with pytest.raises(M.TrainingDiagnosticError):
        fit(params, cfg, G, U, TrainConfig(epochs=1))


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-3, lr_decay=0.5, lr_decay_every=100)
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(99) == 1e-3
    assert cfg.lr_at(100) == 5e-4 and cfg.lr_at(250) == 2.5e-4
    assert TrainConfig(lr_decay_every=0).lr_at(10_000) == 1e-3
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_report_csv_and_summary(tmp_path):
    rep = TrainingReport(initial_loss=1.0, losses=[0.5, 0.25], times=[0.1, 0.2],
                         peak_bytes=[10, 20], epochs_run=2)
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,time_s,peak_bytes"
    assert lines[2].startswith("1,0.5,")
    assert rep.summary()["max_peak_bytes"] == 20
