import math

import numpy as np
import pytest

from sdrelab import diffcore as dc
from sdrelab import losses, optim, tandem
from sdrelab.diffcore import DomainError, ShapeError, Tensor
from sdrelab.nets import ActivationKind, LSTMIntegrator, PoolingKind, TransformerIntegrator
from sdrelab.tandem import LLRMatrixTrajectory, PosteriorTrajectoryPair


def flat_trajectory(value, steps=4, k=2, n=1, horizon=None):
    values = np.zeros((steps, k, k))
    values[:, :, :] = value
    values[:, range(k), range(k)] = 0.0
    values = np.triu(values) - np.triu(values).transpose(0, 2, 1)
    return LLRMatrixTrajectory(values=values, markov_order=n, horizon=horizon or (n + steps), start_t=n + 1)


def test_lsel_all_zero_llrs_two_classes():
    trajs = [flat_trajectory(0.0, k=2) for _ in range(3)]
    assert losses.lsel(trajs, [0, 1, 0]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_lsel_all_zero_llrs_three_classes():
    trajs = [flat_trajectory(0.0, k=3) for _ in range(2)]
    assert losses.lsel(trajs, [2, 1]) == pytest.approx(math.log(3.0), abs=1e-15)


def test_lsel_confident_correct_llrs_vanish():
    # lambda_{y,l} = +40 for every other class
    values = np.zeros((3, 2, 2))
    values[:, 1, 0] = 40.0
    values[:, 0, 1] = -40.0
    traj = LLRMatrixTrajectory(values=values, markov_order=0, horizon=3, start_t=1)
    assert losses.lsel([traj], [1]) < 1e-15


def test_lsel_is_nonnegative_on_random_trajectories():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = rng.normal(scale=3.0, size=(1, 5, 3))
        traj = LLRMatrixTrajectory(
            values=tandem.pairwise_from_scores(scores[0]), markov_order=0, horizon=5, start_t=1
        )
        assert losses.lsel([traj], [int(rng.integers(3))]) >= 0.0


def test_lsel_invariant_under_relabeling_of_wrong_classes():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(6, 4))
    values = tandem.pairwise_from_scores(scores)
    label = 1
    perm = [0, 1, 3, 2]  # permutes the non-true classes only
    permuted = values[:, perm][:, :, perm]
    t1 = LLRMatrixTrajectory(values=values, markov_order=0, horizon=6, start_t=1)
    t2 = LLRMatrixTrajectory(values=permuted, markov_order=0, horizon=6, start_t=1)
    assert losses.lsel([t1], [label]) == pytest.approx(losses.lsel([t2], [label]), abs=1e-14)


def test_lsel_rejects_empty_batch():
    with pytest.raises(ShapeError):
        losses.lsel([], [])


def pair_from_posteriors(full, short, n, horizon):
    k = np.asarray(full).shape[-1]
    return PosteriorTrajectoryPair(
        full=np.asarray(full), short=np.asarray(short).reshape(-1, k),
        priors=np.full(k, 1.0 / k), markov_order=n, horizon=horizon,
    )


def test_mce_uniform_posteriors():
    pair = pair_from_posteriors([[0.5, 0.5]] * 3, [[0.5, 0.5]] * 2, n=1, horizon=4)
    assert losses.mce([pair], [0]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_mce_perfect_posteriors():
    eps = 1e-30  # strictly positive but negligible
    pair = pair_from_posteriors([[1.0 - eps, eps]] * 2, [[1.0 - eps, eps]], n=1, horizon=3)
    assert losses.mce([pair], [0]) == pytest.approx(0.0, abs=1e-12)


def test_mce_two_sample_example():
    a = pair_from_posteriors([[0.5, 0.5]], np.empty((0, 2)), n=0, horizon=1)
    b = pair_from_posteriors([[0.25, 0.75]], np.empty((0, 2)), n=0, horizon=1)
    expected = (math.log(2.0) + math.log(4.0 / 3.0)) / 2.0
    assert losses.mce([a, b], [0, 1]) == pytest.approx(expected, abs=1e-14)


def test_mce_rejects_empty_batch():
    with pytest.raises(ShapeError):
        losses.mce([], [])


def test_combine_endpoints_and_midpoint():
    assert losses.combine(2.0, 4.0, 1.0) == 2.0
    assert losses.combine(2.0, 4.0, 0.0) == 4.0
    assert losses.combine(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(DomainError):
        losses.combine(1.0, 1.0, 1.5)
    with pytest.raises(DomainError):
        losses.combine(1.0, 1.0, -0.1)


def test_loss_breakdown_invariant():
    br = losses.LossBreakdown.build(2.0, 4.0, 0.25)
    assert br.total == pytest.approx(br.llre_ratio * br.lsel + (1 - br.llre_ratio) * br.mce)
    assert np.isfinite([br.lsel, br.mce, br.total]).all()


def _tiny_models():
    rng = np.random.default_rng(7)
    act = ActivationKind.b2bsqrt()
    yield "lstm-b2bsqrt", LSTMIntegrator(
        input_size=4, hidden_size=3, num_classes=2,
        cell_activation=act, output_activation=act, rng=rng,
    )
    yield "lstm-tanh", LSTMIntegrator(input_size=4, hidden_size=3, num_classes=2, rng=rng)
    for pooling in PoolingKind:
        yield f"transformer-{pooling.value}", TransformerIntegrator(
            input_size=4, markov_order=1, model_dim=4, num_heads=2, ff_dim=8,
            num_classes=2, pooling=pooling, rng=rng,
        )


@pytest.mark.parametrize("name,model", list(_tiny_models()), ids=lambda m: m if isinstance(m, str) else "")
def test_full_loss_gradient_through_trajectory_and_network(name, model):
    # end-to-end: LSEL of the TANDEM trajectory of each integrator,
    # T=5, N=1, K=2, d_feat=4, two samples
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(2, 5, 4))
    labels = np.array([0, 1])
    params = list(model.parameters().values())

    def f(*_):
        llr = optim.trajectory_graph(model, frames, markov_order=1, extended=True)
        return losses.lsel_graph(llr, labels)

    err = dc.finite_diff_check(f, params, eps=1e-3)
    assert err < 1e-4, f"{name}: {err:.3e}"


def test_mce_gradient_through_network():
    model = LSTMIntegrator(input_size=4, hidden_size=3, num_classes=2, rng=np.random.default_rng(5))
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(2, 5, 4))
    labels = np.array([1, 0])
    params = list(model.parameters().values())

    def f(*_):
        _, families = optim.trajectory_graph(model, frames, markov_order=1, extended=True, with_families=True)
        return losses.mce_graph(families, labels)

    assert dc.finite_diff_check(f, params, eps=1e-3) < 1e-4
