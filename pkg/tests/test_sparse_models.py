import math

import numpy as np
import pytest
import torch
from scipy import stats

from tailfuse.errors import NumericError, ShapeError
from tailfuse.sparse_models import (
    Classifier,
    Decoder,
    Student,
    build,
    channelwise_softmax,
    classifier_forward,
    decoder_forward,
    load_params,
    sample_onehot,
    save_params,
    student_forward,
    student_logits,
)


def test_softmax_zero_logits_uniform():
    out = channelwise_softmax(np.zeros((3, 3, 4)))
    np.testing.assert_allclose(out, 0.25)


def test_softmax_hand_value():
    # exp(ln 2) = 2, others 1: (2, 1, 1, 1) / 5
    out = channelwise_softmax(np.array([[[math.log(2), 0, 0, 0]]]))
    np.testing.assert_allclose(out[0, 0], [0.4, 0.2, 0.2, 0.2], atol=1e-12)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(4, 4, 6))
    shifted = x.copy()
    shifted[1, 2] += 123.0
    np.testing.assert_allclose(channelwise_softmax(x), channelwise_softmax(shifted), atol=1e-12)


def test_softmax_large_logits_stable():
    out = channelwise_softmax(np.array([[[1000.0, 999.0, -1000.0]]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(-1), 1.0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    x = np.zeros((2, 2, 3))
    x[0, 0, 1] = bad
    with pytest.raises(NumericError):
        channelwise_softmax(x)


# ---------------------------------------------------------------------------


def test_onehot_degenerate_distribution(rng):
    idx = rng.integers(0, 5, size=(6, 6))
    p = np.eye(5)[idx]
    for seed in range(5):
        np.testing.assert_array_equal(sample_onehot(p, seed), p)


def test_onehot_contract_and_determinism(rng):
    p = channelwise_softmax(rng.normal(size=(8, 8, 16)))
    a, b = sample_onehot(p, 3), sample_onehot(p, 3)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a.sum(-1), 1)


def test_onehot_uniform_frequencies():
    # Monte Carlo: 10k independent draws at one coordinate of a uniform C'=16 simplex
    p = np.full((10000, 1, 16), 1 / 16)
    draws = sample_onehot(p, 2024)
    freq = draws.reshape(-1, 16).mean(0)
    assert np.all(np.abs(freq - 1 / 16) <= 0.01)


def test_onehot_chi_square(rng):
    p_coord = channelwise_softmax(rng.normal(size=8))
    p = np.broadcast_to(p_coord, (10000, 1, 8))
    counts = sample_onehot(p, 99).reshape(-1, 8).sum(0)
    _, pval = stats.chisquare(counts, 10000 * p_coord)
    assert pval > 0.001


def test_onehot_temperature_sharpens():
    p = np.broadcast_to(np.array([0.6, 0.3, 0.1]), (20000, 1, 3))
    cold = sample_onehot(p, 1, temperature=0.25).reshape(-1, 3).mean(0)
    assert cold[0] > 0.9
    # p ** 4 normalised: 0.1296 / (0.1296 + 0.0081 + 0.0001)
    assert abs(cold[0] - 0.1296 / 0.1378) < 0.01


# ---------------------------------------------------------------------------


@pytest.fixture
def nets():
    return (
        build(Student.arch, 4, 16, 32, seed=1),
        build(Decoder.arch, 16, 4, 32, seed=2),
        build(Classifier.arch, 16, 6, 32, seed=3),
    )


def test_student_shape_and_simplex(nets, rng):
    student = nets[0]
    z = rng.normal(size=(8, 8, 4)).astype(np.float32)
    out = student_forward(student, z)
    assert out.shape == (8, 8, 16)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)
    assert out.min() >= 0


def test_student_is_softmax_of_logits(nets, rng):
    z = rng.normal(size=(8, 8, 4)).astype(np.float32)
    np.testing.assert_allclose(student_forward(nets[0], z), channelwise_softmax(student_logits(nets[0], z)), atol=1e-6)


def test_student_pure(nets, rng):
    z = rng.normal(size=(8, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(student_forward(nets[0], z), student_forward(nets[0], z))


def test_student_dim_mismatch(nets):
    with pytest.raises(ShapeError):
        student_forward(nets[0], np.zeros((8, 8, 3)))


def test_decoder_shape_and_purity(nets, rng):
    zs = channelwise_softmax(rng.normal(size=(8, 8, 16)))
    out = decoder_forward(nets[1], zs)
    assert out.shape == (8, 8, 4)
    np.testing.assert_array_equal(out, decoder_forward(nets[1], zs))
    with pytest.raises(ShapeError):
        decoder_forward(nets[1], np.zeros((8, 8, 4)))


class LinearDecoder(torch.nn.Module):
    """Test double: per-coordinate linear map C' -> C with known weights."""

    def __init__(self, weights):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.as_tensor(weights, dtype=torch.float64))

    def forward(self, zs):
        return zs @ self.weight.T


def test_linear_decoder_double_returns_weight_column():
    weights = np.arange(12, dtype=np.float64).reshape(3, 4)  # (C, C')
    onehot = np.zeros((2, 2, 4))
    onehot[..., 2] = 1
    out = decoder_forward(LinearDecoder(weights), onehot)
    np.testing.assert_array_equal(out[1, 1], [2.0, 6.0, 10.0])


def test_classifier_scores_and_activations(nets, rng):
    zs = channelwise_softmax(rng.normal(size=(5, 8, 8, 16)))
    out = classifier_forward(nets[2], zs)
    assert out.scores.shape == (5, 6)
    assert np.all((out.scores >= 0) & (out.scores <= 1))
    assert out.activations.shape == (5, 8, 8, 32)


def test_classifier_zero_head_half(nets, rng):
    clf = nets[2]
    with torch.no_grad():
        clf.head.weight.zero_()
        clf.head.bias.zero_()
    out = classifier_forward(clf, channelwise_softmax(rng.normal(size=(8, 8, 16))))
    np.testing.assert_allclose(out.scores, 0.5)


def test_init_is_seeded_and_bounded():
    a = build(Student.arch, 4, 16, 32, seed=5)
    b = build(Student.arch, 4, 16, 32, seed=5)
    c = build(Student.arch, 4, 16, 32, seed=6)
    for (name, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb)
        assert not torch.equal(pa, pc)
    first = a.body[0]
    bound = 1 / math.sqrt(4 * 9)
    assert first.weight.abs().max() <= bound and first.bias.abs().max() <= bound


def test_checkpoint_roundtrip(tmp_path, nets, rng):
    net = nets[2]
    save_params(net, tmp_path / "clf", generation=2)
    back, meta = load_params(tmp_path / "clf")
    assert meta["architecture"] == Classifier.arch and meta["generation"] == 2
    zs = channelwise_softmax(rng.normal(size=(8, 8, 16)))
    np.testing.assert_array_equal(classifier_forward(net, zs).scores, classifier_forward(back, zs).scores)
