import numpy as np
import numpy.testing as npt
import pytest

from .. import autodiff as ad
from .. import layers
from .. import slot_attention as sa
from .. import top_down


@pytest.fixture()
def codebook():
    book = top_down.Codebook(4, 2, np.random.default_rng(0))
    book.codes.values = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    return book


def test_codebook_size_must_exceed_one():
    with pytest.raises(top_down.TopDownError):
        top_down.Codebook(1, 4, np.random.default_rng(0))


def test_nearest_codes_ties_go_to_lowest_index(codebook):
    slots = np.array([[0.5, 0.0], [0.9, 0.1], [4.0, 4.0]])
    npt.assert_array_equal(top_down.nearest_codes(slots, codebook.codes.values), [0, 1, 3])


def test_quantize_values_and_gradient_routes(codebook):
    slots = ad.Tensor(np.array([[0.1, 0.9], [0.8, -0.1]]), requires_grad=True)
    weights = np.array([[1.0, 2.0], [3.0, 4.0]])
    with ad.Tape():
        q = top_down.quantize(slots, codebook)
        recon = ad.mean(ad.mul(q.codes_selected, ad.constant(weights)))
    npt.assert_array_equal(q.indices, [2, 1])
    npt.assert_array_equal(q.codes_selected.values, codebook.codes.values[[2, 1]])
    ad.backward(recon)
    npt.assert_allclose(slots.grad, weights / 4)
    npt.assert_array_equal(codebook.codes.grad, np.zeros((4, 2)))


def test_vq_loss_reaches_codes_only(codebook):
    slots = ad.Tensor(np.array([[0.1, 0.9]]), requires_grad=True)
    with ad.Tape():
        q = top_down.quantize(slots, codebook)
        loss = ad.mse(q.codes_for_loss, ad.stop_gradient(slots))
    ad.backward(loss)
    npt.assert_array_equal(slots.grad, np.zeros((1, 2)))
    npt.assert_allclose(codebook.codes.grad[2], 2 * (codebook.codes.values[2] - [0.1, 0.9]) / 2)
    npt.assert_array_equal(codebook.codes.grad[[0, 1, 3]], np.zeros((3, 2)))


def test_quantize_dimension_mismatch(codebook):
    with pytest.raises(top_down.TopDownError):
        top_down.quantize(ad.constant(np.zeros((2, 3))), codebook)


def test_usage_counts(codebook):
    codebook.record_usage([0, 0, 3])
    npt.assert_array_equal(codebook.usage_counts, [2, 0, 0, 1])
    codebook.reset_usage()
    assert codebook.usage_counts.sum() == 0


def test_spatial_modulation_rows_have_unit_mean():
    a = np.random.default_rng(1).dirichlet(np.ones(3), size=7).T
    m_s = top_down.spatial_modulation(ad.constant(a)).values
    npt.assert_allclose(m_s.mean(axis=1), np.ones(3))
    npt.assert_allclose(m_s - a, np.broadcast_to(1 - a.mean(axis=1, keepdims=True), a.shape))


def test_uniform_attention_gives_unit_spatial_modulation():
    m_s = top_down.spatial_modulation(ad.constant(np.full((2, 5), 0.5)))
    npt.assert_array_equal(m_s.values, np.ones((2, 5)))


def test_channel_modulation_identity_init():
    mlp = layers.MLP(3, 3, 3, np.random.default_rng(0))
    layers.fill_(mlp, 0.0, names=("fc2.weight",))
    layers.fill_(mlp, 1.0, names=("fc2.bias",))
    m_c = top_down.channel_modulation(ad.constant(np.random.default_rng(2).standard_normal((4, 3))), mlp)
    npt.assert_array_equal(m_c.values, np.ones((4, 3)))


def test_modulation_map_is_rank_one_per_slot():
    rng = np.random.default_rng(3)
    m_c, m_s = rng.standard_normal((2, 4)), rng.standard_normal((2, 5))
    modulation = top_down.build_modulation_map(ad.constant(m_c), ad.constant(m_s))
    assert modulation.M.shape == (2, 5, 4)
    npt.assert_allclose(modulation.M.values[1], np.outer(m_s[1], m_c[1]))
    assert np.linalg.matrix_rank(modulation.M.values[0]) == 1


def test_modulation_map_slot_mismatch():
    with pytest.raises(top_down.TopDownError):
        top_down.build_modulation_map(ad.constant(np.ones((2, 4))), ad.constant(np.ones((3, 5))))


def test_run_modulated_checks_shape():
    rng = np.random.default_rng(0)
    params = sa.SlotAttentionParams(3, 4, 4, rng)
    inputs = sa.encode_inputs(params, rng.standard_normal((5, 3)))
    initial = sa.init_slots(sa.SlotInitDistribution(4), 2, rng=0)
    with pytest.raises(top_down.TopDownError):
        top_down.run_modulated(params, inputs, initial, ad.ones((2, 4, 4)))


@pytest.mark.parametrize(
    "counts,expected",
    [
        ([5, 0, 0, 0], 1.0),
        ([3, 3, 3, 3], 4.0),
        ([1, 1, 0, 0], 2.0),
    ],
)
def test_perplexity(counts, expected):
    assert top_down.perplexity(counts) == pytest.approx(expected)


def test_perplexity_needs_usage():
    with pytest.raises(top_down.TopDownError):
        top_down.perplexity([0, 0, 0])


def test_codebook_report(codebook):
    report = top_down.codebook_report(codebook, usage_counts=[1, 2, 3, 4])
    assert list(report.columns) == ["code_index", "usage_count", "nearest_other_distance"]
    npt.assert_allclose(report["nearest_other_distance"].values, [1.0, 1.0, 1.0, np.sqrt(41.0)])
    npt.assert_array_equal(report["usage_count"].values, [1, 2, 3, 4])


def test_spatial_modulation_hand_example():
    m_s = top_down.spatial_modulation(ad.constant(np.array([[0.5, 0.3, 0.2]])))
    npt.assert_allclose(m_s.values, [[7 / 6, 29 / 30, 13 / 15]])


def test_quantize_hand_example():
    book = top_down.Codebook(2, 2, np.random.default_rng(0))
    book.codes.values = np.array([[0.0, 0.0], [1.0, 1.0]])
    q = top_down.quantize(ad.constant(np.array([[0.9, 1.2]])), book)
    npt.assert_array_equal(q.indices, [1])
    npt.assert_array_equal(q.codes_selected.values, [[1.0, 1.0]])


def test_perplexity_of_skewed_usage():
    assert top_down.perplexity([2, 1, 1]) == pytest.approx(2 ** 1.5)


@pytest.mark.parametrize("seed", range(5))
def test_quantize_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    book = top_down.Codebook(7, 3, rng)
    first = top_down.quantize(ad.constant(rng.standard_normal((5, 3))), book)
    second = top_down.quantize(first.codes_selected, book)
    npt.assert_array_equal(second.indices, first.indices)
    npt.assert_array_equal(second.codes_selected.values, first.codes_selected.values)


def test_straight_through_matches_frozen_offset_surrogate():
    rng = np.random.default_rng(3)
    book = top_down.Codebook(6, 4, rng)
    slots = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with ad.Tape():
        q = top_down.quantize(slots, book)
        loss = ad.mean(ad.mul(q.codes_selected, q.codes_selected))
    ad.backward(loss)
    offset = ad.constant(q.codes_selected.values - slots.values)

    def surrogate():
        shifted = ad.add(slots, offset)
        return ad.mean(ad.mul(shifted, shifted))

    npt.assert_allclose(slots.grad, ad.numerical_gradient(surrogate, slots), rtol=1e-6, atol=1e-9)
    npt.assert_allclose(slots.grad, 2 * q.codes_selected.values / 12)
