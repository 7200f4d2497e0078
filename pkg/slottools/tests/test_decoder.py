import numpy as np
import numpy.testing as npt
import pytest

from .. import autodiff as ad
from .. import decoder


@pytest.fixture()
def setup():
    rng = np.random.default_rng(0)
    params = decoder.DecoderParams(feature_dim=8, slot_dim=6, n_positions=7, rng=rng, n_blocks=2, n_heads=2)
    x = rng.standard_normal((7, 8))
    slots = ad.constant(rng.standard_normal((3, 6)))
    return params, x, slots


def test_causal_mask():
    mask = decoder.causal_mask(2, 3).values
    assert mask.shape == (2, 3, 3)
    assert np.isneginf(mask[1, 0, 2]) and mask[1, 2, 0] == 0.0


def test_heads_must_divide_width():
    with pytest.raises(decoder.DecoderError):
        decoder.MultiHeadAttention(6, 4, np.random.default_rng(0))


@pytest.mark.parametrize("changed", [6, 4, 2])
def test_prediction_depends_only_on_earlier_positions(setup, changed):
    params, x, slots = setup
    before = decoder.decode(params, x, slots).recon.values
    perturbed = x.copy()
    perturbed[changed] += 3.0
    after = decoder.decode(params, perturbed, slots).recon.values
    npt.assert_allclose(after[: changed + 1], before[: changed + 1], rtol=0, atol=1e-12)
    if changed < 6:
        assert not np.allclose(after[changed + 1 :], before[changed + 1 :])


def test_cross_attention_sums_over_slots(setup):
    params, x, slots = setup
    out = decoder.decode(params, x, slots)
    assert len(out.cross_attn) == 2
    assert out.cross_attn[0].shape == (2, 3, 7)
    npt.assert_allclose(out.cross_attn[1].sum(axis=1), np.ones((2, 7)))


@pytest.mark.parametrize("last_block_only", [False, True])
def test_extract_masks(setup, last_block_only):
    params, x, slots = setup
    out = decoder.decode(params, x, slots)
    soft, labels = decoder.extract_masks(out, last_block_only=last_block_only)
    assert soft.shape == (3, 7)
    npt.assert_allclose(soft.sum(axis=0), np.ones(7))
    npt.assert_array_equal(labels, np.argmax(soft, axis=0))
    expected = out.cross_attn[-1].mean(axis=0) if last_block_only else np.mean([m.mean(axis=0) for m in out.cross_attn], axis=0)
    npt.assert_allclose(soft, expected)


def test_extract_masks_without_blocks():
    rng = np.random.default_rng(0)
    params = decoder.DecoderParams(4, 4, 5, rng, n_blocks=0, n_heads=2)
    out = decoder.decode(params, rng.standard_normal((5, 4)), ad.constant(np.zeros((2, 4))))
    assert out.recon.shape == (5, 4)
    with pytest.raises(decoder.DecoderError):
        decoder.extract_masks(out)


def test_single_position_sequence():
    rng = np.random.default_rng(1)
    params = decoder.DecoderParams(4, 4, 1, rng, n_blocks=1, n_heads=1)
    out = decoder.decode(params, rng.standard_normal((1, 4)), ad.constant(rng.standard_normal((2, 4))))
    assert out.recon.shape == (1, 4)


@pytest.mark.parametrize("shape", [(0, 8), (6, 8), (7, 5)])
def test_decode_shape_errors(setup, shape):
    params, _, slots = setup
    with pytest.raises(decoder.DecoderError):
        decoder.decode(params, np.zeros(shape), slots)


def test_decoder_gradcheck():
    rng = np.random.default_rng(2)
    params = decoder.DecoderParams(4, 3, 4, rng, n_blocks=1, n_heads=2)
    params.assign_names()
    x = rng.standard_normal((4, 4))
    slots = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="slots")
    chosen = [slots, params.blocks[0].cross_attn.q_proj.weight, params.bos, params.slot_proj.weight]

    def f():
        return ad.mse(decoder.decode(params, x, slots).recon, ad.constant(x))

    assert max(ad.gradcheck(f, chosen, max_entries=6).values()) < 1e-5


def test_single_slot_masks_are_all_ones():
    rng = np.random.default_rng(4)
    params = decoder.DecoderParams(8, 6, 7, rng, n_blocks=2, n_heads=2)
    out = decoder.decode(params, rng.standard_normal((7, 8)), ad.constant(rng.standard_normal((1, 6))))
    soft, labels = decoder.extract_masks(out)
    npt.assert_allclose(soft, np.ones((1, 7)))
    npt.assert_array_equal(labels, np.zeros(7))
