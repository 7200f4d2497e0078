import numpy as np
import numpy.testing as npt
import pytest

from .. import autodiff as ad
from .. import layers
from .. import slot_attention as sa
from .. import top_down


@pytest.fixture()
def small():
    rng = np.random.default_rng(0)
    params = sa.SlotAttentionParams(feature_dim=5, dim=8, mlp_hidden=12, rng=rng)
    params.assign_names()
    x = rng.standard_normal((10, 5))
    initial = sa.init_slots(sa.SlotInitDistribution(8), 3, rng=1)
    return params, x, initial


def test_module_names_are_dotted_paths(small):
    params, _, _ = small
    names = list(params.parameters().keys())
    assert "gru.weight_ih" in names
    assert "update_mlp.fc2.bias" in names
    assert "q_proj.bias" not in names
    assert params.parameters()["update_mlp.fc1.weight"].name == "update_mlp.fc1.weight"


def test_mlp_invalid_activation():
    with pytest.raises(ValueError):
        layers.MLP(2, 3, 2, np.random.default_rng(0), activation="swish")


def test_fill_by_suffix():
    mlp = layers.MLP(2, 3, 2, np.random.default_rng(0))
    layers.fill_(mlp, 1.0, names=("fc2.bias",))
    npt.assert_array_equal(mlp.fc2.bias.values, np.ones(2))
    assert not np.all(mlp.fc1.weight.values == 1.0)


def test_init_slots_reparameterisation():
    dist = sa.SlotInitDistribution(4, init_sigma=2.0)
    dist.mu.values = np.arange(4.0)
    state = sa.init_slots(dist, 5, rng=3)
    noise = np.random.default_rng(3).standard_normal((5, 4))
    npt.assert_allclose(state.slots.values, np.arange(4.0) + 2.0 * noise)
    assert state.iteration == 0 and state.n_slots == 5


def test_init_slots_requires_a_slot():
    with pytest.raises(sa.SlotAttentionError):
        sa.init_slots(sa.SlotInitDistribution(4), 0)


def test_attention_normalisation(small):
    params, x, initial = small
    attention, updates = sa.attention_step(params, sa.encode_inputs(params, x), initial.slots)
    npt.assert_allclose(attention.A.values.sum(axis=0), np.ones(10))
    npt.assert_allclose(attention.A_tilde.values.sum(axis=1), np.ones(3))
    assert updates.shape == (3, 8)


def test_single_slot_attends_uniformly(small):
    params, x, _ = small
    initial = sa.init_slots(sa.SlotInitDistribution(8), 1, rng=0)
    inputs = sa.encode_inputs(params, x)
    attention, updates = sa.attention_step(params, inputs, initial.slots)
    npt.assert_allclose(attention.A.values, np.ones((1, 10)))
    npt.assert_allclose(updates.values[0], inputs.values.values.mean(axis=0))


def test_single_position(small):
    params, x, initial = small
    state, attention = sa.run_bottom_up(params, sa.encode_inputs(params, x[:1]), initial, n_iter=2)
    npt.assert_allclose(attention.A_tilde.values, np.ones((3, 1)))
    assert state.iteration == 2


def test_encode_rejects_empty_grid(small):
    params, _, _ = small
    with pytest.raises(sa.SlotAttentionError):
        sa.encode_inputs(params, np.zeros((0, 5)))


def test_iterate_requires_an_iteration(small):
    params, x, initial = small
    with pytest.raises(sa.SlotAttentionError):
        sa.iterate(params, sa.encode_inputs(params, x), initial, 0)


def test_unit_modulation_reproduces_bottom_up(small):
    params, x, initial = small
    inputs = sa.encode_inputs(params, x)
    bottom_up, attn_bottom_up = sa.run_bottom_up(params, inputs, initial, n_iter=3)
    ones = ad.ones((3, 10, 8))
    modulated, attn_modulated = top_down.run_modulated(params, inputs, initial, ones, n_iter=3)
    npt.assert_array_equal(modulated.slots.values, bottom_up.slots.values)
    npt.assert_array_equal(attn_modulated.A.values, attn_bottom_up.A.values)
    assert modulated.pass_kind == sa.MODULATED and bottom_up.pass_kind == sa.BOTTOM_UP


def test_slot_attention_gradcheck():
    rng = np.random.default_rng(5)
    params = sa.SlotAttentionParams(feature_dim=3, dim=4, mlp_hidden=6, rng=rng)
    params.assign_names()
    x = rng.standard_normal((6, 3))
    dist = sa.SlotInitDistribution(4)
    chosen = [params.q_proj.weight, params.gru.weight_hh, params.update_mlp.fc1.weight, dist.mu]

    def f():
        initial = sa.init_slots(dist, 2, rng=7)
        state, _ = sa.run_bottom_up(params, sa.encode_inputs(params, x), initial, n_iter=2)
        return ad.mean(ad.mul(state.slots, state.slots))

    errors = ad.gradcheck(f, chosen, max_entries=6)
    assert max(errors.values()) < 1e-5


def test_zero_modulation_silences_a_slot(small):
    params, x, initial = small
    inputs = sa.encode_inputs(params, x)
    M = np.ones((3, 10, 8))
    M[1] = 0.0
    modulated, _ = top_down.run_modulated(params, inputs, initial, ad.constant(M), n_iter=3)
    state = sa.SlotState(slots=ad.slice_axis(initial.slots, 1, 2, axis=0), iteration=0)
    for _ in range(3):
        state = sa.slot_update(params, ad.constant(np.zeros((1, 8))), state)
    npt.assert_allclose(modulated.slots.values[1], state.slots.values[0], rtol=0, atol=1e-12)


def test_init_slots_sample_moments():
    dist = sa.SlotInitDistribution(3, init_sigma=0.5)
    dist.mu.values = np.array([1.0, -2.0, 0.5])
    samples = sa.init_slots(dist, 20000, rng=0).slots.values
    npt.assert_allclose(samples.mean(axis=0), dist.mu.values, atol=0.02)
    npt.assert_allclose(samples.std(axis=0), np.full(3, 0.5), atol=0.02)


def test_init_slots_collapse_to_mean():
    dist = sa.SlotInitDistribution(4)
    dist.mu.values = np.arange(4.0)
    dist.log_sigma.values = np.full(4, -np.inf)
    state = sa.init_slots(dist, 6, rng=2)
    npt.assert_array_equal(state.slots.values, np.tile(np.arange(4.0), (6, 1)))
