import os
from functools import reduce

import numpy as np
import numpy.testing as npt
import pytest

from .. import autodiff as ad
from .. import training
from ..config import ABLATIONS
from ..decoder import decode
from ..slot_attention import encode_inputs
from ..slot_attention import init_slots
from ..slot_attention import run_bottom_up
from ..toy_data import dataset_stream
from ..toy_data import eval_split
from ..toy_data import GeneratedScenes
from ..toy_data import TRAIN


@pytest.fixture()
def scene(tiny_config):
    return GeneratedScenes(tiny_config.scene_spec())[0]


@pytest.mark.parametrize("ablation", list(ABLATIONS.keys()))
def test_forward_every_ablation(tiny_config, scene, ablation):
    config = tiny_config.with_ablation(ablation)
    model = training.Model(config)
    out = training.forward_full(model, scene.features, 0)
    assert out.decoded.recon.shape == (16, 4)
    assert out.modulation.M.shape == (3, 16, 6)
    assert (model.codebook is not None) == config.use_vq
    assert (model.channel_mlp is not None) == config.use_m_c
    assert (out.quantized is not None) == config.use_vq


def test_ablations_share_initial_weights(tiny_config):
    full = training.Model(tiny_config.with_ablation("full")).parameters()
    baseline = training.Model(tiny_config.with_ablation("baseline")).parameters()
    for name, p in baseline.items():
        npt.assert_array_equal(p.values, full[name].values)


def test_forward_rejects_wrong_grid(tiny_config):
    model = training.Model(tiny_config)
    with pytest.raises(training.TrainingError):
        training.forward_full(model, np.zeros((9, 4)), 0)


def test_baseline_reduces_to_vanilla_slot_attention(tiny_config, scene):
    model = training.Model(tiny_config.with_ablation("baseline"))
    params = list(model.parameters().values())
    with ad.Tape() as tape:
        out = training.forward_full(model, scene.features, 3)
        loss = training.compute_losses(out.decoded.recon, scene.features, out.slots_bottom_up.slots).total
    tape.backward(loss)
    baseline_grads = [p.grad.copy() for p in params]
    model.zero_grad()
    with ad.Tape() as tape:
        inputs = encode_inputs(model.slot_attention, scene.features)
        slots, _ = run_bottom_up(model.slot_attention, inputs, init_slots(model.slot_init, 3, 3), 2)
        recon = decode(model.decoder, scene.features, slots.slots).recon
        vanilla = ad.mse(recon, ad.constant(scene.features))
    tape.backward(vanilla)
    npt.assert_array_equal(out.slots.slots.values, out.slots_bottom_up.slots.values)
    npt.assert_array_equal(recon.values, out.decoded.recon.values)
    for p, g in zip(params, baseline_grads):
        npt.assert_array_equal(p.grad, g, err_msg=p.name)


def test_baseline_training_trace_matches_single_pass(tiny_config):
    config = tiny_config.with_ablation("baseline").replace(steps=3)
    result = training.train(config, final_eval=False, prefetch=False, verbose=False)

    model, rng = training.Model(config), training.training_rng(config)
    params = list(model.parameters().values())
    stream = dataset_stream(GeneratedScenes(config.scene_spec(), split=TRAIN), batch_size=config.batch_size)
    recon_trace = []
    for _ in range(config.steps):
        batch = next(stream)
        with ad.Tape() as tape:
            losses = []
            for scene in batch:
                inputs = encode_inputs(model.slot_attention, scene.features)
                initial = init_slots(model.slot_init, config.n_slots, rng)
                slots, _ = run_bottom_up(model.slot_attention, inputs, initial, config.n_iter)
                recon = decode(model.decoder, scene.features, slots.slots).recon
                losses.append(training.compute_losses(recon, scene.features, slots.slots))
            total = ad.scale(reduce(ad.add, [l.total for l in losses]), 1.0 / len(batch))
        tape.backward(total)
        ad.clip_grad_norm(params, config.clip_norm)
        ad.adam_step(params, lr=config.lr)
        recon_trace.append(float(np.mean([l.recon.item() for l in losses])))

    npt.assert_array_equal(result.loss_log["L_recon"].values, recon_trace)
    for name, p in model.named_parameters():
        npt.assert_array_equal(result.model.parameters()[name].values, p.values, err_msg=name)


def test_shift_without_spatial_modulation_leaves_m_s_at_one(tiny_config, scene):
    config = tiny_config.with_ablation("m_c+vq").replace(use_shift=True)
    out = training.forward_full(training.Model(config), scene.features, 0)
    npt.assert_array_equal(out.modulation.m_s.values, np.ones((3, 16)))


def test_normalisation_holds_across_forwards(tiny_config):
    model = training.Model(tiny_config)
    rng = np.random.default_rng(11)
    for seed in range(100):
        out = training.forward_full(model, rng.standard_normal((16, 4)), seed)
        for attention in (out.attention, out.attention_modulated):
            npt.assert_allclose(attention.A.values.sum(axis=0), np.ones(16), atol=1e-12)
            npt.assert_allclose(attention.A_tilde.values.sum(axis=1), np.ones(3), atol=1e-12)
        npt.assert_allclose(out.modulation.m_s.values.mean(axis=1), np.ones(3), atol=1e-12)
        for cross in out.decoded.cross_attn:
            npt.assert_allclose(cross.sum(axis=1), np.ones((2, 16)), atol=1e-12)


def test_window_perplexity_is_bounded_by_codebook_size(tiny_config):
    config = tiny_config.replace(steps=6, log_every=3)
    result = training.train(config, final_eval=False, verbose=False)
    perplexities = result.loss_log["perplexity"].values
    assert np.all(perplexities >= 1.0 - 1e-12)
    assert np.all(perplexities <= config.codebook_size + 1e-12)


def test_vq_loss_only_updates_the_codebook(tiny_config, scene):
    model = training.Model(tiny_config)
    with ad.Tape() as tape:
        out = training.forward_full(model, scene.features, 0)
        losses = training.compute_losses(
            out.decoded.recon, scene.features, out.slots_bottom_up.slots, out.quantized
        )
    tape.backward(losses.vq)
    for name, p in model.named_parameters():
        if name == "codebook.codes":
            assert np.any(p.grad[out.quantized.indices] != 0)
        else:
            npt.assert_array_equal(p.grad, 0.0, err_msg=name)


def test_reconstruction_loss_skips_the_codebook(tiny_config, scene):
    model = training.Model(tiny_config)
    with ad.Tape() as tape:
        out = training.forward_full(model, scene.features, 0)
        losses = training.compute_losses(out.decoded.recon, scene.features, out.slots_bottom_up.slots, out.quantized)
    tape.backward(losses.recon)
    npt.assert_array_equal(model.codebook.codes.grad, 0.0)
    assert np.any(model.slot_attention.q_proj.weight.grad != 0)
    assert np.any(model.channel_mlp.fc2.weight.grad != 0)


def test_train_step_updates_and_counts_usage(tiny_config):
    model = training.Model(tiny_config)
    batch = [GeneratedScenes(tiny_config.scene_spec())[i] for i in range(2)]
    before = model.decoder.head.weight.values.copy()
    stats = training.train_step(model, batch, training.training_rng(tiny_config), 1)
    assert np.isfinite(stats["recon"]) and stats["vq"] >= 0
    assert not np.array_equal(before, model.decoder.head.weight.values)
    assert model.codebook.usage_counts.sum() == 2 * tiny_config.n_slots


def test_train_step_reports_non_finite_loss(tiny_config):
    model = training.Model(tiny_config)
    model.decoder.head.bias.values[:] = np.nan
    batch = [GeneratedScenes(tiny_config.scene_spec())[0]]
    with pytest.raises(training.TrainingError, match="recon loss at step 7"):
        training.train_step(model, batch, training.training_rng(tiny_config), 7)


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = training.Model(tiny_config)
    model.codebook.record_usage([1, 1, 3])
    rng = training.training_rng(tiny_config)
    rng.standard_normal(5)
    path = training.Checkpoint.from_model(model, 12, rng).save(str(tmp_path / "a.ckpt"))
    assert os.path.isfile(f"{path}.manifest.json")
    loaded = training.Checkpoint.load(path)
    assert loaded.step == 12
    assert loaded.to_bytes() == training.Checkpoint.from_model(model, 12, rng).to_bytes()
    restored, restored_rng = loaded.restore()
    for name, p in model.named_parameters():
        npt.assert_array_equal(restored.parameters()[name].values, p.values)
    npt.assert_array_equal(restored.codebook.usage_counts, [0, 2, 0, 1])
    npt.assert_array_equal(restored_rng.standard_normal(3), rng.standard_normal(3))


def test_checkpoint_rejects_other_configs(tmp_path, tiny_config):
    model = training.Model(tiny_config)
    checkpoint = training.Checkpoint.from_model(model, 0, training.training_rng(tiny_config))
    checkpoint.restore(tiny_config.replace(steps=100, mbo_reading="per_pred"))
    with pytest.raises(training.TrainingError, match="n_slots"):
        checkpoint.restore(tiny_config.replace(n_slots=4))


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda data: b"NOTACKPT" + data[8:],
        lambda data: data[:-8],
        lambda data: data[:8] + b"\x02" + data[9:],
    ],
)
def test_corrupt_checkpoints(tiny_config, corrupt):
    model = training.Model(tiny_config)
    data = training.Checkpoint.from_model(model, 0, training.training_rng(tiny_config)).to_bytes()
    with pytest.raises(training.TrainingError):
        training.Checkpoint.from_bytes(corrupt(data))


def test_training_writes_logs_and_checkpoints(tmp_path, tiny_config):
    out = str(tmp_path / "run")
    result = training.train(tiny_config, out_dir=out, eval_scenes=eval_split(tiny_config.scene_spec(), 2), verbose=False)
    assert list(result.loss_log["step"]) == [1, 2, 3, 4]
    assert list(result.eval_log.columns) == ["step", "fg_ari", "mbo_i", "mbo_c", "miou"]
    assert sorted(os.listdir(os.path.join(out, "checkpoints"))) == [
        "final.ckpt",
        "final.ckpt.manifest.json",
        "step_0000002.ckpt",
        "step_0000002.ckpt.manifest.json",
        "step_0000004.ckpt",
        "step_0000004.ckpt.manifest.json",
    ]
    assert os.path.isfile(os.path.join(out, "loss.csv")) and os.path.isfile(os.path.join(out, "eval.csv"))
    assert np.all(np.isfinite(result.loss_log["perplexity"]))


def test_resume_matches_uninterrupted_training(tmp_path, tiny_config):
    straight = training.train(
        tiny_config, out_dir=str(tmp_path / "a"), final_eval=False, prefetch=False, verbose=False
    )
    resumed = training.train(
        tiny_config,
        out_dir=str(tmp_path / "b"),
        resume=str(tmp_path / "a" / "checkpoints" / "step_0000002.ckpt"),
        final_eval=False,
        verbose=False,
    )
    for name, p in straight.model.named_parameters():
        npt.assert_array_equal(resumed.model.parameters()[name].values, p.values, err_msg=name)
    npt.assert_array_equal(resumed.loss_log["L_recon"].values, straight.loss_log["L_recon"].values[2:])


def test_training_without_vq_logs_nan_perplexity(tiny_config):
    config = tiny_config.with_ablation("m_c+m_s+shift").replace(steps=2)
    result = training.train(config, final_eval=False, verbose=False)
    assert result.loss_log["perplexity"].isna().all()
    assert (result.loss_log["L_vq"] == 0).all()


def test_evaluate_columns_and_parallel_agreement(tiny_config):
    model = training.Model(tiny_config)
    scenes = eval_split(tiny_config.scene_spec(), 3)
    serial = training.evaluate(model, scenes, verbose=False)
    assert {"fg_ari", "miou", "miou_unmodulated", "n_objects"} <= set(serial.columns)
    assert len(serial) == 3
    parallel = training.evaluate(model, scenes, njobs=2, verbose=False)
    npt.assert_allclose(parallel["miou"].values, serial["miou"].values)


def test_prediction_is_deterministic(tiny_config):
    model = training.Model(tiny_config)
    scene = eval_split(tiny_config.scene_spec(), 1)[0]
    a, b = training.predict(model, scene), training.predict(model, scene)
    npt.assert_array_equal(a.labels, b.labels)
    assert a.soft_masks.shape == (3, 16)
    assert a.code_indices.shape == (3,)


def test_code_assignments(tiny_config):
    model = training.Model(tiny_config)
    table = training.code_assignments(model, eval_split(tiny_config.scene_spec(), 2), verbose=False)
    assert list(table.columns) == ["scene_index", "slot", "code_index", "mask_cells"]
    assert len(table) == 6
    assert table.groupby("scene_index")["mask_cells"].sum().tolist() == [16, 16]
    with pytest.raises(training.TrainingError):
        training.code_assignments(training.Model(tiny_config.with_ablation("baseline")), [], verbose=False)


@pytest.mark.parametrize("ablation", ["baseline", "m_s+shift", "m_c+vq", "full"])
@pytest.mark.parametrize("decoder_blocks", [1, 2])
def test_flop_formulas_match_runtime_counts(tiny_config, ablation, decoder_blocks):
    config = tiny_config.with_ablation(ablation).replace(decoder_blocks=decoder_blocks)
    assert training.count_flops(config) == training.measure_flops(config)


def test_flop_formulas_when_slot_and_feature_dims_agree(tiny_config):
    config = tiny_config.replace(slot_dim=4)
    assert training.count_flops(config) == training.measure_flops(config)


def test_flops_report(tiny_config):
    report = training.flops_report(tiny_config)
    assert list(report["component"]) == list(training.SECTIONS) + ["total", "overhead"]
    assert report.iloc[:6]["share_pct"].sum() == pytest.approx(100.0)
    npt.assert_array_equal(report["analytic"].values, report["runtime"].values)
    overhead = report.set_index("component").loc["overhead", "analytic"]
    counts = training.count_flops(tiny_config)
    assert overhead == counts["pathway"] + counts["pass2"]
