import pytest

from ..config import TrainConfig


@pytest.fixture()
def tiny_config():
    return TrainConfig(
        n_slots=3,
        codebook_size=4,
        slot_dim=6,
        feature_dim=4,
        n_iter=2,
        height=4,
        width=4,
        mlp_hidden=8,
        decoder_blocks=1,
        decoder_heads=2,
        batch_size=2,
        steps=4,
        log_every=2,
        checkpoint_every=2,
        eval_scenes=3,
        min_objects=1,
        max_objects=2,
        n_categories=3,
        selection_steps=2,
        min_codebook_size=2,
        max_codebook_size=8,
    )
