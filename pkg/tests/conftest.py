import numpy as np
import pytest

from fedprompt.config import RunConfig, validate


def make_cfg(**overrides) -> RunConfig:
    """Small, fast configuration for protocol tests."""
    values = dict(
        master_seed=1,
        rounds=2,
        participation_rate=1.0,
        local_iters=1,
        batch_size=4,
        lora_rank=2,
        lora_threshold=0.5,
        lr=0.05,
        momentum=0.9,
        weight_decay=1e-5,
        alpha=1.0,
        tau=0.1,
        d_v=16,
        d_t=8,
        depth=1,
        heads=2,
        patch_grid=2,
        m=2,
        num_classes=6,
        attrs_per_class=2,
        attribute_pool_size=6,
        samples_per_class=4,
        eval_per_class=2,
        image_size="8x8",
        noise_std=0.05,
        shots=2,
        classes_per_client=2,
        base_fraction=0.67,
        mode="base2new",
        output_dir="out",
    )
    values.update(overrides)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


@pytest.fixture
def toy_cfg():
    return make_cfg()
