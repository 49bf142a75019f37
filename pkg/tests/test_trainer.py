import os

import numpy as np
import pytest
import torch

from dve.core import correspondence_loss, match_distribution, similarity_grid
from dve.datasets import ArmSceneSpec, generate_arm_dataset
from dve.embedder import load_checkpoint, state_fingerprint
from dve.errors import ConfigurationError, NumericalError
from dve.trainer import (
    TrainConfig,
    assemble_batch,
    finetune_unsupervised,
    pair_loss,
    train,
)
from dve.warps import WarpField

torch.set_num_threads(1)

SPEC = ArmSceneSpec(n_instances=4, frames_per_instance=3, image_size=48, seed=33)


@pytest.fixture(scope="module")
def arm():
    return generate_arm_dataset(SPEC).train


def tiny_cfg(**kw) -> TrainConfig:
    base = dict(
        pairs_per_batch=2,
        aux_pool_size=2,
        aux_per_pair=1,
        epochs=1,
        steps_per_epoch=2,
        lr=1e-3,
        use_dve=False,
        embed_dim=3,
        arch="smallnet",
        input_size=48,
        seed=5,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(pairs_per_batch=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(use_dve=True, aux_pool_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(aux_per_pair=20, aux_pool_size=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ConfigurationError):
        TrainConfig(pair_source="video")
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1)


def test_assemble_batch_flow_mode(arm):
    cfg = tiny_cfg(pairs_per_batch=3, aux_pool_size=2)
    batch = assemble_batch(arm, cfg, np.random.default_rng(0))
    assert batch.sources.shape == (3, 3, 48, 48)
    assert batch.targets.shape == (3, 3, 48, 48)
    assert batch.pool.shape == (2, 3, 48, 48)
    assert len(batch.fields) == 3
    for f in batch.fields:
        assert f.coords.shape == (24, 24, 2)
    assert batch.aux_indices.shape == (3, 1)
    assert batch.aux_indices.max() < 2


def test_assemble_batch_identity_mode(arm):
    cfg = tiny_cfg(identity_warp=True)
    batch = assemble_batch(arm, cfg, np.random.default_rng(1))
    assert torch.equal(batch.sources, batch.targets)
    for f in batch.fields:
        # identity targets restricted to the arm: valid cells point at
        # their own centers and the background is masked out
        from dve.coords import cell_center_grid

        centers = cell_center_grid(24, 24, 2)
        assert np.allclose(f.coords[f.valid_mask], centers[f.valid_mask], atol=1e-6)
        assert not f.valid_mask.all()
        assert f.valid_mask.any()


def test_assemble_batch_warp_mode(arm):
    cfg = tiny_cfg(pair_source="warp")
    batch = assemble_batch(arm, cfg, np.random.default_rng(2))
    assert batch.sources.shape == (2, 3, 48, 48)
    assert not torch.equal(batch.sources, batch.targets)


def test_flow_requested_without_flow_raises(arm):
    class NoFlow:
        input_size = 48

        def __len__(self):
            return 4

        def image_tensor(self, i):
            return torch.zeros(3, 48, 48)

    cfg = tiny_cfg(pair_source="flow")
    with pytest.raises(ConfigurationError):
        assemble_batch(NoFlow(), cfg, np.random.default_rng(0))


def test_pair_loss_plain_equals_direct():
    torch.manual_seed(0)
    src = torch.randn(4, 5, 5)
    tgt = torch.randn(4, 5, 5)
    rng = np.random.default_rng(3)
    gt = WarpField(rng.uniform(-0.8, 0.8, size=(5, 5, 2)).astype(np.float32))
    direct = correspondence_loss(match_distribution(similarity_grid(src, tgt)), gt)
    assert torch.allclose(pair_loss(src, tgt, gt), direct)


def test_pair_loss_with_sharp_self_pool_matches_plain():
    torch.manual_seed(1)
    src = torch.randn(6, 4, 4)
    src = 50.0 * src / src.norm(dim=0, keepdim=True)
    tgt = torch.randn(6, 4, 4)
    rng = np.random.default_rng(4)
    gt = WarpField(rng.uniform(-0.8, 0.8, size=(4, 4, 2)).astype(np.float32))
    plain = pair_loss(src, tgt, gt)
    exchanged = pair_loss(src, tgt, gt, aux_maps=[src])
    assert abs(float(plain) - float(exchanged)) < 1e-3


def test_train_writes_checkpoints_and_log(arm, tmp_path):
    out = os.path.join(tmp_path, "run")
    res = train(arm, tiny_cfg(), out)
    assert os.path.isfile(res.checkpoint_path)
    assert os.path.isfile(os.path.join(out, "epoch_000.pt"))
    assert len(res.loss_curve) == 1
    with open(res.log_path) as f:
        lines = [l for l in f if l.strip()]
    assert len(lines) == 2  # one JSONL record per step
    model, meta = load_checkpoint(res.checkpoint_path)
    assert meta["train_epochs"] == 1
    assert meta["dataset_id"] == arm.dataset_id
    assert state_fingerprint(model) == state_fingerprint(res.model)


def test_train_is_deterministic(arm, tmp_path):
    r1 = train(arm, tiny_cfg(), os.path.join(tmp_path, "a"))
    r2 = train(arm, tiny_cfg(), os.path.join(tmp_path, "b"))
    assert state_fingerprint(r1.model) == state_fingerprint(r2.model)
    assert r1.loss_curve == r2.loss_curve


def test_train_with_exchange_runs(arm, tmp_path):
    res = train(arm, tiny_cfg(use_dve=True), os.path.join(tmp_path, "dve"))
    assert len(res.loss_curve) == 1
    assert np.isfinite(res.loss_curve[0])


def test_train_size_mismatch(arm, tmp_path):
    with pytest.raises(ConfigurationError):
        train(arm, tiny_cfg(input_size=64), os.path.join(tmp_path, "bad"))


def test_train_nonfinite_activations_raise(arm, tmp_path):
    class Poisoned:
        """One corrupt frame whose pixels are NaN."""

        input_size = 48
        dataset_id = "poisoned"

        def __len__(self):
            return 4

        def image_tensor(self, i):
            return torch.full((3, 48, 48), float("nan"))

    with pytest.raises(NumericalError):
        train(Poisoned(), tiny_cfg(), os.path.join(tmp_path, "blow"))


def test_train_all_pairs_unusable_raises(arm, tmp_path):
    class Hollow:
        """Frames whose foreground is empty: no usable identity target."""

        input_size = 48
        dataset_id = "hollow"

        def __len__(self):
            return len(arm)

        def image_tensor(self, i):
            return arm.image_tensor(i)

        def foreground_mask(self, i):
            return np.zeros((48, 48), dtype=bool)

    cfg = tiny_cfg(identity_warp=True)
    with pytest.raises(NumericalError):
        train(Hollow(), cfg, os.path.join(tmp_path, "hollow"))


def test_resume_matches_uninterrupted_run(arm, tmp_path):
    straight = train(arm, tiny_cfg(epochs=2), os.path.join(tmp_path, "full"))
    part = train(arm, tiny_cfg(epochs=1), os.path.join(tmp_path, "part"))
    resumed = train(
        arm,
        tiny_cfg(epochs=2),
        os.path.join(tmp_path, "part"),
        resume=os.path.join(tmp_path, "part", "epoch_000.pt"),
    )
    assert state_fingerprint(resumed.model) == state_fingerprint(straight.model)
    assert resumed.loss_curve == straight.loss_curve
    del part


def test_finetune_zero_epochs_passes_weights_through(arm, tmp_path):
    first = train(arm, tiny_cfg(), os.path.join(tmp_path, "base"))
    before = state_fingerprint(first.model)
    res = finetune_unsupervised(
        first.checkpoint_path, arm, tiny_cfg(epochs=0), os.path.join(tmp_path, "ft0")
    )
    assert state_fingerprint(res.model) == before
    _, meta = load_checkpoint(res.checkpoint_path)
    assert len(meta["provenance"]) == 1
    assert meta["provenance"][0]["dataset_id"] == arm.dataset_id


def test_finetune_trains_and_extends_provenance(arm, tmp_path):
    first = train(arm, tiny_cfg(), os.path.join(tmp_path, "base2"))
    res = finetune_unsupervised(
        first.checkpoint_path,
        arm,
        tiny_cfg(epochs=1, steps_per_epoch=1),
        os.path.join(tmp_path, "ft1"),
    )
    assert state_fingerprint(res.model) != state_fingerprint(first.model)
    _, meta = load_checkpoint(res.checkpoint_path)
    assert len(meta["provenance"]) == 1
    assert meta["train_epochs"] == 1
