import dataclasses

import numpy as np
import pytest
import torch

from robustnd import nn_core, scm_data, trainer
from robustnd.errors import InputError, MissingArtifact, TrainingFailure


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=16, seed=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


def setup_run(path, data, cfg):
    teacher = nn_core.build_teacher(path, cfg.encoder, head_seed=cfg.seed)
    cache = trainer.build_saliency_cache(teacher, data.train.images, cfg.seed) if cfg.ood_strategy == "core" else None
    return teacher, cache


def test_config_validation():
    with pytest.raises(InputError):
        trainer.TrainConfig(batch_size=0)
    with pytest.raises(InputError):
        trainer.TrainConfig(lr=0)
    with pytest.raises(InputError):
        trainer.TrainConfig(loss_variant="xyz")
    with pytest.raises(InputError):
        trainer.TrainConfig(ood_strategy="none", loss_variant="ocl")
    assert trainer.TrainConfig().digest() == trainer.TrainConfig().digest()
    assert trainer.TrainConfig().digest() != trainer.TrainConfig(seed=1).digest()


def test_pretrain_deterministic_and_loadable(tiny_data, tiny_teacher_path, tmp_path):
    trainer.pretrain_teacher(tiny_data.aux_pretrain, trainer.PretrainConfig(epochs=3, min_accuracy=0.0),
                             tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == tiny_teacher_path.read_bytes()
    t = nn_core.build_teacher(tmp_path / "again.bin")
    assert t.aux_head is not None


def test_pretrain_accuracy_floor(tiny_data):
    with pytest.raises(TrainingFailure):
        trainer.pretrain_teacher(tiny_data.aux_pretrain, trainer.PretrainConfig(epochs=1, min_accuracy=1.01))


def test_pretrained_beats_random_init():
    cfg = scm_data.ScmConfig(aux_per_class=150, seed=3)
    aux = scm_data.generate_aux(cfg)
    val = scm_data.generate_aux(dataclasses.replace(cfg, seed=4))
    _, report = trainer.pretrain_teacher(aux, trainer.PretrainConfig(epochs=30, min_accuracy=0.9), None, val)
    torch.manual_seed(0)
    enc, head = nn_core.Encoder(), nn_core.BinaryHead(64, 4)
    random_acc = trainer._accuracy(enc, head, val.images, val.labels)
    assert report["train_accuracy"] >= 0.9
    assert report["val_accuracy"] > random_acc + 0.2


def test_freeze_and_update_sets(tiny_data, tiny_teacher_path):
    cfg = small_cfg()
    teacher, cache = setup_run(tiny_teacher_path, tiny_data, cfg)
    enc0 = {k: v.clone() for k, v in teacher.encoder.state_dict().items()}
    head0 = {k: v.clone() for k, v in teacher.head.state_dict().items()}
    aux0 = {k: v.clone() for k, v in teacher.aux_head.state_dict().items()}
    student0 = {k: v.clone() for k, v in nn_core.build_student(cfg.seed).state_dict().items()}
    state = trainer.train(tiny_data.train.images, teacher, cfg, cache)
    for k, v in teacher.encoder.state_dict().items():
        assert torch.equal(v, enc0[k])
    for k, v in teacher.aux_head.state_dict().items():
        assert torch.equal(v, aux0[k])
    assert any(not torch.equal(v, head0[k]) for k, v in teacher.head.state_dict().items())
    assert all(not torch.equal(v, student0[k]) for k, v in state.student.state_dict().items())
    # The file on disk still matches the encoder bit for bit.
    saved = nn_core.load_archive(tiny_teacher_path)
    for k, v in teacher.encoder.state_dict().items():
        assert np.array_equal(saved[f"encoder.{k}"], v.numpy())
    steps = int(np.ceil(len(tiny_data.train) / cfg.batch_size)) * cfg.epochs
    assert len(state.history) == steps
    assert all(set(h) == {"main", "ce"} for h in state.history)


def test_optimizer_param_set(tiny_data, tiny_teacher_path):
    cfg = small_cfg()
    teacher, _ = setup_run(tiny_teacher_path, tiny_data, dataclasses.replace(cfg, ood_strategy="global"))
    state = trainer.init_state(teacher, cfg)
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    allowed = {id(p) for p in state.student.parameters()} | {id(p) for p in teacher.head.parameters()}
    assert opt_ids == allowed


def test_batch_composition(tiny_data):
    cfg = small_cfg(ood_strategy="random_region")
    idx = np.arange(5)
    ood = trainer.craft_batch(tiny_data.train.images, idx, cfg, None, 0)
    assert ood.shape == (5,) + tiny_data.train.images.shape[1:]
    v1, v2 = trainer.make_views(tiny_data.train.images[idx], idx, cfg, 0, 0)
    assert v1.shape == v2.shape == ood.shape
    # Each crafted sample comes from the ID image in the same position.
    for j, i in enumerate(idx):
        assert (ood[j] == tiny_data.train.images[i]).mean() > 0.3


def test_deterministic_histories(tiny_data, tiny_teacher_path):
    cfg = small_cfg()
    runs = []
    for _ in range(2):
        teacher, cache = setup_run(tiny_teacher_path, tiny_data, cfg)
        runs.append(trainer.train(tiny_data.train.images, teacher, cfg, cache).history)
    assert runs[0] == runs[1]


def test_checkpoint_resume_matches(tiny_data, tiny_teacher_path, tmp_path):
    cfg = small_cfg(epochs=4)
    teacher, cache = setup_run(tiny_teacher_path, tiny_data, cfg)
    full = trainer.train(tiny_data.train.images, teacher, cfg, cache)

    teacher, cache = setup_run(tiny_teacher_path, tiny_data, cfg)
    half = trainer.train(tiny_data.train.images, teacher, cfg, cache, until=2)
    trainer.save_checkpoint(half, cfg, tmp_path)
    teacher, cache = setup_run(tiny_teacher_path, tiny_data, cfg)
    resumed = trainer.load_checkpoint(tmp_path, teacher, cfg)
    assert resumed.epoch == 2
    resumed = trainer.train(tiny_data.train.images, teacher, cfg, cache, state=resumed)
    np.testing.assert_allclose([h["main"] for h in resumed.history], [h["main"] for h in full.history],
                               rtol=1e-5)
    meta = (tmp_path / "checkpoint_meta.txt").read_text()
    assert "config_hash" in meta and "epoch = 2" in meta


def test_checkpoint_config_mismatch(tiny_data, tiny_teacher_path, tmp_path):
    cfg = small_cfg(epochs=1, ood_strategy="global")
    teacher, _ = setup_run(tiny_teacher_path, tiny_data, cfg)
    state = trainer.train(tiny_data.train.images[:16], teacher, cfg)
    trainer.save_checkpoint(state, cfg, tmp_path)
    with pytest.raises(InputError):
        trainer.load_checkpoint(tmp_path, teacher, dataclasses.replace(cfg, seed=5))
    with pytest.raises(MissingArtifact):
        trainer.load_checkpoint(tmp_path / "nothing", teacher, cfg)


def test_core_strategy_needs_cache(tiny_data, tiny_teacher_path):
    teacher, _ = setup_run(tiny_teacher_path, tiny_data, small_cfg(ood_strategy="global"))
    with pytest.raises(MissingArtifact):
        trainer.train(tiny_data.train.images, teacher, small_cfg())


def test_nonfinite_loss_aborts(tiny_data, tiny_teacher_path):
    cfg = small_cfg(ood_strategy="global")
    teacher, _ = setup_run(tiny_teacher_path, tiny_data, cfg)
    state = trainer.init_state(teacher, cfg)
    with torch.no_grad():
        state.student.head.fc.weight.fill_(float("nan"))
    with pytest.raises(TrainingFailure, match="batch indices"):
        trainer.train(tiny_data.train.images, teacher, cfg, state=state)


def test_smoke_loss_decreases(tiny_teacher_path):
    data = scm_data.generate_dataset(scm_data.ScmConfig(train_id=512, test_id=8, test_ood=8, aux_per_class=4))
    cfg = trainer.TrainConfig(epochs=5, seed=0)
    teacher, cache = setup_run(tiny_teacher_path, data, cfg)
    state = trainer.train(data.train.images, teacher, cfg, cache)
    means = trainer.epoch_means(state.history, int(np.ceil(512 / cfg.batch_size)))
    assert means[-1] < means[0]
