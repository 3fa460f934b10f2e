import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from mobidiary.gradcheck_suite import micro_model_check
from mobidiary.model import CaptionModel
from mobidiary.numerics import AdamState, NumericError, ShapeError, ops
from mobidiary.text import PAD, Vocabulary
from mobidiary.trainer import (
    CheckpointError,
    Checkpoint,
    TrainBatch,
    TrainConfig,
    batch_order,
    load_checkpoint,
    make_batch,
    payload_bytes,
    save_checkpoint,
    teacher_forcing_loss,
    train,
    train_step,
    write_loss_log,
)


def _pad_more(batch, extra):
    return TrainBatch(
        batch.sensors,
        np.pad(batch.inputs, ((0, 0), (0, extra)), constant_values=PAD),
        np.pad(batch.targets, ((0, 0), (0, extra)), constant_values=PAD),
        np.pad(batch.mask, ((0, 0), (0, extra)), constant_values=False),
    )


def _grads(model, batch):
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    loss = teacher_forcing_loss(model, batch)
    loss.backward()
    return float(loss.data), {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}


def test_uniform_scores_give_log_vocab_loss(small_samples):
    vocab = Vocabulary([f"w{i}" for i in range(996)] + ["the", "user", "walks", "sits"])
    assert len(vocab) == 1004
    model = CaptionModel.create(tiny_config(), vocab)
    model.params["gen.mlp2.w"].data[:] = 0
    loss = teacher_forcing_loss(model, make_batch(small_samples[:3], vocab, np.float64))
    assert float(loss.data) == pytest.approx(math.log(1004), abs=1e-12)
    assert math.log(1004) == pytest.approx(6.9117, abs=1e-4)


def test_large_margin_drives_loss_to_zero():
    targets = np.array([[1, 3, 0]])
    logits = np.full((1, 3, 5), -50.0)
    logits[0, np.arange(3), targets[0]] = 50.0
    assert float(ops.cross_entropy(logits, targets).data) < 1e-30


def test_pad_leaves_loss_and_gradients_unchanged(tiny_model, small_samples, small_vocab):
    batch = make_batch(small_samples[:4], small_vocab, np.float64)
    loss0, g0 = _grads(tiny_model, batch)
    loss1, g1 = _grads(tiny_model, _pad_more(batch, 5))
    assert abs(loss0 - loss1) <= 1e-9
    assert g0.keys() == g1.keys()
    for k in g0:
        assert np.allclose(g0[k], g1[k], rtol=0, atol=1e-12), k


def test_targets_shift_inputs(small_samples, small_vocab):
    b = make_batch(small_samples[:2], small_vocab)
    assert np.array_equal(b.inputs[:, 1:][b.mask[:, :-1]], b.targets[:, :-1][b.mask[:, :-1]])
    assert (b.inputs[:, 0] == 1).all()


def test_empty_batch_rejected(small_vocab):
    with pytest.raises(ValueError):
        make_batch([], small_vocab)


def test_training_is_deterministic(small_samples):
    cfg = TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=5)
    a = train(small_samples, tiny_config(), cfg)
    b = train(small_samples, tiny_config(), cfg)
    assert a.log == b.log
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_zero_lr_leaves_parameters(small_samples):
    cfg = TrainConfig(lr=0.0, batch_size=6, epochs=1, seed=2)
    result = train(small_samples, tiny_config(), cfg)
    fresh = CaptionModel.create(result.model.config, result.model.vocab, seed=2)
    for k, p in fresh.params.items():
        assert np.array_equal(p.data, result.model.params[k].data)


def test_single_step_descends(small_samples, small_vocab):
    failures = 0
    for seed in range(5):
        model = CaptionModel.create(tiny_config(), small_vocab, seed=seed)
        for p in model.params.values():
            p.requires_grad = True
        batch = make_batch(small_samples[:4], small_vocab, np.float64)
        before = train_step(model, batch, AdamState(lr=1e-3))
        after = float(teacher_forcing_loss(model, batch).data)
        failures += after >= before
    assert failures <= 1


def test_micro_model_gradients():
    results = micro_model_check()
    assert results and all(r.passed for r in results)
    assert max(r.error for r in results) <= 1e-4


def test_non_finite_loss_names_batch(small_samples):
    from mobidiary.datakit import Sample

    bad = small_samples[2]
    vals = bad.sequence.values.copy()
    vals[0, 0, 0] = np.nan
    seq = type(bad.sequence)(bad.sequence.modality, vals, bad.sequence.sample_rate_hz, bad.sequence.placement_ids)
    samples = [Sample(bad.id, seq, bad.caption, bad.actions, bad.qa)]
    with pytest.raises(NumericError, match="batch index 0"):
        train(samples, tiny_config(), TrainConfig(batch_size=1))


def test_stopping_rules(small_samples):
    assert train(small_samples, tiny_config(), TrainConfig(batch_size=2, epochs=5, max_steps=3)).step == 3
    res = train(small_samples, tiny_config(), TrainConfig(batch_size=6, epochs=4, target_loss=1e6))
    assert res.epoch == 1 and res.step == 2


def test_ablation_flags_override_model_config(small_samples):
    res = train(small_samples[:2], tiny_config(), TrainConfig(epochs=1, enable_pe=False))
    assert res.model.config.encoder.enable_pe is False
    assert res.model.config.encoder.enable_patching is True


def test_batch_order_covers_each_index_once():
    rng = np.random.default_rng(0)
    lengths = rng.integers(10, 100, size=53).tolist()
    for bucket in (True, False):
        order = batch_order(lengths, 8, rng, bucket)
        flat = sorted(i for b in order for i in b)
        assert flat == list(range(53))
        assert all(1 <= len(b) <= 8 for b in order)


def test_loss_log_csv(tmp_path):
    write_loss_log([(1, 1, 2.5), (1, 2, 2.0)], tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines() == ["epoch,step,loss", "1,1,2.5", "1,2,2.0"]


# -- checkpoints ------------------------------------------------------------------------

@pytest.fixture
def trained(small_samples):
    return train(small_samples, tiny_config(dtype="float32"), TrainConfig(lr=1e-3, batch_size=4, epochs=1, seed=1))


def test_checkpoint_round_trip_is_bit_exact(trained, tmp_path, small_samples):
    ckpt = trained.checkpoint()
    before = [trained.model.caption(s.sequence) for s in small_samples[:4]]
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    orig, got = ckpt.tensors(), back.tensors()
    assert orig.keys() == got.keys()
    for k in orig:
        assert orig[k].dtype == got[k].dtype and orig[k].tobytes() == got[k].tobytes(), k
    assert back.step == ckpt.step and back.seed == 1 and back.epoch == 1
    assert back.model.vocab == trained.model.vocab
    assert back.model.config == trained.model.config
    save_checkpoint(back, tmp_path / "d")
    assert payload_bytes(tmp_path / "c") == payload_bytes(tmp_path / "d")
    assert [back.model.caption(s.sequence) for s in small_samples[:4]] == before


def test_checkpoint_layout(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    files = sorted(p.name for p in (tmp_path / "c").iterdir())
    assert files == ["config.json", "index.txt", "tensors.bin", "vocab.txt"]
    first = (tmp_path / "c" / "index.txt").read_text().splitlines()[0].split()
    assert len(first) == 5 and first[1] == "float32"
    meta = json.loads((tmp_path / "c" / "config.json").read_text())
    assert meta["version"] == 1 and "init_scheme" in meta


def test_overwrite_leaves_no_temporaries(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c"]


def test_version_mismatch(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "config.json").read_text())
    meta["version"] = 99
    (tmp_path / "c" / "config.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c")


def test_truncated_payload_names_tensor(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    data = payload_bytes(tmp_path / "c")
    (tmp_path / "c" / "tensors.bin").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated: tensor '"):
        load_checkpoint(tmp_path / "c")


def test_missing_index_entry_names_tensor(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    index = tmp_path / "c" / "index.txt"
    lines = index.read_text().splitlines()
    dropped = lines[3].split()[0]
    index.write_text("\n".join(lines[:3] + lines[4:]) + "\n")
    with pytest.raises((CheckpointError, ShapeError), match=dropped.split("/", 1)[1]):
        load_checkpoint(tmp_path / "c")


def test_wrong_width_in_config_is_shape_error(trained, tmp_path):
    save_checkpoint(trained.checkpoint(), tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "config.json").read_text())
    meta["model"]["encoder"]["d_model"] = 32
    (tmp_path / "c" / "config.json").write_text(json.dumps(meta))
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "c")


def test_untrained_checkpoint_decodes(tmp_path, small_vocab, small_samples):
    model = CaptionModel.create(tiny_config(dtype="float32"), small_vocab, seed=4)
    save_checkpoint(Checkpoint(model, AdamState()), tmp_path / "u")
    caption, _ = load_checkpoint(tmp_path / "u").model.caption(small_samples[0].sequence)
    assert isinstance(caption, str)


def test_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none")
