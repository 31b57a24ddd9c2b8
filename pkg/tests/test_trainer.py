import json
from dataclasses import replace

import numpy as np
import pytest

from mga import objectives as O
from mga.corpus import SyntheticConfig, synth_generate
from mga.encoders import DualEncoder, EncoderConfig
from mga.evaluation import eval_classification
from mga.tensor import Tape
from mga.trainer import (Checkpoint, CheckpointError, OptimizerState, TrainConfig, adam_update,
                         forward_losses, load_checkpoint, prepare_batch, save_checkpoint, train,
                         train_step)


@pytest.fixture
def config(tiny_encoder_config):
    return TrainConfig(batch_size=8, epochs=2, lr=3e-3, encoder=tiny_encoder_config, sentences=5)


def test_prepare_batch(tiny_corpus):
    ex = replace(tiny_corpus[0], report="Heart normal. No edema. Small effusion.")
    batch = prepare_batch([ex] + tiny_corpus[1:4], 5, ["edema"])
    assert batch.images.shape[0] == 4
    assert batch.mask[0].tolist() == [True, True, True, False, False]
    assert batch.labels.shape == (4, 1)
    with pytest.raises(ValueError):
        prepare_batch(tiny_corpus[:1], 5, [])
    with pytest.raises(ValueError):
        prepare_batch([replace(ex, report=" . "), ex], 5, [])


def test_adam_matches_hand_update():
    model = DualEncoder.init(EncoderConfig(dim=2, hidden=2, patch_side=1, grid=1, buckets=2))
    for p in model.params.values():
        p.grad = np.zeros_like(p.data)
    w = model["vis.mix_w1"]
    before = w.data.copy()
    g = np.array([[0.5, -2.0], [0.0, 1e-3]])
    w.grad = g
    state = OptimizerState()
    adam_update(model, state, lr=0.1)
    m, v = 0.1 * g, 0.001 * g * g
    want = before - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(w.data, want, rtol=1e-14)


def test_adam_zero_gradient_is_a_no_op():
    model = DualEncoder.init(EncoderConfig(dim=4, hidden=4, patch_side=2, grid=2, buckets=8))
    before = {k: p.data.copy() for k, p in model.params.items()}
    for p in model.params.values():
        p.grad = np.zeros_like(p.data)
    adam_update(model, OptimizerState(), lr=1.0)
    for k, p in model.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_temperature_is_clamped():
    model = DualEncoder.init(EncoderConfig(dim=4, hidden=4, patch_side=2, grid=2, buckets=8), temp=0.011)
    model.temp.grad = np.array(1.0)
    adam_update(model, OptimizerState(), lr=0.5)
    assert model.temp.data == O.TemperatureParams.TEMP_MIN


def test_unused_objectives_contribute_nothing(tiny_corpus, config):
    batch = prepare_batch(tiny_corpus[:6], 5, ["edema", "pneumonia"])
    prompts = (["There is edema.", "There is pneumonia."], ["There is no edema.", "There is no pneumonia."])
    grads = []
    for weights in (O.LossWeights(1, 0, 0), None):
        model = DualEncoder.init(config.encoder)
        with Tape() as tape:
            basic, cls, seg, total = forward_losses(batch, model, replace(config, weights=weights or O.LossWeights()),
                                                    prompts)
            tape.backward(total if weights else basic)
        grads.append({k: p.grad for k, p in model.params.items()})
    for k in grads[0]:
        np.testing.assert_array_equal(grads[0][k], grads[1][k])


def test_non_finite_loss_aborts(tiny_corpus, config):
    batch = prepare_batch(tiny_corpus[:4], 5, [])
    model = DualEncoder.init(config.encoder)
    model["txt.embed"].data[:] = np.nan
    with pytest.raises(O.TrainingAbort, match="step 1"):
        train_step(batch, model, OptimizerState(), config, ((), ()))


def test_identical_runs_identical_trajectories(tiny_corpus, config):
    a, b = train(config, tiny_corpus), train(config, tiny_corpus)
    assert a.history == b.history
    assert len(a.history) == config.epochs
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_zero_epochs_returns_initialization(tiny_corpus, config):
    ckpt = train(replace(config, epochs=0), tiny_corpus)
    init = DualEncoder.init(config.encoder, temp=config.temps.contrastive_temp)
    assert ckpt.history == []
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(v, init[k].data)


def test_prompts_are_mined_and_stored(tiny_corpus, config):
    ckpt = train(replace(config, epochs=0), tiny_corpus)
    assert ckpt.config.classes == tuple(tiny_corpus[0].labels)
    assert all(p.startswith("There is edema") or c != "edema" for c, p, _ in ckpt.config.prompts)
    assert len(ckpt.prompt_pairs()) == 4


def test_loss_decreases_over_first_50_steps():
    data = synth_generate(SyntheticConfig(), 800, seed=3)
    config = TrainConfig(batch_size=16, lr=5e-3, classes=SyntheticConfig().classes)
    ckpt = train(replace(config, epochs=0), data)
    model = ckpt.to_model()
    prompts = ckpt.config.prompt_texts()
    opt = OptimizerState()
    losses = [train_step(prepare_batch(data[16 * i:16 * (i + 1)], 5, config.classes), model, opt,
                         ckpt.config, prompts)["total"] for i in range(50)]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_checkpoint_round_trip(tmp_path, tiny_corpus, config):
    ckpt = train(replace(config, epochs=1), tiny_corpus)
    path = tmp_path / "m.json"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    for k in ckpt.params:
        np.testing.assert_array_equal(back.params[k], ckpt.params[k])
    assert back.temp == ckpt.temp and back.config == ckpt.config and back.history == ckpt.history
    before = eval_classification(ckpt.to_model(), tiny_corpus, ckpt.prompt_pairs()).to_json()
    after = eval_classification(back.to_model(), tiny_corpus, back.prompt_pairs()).to_json()
    assert before == after


def test_checkpoint_errors(tmp_path, tiny_corpus, config):
    ckpt = train(replace(config, epochs=0), tiny_corpus)
    doc = ckpt.to_json()
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc)[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="incompatible"):
        load_checkpoint(path)
    assert Checkpoint.from_json(ckpt.to_json()).version == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(sentences=0)
    cfg = TrainConfig(prompts=(("a", "p", "n"),))
    assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
