from __future__ import annotations

import numpy as np
import pytest

from tvp.autodiff import Tensor
from tvp.data import LoadedSample, SampleRecord
from tvp.frames import FrameBatch, PipelineConfig
from tvp.intervals import LossConfig, TimeInterval
from tvp.model import GroundingModel, ModelConfig, PromptState
from tvp.prompts import init_prompts
from tvp.trainer import (
    ADAM_EPS,
    Checkpoint,
    OptState,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    adamw_update,
    lr_at,
)

MICRO = ModelConfig(
    hidden_dim=8,
    conv_channels=(4, 6),
    conv_strides=(2, 4),
    n_layers=1,
    n_heads=2,
    vocab_size=8,
    max_text_len=6,
    grid_side=1,
    n_text_prompts=2,
)
PIPE = PipelineConfig(n_sam=2, canvas=16)


def toy_samples(n=6, seed=0) -> list[LoadedSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frames = rng.uniform(size=(PIPE.n_sam, 3, 16, 16)).astype(np.float32)
        s = float(rng.uniform(0.05, 0.4))
        e = float(rng.uniform(s + 0.2, min(1.0, s + 0.6)))
        record = SampleRecord(
            id=f"t{i:03d}",
            frames_file="none",
            tokens=(1, int(rng.integers(3, 7)), 2),
            gt=TimeInterval(s, e),
            n_vid=PIPE.n_sam,
            event_class=0,
            split="train",
        )
        out.append(LoadedSample(record=record, batch=FrameBatch(frames=frames, valid_region=[(16, 16)] * PIPE.n_sam)))
    return out


def micro_prompts(seed=0, trainable=False) -> PromptState:
    vis, txt = init_prompts(PIPE.n_sam, PIPE.canvas, 2, MICRO.n_text_prompts, MICRO.hidden_dim, seed=seed)
    return PromptState.from_sets(vis, txt, trainable=trainable)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_fixtures():
    cfg = TrainConfig(stage="base", peak_lr=0.1)
    assert lr_at(0, 100, cfg) == 0.0
    assert lr_at(10, 100, cfg) == pytest.approx(0.1)  # warmup apex
    assert lr_at(55, 100, cfg) == pytest.approx((100 - 55) / 90 * 0.1)
    assert lr_at(55, 100, cfg) == pytest.approx(0.05)
    assert lr_at(100, 100, cfg) == 0.0


def test_lr_schedule_continuous_piecewise_linear():
    cfg = TrainConfig(stage="base", peak_lr=1.0)
    total = 200
    values = [lr_at(s, total, cfg) for s in range(total + 1)]
    assert values[0] == 0.0 and values[-1] == 0.0
    assert max(values) == pytest.approx(1.0)
    deltas = np.diff(values)
    # Two linear segments: one positive slope then one negative slope.
    signs = np.sign(deltas)
    flips = np.count_nonzero(np.diff(signs))
    assert flips == 1
    # Continuity: no jump exceeds the larger segment slope.
    warmup = int(np.ceil(0.1 * total))
    assert np.max(np.abs(deltas)) <= max(1.0 / warmup, 1.0 / (total - warmup)) + 1e-12


def test_lr_at_bounds():
    cfg = TrainConfig(stage="base")
    with pytest.raises(ValueError):
        lr_at(-1, 10, cfg)
    with pytest.raises(ValueError):
        lr_at(11, 10, cfg)


# ---------------------------------------------------------------------------
# AdamW update
# ---------------------------------------------------------------------------

def test_adamw_first_step_matches_hand_algebra():
    p0 = 1.7
    target = 0.3
    lr = 0.05
    wd = 0.01
    p = Tensor.param(np.array([p0], dtype=np.float64))
    loss = ((p - target) ** 2).sum()
    loss.backward()
    opt = OptState.for_tensors({"p": p})
    adamw_update({"p": p}, opt, lr, wd, {"p"})

    g = 2.0 * (p0 - target)
    m = 0.1 * g
    v = 0.001 * g * g
    mh = m / (1.0 - 0.9)
    vh = v / (1.0 - 0.999)
    expected = p0 - lr * (mh / (np.sqrt(vh) + ADAM_EPS) + wd * p0)
    assert p.data[0] == pytest.approx(expected, abs=1e-12)
    assert opt.t == 1


def test_adamw_skips_decay_for_excluded_keys():
    p = Tensor.param(np.array([1.0], dtype=np.float64))
    q = Tensor.param(np.array([1.0], dtype=np.float64))
    (p * 0.0 + q * 0.0).sum().backward()  # zero gradients
    opt = OptState.for_tensors({"p": p, "q": q})
    adamw_update({"p": p, "q": q}, opt, 0.1, 0.5, decay_keys={"p"})
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)
    assert q.data[0] == 1.0


# ---------------------------------------------------------------------------
# Stage freeze discipline
# ---------------------------------------------------------------------------

def test_prompt_stage_freezes_model_params():
    model = GroundingModel.create(MICRO, seed=0)
    prompts = micro_prompts(trainable=True)
    samples = toy_samples()
    cfg = TrainConfig(stage="prompt", epochs=2, batch_size=3, seed=1)
    trainer = Trainer(model, cfg, prompts=prompts)
    before = {k: t.data.tobytes() for k, t in model.params.items()}
    vis_before = prompts.visual.data.tobytes()
    trainer.train(samples)
    after = {k: t.data.tobytes() for k, t in model.params.items()}
    assert before == after
    assert prompts.visual.data.tobytes() != vis_before  # prompts actually moved


def test_finetune_stage_freezes_prompts():
    model = GroundingModel.create(MICRO, seed=0)
    prompts = micro_prompts()
    samples = toy_samples()
    cfg = TrainConfig(stage="finetune", epochs=2, batch_size=3, seed=1)
    trainer = Trainer(model, cfg, prompts=prompts)
    vis_before = prompts.visual.data.tobytes()
    txt_before = prompts.text.data.tobytes()
    params_before = {k: t.data.tobytes() for k, t in model.params.items()}
    trainer.train(samples)
    assert prompts.visual.data.tobytes() == vis_before
    assert prompts.text.data.tobytes() == txt_before
    assert any(model.params[k].data.tobytes() != params_before[k] for k in params_before)


def test_stage_validation():
    model = GroundingModel.create(MICRO, seed=0)
    with pytest.raises(ValueError):
        Trainer(model, TrainConfig(stage="base"), prompts=micro_prompts())
    with pytest.raises(ValueError):
        Trainer(model, TrainConfig(stage="prompt"), prompts=None)
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")


# ---------------------------------------------------------------------------
# Training behaviour
# ---------------------------------------------------------------------------

def test_loss_floor_under_default_config():
    model = GroundingModel.create(MICRO, seed=2)
    samples = toy_samples()
    cfg = TrainConfig(stage="base", epochs=3, batch_size=2, seed=3)
    trainer = Trainer(model, cfg)
    trainer.train(samples)
    assert all(row["train_loss"] >= 0.24 - 1e-12 for row in trainer.history)


def test_train_deterministic_same_seed():
    samples = toy_samples()
    blobs = []
    for _ in range(2):
        model = GroundingModel.create(MICRO, seed=4)
        cfg = TrainConfig(stage="base", epochs=2, batch_size=2, seed=5)
        ckpt = Trainer(model, cfg).train(samples)
        import io

        buf = io.BytesIO()
        import tempfile, os

        with tempfile.NamedTemporaryFile(delete=False) as f:
            path = f.name
        ckpt.save(path)
        blobs.append(open(path, "rb").read())
        os.unlink(path)
    assert blobs[0] == blobs[1]


def test_threaded_training_reproducible_per_thread_count():
    samples = toy_samples(n=8)
    for threads in (1, 2):
        results = []
        for _ in range(2):
            model = GroundingModel.create(MICRO, seed=6)
            cfg = TrainConfig(stage="base", epochs=1, batch_size=4, seed=7, threads=threads)
            Trainer(model, cfg).train(samples)
            results.append({k: t.data.copy() for k, t in model.params.items()})
        for k in results[0]:
            np.testing.assert_array_equal(results[0][k], results[1][k])


def test_thread_counts_agree_closely():
    samples = toy_samples(n=8)
    runs = []
    for threads in (1, 2):
        model = GroundingModel.create(MICRO, seed=6)
        cfg = TrainConfig(stage="base", epochs=1, batch_size=4, seed=7, threads=threads)
        Trainer(model, cfg).train(samples)
        runs.append({k: t.data.copy() for k, t in model.params.items()})
    # Shard boundaries change float association only; results stay close.
    for k in runs[0]:
        np.testing.assert_allclose(runs[0][k], runs[1][k], rtol=1e-3, atol=1e-5)


def test_divergence_aborts_with_diagnostic():
    model = GroundingModel.create(MICRO, seed=8)
    model.params["head.w2"].data[:] = np.nan
    samples = toy_samples(n=2)
    cfg = TrainConfig(stage="base", epochs=1, batch_size=2, seed=9)
    trainer = Trainer(model, cfg)
    with pytest.raises(TrainingDiverged):
        trainer.train(samples)


def test_overfit_single_sample_smoke():
    """200 base steps on one sample drive the loss near its floor."""
    model = GroundingModel.create(MICRO, seed=10)
    samples = toy_samples(n=1, seed=11)
    cfg = TrainConfig(stage="base", epochs=200, batch_size=1, peak_lr=3e-2, weight_decay=0.0, seed=12)
    trainer = Trainer(model, cfg)
    trainer.train(samples)
    assert trainer.global_step == 200
    assert trainer.history[-1]["train_loss"] < 0.30
    assert trainer.history[-1]["train_loss"] >= 0.24 - 1e-12


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bytes(tmp_path):
    model = GroundingModel.create(MICRO, seed=13)
    prompts = micro_prompts(seed=14)
    cfg = TrainConfig(stage="finetune", epochs=1, batch_size=3, seed=15)
    trainer = Trainer(model, cfg, prompts=prompts, config_echo={"train": cfg.to_json(), "v": 1})
    ckpt = trainer.train(toy_samples())
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    ckpt.save(p1)
    loaded = Checkpoint.load(p1)
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:8] == b"TVPCKPT1"
    assert loaded.stage == "finetune"
    assert loaded.config["v"] == 1


def test_checkpoint_restores_model_and_prompts(tmp_path):
    model = GroundingModel.create(MICRO, seed=16)
    prompts = micro_prompts(seed=17)
    ckpt = Checkpoint.from_state({}, "finetune", 42, None, model, prompts, None)
    path = tmp_path / "c.ckpt"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    restored = loaded.restore_model(MICRO)
    for k, t in model.params.items():
        np.testing.assert_array_equal(restored.params[k].data, t.data.astype(np.float32))
    rp = loaded.restore_prompts()
    np.testing.assert_array_equal(rp.visual.data, prompts.visual.data)
    np.testing.assert_array_equal(rp.text.data, prompts.text.data)
    assert rp.width == prompts.width and rp.mode == prompts.mode
    assert loaded.step == 42


def test_checkpoint_rejects_wrong_config(tmp_path):
    model = GroundingModel.create(MICRO, seed=18)
    ckpt = Checkpoint.from_state({}, "base", 0, None, model, None, None)
    path = tmp_path / "d.ckpt"
    ckpt.save(path)
    other = ModelConfig(
        hidden_dim=4, conv_channels=(2,), conv_strides=(2,), n_layers=1, n_heads=1,
        vocab_size=4, max_text_len=3, grid_side=1, n_text_prompts=0,
    )
    with pytest.raises(ValueError):
        Checkpoint.load(path).restore_model(other)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTRIGHT" + b"\x00" * 32)
    with pytest.raises(ValueError):
        Checkpoint.load(path)
