import json
import math

import numpy as np
import pytest
from scipy.stats import chisquare

from spotkit.autodiff import IntegrityError, Tensor
from spotkit.config import ConfigError, dump_kv, parse_kv
from spotkit.encoder import NumericalError
from spotkit.scenes import SceneSpec, generate_dataset
from spotkit.training import (AdamState, Trainer, TrainConfig, adam_step, epoch_means, load_checkpoint, lr_at,
                              save_checkpoint)

TINY = dict(epochs=2, batch_size=8, warmup_steps=2, d_enc=16, enc_heads=2, d_u=16, slot_mlp_hidden=32,
            d_dec=12, mlp_dec_hidden=32, k=3)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(SceneSpec(image_size=16, patch_size=4, objects_max=3, size_min=4, size_max=8,
                                      min_visible=6), 24, seed=3)


# -- schedule ----------------------------------------------------------------

def test_lr_examples():
    assert lr_at(0) == 0.0
    assert lr_at(500) == 4e-4
    assert lr_at(10_000, total_steps=10_000) == 4e-7
    assert lr_at(50_000, total_steps=10_000) == 4e-7
    assert lr_at(250) == pytest.approx(2e-4)


def test_lr_cosine_midpoint():
    mid = lr_at(5250, warmup_steps=500, total_steps=10_000)
    assert mid == pytest.approx(4e-7 + 0.5 * (4e-4 - 4e-7), rel=1e-12)


def test_lr_monotone_after_warmup():
    vals = [lr_at(s, total_steps=3000) for s in range(500, 3001, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    state = AdamState()
    for _ in range(10):
        adam_step({"p": p}, {"p": np.zeros(2)}, state, 1e-2)
    assert p.data.tolist() == [1.5, -2.0]


def test_adam_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([1.0])}, AdamState(), 1e-3)
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-7)


def _reference_adam(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, out = float(x0), 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


def test_adam_matches_reference_on_quadratic():
    grad = lambda x: 2.0 * (x - 3.0)
    ref = _reference_adam(-1.0, grad, 0.05, 100)
    p = Tensor(np.array([-1.0]), requires_grad=True)
    state = AdamState()
    for want in ref:
        adam_step({"p": p}, {"p": np.array([grad(p.data[0])])}, state, 0.05)
        assert abs(p.data[0] - want) < 1e-10


def test_adam_nan_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericalError, match="weights.7"):
        adam_step({"weights.7": p}, {"weights.7": np.array([0.0, np.nan])}, AdamState(), 1e-3)


# -- config ------------------------------------------------------------------

def test_config_roundtrip():
    cfg = TrainConfig(stage=2, teacher="/tmp/t", lam=0.01, epochs=3)
    assert parse_kv(dump_kv(cfg), TrainConfig) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        parse_kv("epochs = 3\nbogus = 1\n", TrainConfig)


def test_config_comments_and_types():
    cfg = parse_kv("# comment\nepochs = 7  # trailing\nperm_mode = default_only\npeak_lr = 1e-3\n", TrainConfig)
    assert cfg.epochs == 7 and cfg.perm_mode == "default_only" and cfg.peak_lr == 1e-3


@pytest.mark.parametrize("text", ["stage = 2", "warmup_steps = -1", "peak_lr = 1e-8", "decoder = cnn",
                                  "lam = -0.5", "epochs = many"])
def test_config_invalid(text):
    with pytest.raises(ConfigError):
        parse_kv(text, TrainConfig)


def test_lambda_defaults():
    assert TrainConfig().loss_weight == 0.005
    assert TrainConfig(decoder="mlp").loss_weight == 0.001
    assert TrainConfig(lam=0.2).loss_weight == 0.2


def test_trainable_block_defaults():
    assert TrainConfig().encoder_trainable_blocks == 0
    assert TrainConfig(stage=2, teacher="x").encoder_trainable_blocks == 2


# -- trainer -----------------------------------------------------------------

def _params(trainer):
    return {n: p.data.copy() for n, p in trainer.model.named_parameters()}


def test_stage1_keeps_encoder_bit_identical(tiny_data):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    before = {n: a for n, a in _params(tr).items() if n.startswith("encoder.backbone.")}
    tr.run(3)
    after = _params(tr)
    assert before and all(after[n].tobytes() == a.tobytes() for n, a in before.items())
    assert any(after[n].tobytes() != a.tobytes() for n, a in _params(Trainer(TrainConfig(**TINY), tiny_data))
               .items() if n.startswith("decoder."))


def test_history_and_epoch_means(tiny_data):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    tr.run()
    assert len(tr.history) == tr.total_steps == 6
    assert {"step", "epoch", "perm", "loss", "L_REC", "lr"} <= set(tr.history[0])
    assert len(epoch_means(tr.history)) == 2


def test_permutation_draws_uniform(tiny_data):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    draws = [tr._draw_perm() for _ in range(9000)]
    counts = np.bincount(draws, minlength=10)[1:]
    assert chisquare(counts).pvalue > 0.001
    tr_default = Trainer(TrainConfig(**TINY, perm_mode="default_only"), tiny_data)
    assert {tr_default._draw_perm() for _ in range(50)} == {1}


def test_resume_is_deterministic(tiny_data, tmp_path):
    cfg = TrainConfig(**TINY)
    straight = Trainer(cfg, tiny_data)
    straight.run()

    first = Trainer(cfg, tiny_data)
    first.run(4)
    save_checkpoint(first.checkpoint(), tmp_path / "half")
    resumed = Trainer(cfg, tiny_data)
    resumed.restore(load_checkpoint(tmp_path / "half"))
    resumed.run()
    a, b = _params(straight), _params(resumed)
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)
    assert [h["loss"] for h in straight.history] == [h["loss"] for h in resumed.history]


def test_checkpoint_save_load_save_bytes(tiny_data, tmp_path):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    tr.run(2)
    save_checkpoint(tr.checkpoint(), tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_checkpoint_tamper_detected(tiny_data, tmp_path):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    save_checkpoint(tr.checkpoint(), tmp_path / "c")
    victim = sorted((tmp_path / "c" / "params").iterdir())[0]
    blob = bytearray(victim.read_bytes())
    blob[-1] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match=victim.name):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_bad_version(tiny_data, tmp_path):
    tr = Trainer(TrainConfig(**TINY), tiny_data)
    save_checkpoint(tr.checkpoint(), tmp_path / "d")
    meta = json.loads((tmp_path / "d" / "meta.json").read_text())
    meta["version"] = 99
    (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "d")


def test_stage2_teacher_frozen_and_student_fresh(tiny_data, tmp_path):
    teacher_tr = Trainer(TrainConfig(**TINY), tiny_data)
    teacher_tr.run(2)
    save_checkpoint(teacher_tr.checkpoint(), tmp_path / "t")
    teacher = load_checkpoint(tmp_path / "t").build_model()
    frozen = {n: p.data.copy() for n, p in teacher.named_parameters()}
    cfg = TrainConfig(**{**TINY, "stage": 2, "teacher": str(tmp_path / "t")})
    student = Trainer(cfg, tiny_data, teacher)
    assert student.model.cfg.slots.init_mode == "learnable"
    assert student.model.cfg.encoder.trainable_blocks == 2
    student.run(2)
    assert all(p.data.tobytes() == frozen[n].tobytes() for n, p in teacher.named_parameters())
    assert all(not p.requires_grad for p in teacher.parameters())
    rec = student.history[-1]
    assert {"teacher_perm", "L_ATT"} <= set(rec) and rec["L_ATT"] >= 0
    assert math.isclose(rec["loss"], rec["L_REC"] + 0.005 * rec["L_ATT"], rel_tol=1e-5)


def test_stage2_rejects_mismatched_teacher(tiny_data):
    teacher = Trainer(TrainConfig(**TINY), tiny_data).model
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(**{**TINY, "k": 4, "stage": 2, "teacher": "x"}), tiny_data, teacher)
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(**{**TINY, "stage": 2, "teacher": "x"}), tiny_data)
