import math

import pytest
import torch

from affectdiff.config import TrainConfig, apply_ablation
from affectdiff.data import stream
from affectdiff.model import AffectDiff, LossParts
from affectdiff.train import (NumericalAbort, clip_gradients, combine, cosine_lr, joint_loss, load_checkpoint,
                              save_checkpoint, train, warmup_factors)
from affectdiff.metrics import evaluate
from conftest import tiny_config


def test_warmup_examples():
    assert warmup_factors(0) == (0.0, 0.0)
    g, gk = warmup_factors(10)
    assert g == 0.5 and abs(gk - 1 / 3) < 1e-15
    assert warmup_factors(60) == (1.0, 1.0)


def test_delayed_diffusion_warmup_option():
    t = TrainConfig(diffusion_warmup_start=9)
    assert warmup_factors(9, t)[0] == 0.0 and warmup_factors(19, t)[0] == 0.5 and warmup_factors(29, t)[0] == 1.0


def test_joint_loss_examples():
    cfg = tiny_config()
    parts = (1.0, 0.2, 0.8, 0.1)
    assert abs(joint_loss(parts, 30, cfg).total - 1.245) < 1e-12
    assert abs(joint_loss(parts, 30, apply_ablation(cfg, "no_diffusion")).total - 1.205) < 1e-12
    assert abs(joint_loss(parts, 0, cfg).total - 1.005) < 1e-12
    assert abs(joint_loss(parts, 30, apply_ablation(cfg, "no_vae")).total - 1.045) < 1e-12
    assert abs(joint_loss(parts, 30, apply_ablation(cfg, "no_causal_graph")).total - 1.24) < 1e-12


def test_cosine_lr():
    t = TrainConfig()
    assert cosine_lr(0, t) == t.lr and cosine_lr(100, t) == 0.0 and abs(cosine_lr(50, t) - t.lr / 2) < 1e-18


def _batch(data, n=16):
    return next(data.train.batches(n))


def test_forward_runs_for_every_ablation(tiny_data):
    b = _batch(tiny_data)
    for token in ("none", "no_diffusion", "no_causal_graph", "gumbel", "no_stop_gradient", "no_vae"):
        cfg = apply_ablation(tiny_config(), token)
        torch.manual_seed(0)
        model = AffectDiff(cfg)
        parts, out = model.loss_parts(b, stream(0))
        total, _, _ = combine(parts, 25, cfg)
        assert torch.isfinite(total)
        assert out.logits.shape == (16, 6) and out.z.shape == (16, 8, 8)
        if token == "no_diffusion":
            assert model.unet is None and parts.diff.item() == 0
        if token == "no_vae":
            assert parts.kl.item() == 0 and parts.diff.item() > 0
        if token == "no_causal_graph":
            assert torch.all(out.graph.weights == 1 / 3)


def _rep_grads(model, batch, epoch=25):
    model.zero_grad(set_to_none=True)
    torch.manual_seed(7)  # classifier dropout draws from the global generator
    parts, _ = model.loss_parts(batch, stream(1))
    combine(parts, epoch, model.cfg)[0].backward()
    return {n: (p.grad.clone() if p.grad is not None else None) for n, p in model.representation_parameters()}


def test_stop_gradient_blocks_diffusion_gradient(tiny_data):
    b = _batch(tiny_data)
    cfg = tiny_config()
    torch.manual_seed(0)
    model = AffectDiff(cfg)
    with_d = _rep_grads(model, b)
    model.cfg = cfg.with_values(train__lambda_d=0.0)
    without = _rep_grads(model, b)
    assert all(torch.equal(with_d[k], without[k]) for k in with_d)
    model.cfg = apply_ablation(cfg, "no_stop_gradient")
    leaky = _rep_grads(model, b)
    model.cfg = apply_ablation(cfg, "no_stop_gradient").with_values(train__lambda_d=0.0)
    assert any(not torch.equal(leaky[k], v) for k, v in _rep_grads(model, b).items())


def test_clip_gradients_bounds_norm():
    p = torch.nn.Parameter(torch.zeros(10))
    p.grad = torch.full((10,), 3.0)
    pre = clip_gradients([p], 1.0)
    assert abs(pre - 3 * math.sqrt(10)) < 1e-5
    assert p.grad.norm().item() <= 1.0 + 1e-6


def test_training_logs_checkpoint_roundtrip_and_reproducibility(tiny_data, tmp_path):
    cfg = tiny_config(train__epochs=3)
    a = train(cfg, tiny_data, tmp_path / "a")
    b = train(cfg, tiny_data, tmp_path / "b")
    assert [r["epoch"] for r in a.epoch_log] == [0, 1, 2]
    assert a.epoch_log == b.epoch_log
    assert (tmp_path / "a/best.affd").read_bytes() == (tmp_path / "b/best.affd").read_bytes()
    best = max(r["val_balanced_accuracy"] for r in a.epoch_log)
    assert a.best_val_balanced_accuracy == best
    assert a.epoch_log[a.best_epoch]["val_balanced_accuracy"] == best
    for row in a.epoch_log:
        assert abs(row["w_T"] + row["w_A"] + row["w_V"] - 1) < 1e-6
        rebuilt = joint_loss(LossParts(row["task"], row["kl"], row["diff"], row["causal"], row["recon"]),
                             row["epoch"], cfg)
        assert rebuilt.total == row["total"]
    ck = load_checkpoint(a.checkpoint)
    assert ck.epoch == a.best_epoch and ck.config == cfg
    r1 = evaluate(a.model, tiny_data.val, 6)
    r2 = evaluate(ck.model.eval(), tiny_data.val, 6)
    assert r1 == r2
    ema_keys = [k for k in ck.model.state_dict() if k.startswith("ema.")]
    assert ema_keys and ck.optimizer_state


def test_resume_continues_from_best(tiny_data, tmp_path):
    cfg = tiny_config(train__epochs=2)
    first = train(cfg, tiny_data, tmp_path)
    more = train(cfg.with_values(train__epochs=3), tiny_data, tmp_path, resume=True)
    assert more.epoch_log[: first.best_epoch + 1] == first.epoch_log[: first.best_epoch + 1]
    assert more.epoch_log[-1]["epoch"] == 2


def test_early_stopping_log_length(tiny_data):
    cfg = tiny_config(train__epochs=12, train__patience=1, train__lr=0.0)
    art = train(cfg, tiny_data)
    assert art.stopped_early
    assert len(art.epoch_log) == art.best_epoch + 2


def test_nan_loss_aborts_with_diagnostics(tiny_data):
    cfg = tiny_config(train__lr=1e30, train__weight_decay=0.0, train__epochs=2)
    with pytest.raises(NumericalAbort) as exc:
        train(cfg, tiny_data)
    assert {"epoch", "batch", "task"} <= set(exc.value.diagnostics)


def test_checkpoint_rejects_non_float32(tmp_path):
    model = AffectDiff(tiny_config()).double()
    from affectdiff.affd import FormatError
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "x", model, None, 0)
