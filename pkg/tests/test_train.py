import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrframe.cohort import DegenerateCohortError, shuffled_batches
from ehrframe.model import TimeframeModel
from ehrframe.numcore import Tape, Tensor, ops, stream
from ehrframe.train import (
    AdamState,
    TrainConfigError,
    TrainPlan,
    adamw_step,
    finetune,
    finetune_defaults,
    fisher_scores,
    focal_loss,
    load_pretrain_checkpoint,
    masked_pretrain_loss,
    pretrain,
    pretrain_defaults,
    resolve_alpha,
    sample_mask_rows,
    save_pretrain_checkpoint,
    top_fraction_mask,
    warmup_schedule,
)

from helpers import micro_config, random_set


# -- focal loss ------------------------------------------------------------------

def test_focal_closed_form():
    got = float(focal_loss([0.9], [1], gamma=2.0, alpha_pos=1.0).data)
    assert got == pytest.approx(-(0.1 ** 2) * math.log(0.9), rel=1e-5)
    assert got == pytest.approx(0.0010536, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-4, 1 - 1e-4), st.integers(0, 1)), min_size=1, max_size=20))
def test_focal_gamma_zero_is_half_cross_entropy(pairs):
    p = np.array([a for a, _ in pairs], dtype=np.float32).astype(np.float64)   # the representable inputs
    y = np.array([b for _, b in pairs])
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert float(focal_loss(p, y, gamma=0.0, alpha_pos=0.5).data) == pytest.approx(0.5 * bce, rel=1e-5, abs=1e-6)


def test_focal_decreases_monotonically_as_pt_grows():
    p = np.linspace(0.05, 0.999, 200)
    pos = [float(focal_loss([q], [1]).data) for q in p]
    neg = [float(focal_loss([1 - q], [0]).data) for q in p]
    assert all(b < a for a, b in zip(pos, pos[1:]))
    assert all(b < a for a, b in zip(neg, neg[1:]))
    assert pos[-1] < 1e-6


def test_focal_clamps_extreme_probabilities():
    assert float(focal_loss([0.0], [1], gamma=0.0, alpha_pos=None).data) == pytest.approx(-math.log(1e-7), rel=1e-5)
    upper = float(np.float32(1.0 - 1e-7))
    assert float(focal_loss([1.0], [0], gamma=0.0, alpha_pos=None).data) == pytest.approx(-math.log(1 - upper), rel=1e-5)


def test_focal_rejects_bad_labels():
    with pytest.raises(ValueError):
        focal_loss([0.5], [2])


# -- masked pretraining loss ------------------------------------------------------------

def test_masked_loss_mean_of_squares():
    recon = Tensor(np.zeros((1, 2, 2)))
    target = np.array([[[1.0, -1.0], [5.0, 5.0]]])
    mask = np.array([[True, False]])
    assert float(masked_pretrain_loss(recon, target, mask, k=2).data) == 1.0


def test_masked_loss_saturated_logits_hit_floor():
    target = np.array([[[0.5, 1.0, 0.0]]])
    recon = Tensor(np.array([[[0.5, 40.0, -40.0]]]))
    assert float(masked_pretrain_loss(recon, target, np.array([[True]]), k=1).data) < 1e-12


def test_masked_loss_ignores_unmasked_rows(rng):
    recon = rng.normal(size=(3, 5, 4))
    target = rng.normal(size=(3, 5, 4))
    target[..., 2:] = rng.random((3, 5, 2)) < 0.5
    mask = rng.random((3, 5)) < 0.4
    mask[0, 0] = True
    base = float(masked_pretrain_loss(Tensor(recon), target, mask, 2).data)
    recon2, target2 = recon.copy(), target.copy()
    recon2[~mask] += 100.0
    target2[~mask] = 7.0
    assert float(masked_pretrain_loss(Tensor(recon2), target2, mask, 2).data) == base


def test_masked_loss_needs_a_mask():
    with pytest.raises(ValueError):
        masked_pretrain_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)), np.zeros((1, 2), bool), 2)


def test_mask_sampling_fraction(rng):
    pad = np.zeros((50, 30), dtype=bool)
    n_real = rng.integers(1, 31, size=50)
    for i, n in enumerate(n_real):
        pad[i, 30 - n:] = True
    mask = sample_mask_rows(pad, 0.15, rng)
    assert not (mask & ~pad).any()
    np.testing.assert_array_equal(mask.sum(axis=1), np.maximum(1, np.round(0.15 * n_real)))


# -- AdamW -------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([1.5, -2.0], dtype=np.float32)}
    out = adamw_step(p, {"w": np.zeros(2, np.float32)}, AdamState(), 0.1, 0.0)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adamw_zero_grad_is_pure_shrinkage():
    p = {"w": np.array([1.5, -2.0], dtype=np.float32)}
    out = adamw_step(p, {"w": np.zeros(2, np.float32)}, AdamState(), 0.1, 0.3)
    np.testing.assert_allclose(out["w"], p["w"] * (1 - 0.1 * 0.3), rtol=1e-7)


def test_adamw_first_step_matches_reference():
    p, g = np.array([0.5], np.float32), np.array([2.0], np.float32)
    out = adamw_step({"w": p}, {"w": g}, AdamState(), 1e-2, 0.1)["w"]
    # bias-corrected first step: m_hat = g, v_hat = g^2
    want = p * (1 - 1e-2 * 0.1) - 1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out, want, rtol=1e-6)


def test_adamw_converges_on_quadratic():
    w, state = {"w": np.array([3.0], np.float32)}, AdamState()
    for _ in range(500):
        w = adamw_step(w, {"w": 2 * (w["w"] - 1.25)}, state, 0.05, 0.0)
    assert abs(float(w["w"][0]) - 1.25) < 1e-3


def test_adamw_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(2, np.float32)}, {"w": np.zeros(3, np.float32)}, AdamState(), 0.1, 0.0)


# -- warmup schedule ----------------------------------------------------------------

def test_warmup_examples():
    m, total, lr = 10, 110, 1e-3
    assert warmup_schedule(0, m, total, lr) == 0.0
    assert warmup_schedule(m, m, total, lr) == lr
    assert warmup_schedule((m + total) // 2, m, total, lr) == pytest.approx(lr / 2)


def test_warmup_is_continuous_piecewise_linear():
    m, total = 7, 40
    lrs = np.array([warmup_schedule(s, m, total, 1.0) for s in range(total)])
    assert lrs.argmax() == m
    np.testing.assert_allclose(np.diff(lrs[:m + 1]), 1 / m)
    np.testing.assert_allclose(np.diff(lrs[m:]), -1 / (total - m))


def test_warmup_errors():
    with pytest.raises(TrainConfigError):
        warmup_schedule(0, 10, 10, 1.0)
    with pytest.raises(ValueError):
        warmup_schedule(10, 2, 10, 1.0)


# -- plans -------------------------------------------------------------------------

def test_plan_defaults():
    pre, fine = pretrain_defaults(), finetune_defaults()
    assert (pre.batch_size, pre.dropout, pre.base_lr, pre.weight_decay) == (32, 0.1, 1e-4, 0.2)
    assert (fine.batch_size, fine.dropout, fine.base_lr, fine.weight_decay) == (17, 0.5, 1e-3, 0.3)
    assert fine.focal_gamma == 2.0 and not fine.child_tuning and fine.sampler == "weighted"


@pytest.mark.parametrize("changes", [dict(base_lr=0.0), dict(keep_fraction=0.0), dict(keep_fraction=1.5),
                                     dict(warmup_steps=-1), dict(stage="tune"), dict(sampler="smote")])
def test_plan_validation(changes):
    with pytest.raises(TrainConfigError):
        TrainPlan(**changes)


def test_multipliers_scale_lr_and_decay():
    plan = TrainPlan(lr_multiplier=3.0, wd_multiplier=0.5)
    assert plan.lr == pytest.approx(3e-3) and plan.decay == pytest.approx(0.15)


def test_inverse_frequency_alpha():
    labels = np.array([0] * 95 + [1] * 5)
    assert resolve_alpha(TrainPlan(), labels) == pytest.approx(0.95)
    assert resolve_alpha(TrainPlan(focal_alpha_mode="fixed", focal_alpha=0.25), labels) == 0.25
    assert resolve_alpha(TrainPlan(focal_alpha_mode="none"), labels) is None


# -- child tuning ---------------------------------------------------------------------

def test_keep_all_mask():
    scores = {"a": np.random.default_rng(0).random((3, 4)), "b": np.zeros(5)}
    mask = top_fraction_mask(scores, 1.0)
    assert all(m.all() for m in mask.masks.values())


def test_tie_break_keeps_first_entries_in_name_order():
    scores = {"b": np.ones(4), "a": np.ones((2, 2))}
    mask = top_fraction_mask(scores, 0.5)
    assert mask.masks["a"].all() and not mask.masks["b"].any()
    mask = top_fraction_mask(scores, 0.75)
    assert mask.masks["b"].tolist() == [True, True, False, False]


def test_mask_keeps_highest_scores_globally(rng):
    scores = {"x": rng.random(40), "y": rng.random((6, 10))}
    mask = top_fraction_mask(scores, 0.3)
    assert mask.n_kept == 30
    flat = np.concatenate([scores["x"], scores["y"].ravel()])
    kept = np.concatenate([mask.masks["x"], mask.masks["y"].ravel()])
    assert flat[kept].min() > flat[~kept].max()


def test_fisher_scores_are_mean_squared_gradients(rng):
    w = Tensor(np.array([1.0, -2.0, 0.5], np.float32), requires_grad=True)

    class Tiny:
        def named_parameters(self):
            return [("w", w)]

        def parameters(self):
            return [w]

        def zero_grad(self):
            w.grad = None

    x = rng.normal(size=(12, 3)).astype(np.float32)
    plan = TrainPlan(fisher_batches=3, batch_size=4)
    scores = fisher_scores(Tiny(), x, plan, lambda m, idx: ops.matmul(x[idx], w.reshape(3, 1)).sum())
    order = stream(plan.seed, "fisher").permutation(12)
    want = np.mean([x[order[4 * b:4 * b + 4]].sum(axis=0).astype(np.float64) ** 2 for b in range(3)], axis=0)
    np.testing.assert_allclose(scores["w"], want, rtol=1e-5)


def test_masked_out_entries_only_decay(rng):
    """After 100 masked steps, every masked-out entry equals init * (1 - lr*wd)^100."""
    ts = random_set(rng, 24, 4, 3, 3, labels=np.array([0, 1] * 12))
    model = TimeframeModel(micro_config())
    init = model.state()
    plan = finetune_defaults(batch_size=4, epochs=17, child_tuning=True, keep_fraction=0.3, schedule="constant",
                             dropout=0.0, base_lr=1e-3, weight_decay=0.3)
    seen = []
    result = finetune(model, ts, None, plan, on_grads=lambda g: seen.append(g))
    assert len(seen) == 102
    mask = result.child_mask
    for grads in seen:
        for name, g in grads.items():
            assert not g[~mask.masks[name]].any()
    shrink = np.float32(1.0 - 1e-3 * 0.3)
    for name, t in result.model.named_parameters():
        off = ~mask.masks[name]
        want = init[name][off]
        for _ in range(len(seen)):
            want = (want * shrink).astype(np.float32)
        np.testing.assert_array_equal(t.data[off], want)


# -- pretraining loop ---------------------------------------------------------------------

def _pre_plan(**changes):
    return pretrain_defaults(**{"batch_size": 8, "epochs": 2, "base_lr": 1e-3, "dropout": 0.0, **changes})


def test_curve_length_and_csv(tmp_path, rng):
    ts = random_set(rng, 21, 4, 3, 3)
    model = TimeframeModel(micro_config())
    result = pretrain(model, ts, _pre_plan(), curve_path=tmp_path / "curve.csv")
    assert len(result.losses) == 2 * math.ceil(21 / 8)
    with open(tmp_path / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(6))
    assert [float(r["loss"]) for r in rows] == pytest.approx(result.losses)


def test_resume_is_bit_exact(tmp_path, rng):
    ts = random_set(rng, 20, 4, 3, 3)
    plan = _pre_plan(epochs=3)
    full = pretrain(TimeframeModel(micro_config(dropout=0.1)), ts, plan.replace(dropout=0.1))
    part = pretrain(TimeframeModel(micro_config(dropout=0.1)), ts, plan.replace(dropout=0.1), stop_after=4)
    save_pretrain_checkpoint(part, plan, tmp_path / "ckpt")
    resumed = pretrain(part.model, ts, plan.replace(dropout=0.1),
                       resume=load_pretrain_checkpoint(tmp_path / "ckpt"))
    assert resumed.losses == full.losses
    for name, t in full.model.named_parameters():
        assert resumed.model.params[name].data.tobytes() == t.data.tobytes()


def test_pretraining_on_signal_free_data_learns_structure():
    rng = np.random.default_rng(11)
    ts = random_set(rng, 64, 6, 3, 3, min_real=4)
    ts.values[:, :, :3] = np.where(ts.pad_mask[..., None], 1.5 + 0.2 * ts.values[:, :, :3], 0.0)
    result = pretrain(TimeframeModel(micro_config(p_max=6)), ts, _pre_plan(epochs=4, batch_size=16))
    losses = result.losses
    assert np.mean(losses[-4:]) < np.mean(losses[:4])


def test_pretrain_rejects_wrong_stage(rng):
    with pytest.raises(TrainConfigError):
        pretrain(TimeframeModel(micro_config()), random_set(rng, 4, 4, 3, 3), finetune_defaults())


# -- fine-tuning loop -------------------------------------------------------------------------

def test_single_class_training_is_degenerate(rng):
    ts = random_set(rng, 10, 4, 3, 3, labels=np.zeros(10, int))
    with pytest.raises(DegenerateCohortError):
        finetune(TimeframeModel(micro_config()), ts, None, finetune_defaults(epochs=1))


def test_weighted_sampler_balances_batches(rng, monkeypatch):
    from ehrframe.train import loops
    n, prevalence = 1000, 0.044
    labels = (np.arange(n) < round(n * prevalence)).astype(int)
    ts = random_set(rng, n, 2, 3, 3, labels=labels)
    drawn = []

    def recording(*args, **kwargs):
        batches = real(*args, **kwargs)
        drawn.extend(batches)
        return batches

    real = loops.weighted_batches
    monkeypatch.setattr(loops, "weighted_batches", recording)
    finetune(TimeframeModel(micro_config(p_max=2)), ts, None, finetune_defaults(epochs=4))
    fractions = [labels[idx].mean() for idx in drawn]
    assert len(fractions) >= 200 and all(len(idx) == 17 for idx in drawn)
    assert abs(np.mean(fractions) - 0.5) <= 0.05


def test_finetune_is_deterministic(tmp_path, rng):
    train = random_set(rng, 30, 4, 3, 3, labels=np.array([0, 0, 1] * 10))
    val = random_set(rng, 12, 4, 3, 3, labels=np.array([0, 1] * 6))
    plan = finetune_defaults(batch_size=6, epochs=3, dropout=0.2)
    a = finetune(TimeframeModel(micro_config()), train, val, plan, metrics_path=tmp_path / "a.csv")
    b = finetune(TimeframeModel(micro_config()), train, val, plan, metrics_path=tmp_path / "b.csv")
    assert a.losses == b.losses and a.val_auc == b.val_auc and a.best_epoch == b.best_epoch
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 4


def test_best_epoch_parameters_are_kept(rng):
    train = random_set(rng, 30, 4, 3, 3, labels=np.array([0, 1] * 15))
    val = random_set(rng, 12, 4, 3, 3, labels=np.array([0, 1] * 6))
    result = finetune(TimeframeModel(micro_config()), train, val, finetune_defaults(batch_size=6, epochs=4))
    aucs = [r["val_auc"] for r in result.history]
    assert result.best_epoch == int(np.argmax(aucs)) and result.val_auc == max(aucs)
    from ehrframe.train import evaluate_auc
    assert evaluate_auc(result.model, val) == result.val_auc


def test_component_ablation_reduces_to_cross_entropy(rng):
    """Uniform sampler, gamma 0, no alpha and no child mask is plain CE training."""
    train = random_set(rng, 20, 4, 3, 3, labels=np.array([0, 1, 1, 0] * 5))
    plan = finetune_defaults(batch_size=5, epochs=2, sampler="uniform", focal_gamma=0.0, focal_alpha_mode="none",
                             dropout=0.0, child_tuning=False, schedule="constant", base_lr=1e-3)
    model = TimeframeModel(micro_config())
    result = finetune(model, train, None, plan)

    ref = model.copy()
    state = AdamState()
    names = [n for n, _ in ref.named_parameters()]
    ref_losses = []
    for epoch in range(2):
        for idx in shuffled_batches(20, 5, stream(plan.seed, "finetune-batches", epoch)):
            ref.zero_grad()
            with Tape() as tape:
                loss = ops.bce_with_logits(ref.logits(train.values[idx], train.pad_mask[idx]), train.labels[idx]).mean()
                loss = loss + ForwardKL.of(ref, train.values[idx], train.pad_mask[idx])
                tape.backward(loss, ref.parameters())
            ref_losses.append(float(loss.data))
            new = adamw_step({n: ref.params[n].data for n in names}, {n: ref.params[n].grad for n in names},
                             state, plan.lr, plan.decay)
            for n in names:
                ref.params[n].data = new[n]
    np.testing.assert_allclose(result.losses, ref_losses, rtol=1e-5)
    for name in names:
        # Adam normalises near-zero gradients, so their f32 round-off moves by a fraction of one step
        np.testing.assert_allclose(result.model.params[name].data, ref.params[name].data, atol=0.1 * plan.lr)


class ForwardKL:
    """The GCT consistency penalty the fine-tune objective adds on top of the task loss."""

    @staticmethod
    def of(model, values, pad):
        from ehrframe.model import ForwardAux
        aux = ForwardAux()
        model.logits(values, pad, aux=aux)
        return aux.kl * model.config.gct_kl_weight if aux.kl is not None else 0.0
