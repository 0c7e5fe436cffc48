import numpy as np
import pytest

from learnpruner.autodiff import Tape, Tensor
from learnpruner.bench.data import generate_dataset
from learnpruner.decoder import SequenceLayout
from learnpruner.lpm import LpmParams, NonFiniteLoss, TrainConfig, predict, prune_loss, ste_mask, train

from conftest import central_diff, relerr, small_checkpoint


def test_zero_head_keeps_everything(rng):
    d = predict(LpmParams.init(16), rng.normal(size=(9, 16)))
    assert np.all(d.soft.data == 0.5) and np.all(d.hard == 1.0)


def test_predict_hard_is_argmax(rng):
    p = LpmParams.init(8)
    p.w2.data = rng.normal(size=p.w2.shape)
    d = predict(p, rng.normal(size=(50, 8)))
    assert np.all((d.soft.data >= 0) & (d.soft.data <= 1))
    assert np.array_equal(d.hard, (d.soft.data >= 0.5).astype(float))
    with pytest.raises(ValueError):
        predict(p, rng.normal(size=(3, 7)))


def test_prune_loss_examples(rng):
    assert float(prune_loss(np.ones(8), 1.0).data) == 0.0
    assert float(prune_loss(np.ones(8), 0.0).data) == 1.0
    m = rng.random(10)
    assert np.isclose(float(prune_loss(m, 0.3).data), (m.mean() - 0.3) ** 2)
    assert float(prune_loss(m, 0.3).data) == float(prune_loss(m[::-1].copy(), 0.3).data)
    with pytest.raises(ValueError):
        prune_loss(m, 1.5)


def _loss_with_mask(ck, emb, layout, answers, mask, lam):
    l_ntp = ck.decoder.training_forward(Tensor(emb), layout, mask, answers)
    return l_ntp + lam * prune_loss(mask, 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_end_to_end_ste_gradient_matches_soft_path_fd(seed):
    """Finite differences of hard0 + soft(theta) - soft(theta0) through the frozen model."""
    ck = small_checkpoint(seed=seed)
    ds = generate_dataset(3, grid=(4, 4), seed=seed)
    feats = ck.encoder.encode(ds.images).tokens
    layout = SequenceLayout(16, ds.queries.shape[1], ds.answers.shape[1])
    emb = ck.decoder.embed(feats, np.concatenate([ds.queries, ds.answers], 1)).data
    p = ck.lpm
    dec0 = predict(p, feats)
    hard0, soft0 = dec0.hard, dec0.soft.data.copy()
    with Tape() as tape:
        loss = _loss_with_mask(ck, emb, layout, ds.answers, ste_mask(predict(p, feats)), 1.0)
    for t in p.tensors():
        t.grad = None
    tape.backward(loss)

    def f():
        soft = predict(p, feats).soft.data
        return float(_loss_with_mask(ck, emb, layout, ds.answers, hard0 + soft - soft0, 1.0).data)

    for t in p.tensors():
        assert relerr(t.grad, central_diff(f, t.data, 1e-6)) <= 1e-3


def test_zero_steps_and_zero_lambda_leave_params(ckpt):
    ds = generate_dataset(4, grid=(4, 4))
    res = train(ckpt.lpm, ckpt.encoder, ckpt.decoder, ds, TrainConfig(lambda_loss=0.0, steps=0))
    for a, b in zip(res.params.tensors(), ckpt.lpm.tensors()):
        assert np.array_equal(a.data, b.data)
    assert res.trace == []


def test_training_never_touches_frozen_weights(ckpt):
    before = {k: v.copy() for k, v in ckpt.decoder.state().items()}
    enc_before = {k: v.data.copy() for k, v in ckpt.encoder.params.items()}
    ds = generate_dataset(8, grid=(4, 4))
    train(ckpt.lpm, ckpt.encoder, ckpt.decoder, ds, TrainConfig(steps=5, batch_size=4))
    assert all(np.array_equal(before[k], v) for k, v in ckpt.decoder.state().items())
    assert all(np.array_equal(enc_before[k], v.data) for k, v in ckpt.encoder.params.items())


def test_unfrozen_decoder_rejected(ckpt):
    ckpt.decoder.freeze(False)
    with pytest.raises(ValueError):
        train(ckpt.lpm, ckpt.encoder, ckpt.decoder, generate_dataset(4, grid=(4, 4)), TrainConfig(steps=1))


def test_training_is_deterministic(ckpt):
    ds = generate_dataset(8, grid=(4, 4))
    cfg = TrainConfig(steps=6, batch_size=4, lr=0.5)
    a = train(ckpt.lpm, ckpt.encoder, ckpt.decoder, ds, cfg)
    b = train(ckpt.lpm, ckpt.encoder, ckpt.decoder, ds, cfg)
    assert a.trace == b.trace
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params.tensors(), b.params.tensors()))


def test_large_lambda_drives_keep_rate_down():
    ck = small_checkpoint(trained_head=False)
    ds = generate_dataset(32, grid=(4, 4), seed=5)
    res = train(ck.lpm, ck.encoder, ck.decoder, ds, TrainConfig(lambda_loss=100.0, steps=60, batch_size=8, lr=0.05))
    feats = ck.encoder.encode(ds.images).tokens
    assert predict(res.params, feats).hard.mean() < 0.1


def test_non_finite_loss_reports_step(ckpt):
    ds = generate_dataset(4, grid=(4, 4))
    ckpt.decoder.params["head"].data[:] = np.nan
    with pytest.raises(NonFiniteLoss) as err:
        train(ckpt.lpm, ckpt.encoder, ckpt.decoder, ds, TrainConfig(steps=3, batch_size=2))
    assert err.value.step == 0


def test_state_round_trip(ckpt):
    p = LpmParams.from_state(ckpt.lpm.state())
    assert all(np.array_equal(a.data, b.data) for a, b in zip(p.tensors(), ckpt.lpm.tensors()))
    with pytest.raises(ValueError):
        TrainConfig(tau=2.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
