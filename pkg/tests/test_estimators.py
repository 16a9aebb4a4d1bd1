import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from icleq.channel import ChannelParams, PromptBatch, seeded_prompts
from icleq.estimators import ICLEqualizer, LMMSEEqualizer, ZeroEqualizer, check_prompt_batch
from icleq.harness import evaluate
from icleq.numerics import ContractViolation


def tiny(**kw):
    base = dict(attention="lrms", layers=1, heads=2, embed_dim=8, K=3, steps=5, batch_size=8,
                pool_size=16)
    base.update(kw)
    return ICLEqualizer(**base)


def prompts(K=3, n=4, seed=0):
    return seeded_prompts(ChannelParams(K=K), n, seed=seed)


def test_get_params_and_clone():
    est = tiny(M=3, seed=9)
    params = est.get_params()
    assert params["M"] == 3 and params["seed"] == 9 and params["attention"] == "lrms"
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(embed_dim=16)
    assert est.model_config().embed_dim == 16


def test_labels():
    assert tiny(attention="multi_lms", M=4).label == "icl-multi_lms-M4"
    assert tiny().label == "icl-lrms"
    assert LMMSEEqualizer().label == "lmmse"


def test_predict_requires_fit():
    with pytest.raises(NotFittedError):
        tiny().predict(prompts())


def test_fit_predict_shapes():
    est = tiny().fit()
    assert len(est.loss_curve_) == 5 and est.n_iter_ == 5
    ps = prompts(n=6)
    assert est.predict(ps).shape == (6, 2)
    assert est.predict_positions(ps).shape == (6, 4, 2)
    assert est.predict(ps[0]).shape == (1, 2)
    np.testing.assert_array_equal(est.predict(ps), est.predict(PromptBatch.from_prompts(ps)))
    assert est.score(ps) <= 0
    assert est.loss(ps) > 0


def test_fit_on_fixed_prompts():
    est = tiny(steps=30, learning_rate=3e-3).fit(prompts(n=8))
    assert est.loss_curve_[-1] < est.loss_curve_[0]
    with pytest.raises(ContractViolation):
        tiny().fit(prompts(K=5))


def test_save_and_load(tmp_path):
    est = tiny(attention="multi_lms", M=2, seed=4).fit()
    est.save(tmp_path / "ck")
    back = ICLEqualizer.load(tmp_path / "ck")
    assert back.get_params() == est.get_params()
    ps = prompts(n=5, seed=2)
    np.testing.assert_array_equal(back.predict(ps), est.predict(ps))
    # a loaded checkpoint plugs straight into the harness
    p = ChannelParams(K=3)
    assert evaluate(f"model:{tmp_path / 'ck'}", p, 20, seed=1) == evaluate(back, p, 20, seed=1)


def test_lmmse_and_zero_equalizers():
    ps = prompts(n=50)
    # the zero equalizer scores exactly -1 on normalized QPSK
    assert LMMSEEqualizer().fit().score(ps) > -1.0
    np.testing.assert_array_equal(ZeroEqualizer().predict(ps), np.zeros((50, 2)))


def test_check_prompt_batch_inputs():
    ps = prompts(n=2)
    b = check_prompt_batch(ps)
    assert len(b) == 2
    b2 = check_prompt_batch((b.x, b.y))
    np.testing.assert_array_equal(b2.y, b.y)
    with pytest.raises(ContractViolation):
        check_prompt_batch("prompts")
    with pytest.raises(ContractViolation):
        check_prompt_batch((b.x[:, :2], b.y))
    with pytest.raises(ContractViolation):
        check_prompt_batch((b.x, b.y), m2=3)
    with pytest.raises(ContractViolation):
        check_prompt_batch((b.x, b.y * np.nan))
    with pytest.raises(ContractViolation):
        LMMSEEqualizer().predict((b.x, b.y))


def test_prompt_longer_than_model_is_rejected():
    est = tiny().fit()
    with pytest.raises(ContractViolation):
        est.predict(prompts(K=10))
