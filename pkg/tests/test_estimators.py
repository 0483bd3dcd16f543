import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mwer_rescore import simulator as sim
from mwer_rescore.estimators import NBestRescorer, XentLanguageModel, check_texts, check_utterances

SMALL = dict(embed_dim=6, hidden_dim=8, context_dim=4, attention_dim=3, epochs=1)


@pytest.fixture(scope="module")
def task():
    return sim.generate_task(sizes={"train": 20, "dev": 10}, config=sim.SimConfig(dim=8), seed=0, text_size=30)


def test_params_and_clone():
    est = NBestRescorer(attention="a3", lam=0.5)
    assert est.get_params()["lam"] == 0.5
    c = clone(est).set_params(lam=0.2)
    assert c.lam == 0.2 and est.lam == 0.5


def test_not_fitted(task):
    with pytest.raises(NotFittedError):
        NBestRescorer().predict(task.splits["dev"])
    with pytest.raises(NotFittedError):
        XentLanguageModel().perplexity(["play jazz"])


def test_validation_helpers(task):
    with pytest.raises(ValueError):
        check_utterances([])
    with pytest.raises(TypeError):
        check_utterances(task.splits["dev"][0])
    with pytest.raises(TypeError):
        check_utterances(["play jazz"])
    with pytest.raises(TypeError):
        check_texts("play jazz")
    assert check_texts(("a b",)) == ["a b"]


def test_rescorer_fit_predict_score(task):
    est = NBestRescorer(attention="a3", encoder="cnn", **SMALL).fit(task.splits["train"], dev=task.splits["dev"])
    preds = est.predict(task.splits["dev"])
    assert len(preds) == len(task.splits["dev"])
    assert all(p in u.hyp_words for p, u in zip(preds, task.splits["dev"]))
    rep = est.evaluate(task.splits["dev"])
    assert est.score(task.splits["dev"]) == -rep.wer
    assert est.alpha_ in est.alpha_grid


def test_pretrained_init(task):
    lm = XentLanguageModel(embed_dim=6, hidden_dim=8, epochs=1).fit(task.text)
    assert lm.perplexity(task.text) > 1
    assert lm.score(task.text) == pytest.approx(-np.log(lm.perplexity(task.text)))
    est = NBestRescorer(init=lm, tune_alpha=False, **SMALL).fit(task.splits["train"])
    assert est.vocab_ is lm.vocab_ and est.alpha_ == 1.0
