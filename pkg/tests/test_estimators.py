import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from eibert.estimators import (CrossDistillationClassifier, ModuleWiseQuantizer, TokenImportancePruner,
                               TransformerClassifier, check_labels, check_sequences)
from eibert.model import run_forward
from eibert.vocab import UNK_ID

SMALL = dict(embed_dim=16, hidden_dim=16, intermediate_dim=32, num_layers=2, num_heads=2, max_seq_len=12)


@pytest.fixture(scope="module")
def xy(small_splits):
    tr, te = small_splits["train"], small_splits["test"]
    return tr.sequences, tr.labels, te.sequences, te.labels


@pytest.fixture(scope="module")
def teacher(xy):
    X, y, _, _ = xy
    return TransformerClassifier(vocab_size=120, steps=150, lr=3e-3, seed=1, **SMALL).fit(X, y)


class TestValidation:
    def test_lists_pass_through(self):
        assert check_sequences([[4, 5], (6,)]) == [[4, 5], [6]]

    def test_padded_array(self):
        assert check_sequences(np.array([[4, 5, 0], [6, 0, 0]])) == [[4, 5], [6]]

    @pytest.mark.parametrize("bad, err", [
        ([], ValueError), ([[4], []], ValueError), ([[-1]], ValueError), ([[4, 99]], ValueError),
        (np.zeros(3, dtype=int), ValueError), (np.zeros((2, 2)), TypeError), (5, TypeError),
    ])
    def test_rejects(self, bad, err):
        with pytest.raises(err):
            check_sequences(bad, vocab_size=50)

    def test_empty_allowed_when_asked(self):
        assert check_sequences([[4], []], allow_empty=True) == [[4], []]

    def test_labels(self):
        with pytest.raises(ValueError):
            check_labels([0, 1], 3)
        with pytest.raises(ValueError):
            check_labels([[0], [1]], 2)


class TestParams:
    @pytest.mark.parametrize("est", [TransformerClassifier(hidden_dim=8), CrossDistillationClassifier(mode="kd"),
                                     TokenImportancePruner(k=0.3), ModuleWiseQuantizer(iters=5)])
    def test_clone_round_trip(self, est):
        c = clone(est)
        assert c.get_params() == est.get_params() and c is not est

    def test_set_params(self):
        est = TransformerClassifier().set_params(hidden_dim=32, steps=7)
        assert est.hidden_dim == 32 and est.get_params()["steps"] == 7

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            TransformerClassifier().predict([[4, 5]])
        with pytest.raises(NotFittedError):
            TokenImportancePruner().transform([[4]])


class TestClassifier:
    def test_learns_task(self, teacher, xy):
        _, _, Xt, yt = xy
        assert teacher.score(Xt, yt) > 0.6
        p = teacher.predict_proba(Xt)
        assert p.shape == (len(Xt), 3) and np.allclose(p.sum(1), 1)
        assert np.array_equal(teacher.decision_function(Xt).argmax(1), p.argmax(1))

    def test_string_labels(self, xy):
        X, y, _, _ = xy
        names = np.array(["neg", "neu", "pos"])[y]
        est = TransformerClassifier(vocab_size=120, steps=3, seed=0, **SMALL).fit(X[:40], names[:40])
        assert set(est.predict(X[:10])) <= set(names)
        assert list(est.classes_) == ["neg", "neu", "pos"]

    def test_deterministic(self, xy):
        X, y, _, _ = xy
        a = TransformerClassifier(vocab_size=120, steps=5, seed=3, **SMALL).fit(X, y)
        b = TransformerClassifier(vocab_size=120, steps=5, seed=3, **SMALL).fit(X, y)
        assert np.array_equal(a.decision_function(X[:20]), b.decision_function(X[:20]))

    def test_from_model(self, teacher, xy):
        wrapped = TransformerClassifier.from_model(teacher.model_)
        assert np.array_equal(wrapped.predict(xy[2]), teacher.predict(xy[2]))


class TestDistillation:
    def test_cross_kd(self, teacher, xy):
        X, y, Xt, yt = xy
        before = {n: p.clone() for n, p in teacher.model_.named_parameters()}
        est = CrossDistillationClassifier(teacher=teacher, embed_dim=8, hidden_dim=16, intermediate_dim=32,
                                          num_heads=2, steps=60, teacher_lr=1e-5, student_lr=3e-3).fit(X, y)
        assert est.score(Xt, yt) > 1 / 3
        assert len(est.history_) > 0
        # the caller's teacher is never modified
        assert all(torch.equal(before[n], p) for n, p in teacher.model_.named_parameters())
        assert not all(torch.equal(before[n], p) for n, p in est.teacher_.named_parameters())

    def test_unknown_label(self, teacher, xy):
        X, y, _, _ = xy
        with pytest.raises(ValueError):
            CrossDistillationClassifier(teacher=teacher, steps=1).fit(X[:4], [0, 1, 2, 7])

    def test_needs_teacher(self, xy):
        with pytest.raises(ValueError):
            CrossDistillationClassifier().fit(xy[0], xy[1])


class TestPruner:
    def test_fit_transform(self, teacher, xy):
        X = xy[0]
        pr = TokenImportancePruner(model=teacher, k=60).fit(X)
        out = pr.transform(X)
        assert max(max(s) for s in out) < 60
        dropped = [t for t in range(4, 120) if pr.remap_.old_to_new[t] < 0]
        assert len(dropped) == 120 - 60
        assert pr.transform([[dropped[0]]]) == [[UNK_ID]]

    def test_fraction(self, teacher, xy):
        pr = TokenImportancePruner(model=teacher, k=0.25).fit(xy[0])
        assert pr.remap_.k == 30

    def test_pruned_model_agrees_on_retained_text(self, teacher, xy):
        pr = TokenImportancePruner(model=teacher, k=0.5).fit(xy[0])
        pruned = pr.prune_model()
        kept = [s for s in xy[2] if all(pr.remap_.old_to_new[t] >= 0 for t in s)]
        full = TransformerClassifier.from_model(teacher.model_)
        small = TransformerClassifier.from_model(pruned)
        if kept:
            np.testing.assert_allclose(full.decision_function(kept),
                                       small.decision_function(pr.transform(kept)), atol=1e-5)

    def test_in_a_pipeline(self, teacher, xy):
        X, y, Xt, yt = xy
        pipe = make_pipeline(TokenImportancePruner(model=teacher, k=80),
                             TransformerClassifier(vocab_size=80, steps=20, **SMALL))
        pipe.fit(X, y)
        assert pipe.predict(Xt).shape == (len(Xt),)


class TestQuantizer:
    def test_matches_float_predictions(self, teacher, xy):
        X, _, Xt, _ = xy
        q = ModuleWiseQuantizer(model=teacher, iters=5, calibration_size=64).fit(X)
        agree = np.mean(q.predict(Xt) == teacher.predict(Xt))
        assert agree > 0.9
        assert len(q.report_) == 4

    def test_integer_logits_match_simulation(self, teacher, xy):
        q = ModuleWiseQuantizer(model=teacher, iters=2, calibration_size=32).fit(xy[0])
        sim = TransformerClassifier.from_model(q.quantized_model_.to_simulated())
        np.testing.assert_allclose(q.decision_function(xy[2]), sim.decision_function(xy[2]), atol=1e-4)
