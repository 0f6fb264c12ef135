import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from kdistill.data import load_dataset
from kdistill.metrics import (
    REPORT_SCHEMA_VERSION,
    MetricsReport,
    average_precision,
    balanced_accuracy,
    binary_roc,
    confusion_matrix,
    evaluate,
    mean_average_precision,
    predict,
    report_from_scores,
    roc_auc_macro,
)
from kdistill.models import backbone_spec, build_backbone

seeds = st.integers(0, 2**31 - 1)


def random_problem(seed, n=60, c=4):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, n)
    labels[:c] = np.arange(c)  # every class present
    logits = rng.normal(size=(n, c)) + 1.5 * np.eye(c)[labels]
    scores = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    return scores, labels


def mann_whitney_auc(scores, positives):
    pos, neg = scores[positives], scores[~positives]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def ranked_ap(scores, positives):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if positives[i]:
            hits += 1
            total += hits / rank
    return total / hits


def test_metrics_match_independent_references():
    for seed in range(25):
        scores, labels = random_problem(seed)
        c = scores.shape[1]
        pred = predict(scores)
        cm = confusion_matrix(labels, pred, c)
        assert np.array_equal(cm, skm.confusion_matrix(labels, pred, labels=range(c)))
        assert balanced_accuracy(cm) == pytest.approx(skm.balanced_accuracy_score(labels, pred), abs=1e-12)
        auc, per_class, _ = roc_auc_macro(scores, labels)
        assert auc == pytest.approx(skm.roc_auc_score(labels, scores, multi_class="ovr", average="macro"), abs=1e-12)
        m, ap = mean_average_precision(scores, labels, return_per_class=True)
        onehot = np.eye(c)[labels]
        assert m == pytest.approx(skm.average_precision_score(onehot, scores, average="macro"), abs=1e-12)
        for k in range(c):
            assert per_class[k] == pytest.approx(mann_whitney_auc(scores[:, k], labels == k), abs=1e-12)
            assert ap[k] == pytest.approx(ranked_ap(scores[:, k].tolist(), (labels == k).tolist()), abs=1e-12)


def test_report_accuracy_matches_reference():
    scores, labels = random_problem(3)
    r = report_from_scores(scores, labels)
    assert r.acc == pytest.approx(skm.accuracy_score(labels, predict(scores)))


def test_auc_handles_ties_like_mann_whitney():
    scores = np.array([0.1, 0.4, 0.4, 0.4, 0.8, 0.8])
    pos = np.array([False, True, False, True, True, False])
    fpr, tpr = binary_roc(scores, pos)
    auc = np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)
    assert auc == pytest.approx(mann_whitney_auc(scores, pos))


def test_perfect_and_identity_cases():
    labels = np.array([0, 1, 2, 0, 1, 2])
    scores = np.eye(3)[labels] * 0.9 + 0.05
    r = report_from_scores(scores, labels)
    assert r.acc == r.bacc == r.auc_macro == r.map_macro == 1.0
    assert balanced_accuracy(np.diag([4, 1, 7])) == 1.0


def test_argmax_ties_go_to_lowest_index():
    assert predict(np.array([[0.3, 0.3, 0.1], [0.2, 0.4, 0.4]])).tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(2, 6))
def test_bacc_equals_acc_on_balanced_matrices(seed, c):
    rng = np.random.default_rng(seed)
    support = int(rng.integers(1, 20))
    cm = np.zeros((c, c), dtype=np.int64)
    for k in range(c):
        cm[k] = rng.multinomial(support, rng.dirichlet(np.ones(c)))
    assert balanced_accuracy(cm) == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from(["exp", "cube", "affine", "logit"]))
def test_auc_invariant_to_monotone_transforms(seed, kind):
    scores, labels = random_problem(seed, n=40, c=3)
    f = {
        "exp": np.exp,
        "cube": lambda x: x ** 3,
        "affine": lambda x: 3.0 * x + 7.0,
        "logit": lambda x: np.log(x / (1 - x)),
    }[kind]
    a, _, _ = roc_auc_macro(scores, labels)
    b, _, _ = roc_auc_macro(f(scores), labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_absent_class_excluded_with_warning():
    labels = np.array([0, 0, 1, 1])
    scores = np.array([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.3, 0.6, 0.1]])
    with pytest.warns(RuntimeWarning, match="class 2"):
        auc, per_class, _ = roc_auc_macro(scores, labels)
    assert np.isnan(per_class[2]) and auc == 1.0
    with pytest.warns(RuntimeWarning, match=r"\[2\]"):
        r = report_from_scores(scores, labels)
    assert r.excluded_classes == [2] and r.auc[2] is None and r.recall[2] is None


def test_degenerate_inputs_raise():
    with pytest.raises(ValueError, match="empty"):
        balanced_accuracy(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="positives"):
        average_precision([0.1, 0.2], [False, False])
    with pytest.raises(ValueError):
        report_from_scores(np.zeros((0, 2)), [])


def test_report_roundtrip_and_version(tmp_path):
    scores, labels = random_problem(0)
    r = report_from_scores(scores, labels, ["a", "b", "c", "d"])
    path = tmp_path / "r.json"
    r.save(path)
    assert MetricsReport.load(path) == r
    path.write_text(path.read_text().replace(f'"schema_version": {REPORT_SCHEMA_VERSION}', '"schema_version": 99'))
    with pytest.raises(ValueError, match="schema"):
        MetricsReport.load(path)


def test_evaluate_model_on_dataset(fixture_root):
    ds = load_dataset(fixture_root).subset(range(24))
    model = build_backbone(backbone_spec("tiny-student", 8))
    model.train()
    r = evaluate(model, ds, batch_size=10)
    assert model.training
    assert sum(map(sum, r.confusion)) == 24
    assert 0 <= r.bacc <= 1 and r.class_names == ds.class_names
