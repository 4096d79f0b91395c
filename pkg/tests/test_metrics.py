import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modmirror.metrics import (
    ROUND_COLUMNS,
    RoundMetrics,
    class_f1,
    class_report_csv,
    class_report_json,
    diff_csv,
    diff_rows,
    f1_diff_report,
    predict,
    read_class_report_csv,
    read_rounds_csv,
    rounds_csv,
    top_positive,
    topk_accuracy,
)
from modmirror.nnkit import InvalidInput


def test_topk_examples():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((7, 5))
    y = rng.integers(0, 5, 7)
    assert topk_accuracy(z, y, 5) == 1.0
    assert topk_accuracy(np.eye(4)[[2, 0, 3]], [2, 0, 3], 1) == 1.0
    # sample 0 hits at rank 1; samples 1 and 2 rank their label second
    logits = np.array([[3.0, 1.0, 0.0], [2.0, 1.0, 0.0], [0.0, 1.0, 2.0]])
    labels = [0, 1, 1]
    assert topk_accuracy(logits, labels, 1) == pytest.approx(1 / 3)
    assert topk_accuracy(logits, labels, 2) == 1.0


def test_topk_ties_go_to_lower_index():
    z = np.zeros((2, 3))
    assert topk_accuracy(z, [0, 2], 1) == 0.5
    assert topk_accuracy(z, [1, 2], 2) == 0.5


def test_topk_errors():
    with pytest.raises(InvalidInput):
        topk_accuracy(np.zeros((0, 3)), [], 1)
    with pytest.raises(InvalidInput):
        topk_accuracy(np.zeros((1, 3)), [0], 4)
    with pytest.raises(InvalidInput):
        topk_accuracy(np.zeros((1, 3)), [0], 0)


logit_rows = st.integers(1, 20).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, (n, 6), elements=st.floats(-3, 3).map(lambda v: round(v, 1))),
        arrays(np.int64, n, elements=st.integers(0, 5)),
    )
)


@given(logit_rows)
def test_topk_monotone_in_k(data):
    z, y = data
    accs = [topk_accuracy(z, y, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert all(0.0 <= a <= 1.0 for a in accs)


@given(logit_rows)
def test_micro_recall_equals_top1(data):
    z, y = data
    rep = class_f1(predict(z), y, 6)
    micro = float(np.sum(rep.recall * rep.support) / rep.support.sum())
    assert micro == pytest.approx(topk_accuracy(z, y, 1), abs=1e-12)
    assert rep.support.sum() == len(y)


def test_class_f1_examples():
    rep = class_f1([0, 1, 2, 1], [0, 1, 2, 1], 4)
    np.testing.assert_array_equal(rep.f1[:3], 1.0)
    assert rep.f1[3] == 0.0 and rep.support[3] == 0
    # class 0: tp=1 (sample 0), fp=1 (sample 1), fn=1 (sample 2)
    rep = class_f1([0, 0, 1, 1], [0, 1, 0, 1], 2)
    assert (rep.precision[0], rep.recall[0], rep.f1[0]) == (0.5, 0.5, 0.5)


def test_class_f1_label_out_of_range():
    with pytest.raises(InvalidInput):
        class_f1([0, 1], [0, 3], 3)
    with pytest.raises(InvalidInput):
        class_f1([0], [0, 1], 3)


def test_f1_diff_examples():
    a = class_f1([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert all(d == 0.0 for _, d in f1_diff_report(a, a, 3))
    b = class_f1([0, 1, 2, 0], [0, 1, 2, 2], 3)
    diff = f1_diff_report(a, b, 3)
    assert diff[0][1] > 0
    assert len(f1_diff_report(a, b, 100)) == 3
    with pytest.raises(InvalidInput):
        f1_diff_report(a, class_f1([0], [0], 4), 3)


def test_f1_diff_single_changed_class_first():
    y = [0, 1, 2, 3]
    a = class_f1([0, 1, 2, 3], y, 4)
    b = class_f1([0, 1, 2, 3], y, 4)
    b.f1[2] = 0.4
    assert f1_diff_report(a, b, 4)[0] == (2, pytest.approx(0.6))
    assert [c for c, _ in f1_diff_report(a, b, 4)[1:]] == [0, 1, 3]


@settings(max_examples=50)
@given(
    arrays(np.int64, 30, elements=st.integers(0, 4)),
    arrays(np.int64, 30, elements=st.integers(0, 4)),
    arrays(np.int64, 30, elements=st.integers(0, 4)),
)
def test_f1_diff_antisymmetric(pa, pb, y):
    a, b = class_f1(pa, y, 5), class_f1(pb, y, 5)
    ab = dict(f1_diff_report(a, b, 5))
    ba = dict(f1_diff_report(b, a, 5))
    assert all(ab[c] == -ba[c] for c in ab)


def test_top_positive():
    diff = [(3, 0.5), (1, -0.6), (2, 0.5), (0, 0.0), (4, 0.1)]
    assert top_positive(diff, 2) == [2, 3]
    assert top_positive(diff, 10) == [2, 3, 4]


def test_rounds_csv_roundtrip():
    hist = [
        RoundMetrics(0, 1, 0.25, 0.75, 0.5, 1.25),
        RoundMetrics(1, 2, 0.1 + 0.2, 0.9, None, math.nan),
    ]
    text = rounds_csv(hist)
    assert text.splitlines()[0] == ",".join(ROUND_COLUMNS)
    back = read_rounds_csv(text)
    assert back[0] == hist[0]
    assert back[1].audio_top1 == 0.1 + 0.2 and back[1].multimodal_top1 is None
    assert math.isnan(back[1].train_loss)


def test_class_report_serializations():
    rep = class_f1([0, 0, 1, 1], [0, 1, 0, 1], 3)
    back = read_class_report_csv(class_report_csv(rep))
    np.testing.assert_array_equal(back.f1, rep.f1)
    np.testing.assert_array_equal(back.support, rep.support)
    rows = diff_rows(rep, rep, 2)
    assert [r["name"] for r in rows] == ["class_0", "class_1"]
    assert diff_csv(rows).splitlines()[0] == "rank,class,name,f1_a,f1_b,delta"
    assert '"name": "class_2"' in class_report_json(rep)
