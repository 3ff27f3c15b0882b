import json
import math

import jsonschema
import numpy as np
import pytest

from clinseq.metrics import (UNDEFINED, EvalRecord, EvaluationError, auc_metrics, continuous_metrics, evaluate,
                             high_severity_metrics, make_record, margin_analysis, ordinal_metrics, rank_auc,
                             records_from_csv, records_to_csv, report_json, report_schema, report_table,
                             severity_weights)


# -- brute-force oracles -------------------------------------------------
def tau_b_pairs(x, y):
    c = d = tx = ty = 0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx == dy:
                c += 1
            else:
                d += 1
    den = math.sqrt((c + d + tx) * (c + d + ty))
    return None if den == 0 else (c - d) / den


def avg_ranks(x):
    return [1 + sum(v < xi for v in x) + (sum(v == xi for v in x) - 1) / 2 for xi in x]


def spearman_pairs(x, y):
    rx, ry = np.array(avg_ranks(x)), np.array(avg_ranks(y))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt((dx @ dx) * (dy @ dy))
    return None if den == 0 else float(dx @ dy) / den


def auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        return None
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


def random_records(rng, n):
    out = []
    for _ in range(n):
        t = int(rng.integers(1, 11))
        logits = rng.normal(size=10) * 2
        logits[t - 1] += rng.uniform(0, 3)
        if rng.random() < 0.3:  # exact ties in the probabilities
            logits = np.round(logits)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        out.append(make_record(t, p, rng.normal(5, 3), rng.normal(5, 3)))
    return out


def rec(t, pred, true_cont=0.0, pred_cont=0.0):
    p = np.full(10, 0.0)
    p[pred - 1] = 1.0
    return EvalRecord(t, pred, tuple(p), true_cont, pred_cont)


class TestContinuous:
    def test_perfect(self):
        r = [rec(1, 1, x, x) for x in (1.0, 2.0, 5.0)]
        assert continuous_metrics(r) == {"mae": 0.0, "rmse": 0.0, "pearson": 1.0}

    def test_offset(self):
        m = continuous_metrics([rec(1, 1, x, x + 2) for x in (1.0, 2.0, 5.0)])
        assert m["mae"] == 2.0 and m["rmse"] == 2.0 and abs(m["pearson"] - 1) < 1e-15

    def test_eight_pair_fixture(self):
        true = [2.0, 4.0, 4.0, 7.0, 9.0, 1.0, 3.0, 8.0]
        pred = [3.0, 3.5, 5.0, 6.0, 9.5, 2.5, 2.0, 8.0]
        m = continuous_metrics([rec(1, 1, t, p) for t, p in zip(true, pred)])
        err = [p - t for t, p in zip(true, pred)]
        assert m["mae"] == pytest.approx(sum(map(abs, err)) / 8, abs=1e-15)
        assert m["mae"] == pytest.approx(6.5 / 8, abs=1e-15)
        assert m["rmse"] == pytest.approx(math.sqrt(sum(e * e for e in err) / 8), abs=1e-15)
        mt, mp = sum(true) / 8, sum(pred) / 8
        cov = sum((t - mt) * (p - mp) for t, p in zip(true, pred))
        r = cov / math.sqrt(sum((t - mt) ** 2 for t in true) * sum((p - mp) ** 2 for p in pred))
        assert m["pearson"] == pytest.approx(r, abs=1e-14)

    def test_constant_predictions_undefined_pearson(self):
        assert continuous_metrics([rec(1, 1, x, 3.0) for x in (1.0, 2.0)])["pearson"] is UNDEFINED


class TestOrdinal:
    def test_identical_and_reversed(self):
        same = [rec(k, k) for k in range(1, 11)]
        rev = [rec(k, 11 - k) for k in range(1, 11)]
        assert ordinal_metrics(same)["kendall_tau"] == pytest.approx(1.0, abs=1e-15)
        assert ordinal_metrics(same)["spearman_rho"] == pytest.approx(1.0, abs=1e-15)
        assert ordinal_metrics(rev)["kendall_tau"] == pytest.approx(-1.0, abs=1e-15)
        assert ordinal_metrics(rev)["spearman_rho"] == pytest.approx(-1.0, abs=1e-15)

    def test_six_record_tied_fixture(self):
        t = [1, 2, 2, 3, 3, 3]
        p = [1, 1, 3, 2, 3, 3]
        m = ordinal_metrics([rec(a, b) for a, b in zip(t, p)])
        assert m["kendall_tau"] == pytest.approx(tau_b_pairs(t, p), abs=1e-15)
        assert m["spearman_rho"] == pytest.approx(spearman_pairs(t, p), abs=1e-15)

    def test_constant_prediction_is_undefined(self):
        m = ordinal_metrics([rec(k, 4) for k in (1, 5, 9)])
        assert m["kendall_tau"] is UNDEFINED and m["spearman_rho"] is UNDEFINED

    def test_weights(self):
        assert severity_weights([1, 10], 1.0).tolist() == pytest.approx([1.0, math.e])

    def test_weighted_mae_fixture(self):
        r = [rec(1, 3), rec(10, 9)]
        w1, w10 = 1.0, math.e ** 2
        m = ordinal_metrics(r, kappa=2.0)
        assert m["weighted_mae"] == pytest.approx((2 * w1 + 1 * w10) / (w1 + w10), abs=1e-15)
        assert m["weighted_mse"] == pytest.approx((4 * w1 + 1 * w10) / (w1 + w10), abs=1e-15)


class TestMargin:
    def test_all_exact(self):
        assert set(margin_analysis([rec(k, k) for k in range(1, 11)]).values()) == {1.0}

    def test_one_high(self):
        m = margin_analysis([rec(k, k + 1) for k in range(1, 10)])
        assert m["exact_acc"] == 0.0 and m["off_by_1"] == 1.0

    def test_fifty_record_counting(self):
        rng = np.random.default_rng(0)
        r = [rec(int(a), int(b)) for a, b in rng.integers(1, 11, (50, 2))]
        m = margin_analysis(r)
        for key, k in (("exact_acc", 0), ("off_by_1", 1), ("off_by_2", 2), ("off_by_3", 3)):
            assert m[key] == sum(abs(x.pred_token - x.true_token) <= k for x in r) / 50


class TestAUC:
    def test_separating(self):
        r = [rec(k, k) for k in range(1, 11) for _ in range(3)]
        a = auc_metrics(r)
        assert a["per_token_auc"] == [1.0] * 10 and a["macro_auc"] == 1.0
        assert a["support"] == [3] * 10

    def test_constant_probabilities(self):
        p = tuple([0.1] * 10)
        r = [EvalRecord(k, 1, p, 0.0, 0.0) for k in (1, 1, 4, 7, 7, 7)]
        a = auc_metrics(r)
        defined = [x for x in a["per_token_auc"] if x is not UNDEFINED]
        assert defined == [0.5, 0.5, 0.5] and a["undefined_classes"] == [2, 3, 5, 6, 8, 9, 10]

    def test_twelve_record_pair_oracle(self):
        rng = np.random.default_rng(1)
        r = random_records(rng, 12)
        a = auc_metrics(r)
        for k in range(10):
            ref = auc_pairs([x.pred_probs[k] for x in r], [x.true_token == k + 1 for x in r])
            got = a["per_token_auc"][k]
            assert (got is UNDEFINED) if ref is None else got == pytest.approx(ref, abs=1e-15)

    def test_weighted_by_support(self):
        r = random_records(np.random.default_rng(2), 40)
        a = auc_metrics(r)
        pairs = [(x, s) for x, s in zip(a["per_token_auc"], a["support"]) if x is not UNDEFINED]
        assert a["weighted_auc"] == pytest.approx(sum(x * s for x, s in pairs) / sum(s for _, s in pairs))

    def test_rank_auc_single_class(self):
        assert rank_auc([0.1, 0.2], [True, True]) is UNDEFINED


class TestHighSeverity:
    def test_empty_subset(self):
        m = high_severity_metrics([rec(2, 2, 1.0, 1.0)])
        assert m["hs_cont_mae"] is UNDEFINED and m["hs_accuracy"] is UNDEFINED
        assert m["hs_token_count"] == 0

    def test_all_exact(self):
        m = high_severity_metrics([rec(k, k, 9.0, 9.0) for k in (8, 9, 10)])
        assert m["hs_accuracy"] == 1.0 and m["hs_token_mae"] == 0.0 and m["hs_cont_mae"] == 0.0

    def test_ten_record_fixture(self):
        rows = [(8, 8, 7.5, 7.0), (9, 7, 8.0, 6.0), (10, 10, 12.0, 11.0), (8, 9, 6.0, 7.5), (2, 2, 1.0, 1.0),
                (9, 9, 7.0, 9.0), (10, 8, 15.0, 9.0), (3, 5, 2.0, 4.0), (8, 10, 7.1, 7.1), (5, 5, 4.0, 4.0)]
        m = high_severity_metrics([rec(*r) for r in rows])
        cont = [r for r in rows if r[2] > 7.0]
        tok = [r for r in rows if r[0] >= 8]
        assert m["hs_cont_count"] == len(cont) == 5
        assert m["hs_cont_mae"] == pytest.approx(sum(abs(r[3] - r[2]) for r in cont) / 5, abs=1e-15)
        assert m["hs_token_count"] == len(tok) == 7
        assert m["hs_token_mae"] == pytest.approx(sum(abs(r[1] - r[0]) for r in tok) / 7, abs=1e-15)
        assert m["hs_accuracy"] == pytest.approx(3 / 7, abs=1e-15)
        assert m["hs_error_histogram"] == {"-2": 2, "0": 3, "1": 1, "2": 1}


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_fixture(self, seed):
        rng = np.random.default_rng(seed)
        r = random_records(rng, int(rng.integers(2, 31)))
        t = [x.true_token for x in r]
        p = [x.pred_token for x in r]
        o = ordinal_metrics(r, kappa=0.0)
        ref_tau, ref_rho = tau_b_pairs(t, p), spearman_pairs(t, p)
        assert (o["kendall_tau"] is UNDEFINED) if ref_tau is None else abs(o["kendall_tau"] - ref_tau) < 1e-12
        assert (o["spearman_rho"] is UNDEFINED) if ref_rho is None else abs(o["spearman_rho"] - ref_rho) < 1e-12
        assert o["weighted_mae"] == pytest.approx(o["token_mae"], abs=1e-15)
        a = auc_metrics(r)
        for k in range(10):
            ref = auc_pairs([x.pred_probs[k] for x in r], [x == k + 1 for x in t])
            assert (a["per_token_auc"][k] is UNDEFINED) if ref is None else a["per_token_auc"][k] == ref


class TestReport:
    def test_schema_and_tags(self):
        r = random_records(np.random.default_rng(3), 30)
        doc = json.loads(report_json(evaluate(r)))
        jsonschema.validate(doc, report_schema())
        assert doc["ordinal"]["kendall_tau"]["defined"] is True
        assert isinstance(doc["auc"]["per_token_auc"]["value"], list)

    def test_undefined_tagging(self):
        doc = json.loads(report_json(evaluate([rec(2, 2, 1.0, 1.0), rec(3, 3, 2.0, 2.0)])))
        jsonschema.validate(doc, report_schema())
        assert doc["high_severity"]["hs_accuracy"] == {"defined": False, "value": None}

    def test_table_lists_scalars(self):
        text = report_table(evaluate(random_records(np.random.default_rng(4), 20)))
        assert "auc.macro_auc" in text and "per_token_auc" not in text

    def test_csv_round_trip(self):
        r = random_records(np.random.default_rng(5), 15)
        assert records_from_csv(records_to_csv(r)) == r

    def test_invalid_records(self):
        with pytest.raises(EvaluationError):
            EvalRecord(1, 1, (0.5, 0.5), 0.0, 0.0)
        with pytest.raises(EvaluationError):
            evaluate([])
