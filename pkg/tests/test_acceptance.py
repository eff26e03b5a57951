"""Acceptance suite: one test per release criterion, each printing a
PASS line (run with -s to see them inline).

Criteria cover gradient fidelity, retrieval exactness against brute
force, scalar-oracle equivalence of the k-NN rule, ensemble identities,
learning sanity, retrieval lift over a weak model, dataset accounting
against the published statistics, metric oracles, the prompting contract,
and binary-format round trips.
"""

import time
from itertools import combinations_with_replacement, product

import numpy as np
import pytest
from mock_lvlm import MockLvlmServer

from xdora.cli import _fused_vectors
from xdora.dataset import (
    SplitSpec,
    load_embeddings,
    remap_label,
    save_embeddings,
    split_counts,
    stratified_split_indices,
)
from xdora.ensemble import (
    fuse_predictions,
    grid_search_alpha,
    model_and_retrieval_probs,
)
from xdora.evaluation import (
    Prediction,
    bootstrap_ci,
    confusion,
    macro_prf,
    macro_prf_from_pairs,
)
from xdora.fusion import (
    FusionConfig,
    batch_loss_and_grads,
    forward_batch,
    init_params,
    load_model,
    loss,
    param_names,
    records_to_arrays,
    save_model,
)
from xdora.numerics import grad_check
from xdora.prompting import (
    LvlmClient,
    build_prompt,
    parse_response,
    select_exemplars,
)
from xdora.retrieval import (
    build_index,
    load_index,
    predict_knn,
    save_index,
    top_k,
    top_k_per_class,
)
from xdora.rng import make_rng
from xdora.synthetic import make_synthetic_records
from xdora.training import TrainSpec, accuracy, train


def _report(n, name):
    print(f"\n[acceptance] criterion {n} ({name}): PASS")


# -------------------------------------------------------------------------
# 1. gradient fidelity
# -------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    config = FusionConfig(d_v=8, d_t=16, S=4, heads=2, C=4,
                          dropout_rate=0.0, hidden_dim=8)
    params = init_params(config, make_rng(0))
    records = make_synthetic_records(3, 8, 4, 16, 4, seed=1)
    v0, t, mask, labels = records_to_arrays(records, config)
    weights = np.array([1.0, 1.2, 0.8, 1.1])

    start = time.monotonic()
    _, grads = batch_loss_and_grads(params, config, v0, t, mask, labels,
                                    weights, train_mode=True)

    def f(p):
        _, probs, _ = forward_batch(p, config, v0, t, mask)
        return loss(probs, labels, weights)

    report = grad_check(f, params, grads, eps=1e-5)
    elapsed = time.monotonic() - start

    assert set(report) == set(param_names(config))
    worst = max(report.values())
    assert worst < 1e-4, f"worst relative error {worst}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _report(1, f"gradient fidelity, max rel err {worst:.2e} in {elapsed:.1f}s")


# -------------------------------------------------------------------------
# 2. retrieval exactness
# -------------------------------------------------------------------------

def _scalar_top_k(index, query, k):
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for i in range(len(index)):
        acc = 0.0
        row = index.keys[i].astype(np.float64)
        for j in range(row.size):
            acc += row[j] * q[j]
        scored.append((i, acc))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def test_criterion_2_retrieval_exactness():
    rng = make_rng(7)
    for instance in range(20):
        n = int(rng.integers(5, 1001))
        dim = int(rng.integers(2, 65))
        k = int(rng.integers(1, 21))
        C = int(rng.integers(2, 5))
        vecs = rng.normal(size=(n, dim))
        labels = rng.integers(0, C, size=n)
        index = build_index(
            (f"e{i}", int(labels[i]), vecs[i]) for i in range(n))
        query = rng.normal(size=dim)

        got = top_k(index, query, k)
        want = _scalar_top_k(index, query, k)
        assert [nb.id for nb in got] == [f"e{i}" for i, _ in want]
        for nb, (_, sim) in zip(got, want):
            assert abs(nb.similarity - sim) < 1e-9

        per = top_k_per_class(index, query, k, C)
        ranked = _scalar_top_k(index, query, n)
        for cls in range(C):
            block = [nb.id for nb in per.neighbors if nb.label == cls]
            want_ids = [f"e{i}" for i, _ in ranked
                        if labels[i] == cls][:k]
            assert block == want_ids
    _report(2, "retrieval exactness on 20 random instances")


# -------------------------------------------------------------------------
# 3. scalar oracle equivalence of the k-NN decision rule
# -------------------------------------------------------------------------

def test_criterion_3_knn_oracle_equivalence():
    rng = make_rng(11)
    n, dim, C, k = 400, 12, 4, 5
    vecs = rng.normal(size=(n, dim))
    labels = rng.integers(0, C, size=n)
    index = build_index((f"e{i}", int(labels[i]), vecs[i]) for i in range(n))

    matches = 0
    for _ in range(500):
        q = rng.normal(size=dim)
        pred, _ = predict_knn(index, q, k, C)

        # direct scalar re-derivation of the similarity-weighted argmax
        neighbors = _scalar_top_k(index, q, k)
        scores = [0.0] * C
        for i, sim in neighbors:
            scores[int(labels[i])] += max(sim, 0.0)
        total = sum(scores)
        dist = [s / total for s in scores] if total > 0 else [1 / C] * C
        best = max(range(C), key=lambda c: (dist[c], -c))
        matches += int(pred == best)
    assert matches == 500
    _report(3, "k-NN rule equals scalar oracle on 500/500 queries")


# -------------------------------------------------------------------------
# 4. ensemble identities
# -------------------------------------------------------------------------

def test_criterion_4_ensemble_identities():
    rng = make_rng(13)
    violations = 0
    for _ in range(1000):
        c = int(rng.integers(2, 5))
        ym = rng.random(c) + 1e-9
        ym /= ym.sum()
        yr = rng.random(c) + 1e-9
        yr /= yr.sum()

        f1, _ = fuse_predictions(ym, yr, 1.0)
        f0, _ = fuse_predictions(ym, yr, 0.0)
        if not (np.array_equal(f1, ym) and np.array_equal(f0, yr)):
            violations += 1
            continue
        alpha = float(rng.random())
        fused, _ = fuse_predictions(ym, yr, alpha)
        lo = np.minimum(ym, yr) - 1e-12
        hi = np.maximum(ym, yr) + 1e-12
        if not (np.all(fused >= lo) and np.all(fused <= hi)):
            violations += 1
    assert violations == 0
    _report(4, "ensemble endpoint and convexity identities, 0 violations")


# -------------------------------------------------------------------------
# 5. learning sanity
# -------------------------------------------------------------------------

def test_criterion_5_learning_sanity():
    config = FusionConfig(d_v=8, d_t=16, S=4, heads=2, C=2,
                          dropout_rate=0.0, hidden_dim=16)
    data = make_synthetic_records(250, 8, 4, 16, 2, seed=11,
                                  separation=3.0, noise=1.0)
    train_set, valid_set = data[:200], data[200:]
    spec = TrainSpec(batch_size=16, learning_rate=1e-3, weight_decay=0.01,
                     max_epochs=200, patience=200, seed=7)
    start = time.monotonic()
    params, log = train(train_set, valid_set, config, spec)
    elapsed = time.monotonic() - start

    train_acc = accuracy(params, config, train_set)
    valid_acc = accuracy(params, config, valid_set)
    assert len(log) <= 200
    assert train_acc >= 0.95, f"train accuracy {train_acc}"
    assert valid_acc >= 0.90, f"valid accuracy {valid_acc}"
    assert elapsed < 300.0, f"training took {elapsed:.0f}s"
    _report(5, f"learning sanity, train {train_acc:.3f} / valid "
               f"{valid_acc:.3f} in {elapsed:.0f}s")


# -------------------------------------------------------------------------
# 6. retrieval lifts a weak model
# -------------------------------------------------------------------------

def test_criterion_6_retrieval_lifts_weak_model():
    config = FusionConfig(d_v=8, d_t=16, S=4, heads=2, C=4,
                          dropout_rate=0.0, hidden_dim=16)
    data = make_synthetic_records(240, 8, 4, 16, 4, seed=21,
                                  separation=2.0, noise=1.2)
    train_set, valid_set = data[:180], data[180:]

    # deliberately under-trained so the classifier head plateaus low while
    # the fused vectors still cluster by class
    spec = TrainSpec(batch_size=16, learning_rate=3e-4, weight_decay=0.0,
                     max_epochs=6, patience=6, seed=3)
    params, _ = train(train_set, valid_set, config, spec)

    z = _fused_vectors(params, config, train_set)
    index = build_index(
        (r.id, r.label, z[i]) for i, r in enumerate(train_set))

    gold = [r.label for r in valid_set]
    y_model, y_retr = model_and_retrieval_probs(
        params, config, index, valid_set, k=5, per_class=True)

    def f1_of(probs):
        preds = [Prediction(valid_set[i].id, int(np.argmax(probs[i])),
                            gold[i]) for i in range(len(gold))]
        return macro_prf_from_pairs(preds, config.C).macro_f1

    model_f1 = f1_of(y_model)
    assert model_f1 < 0.85, f"model unexpectedly strong: {model_f1}"

    best_alpha, _ = grid_search_alpha(params, config, index, valid_set,
                                      k=5, per_class=True)
    fused_f1 = f1_of(best_alpha * y_model + (1 - best_alpha) * y_retr)
    assert fused_f1 > model_f1, \
        f"fusion did not improve: {fused_f1} <= {model_f1}"
    _report(6, f"retrieval lift, model F1 {model_f1:.3f} -> fused "
               f"{fused_f1:.3f} at alpha {best_alpha}")


# -------------------------------------------------------------------------
# 7. dataset accounting against the published statistics
# -------------------------------------------------------------------------

# Published extended-dataset statistics: per class (total, train, valid,
# test). Binary task rows followed by target-class rows.
PUBLISHED_BINARY = {"Hate": (4857, 3885, 486, 486),
                    "Non-Hate": (4485, 3588, 449, 448)}
PUBLISHED_TARGETS = {"TI": (2532, 2026, 253, 253),
                     "TC": (1226, 981, 123, 122),
                     "TO": (982, 786, 98, 98),
                     "TS": (117, 94, 12, 11)}

# Published source-dataset class totals and the remapped additions implied
# by the two published tables (extended minus base per target class).
BASE_TARGETS = {"TI": 2008, "TO": 204, "TC": 310, "TS": 102}
BASE_NON_HATE = 4485
MAPPED_ADDITIONS = {"Gender": 524, "Religious": 916, "Political": 778}
# the published TS totals differ by 15 across the two tables; those
# samples entered through manual review, outside the rule table
REVIEW_RELABELED_TS = 117 - 102


def test_criterion_7_remap_accounting():
    totals = {"TI": BASE_TARGETS["TI"], "TC": BASE_TARGETS["TC"],
              "TO": BASE_TARGETS["TO"],
              "TS": BASE_TARGETS["TS"] + REVIEW_RELABELED_TS}
    hate_total = sum(BASE_TARGETS.values()) + REVIEW_RELABELED_TS
    target_names = ["TI", "TC", "TO", "TS"]
    for source, count in MAPPED_ADDITIONS.items():
        result = remap_label(source)
        assert result.task1_label == 1 and not result.discarded
        totals[target_names[result.task2_label]] += count
        hate_total += count
    # residual source classes contribute nothing
    assert remap_label("Others").discarded
    assert remap_label("Non-aggression").task1_label == 0

    assert totals == {"TI": 2532, "TC": 1226, "TO": 982, "TS": 117}
    assert sum(totals.values()) == 4857 == hate_total
    assert hate_total + BASE_NON_HATE == 9342
    _report(7, "remap accounting reproduces the published totals")


def test_criterion_7_split_rows():
    spec = SplitSpec(fractions=(0.8, 0.1, 0.1), seed=42)
    rows = dict(PUBLISHED_TARGETS)
    rows["Non-Hate"] = PUBLISHED_BINARY["Non-Hate"]
    for name, (total, tr, va, te) in rows.items():
        assert split_counts(total, spec.fractions) == (tr, va, te), name

    # the real split operation on a label vector with the published totals
    labels = []
    for cls, (total, *_rest) in enumerate(PUBLISHED_TARGETS.values()):
        labels += [cls] * total
    tr_idx, va_idx, te_idx = stratified_split_indices(labels, spec)
    for cls, (total, tr, va, te) in enumerate(PUBLISHED_TARGETS.values()):
        got = tuple(sum(1 for i in split if labels[i] == cls)
                    for split in (tr_idx, va_idx, te_idx))
        assert got == (tr, va, te)
    _report(7, "split rows match the published per-class accounting")


@pytest.mark.xfail(
    strict=True,
    reason="published Hate row (3885/486/486) is arithmetically "
           "inconsistent with the other five published rows: its test "
           "count rounds fraction .7 up while the TS row rounds the same "
           "fraction down, so no per-class rounding rule can reproduce "
           "all six rows; the splitter follows the rule that matches the "
           "remaining five (see decision ledger)")
def test_criterion_7_hate_row_exact():
    total, tr, va, te = PUBLISHED_BINARY["Hate"]
    assert split_counts(total, (0.8, 0.1, 0.1)) == (tr, va, te)


# -------------------------------------------------------------------------
# 8. metric oracle
# -------------------------------------------------------------------------

def test_criterion_8_metric_oracle():
    # worked 4-sample example
    preds = [Prediction(str(i), p, g)
             for i, (g, p) in enumerate(zip([0, 0, 1, 1], [0, 1, 1, 1]))]
    report = macro_prf(confusion(preds, 2))
    assert abs(report.macro_f1 - 0.7333) < 1e-4

    # exhaustive sweep of small confusion matrices against an independent
    # exact-rational oracle
    from fractions import Fraction

    def oracle(cm):
        terms = []
        for c in range(len(cm)):
            tp = cm[c][c]
            support = sum(cm[c])
            predicted = sum(row[c] for row in cm)
            p = Fraction(tp, predicted) if predicted else Fraction(0)
            r = Fraction(tp, support) if support else Fraction(0)
            f = 2 * p * r / (p + r) if (p + r) else Fraction(0)
            if support:
                terms.append(f)
        return float(sum(terms) / len(terms))

    checked = 0
    for entries in product(range(4), repeat=4):
        cm = [list(entries[:2]), list(entries[2:])]
        if sum(entries) == 0 or all(sum(r) == 0 for r in cm):
            continue
        assert abs(macro_prf(np.array(cm)).macro_f1 - oracle(cm)) < 1e-12
        checked += 1
    cells = list(product(range(4), repeat=2))
    for n in (1, 2, 3):
        for combo in combinations_with_replacement(cells, n):
            cm = [[0] * 4 for _ in range(4)]
            for g, p in combo:
                cm[g][p] += 1
            assert abs(macro_prf(np.array(cm)).macro_f1 - oracle(cm)) < 1e-12
            checked += 1

    # bootstrap: exact zero width for perfect predictions, reproducible
    perfect = [Prediction(str(i), i % 2, i % 2) for i in range(30)]
    hw = bootstrap_ci(perfect, 2, iterations=250, seed=0)
    assert hw == {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    rng = make_rng(5)
    gold = rng.integers(0, 2, size=40)
    noisy = np.where(rng.random(40) < 0.8, gold, 1 - gold)
    sample = [Prediction(str(i), int(noisy[i]), int(gold[i]))
              for i in range(40)]
    assert bootstrap_ci(sample, 2, iterations=300, seed=9) == \
        bootstrap_ci(sample, 2, iterations=300, seed=9)
    _report(8, f"metric oracle over {checked} exhaustive matrices + bootstrap")


# -------------------------------------------------------------------------
# 9. prompt contract
# -------------------------------------------------------------------------

def test_criterion_9_prompt_contract():
    config = FusionConfig(d_v=8, d_t=16, S=4, heads=2, C=4,
                          dropout_rate=0.0, hidden_dim=8)
    params = init_params(config, make_rng(0))
    train_records = make_synthetic_records(120, 8, 4, 16, 4, seed=31,
                                           with_captions=True,
                                           id_prefix="train")
    test_records = make_synthetic_records(8, 8, 4, 16, 4, seed=32,
                                          with_captions=True,
                                          id_prefix="test")
    z = _fused_vectors(params, config, train_records)
    index = build_index(
        (r.id, r.label, z[i]) for i, r in enumerate(train_records))

    # 20 exemplars, 5 per class, in rag mode
    prompts = []
    for rec in test_records:
        exemplars = select_exemplars(index, params, config, rec, 5, "rag",
                                     train_records)
        prompt = build_prompt("task2", rec.caption, exemplars, mode="rag")
        assert len(prompt.exemplars) == 20
        for name in ("TI", "TC", "TO", "TS"):
            assert sum(1 for e in prompt.exemplars
                       if e.label_name == name) == 5
        prompts.append(prompt)

    # label renderings round-trip for both tasks
    for task, names in (("task1", ("Non-Hate", "Hate")),
                        ("task2", ("TI", "TC", "TO", "TS"))):
        for idx, name in enumerate(names):
            assert parse_response(name, task) == idx
            assert parse_response(str(idx), task) == idx

    # end-to-end against the scripted mock: the parsed predictions must
    # agree exactly with the script
    script_labels = [r.label for r in test_records]
    script = [("TI", "TC", "TO", "TS")[y] for y in script_labels]
    with MockLvlmServer(list(script)) as server:
        client = LvlmClient(endpoint=server.endpoint, backoff=0.0)
        responses = client.classify_many(prompts)
    preds = [Prediction(test_records[i].id, responses[i].parsed_label,
                        script_labels[i]) for i in range(len(test_records))]
    assert all(p.pred == p.gold for p in preds)
    report = macro_prf_from_pairs(preds, 4)
    assert report.macro_f1 == 1.0
    _report(9, "prompt contract and mock-service round trip")


# -------------------------------------------------------------------------
# 10. format round trips
# -------------------------------------------------------------------------

def test_criterion_10_format_round_trips(tmp_path):
    rng = make_rng(41)
    for trial in range(5):
        seed = int(rng.integers(0, 2**31))
        # XDEM
        records = make_synthetic_records(
            int(rng.integers(1, 8)), int(rng.integers(2, 9)),
            int(rng.integers(1, 5)), int(rng.integers(2, 9)), 2,
            seed=seed, with_captions=trial % 2 == 0)
        p1, p2 = tmp_path / f"a{trial}.xdem", tmp_path / f"b{trial}.xdem"
        save_embeddings(p1, records)
        loaded, _ = load_embeddings(p1)
        save_embeddings(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

        # XDZI
        dim = int(rng.integers(2, 17))
        n = int(rng.integers(1, 40))
        index = build_index((f"id{i}", int(rng.integers(0, 4)),
                             rng.normal(size=dim)) for i in range(n))
        i1, i2 = tmp_path / f"a{trial}.xdzi", tmp_path / f"b{trial}.xdzi"
        save_index(i1, index)
        save_index(i2, load_index(i1))
        assert i1.read_bytes() == i2.read_bytes()

        # XDMW
        config = FusionConfig(d_v=int(rng.integers(2, 9)), d_t=8,
                              S=int(rng.integers(1, 5)), heads=2,
                              C=int(rng.choice([2, 4])),
                              dropout_rate=0.0,
                              hidden_dim=int(rng.integers(2, 9)))
        params = init_params(config, make_rng(seed))
        m1, m2 = tmp_path / f"a{trial}.xdmw", tmp_path / f"b{trial}.xdmw"
        save_model(m1, params, config)
        loaded_params, loaded_config = load_model(m1)
        save_model(m2, loaded_params, loaded_config)
        assert m1.read_bytes() == m2.read_bytes()
    _report(10, "XDEM/XDZI/XDMW round trips byte-identical")
