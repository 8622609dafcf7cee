import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kcn.instances import CID, INTER, INTRA, NULL, CandidateInstance, InstanceSet, token_kinds
from kcn.kge import MARKER, THERAPEUTIC, Knowledge, Triple, TripleStore, init_embeddings
from kcn.model import KCN, ModelConfig, TokenVocab, VariantConfig
from kcn.pipeline import (
    ABLATION_VARIANTS,
    PRF,
    RESULT_HEADER,
    InstancePrediction,
    TrainConfig,
    TrainingError,
    evaluate_levels,
    evaluate_prf,
    format_results_tsv,
    merge_relations,
    only_kb_baseline,
    predict,
    read_predictions,
    run_ablation_matrix,
    run_kb_regimes,
    split_train_val,
    train_kcn,
    write_predictions,
    write_train_log,
)
from kcn.synthetic import random_word_table, trigger_instances, trigger_vocabulary

TINY = ModelConfig(d=8, k=8, filters=3, widths=(1, 2), hidden=4)


def _inst(doc, chem="C", dis="D", level=INTRA, label=CID):
    return CandidateInstance(doc, chem, dis, level, token_kinds(("a", "↑", "x", "↓", "b")), label)


def _pred(doc, label, p=0.5, chem="C", dis="D", level=INTRA):
    return InstancePrediction(_inst(doc, chem, dis, level), label, p)


def _trigger_setup(n=40):
    inst, store = trigger_instances(n, seed=0)
    words = random_word_table(trigger_vocabulary(), 8, seed=1)
    return inst, Knowledge(store, init_embeddings(store, words, {}, 0, 8), words, {})


def test_split_ten_documents():
    inst = [_inst(f"d{i}") for i in range(10) for _ in range(2)]
    train, val = split_train_val(inst, 0.8, seed=3)
    assert len({i.doc_id for i in train}) == 8 and len({i.doc_id for i in val}) == 2
    assert {i.doc_id for i in train}.isdisjoint({i.doc_id for i in val})
    assert sorted(map(id, train + val)) == sorted(map(id, inst))
    again = split_train_val(inst, 0.8, seed=3)
    assert [i.doc_id for i in again[1]] == [i.doc_id for i in val]


def test_split_needs_two_documents():
    with pytest.raises(TrainingError):
        split_train_val([_inst("d")], 0.8, 0)
    train, val = split_train_val([_inst("a"), _inst("b")], 0.99, 0)
    assert len(train) == len(val) == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(split_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig().lr(INTRA) == 1e-4 and TrainConfig().lr(INTER) == 2e-4


def test_zero_learning_rate_keeps_loss_and_parameters():
    inst, knowledge = _trigger_setup()
    cfg = TrainConfig(lr_intra=0.0, max_epochs=3, patience=5)
    res = train_kcn(INTRA, inst, knowledge, VariantConfig(), cfg, TINY, val_instances=inst[:6])
    losses = [r.train_loss for r in res.log]
    assert len(res.log) == 3 and losses[0] == losses[1] == losses[2]
    fresh = KCN(TINY, VariantConfig(), TokenVocab.from_instances(inst + inst[:6]))
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(res.model.params[name].value, p.value)


def test_training_log_and_reproducibility():
    inst, knowledge = _trigger_setup()
    cfg = TrainConfig(lr_intra=0.01, max_epochs=4, patience=10, seed=2)
    a = train_kcn(INTRA, inst, knowledge, VariantConfig(), cfg, TINY)
    b = train_kcn(INTRA, inst, knowledge, VariantConfig(), cfg, TINY)
    assert [r.epoch for r in a.log] == [1, 2, 3, 4]
    assert [(r.train_loss, r.val_f1) for r in a.log] == [(r.train_loss, r.val_f1) for r in b.log]
    assert a.best_epoch == b.best_epoch
    buf = io.StringIO()
    write_train_log(a.log, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "epoch,train_loss,val_f1" and len(lines) == 5
    assert float(lines[1].split(",")[1]) == a.log[0].train_loss


def test_training_input_errors():
    inst, knowledge = _trigger_setup(10)
    with pytest.raises(TrainingError):
        train_kcn(INTRA, [], knowledge, VariantConfig(), TrainConfig(), TINY)
    with pytest.raises(TrainingError):
        train_kcn(INTER, inst, knowledge, VariantConfig(), TrainConfig(), TINY)
    unlabeled = [CandidateInstance(i.doc_id, i.chemical_id, i.disease_id, INTRA, i.sdp, None) for i in inst]
    with pytest.raises(TrainingError):
        train_kcn(INTRA, unlabeled, knowledge, VariantConfig(), TrainConfig(), TINY)


def test_predict_tie_goes_to_null():
    inst, knowledge = _trigger_setup(4)
    model = KCN(TINY, VariantConfig(), TokenVocab.from_instances(inst))
    model.params["cls.W_o"].value[:] = 0.0
    model.params["cls.b_o"].value[:] = 0.0
    preds = predict(inst, model, knowledge)
    assert all(p.label == NULL and p.cid_probability == 0.5 for p in preds)
    assert all(p.label == CID for p in predict(inst, model, knowledge, threshold=0.4))


def test_merge_any_positive():
    merged = merge_relations([_pred("1", NULL, 0.2), _pred("1", CID, 0.9), _pred("1", NULL, 0.1)])
    assert merged.pairs == {("1", "C", "D")}
    assert merged.scores[("1", "C", "D")] == 0.9
    assert merge_relations([_pred("1", NULL)]).pairs == set()


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("xy"), st.booleans()), max_size=15),
       st.randoms())
@settings(max_examples=60)
def test_merge_is_order_free_and_idempotent(items, rnd):
    preds = [_pred("d", CID if pos else NULL, chem=c, dis=d) for c, d, pos in items]
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    a = merge_relations(preds)
    assert merge_relations(shuffled).pairs == a.pairs
    assert merge_relations(preds, preds).pairs == a.pairs
    # brute force: positive iff any instance with that key is CID
    for key in {p.instance.key for p in preds}:
        assert (key in a) == any(p.label == CID for p in preds if p.instance.key == key)


def test_prf_examples():
    prf = PRF.from_counts(3, 1, 3)
    assert (prf.precision, prf.recall, prf.f1) == (0.75, 0.5, 0.6)
    assert PRF.from_counts(0, 0, 0) == PRF(0.0, 0.0, 0.0, 0, 0, 0)
    gold = {("d", "C", str(i)) for i in range(6)}
    pred = {("d", "C", "0"), ("d", "C", "1"), ("d", "C", "2"), ("d", "C", "x")}
    assert evaluate_prf(pred, gold) == prf


keys = st.sets(st.tuples(st.just("d"), st.sampled_from("abcd"), st.sampled_from("xyz")), max_size=12)


@given(keys, keys, keys)
def test_prf_counts_and_monotone_recall(pred, extra, gold):
    base = evaluate_prf(pred, gold)
    assert base.tp + base.fn == len(gold)
    assert base.tp + base.fp == len(pred)
    assert 0 <= base.precision <= 1 and 0 <= base.recall <= 1 and 0 <= base.f1 <= 1
    assert evaluate_prf(pred | extra, gold).recall >= base.recall
    assert evaluate_prf(pred | (extra - gold), gold).precision <= base.precision or not pred


def test_level_scores_share_document_recall_base():
    gold = {("1", "C", "D"), ("2", "C", "D")}
    res = evaluate_levels([_pred("1", CID)], [_pred("2", CID, level=INTER)], gold)
    assert res.intra.recall == res.inter.recall == 0.5
    assert res.document.f1 == 1.0


def test_only_kb_baseline():
    store = TripleStore([Triple("C", MARKER, "D"), Triple("C", THERAPEUTIC, "E")])
    inst = InstanceSet([_inst("1"), _inst("1", dis="E")], [_inst("2", dis="Z", level=INTER)])
    intra, inter = only_kb_baseline(inst, store)
    assert [p.label for p in intra] == [CID, NULL]
    assert [p.label for p in inter] == [NULL]


def test_prediction_file_round_trip():
    pred = merge_relations([_pred("2", CID, chem="B"), _pred("1", CID), _pred("1", NULL, chem="Z")])
    buf = io.StringIO()
    write_predictions(pred, buf)
    assert buf.getvalue() == "1\tCID\tC\tD\n2\tCID\tB\tD\n"
    assert read_predictions(buf.getvalue()).pairs == pred.pairs
    with pytest.raises(ValueError, match="line 1"):
        read_predictions("1\tNull\tC\tD\n")


def test_ablation_inventory():
    assert list(ABLATION_VARIANTS) == ["KCN", "AE", "SA", "AE-SA", "w/o GTRU", "w/o Att", "SGate-SAtt",
                                       "DGate-DAtt", "SGate-DAtt", "GTU", "GLU"]
    assert ABLATION_VARIANTS["w/o GTRU"].single_network
    # KCN itself is the separate-gates / shared-attention cell, so all rows differ
    assert len(set(ABLATION_VARIANTS.values())) == len(ABLATION_VARIANTS)
    assert not ABLATION_VARIANTS["KCN"].share_gates and ABLATION_VARIANTS["KCN"].share_attention


def test_ablation_rows_are_reproducible(mini_experiment):
    variants = {k: ABLATION_VARIANTS[k] for k in ("KCN", "w/o GTRU")}
    a = format_results_tsv(run_ablation_matrix(mini_experiment, variants))
    b = format_results_tsv(run_ablation_matrix(mini_experiment, variants))
    assert a == b
    lines = a.splitlines()
    assert lines[0].split("\t") == list(RESULT_HEADER)
    assert [line.split("\t")[0] for line in lines[1:]] == ["KCN", "w/o GTRU"]


def test_kb_regime_table(mini_experiment, mini):
    base = run_ablation_matrix(mini_experiment, {"KCN": ABLATION_VARIANTS["KCN"]})[0][1]
    rows = run_kb_regimes(mini_experiment, mini.ctd, mini.train, mini.test, kcn_result=base)
    assert [r[0] for r in rows] == ["KCN", "-train&test", "-train", "-test", "Only KB"]
    only_kb = rows[-1][1].document
    assert only_kb.recall > only_kb.precision


def test_level_without_training_data_predicts_null(mini_experiment):
    from dataclasses import replace

    exp = replace(mini_experiment, train=InstanceSet(mini_experiment.train.intra, []))
    out = run_ablation_matrix(exp, {"KCN": ABLATION_VARIANTS["KCN"]})[0][1]
    assert out.inter.tp == 0 and out.inter.fp == 0


def test_all_pairs_of_levels_merge_like_documents():
    preds = [_pred("1", lab, chem=c) for lab, c in itertools.product((CID, NULL), "AB")]
    res = evaluate_levels(preds[:2], preds[2:], {("1", "A", "D")})
    assert res.document == evaluate_prf(merge_relations(preds), {("1", "A", "D")})
