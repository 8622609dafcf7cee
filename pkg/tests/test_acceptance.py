"""Acceptance criteria; the terminal summary prints one PASS/FAIL line per criterion."""

import os
import random
import re
import time
from pathlib import Path

import networkx as nx
import numpy as np
import pytest
from helpers import FIG1_ROWS, FIG1_SDP, make_doc, simple_sentence

from kcn import nn
from kcn.cli import load_config, main
from kcn.corpus_io import CHEMICAL, DISEASE, DependencyGraph, MeshHierarchy, Token
from kcn.instances import (
    CID,
    DEP,
    DIRECTION,
    INTER,
    INTRA,
    NULL,
    WORD,
    CandidateInstance,
    build_instances,
    sdp_sequence,
    token_kinds,
)
from kcn.kge import (
    MARKER,
    RELATIONS,
    THERAPEUTIC,
    EmbeddingTable,
    Knowledge,
    TransEConfig,
    Triple,
    TripleStore,
    hits_at_1,
    init_embeddings,
    train_transe,
)
from kcn.model import (
    GATE_KINDS,
    GTRU,
    KCN,
    PLAIN_TANH,
    RELATION_GUIDED,
    SELF_ATTENTION,
    ModelConfig,
    TokenVocab,
    VariantConfig,
    _TOY_PATH,
    attention_pool,
    gated_conv_backward,
    gated_conv_branch,
    toy_gradient_check,
)
from kcn.pipeline import (
    ABLATION_VARIANTS,
    PRF,
    InstancePrediction,
    TrainConfig,
    accuracy,
    evaluate_prf,
    merge_relations,
    predict,
    train_kcn,
)
from kcn.synthetic import random_word_table, trigger_instances, trigger_vocabulary

criterion = pytest.mark.criterion

# ---------------------------------------------------------------------------
# 1


@criterion(1, "gradient fidelity for every gate kind and attention mode")
@pytest.mark.parametrize("attention", [RELATION_GUIDED, SELF_ATTENTION])
@pytest.mark.parametrize("gate", GATE_KINDS)
def test_gradient_fidelity(gate, attention):
    assert len(_TOY_PATH) <= 7
    report = {}
    start = time.perf_counter()
    err = toy_gradient_check(VariantConfig(gate_kind=gate, attention_mode=attention), seed=0, report=report)
    elapsed = time.perf_counter() - start
    print(f"{gate}/{attention}: max relative error {err:.2e} in {elapsed:.2f}s over {len(report)} tensors")
    assert err < 1e-5
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2


def _toy_kb():
    # six chemicals, six diseases; marker maps c_i to d_i, therapeutic maps c_i to d_{i+3}
    facts = [Triple(f"c{i}", MARKER, f"d{i}") for i in range(6)]
    facts += [Triple(f"c{i}", THERAPEUTIC, f"d{i + 3}") for i in range(3)]
    return TripleStore(facts)


@criterion(2, "TransE full-batch loss is non-increasing and hits@1 is 100% on a toy KB")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_transe_sanity(seed):
    store = _toy_kb()
    assert len(store.entities) == 12 and len({t.relation for t in store.triples}) == 2
    words = random_word_table([f"w{i}" for i in range(12)], 8, seed=seed)
    mention_text = {e: [f"w{i}"] for i, e in enumerate(store.entities)}
    cfg = TransEConfig(k=8, margin=1.0, epochs=500, learning_rate=0.02, batch_size=10 ** 6,
                       normalize_entities=False, negatives="all", seed=seed)
    emb = train_transe(store, cfg, words, mention_text)
    trace = np.asarray(emb.loss_trace)
    print(f"seed {seed}: loss {trace[0]:.4f} -> {trace[-1]:.4f}, hits@1 {hits_at_1(store, emb):.3f}")
    assert len(trace) <= 500
    assert np.all(np.diff(trace) <= 0)
    assert hits_at_1(store, emb) == 1.0


# ---------------------------------------------------------------------------
# 3


@criterion(3, "trigger corpus reaches 99% training accuracy within 50 epochs")
@pytest.mark.parametrize("name", ["KCN", "AE", "SA", "AE-SA"])
def test_convergence(name):
    inst, store = trigger_instances(200, seed=0)
    words = random_word_table(trigger_vocabulary(), 8, seed=1)
    knowledge = Knowledge(store, init_embeddings(store, words, {}, seed=0, k=8), words, {})
    cfg = TrainConfig(lr_intra=0.01, max_epochs=50, patience=50, seed=0)
    model_cfg = ModelConfig(d=8, k=8, filters=4, widths=(1, 2, 3), hidden=8)
    res = train_kcn(INTRA, inst, knowledge, ABLATION_VARIANTS[name], cfg, model_cfg, words, val_instances=inst)
    losses = [r.train_loss for r in res.log]
    acc = accuracy(res.model, inst, knowledge)
    print(f"{name}: accuracy {acc:.3f} after best epoch {res.best_epoch}, final loss {losses[-1]:.4f}")
    assert all(np.isfinite(losses))
    assert res.best_epoch <= 50
    assert acc >= 0.99


# ---------------------------------------------------------------------------
# 4


def _random_tree(rng: random.Random, n: int, sentence: int) -> DependencyGraph:
    # attach every node to an earlier one, then relabel positions at random
    parents = [0] + [rng.randrange(i) + 1 for i in range(1, n)]
    perm = list(range(1, n + 1))
    rng.shuffle(perm)  # node i (1-based in build order) lives at position perm[i-1]
    heads = [0] * n
    for i in range(n):
        heads[perm[i] - 1] = 0 if i == 0 else perm[parents[i] - 1]
    toks = tuple(Token(f"s{sentence}w{pos}", heads[pos - 1], "root" if heads[pos - 1] == 0 else f"L{pos % 5}")
                 for pos in range(1, n + 1))
    return DependencyGraph(sentence, toks)


def _oracle_words(graphs, a, b):
    g = nx.Graph()
    for graph in graphs:
        for i, t in enumerate(graph.tokens, 1):
            g.add_edge((graph.sentence_index, i), (graph.sentence_index, t.head) if t.head else "ROOT")
    path = nx.shortest_path(g, a, b)
    return [graphs[n[0]].tokens[n[1] - 1].surface.lower() for n in path if n != "ROOT"]


PATTERN = re.compile(r"W(DLD W)*".replace(" ", ""))


@criterion(4, "SDP matches a BFS oracle on random trees and reproduces the worked example")
def test_sdp_oracle():
    rng = random.Random(2024)
    checked = 0
    for trial in range(500):
        two = trial % 4 == 3
        graphs = [_random_tree(rng, rng.randint(2, 25), 0)]
        if two:
            graphs.append(_random_tree(rng, rng.randint(1, 25), 1))
        a = (0, rng.randint(1, len(graphs[0].tokens)))
        last = graphs[-1]
        b = (last.sentence_index, rng.randint(1, len(last.tokens)))
        if a == b:
            continue
        seq = sdp_sequence(a, b, graphs)
        words = [t.text for t in seq if t.kind == WORD]
        assert words == _oracle_words(graphs, a, b), trial
        code = "".join({WORD: "W", DIRECTION: "D", DEP: "L"}[t.kind] for t in seq)
        assert PATTERN.fullmatch(code), code
        # arrows: the path climbs, then descends; only the link through the joined root of two
        # sentences shows both directions
        dirs = [t.text for t in seq if t.kind == DIRECTION]
        links = list(zip(dirs[::2], dirs[1::2]))
        mixed = [link for link in links if link[0] != link[1]]
        assert mixed == ([("↑", "↓")] if a[0] != b[0] else [])
        assert re.fullmatch("↑*↓*", "".join(dirs))
        checked += 1
    assert checked > 450
    doc, graphs = make_doc("F1", [FIG1_ROWS], [(0, 5, 5, CHEMICAL, "D010862"), (0, 1, 1, DISEASE, "D012640")],
                           gold=[("D010862", "D012640")])
    (inst,) = build_instances(doc, graphs).intra
    assert inst.tokens == FIG1_SDP


# ---------------------------------------------------------------------------
# 5


def _sentences(n):
    return [simple_sentence(f"a{i}", f"b{i}", f"c{i}") for i in range(n)]


def _pairs(out, level):
    return {(i.chemical_id, i.disease_id) for i in (out.intra if level == INTRA else out.inter)}


@criterion(5, "inter-sentence rules and the hypernym filter give exactly the expected candidates")
def test_rule_fixtures():
    # gap 4 is excluded, gap 3 is kept
    doc, g = make_doc("G", _sentences(5), [(0, 1, 1, CHEMICAL, "C"), (3, 2, 2, DISEASE, "D3"),
                                           (4, 2, 2, DISEASE, "D4")])
    out = build_instances(doc, g)
    assert _pairs(out, INTRA) == set() and _pairs(out, INTER) == {("C", "D3")}

    # a pair seen inside one sentence produces no inter instance, even with other cross-sentence mentions
    doc, g = make_doc("S", _sentences(3), [(0, 1, 1, CHEMICAL, "C"), (0, 3, 3, DISEASE, "D"),
                                           (2, 1, 1, DISEASE, "D"), (2, 2, 2, CHEMICAL, "C")])
    out = build_instances(doc, g)
    assert _pairs(out, INTRA) == {("C", "D")} and _pairs(out, INTER) == set()

    # among several mention pairs the nearest one (fewest sentences, then characters) is used
    doc, g = make_doc("N", _sentences(4), [(0, 1, 1, CHEMICAL, "C"), (2, 3, 3, DISEASE, "D"),
                                           (3, 1, 1, CHEMICAL, "C"), (1, 3, 3, DISEASE, "E")])
    out = build_instances(doc, g)
    by_pair = {(i.chemical_id, i.disease_id): i for i in out.inter}
    assert set(by_pair) == {("C", "D"), ("C", "E")}
    assert (by_pair["C", "D"].chemical_token, by_pair["C", "D"].disease_token) == ((3, 1), (2, 3))
    assert (by_pair["C", "E"].chemical_token, by_pair["C", "E"].disease_token) == ((0, 1), (1, 3))
    # equal sentence gaps: the smaller character gap wins
    doc, g = make_doc("M", _sentences(3), [(0, 1, 1, CHEMICAL, "C"), (0, 3, 3, CHEMICAL, "C"),
                                           (1, 1, 1, DISEASE, "D")])
    (inst,) = build_instances(doc, g).inter
    assert inst.chemical_token == (0, 3)

    # hypernym filter: the general chemical and disease drop out, the specific ones stay
    mesh = MeshHierarchy({("Cs", "Cg"), ("Ds", "Dg")})
    doc, g = make_doc("H", _sentences(2), [(0, 1, 1, CHEMICAL, "Cg"), (0, 2, 2, CHEMICAL, "Cs"),
                                           (0, 3, 3, DISEASE, "Ds"), (1, 1, 1, DISEASE, "Dg")])
    out = build_instances(doc, g, mesh)
    assert _pairs(out, INTRA) == {("Cs", "Ds")} and _pairs(out, INTER) == set()
    assert _pairs(build_instances(doc, g), INTER) == {("Cg", "Dg"), ("Cs", "Dg")}


# ---------------------------------------------------------------------------
# 6


def _instance(path):
    return CandidateInstance("doc", "C", "D", INTRA, token_kinds(path), CID)


def _table(seed, entities, k=8):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(k, list(entities), rng.normal(size=(len(entities), k)), list(RELATIONS),
                          rng.normal(size=(len(RELATIONS), k)))


@criterion(6, "attention, softmax, gate and variant-independence invariants")
def test_algebraic_invariants():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L, n, k = rng.integers(1, 12), rng.integers(1, 30), rng.integers(1, 6)
        M = rng.normal(scale=5, size=(L, n))
        params = {"W_g": rng.normal(size=(k, L)), "b_g": rng.normal(size=k), "w_g": rng.normal(size=L),
                  "b_sa": rng.normal(size=1)}
        for mode in (RELATION_GUIDED, SELF_ATTENTION):
            _, alpha, _ = attention_pool(M, rng.normal(size=k), params, mode)
            assert abs(alpha.sum() - 1) <= 1e-9 and np.all(alpha >= 0)
        v, c = rng.normal(scale=30, size=n), rng.normal(scale=100)
        assert np.max(np.abs(nn.softmax(v + c) - nn.softmax(v))) <= 1e-12

    # closing filter 0 of every width: its features and its W_s / b_s gradients vanish
    params = {h: {"W_s": rng.normal(size=(3, 5, h)), "b_s": rng.normal(size=3), "W_a": rng.normal(size=(3, 5, h)),
                  "b_a": np.array([-1e3, 0.0, 0.0]), "V_a": rng.normal(size=(3, 4))} for h in (1, 2, 3)}
    X, e = rng.normal(size=(5, 9)), rng.normal(size=4)
    M, cache = gated_conv_branch(X, e, params, GTRU)
    assert np.all(M[[0, 3, 6]] == 0) and np.any(M != 0)
    _, grads = gated_conv_backward(cache, rng.normal(size=M.shape), params)
    for h in (1, 2, 3):
        assert np.all(grads[h]["W_s"][0] == 0) and grads[h]["b_s"][0] == 0
        assert np.any(grads[h]["W_s"][1:] != 0)

    # variant independence, bit-exact
    inst = _instance(("aspirin", "↑", "nsubj", "↑", "induced", "↓", "dobj", "↓", "ulcer"))
    words = random_word_table(["aspirin", "induced", "ulcer"], 8, seed=5)
    store = TripleStore([Triple("C", MARKER, "D")])
    text = {"C": ["aspirin"], "D": ["ulcer"]}
    k1 = Knowledge(store, _table(1, ["C", "D"]), words, text)
    k2 = Knowledge(store, _table(2, ["C", "D"]), words, text)
    cfg = ModelConfig(d=8, k=8, filters=4, widths=(1, 2, 3), hidden=6, seed=3)

    def probs(variant, kvs):
        model = KCN(cfg, variant, TokenVocab.from_instances([inst]))
        return [model.predict_proba(model.encode(inst), kv) for kv in kvs]

    e_c, e_d, r = k1.lookup("C", "D")
    a, b = probs(VariantConfig(attention_mode=SELF_ATTENTION), [(e_c, e_d, r), (e_c, e_d, rng.normal(size=8))])
    assert np.array_equal(a, b)
    a, b = probs(VariantConfig(gate_kind=PLAIN_TANH, share_gates=True),
                 [(e_c, e_d, r), (rng.normal(size=8), rng.normal(size=8), r)])
    assert np.array_equal(a, b)
    ae_sa = ABLATION_VARIANTS["AE-SA"]
    model = KCN(cfg, ae_sa, TokenVocab.from_instances([inst]))
    p1 = predict([inst], model, k1, ae_sa)[0].cid_probability
    p2 = predict([inst], model, k2, ae_sa)[0].cid_probability
    assert p1 == p2
    # AE alone: same relation vectors, different trained entity vectors
    t3 = _table(3, ["C", "D"])
    t3.relation_matrix[:] = k1.embeddings.relation_matrix
    ae = ABLATION_VARIANTS["AE"]
    model = KCN(cfg, ae, TokenVocab.from_instances([inst]))
    p1 = predict([inst], model, k1, ae)[0].cid_probability
    p3 = predict([inst], model, Knowledge(store, t3, words, text), ae)[0].cid_probability
    assert p1 == p3


# ---------------------------------------------------------------------------
# 7


@criterion(7, "relation merging and precision / recall / F1 arithmetic")
def test_merge_and_metric_arithmetic():
    def pred(label):
        return InstancePrediction(CandidateInstance("1", "C", "D", INTER, token_kinds(("a",)), None), label, 0.0)

    merged = merge_relations([pred(NULL)], [pred(CID)], [pred(NULL)])
    assert merged.pairs == {("1", "C", "D")}
    gold = {("1", "C", f"D{i}") for i in range(6)}
    predicted = {("1", "C", "D0"), ("1", "C", "D1"), ("1", "C", "D2"), ("1", "C", "X")}
    prf = evaluate_prf(predicted, gold)
    assert (prf.tp, prf.fp, prf.fn) == (3, 1, 3)
    assert (prf.precision, prf.recall, prf.f1) == (0.75, 0.5, 0.6)
    assert PRF.from_counts(3, 1, 3).f1 == 0.6


# ---------------------------------------------------------------------------
# 8

FAST = ["--set", "train.max_epochs=6", "--set", "transe.epochs=10"]
SUBCOMMANDS = [["stats"], ["build-instances"], ["train-kge"], ["train-kcn"], ["predict"], ["evaluate"],
               ["baseline-kb"], ["export-weights"], ["gradcheck", "--all"], ["ablate", "--regimes"]]


@criterion(8, "every subcommand is byte-for-byte deterministic")
def test_determinism(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in SUBCOMMANDS:
            assert main([*cmd, "--out", str(out), *FAST]) == 0, cmd
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    assert {"ablation.tsv", "kb_regimes.tsv", "gradcheck.tsv", "diagnostics.csv"} <= set(files)
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    # worker processes give the same table as the serial run
    par = tmp_path / "par"
    assert main(["ablate", "--jobs", "2", "--out", str(par), *FAST]) == 0
    assert (par / "ablation.tsv").read_bytes() == (outs[0] / "ablation.tsv").read_bytes()


# ---------------------------------------------------------------------------
# 9

CDR_DIR = os.environ.get("KCN_CDR_DIR")
TABLE1 = {"Training": [500, 5203, 1467, 4182, 1965, 1038],
          "Development": [500, 5347, 1507, 4244, 1865, 1012],
          "Test": [500, 5385, 1435, 4424, 1988, 1066]}


@criterion(9, "optional tier on the real corpus (set KCN_CDR_DIR)")
@pytest.mark.skipif(not CDR_DIR, reason="KCN_CDR_DIR is not set")
def test_real_corpus(tmp_path):
    config = Path(CDR_DIR) / "config.json"
    load_config(config, [], None, str(tmp_path))  # fail fast on a bad config
    base = ["--config", str(config), "--out", str(tmp_path)]
    assert main(["stats", *base]) == 0
    rows = {line.split("\t")[0]: [int(x) for x in line.split("\t")[1:]]
            for line in (tmp_path / "stats.tsv").read_text().splitlines()[1:]}
    for name, expected in TABLE1.items():
        if name in rows:
            assert rows[name] == expected, name
    for cmd in ("train-kge", "train-kcn", "predict", "evaluate", "baseline-kb"):
        assert main([cmd, *base]) == 0, cmd
    report = (tmp_path / "evaluation.tsv").read_text().splitlines()
    assert len(report) == 2 and len(report[1].split("\t")) == 10
    only_kb = (tmp_path / "only_kb.tsv").read_text().splitlines()[1].split("\t")
    print("Only KB document P/R/F:", only_kb[7:10])
    assert float(only_kb[8]) > float(only_kb[7])
