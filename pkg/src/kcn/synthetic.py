"""Generated corpora for tests and the bundled demo data.

Two generators live here. :func:`trigger_instances` makes SDP instances whose
label is decided by a single trigger word. :func:`mini_corpus` makes a small
annotated corpus (text, mentions, gold relations, dependency parses, a CTD-style
triple table, MeSH edges and word vectors) from templated sentences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus_io import (
    CHEMICAL,
    DISEASE,
    DependencyGraph,
    Document,
    GoldRelation,
    Mention,
    Token,
    WordEmbeddingTable,
    surface_words,
    write_conll,
    write_pubtator,
    write_word_embeddings,
)
from .instances import CID, DOWN, INTRA, NULL, UP, CandidateInstance, token_kinds
from .kge import MARKER, RELATIONS, Triple, TripleStore, write_triples

# ---------------------------------------------------------------------------
# trigger-token instances

TRIGGER = "induced"
_FILLER = ["treated", "patients", "dose", "after", "with", "study", "given", "group",
           "levels", "observed", "increased", "rats", "effect", "daily", "mg"]
_DEPS = ["nsubj", "dobj", "prep", "pobj", "amod", "nmod"]


def trigger_instances(n: int = 200, seed: int = 0, n_entities: int = 10):
    """``n`` labeled intra instances; CID exactly when the trigger word is on the path.

    Returns ``(instances, store)`` where the store assigns each pair a relation
    drawn independently of the label, so knowledge carries no label signal.
    """
    rng = np.random.default_rng(seed)
    store = TripleStore()
    out = []
    for i in range(n):
        positive = i % 2 == 0
        c, d = f"C{rng.integers(n_entities)}", f"D{rng.integers(n_entities)}"
        middle = list(rng.choice(_FILLER, size=int(rng.integers(1, 4))))
        if positive:
            middle[int(rng.integers(len(middle)))] = TRIGGER
        words = [f"chem{c[1:]}", *middle, f"dis{d[1:]}"]
        texts = [words[0]]
        for w in words[1:]:
            texts += [UP if rng.random() < 0.5 else DOWN, str(rng.choice(_DEPS)),
                      UP if rng.random() < 0.5 else DOWN, w]
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        if (c, d) not in store.by_pair:
            store.add(Triple(c, rel, d))
        out.append(CandidateInstance(f"T{i:04d}", c, d, INTRA, token_kinds(texts), CID if positive else NULL))
    return out, store


def trigger_vocabulary() -> list[str]:
    return sorted({TRIGGER, *_FILLER, *(f"chem{i}" for i in range(100)), *(f"dis{i}" for i in range(100))})


def random_word_table(words, d: int, seed: int = 0, scale: float = 0.5) -> WordEmbeddingTable:
    rng = np.random.default_rng(seed)
    words = list(words)
    return WordEmbeddingTable(words, rng.uniform(-scale, scale, size=(len(words), d)))


# ---------------------------------------------------------------------------
# templated mini corpus

CHEMICALS = {
    "D900001": "cocaine",
    "D900002": "doxorubicin",
    "D900003": "daunorubicin",
    "D900004": "valproic acid",
    "D900005": "lithium",
    "D900006": "cisplatin",
    "D900007": "haloperidol",
    "D900008": "tacrolimus",
}
CHEMICAL_CLASSES = {"D900100": ("anthracyclines", ("D900002", "D900003"))}
DISEASES = {
    "D910001": "seizures",
    "D910002": "cardiomyopathy",
    "D910003": "renal failure",
    "D910004": "hepatotoxicity",
    "D910005": "hypotension",
    "D910006": "tremor",
    "D910007": "nephrotoxicity",
    "D910008": "bradycardia",
}
DISEASE_CLASSES = {"D910100": ("kidney diseases", ("D910003", "D910007"))}

# (surface or slot, head entry, label); slots are C, D and P (a MeSH class)
_INDUCED = [("C", 2, "SUB"), ("induced", 0, "ROOT"), ("D", 2, "OBJ"), ("in", 2, "VMOD"), ("rats", 4, "PMOD"),
            (".", 2, "P")]
_CAUSED = [("D", 2, "SUB"), ("was", 0, "ROOT"), ("caused", 2, "VC"), ("by", 3, "LGS"), ("C", 4, "PMOD"),
           (".", 2, "P")]
_REDUCED = [("C", 2, "SUB"), ("reduced", 0, "ROOT"), ("D", 2, "OBJ"), ("in", 2, "VMOD"), ("patients", 4, "PMOD"),
            (".", 2, "P")]
_TREAT = [("C", 2, "SUB"), ("was", 0, "ROOT"), ("used", 2, "VC"), ("to", 3, "VMOD"), ("treat", 4, "VC"),
          ("D", 5, "OBJ"), (".", 2, "P")]
_RECEIVED = [("patients", 2, "SUB"), ("received", 0, "ROOT"), ("C", 2, "OBJ"), (".", 2, "P")]
_DEVELOPED = [("D", 2, "SUB"), ("developed", 0, "ROOT"), ("subsequently", 2, "VMOD"), (".", 2, "P")]
_ABSENT = [("D", 2, "SUB"), ("was", 0, "ROOT"), ("absent", 2, "PRD"), (".", 2, "P")]
_CLASS = [("P", 2, "SUB"), ("were", 0, "ROOT"), ("studied", 2, "VC"), (".", 2, "P")]
_FILLER_SENT = [("the", 2, "NMOD"), ("study", 3, "SUB"), ("was", 0, "ROOT"), ("approved", 3, "VC"), (".", 3, "P")]


@dataclass
class _Sentence:
    tokens: list[tuple[str, int, str]]
    slots: dict[str, tuple[int, int]]  # slot -> (first token, last token), 0-based


def _render(template, fills: dict[str, str]) -> _Sentence:
    expanded = []
    head_pos = {}
    slots = {}
    for ei, (surface, head, label) in enumerate(template, 1):
        words = fills[surface].split() if surface in fills else [surface]
        first = len(expanded)
        for wi, w in enumerate(words):
            expanded.append((w, ei, head, label, wi == len(words) - 1))
        head_pos[ei] = len(expanded)
        if surface in fills:
            slots[surface] = (first, len(expanded) - 1)
    tokens = []
    for w, ei, head, label, last in expanded:
        if last:
            tokens.append((w, head_pos[head] if head else 0, label))
        else:
            tokens.append((w, head_pos[ei], "NMOD"))
    return _Sentence(tokens, slots)


@dataclass
class MiniCorpus:
    train: list[Document]
    train_parses: dict[str, list[DependencyGraph]]
    test: list[Document]
    test_parses: dict[str, list[DependencyGraph]]
    ctd: TripleStore
    mesh_edges: list[tuple[str, str]]
    words: list[str]
    vectors: np.ndarray
    config: dict = field(default_factory=dict)


def _assemble(doc_id: str, sentences: list[_Sentence], mentions_in: list[tuple[int, str, str, str]],
              gold: set[tuple[str, str]]):
    """Lay sentences out as title + abstract text and build mentions and parses."""
    texts, graphs, offsets = [], [], []
    cursor = 0
    for si, sent in enumerate(sentences):
        words = [w for w, _, _ in sent.tokens]
        words[0] = words[0][0].upper() + words[0][1:]
        spans = []
        pieces = []
        pos = cursor
        for w in words:
            spans.append((pos, pos + len(w)))
            pieces.append(w)
            pos += len(w) + 1
        text = " ".join(pieces)
        texts.append(text)
        offsets.append(spans)
        graphs.append(DependencyGraph(si, tuple(Token(w, h, lab, s, e)
                                                for w, (_, h, lab), (s, e) in zip(words, sent.tokens, spans))))
        cursor += len(text) + 1
    title, abstract = texts[0], " ".join(texts[1:])
    full = title + " " + abstract
    mentions = []
    for si, slot, kind, cid in mentions_in:
        a, b = sentences[si].slots[slot]
        start, end = offsets[si][a][0], offsets[si][b][1]
        mentions.append(Mention(start, end, full[start:end], kind, (cid,)))
    mentions.sort(key=lambda m: (m.start, m.end))
    doc = Document(doc_id, title, abstract, tuple(mentions),
                   frozenset(GoldRelation(c, d) for c, d in gold))
    return doc, graphs


def _make_doc(doc_id: str, rng: np.random.Generator):
    chems = list(CHEMICALS)
    diss = list(DISEASES)
    sentences: list[_Sentence] = []
    mentions = []
    gold: set[tuple[str, str]] = set()
    used: set[tuple[str, str]] = set()
    negative_pairs = set()

    def pick_pair():
        while True:
            c, d = str(rng.choice(chems)), str(rng.choice(diss))
            if (c, d) not in used:
                used.add((c, d))
                return c, d

    n_relational = int(rng.integers(1, 4))
    for _ in range(n_relational):
        c, d = pick_pair()
        positive = rng.random() < 0.5
        if positive:
            template = _INDUCED if rng.random() < 0.6 else _CAUSED
            gold.add((c, d))
        else:
            template = _REDUCED if rng.random() < 0.5 else _TREAT
            negative_pairs.add((c, d))
        si = len(sentences)
        sentences.append(_render(template, {"C": CHEMICALS[c], "D": DISEASES[d]}))
        mentions += [(si, "C", CHEMICAL, c), (si, "D", DISEASE, d)]
    if rng.random() < 0.7:
        c, d = pick_pair()
        si = len(sentences)
        sentences.append(_render(_RECEIVED, {"C": CHEMICALS[c]}))
        if rng.random() < 0.4:
            sentences.append(_render(_FILLER_SENT, {}))
        positive = rng.random() < 0.5
        sentences.append(_render(_DEVELOPED if positive else _ABSENT, {"D": DISEASES[d]}))
        mentions += [(si, "C", CHEMICAL, c), (len(sentences) - 1, "D", DISEASE, d)]
        if positive:
            gold.add((c, d))
    present = {cid for _, _, _, cid in mentions}
    for kind, classes in ((CHEMICAL, CHEMICAL_CLASSES), (DISEASE, DISEASE_CLASSES)):
        for cls, (name, members) in classes.items():
            if present & set(members) and rng.random() < 0.5:
                sentences.append(_render(_CLASS, {"P": name}))
                mentions.append((len(sentences) - 1, "P", kind, cls))
    if rng.random() < 0.3:
        inserted = int(rng.integers(1, len(sentences) + 1))
        sentences.insert(inserted, _render(_FILLER_SENT, {}))
        mentions = [(si + (si >= inserted), slot, kind, cid) for si, slot, kind, cid in mentions]
    doc, graphs = _assemble(doc_id, sentences, mentions, gold)
    return doc, graphs, negative_pairs


def mini_corpus(n_train: int = 40, n_test: int = 20, seed: int = 13, d: int = 16) -> MiniCorpus:
    rng = np.random.default_rng(seed)
    train, test, train_parses, test_parses = [], [], {}, {}
    negatives: set[tuple[str, str]] = set()
    for i in range(n_train + n_test):
        doc_id = str(10000 + i)
        doc, graphs, neg = _make_doc(doc_id, rng)
        negatives |= neg
        if i < n_train:
            train.append(doc)
            train_parses[doc_id] = graphs
        else:
            test.append(doc)
            test_parses[doc_id] = graphs

    gold = {p for doc in train + test for p in doc.gold_pairs()}
    ctd = TripleStore()
    all_chems = list(CHEMICALS) + list(CHEMICAL_CLASSES)
    all_dis = list(DISEASES) + list(DISEASE_CLASSES)
    for c in all_chems:
        for dd in all_dis:
            u = rng.random()
            if (c, dd) in gold:
                if u < 0.8:
                    ctd.add(Triple(c, MARKER, dd))
            elif (c, dd) in negatives and u < 0.6:
                ctd.add(Triple(c, "therapeutic", dd))
            elif u < 0.08:
                ctd.add(Triple(c, MARKER, dd))
            elif u < 0.3:
                ctd.add(Triple(c, "inferred-association", dd))
    mesh_edges = sorted((m, cls) for cls, (_, members) in {**CHEMICAL_CLASSES, **DISEASE_CLASSES}.items()
                        for m in members)

    vocab = set()
    for parses in (train_parses, test_parses):
        for graphs in parses.values():
            for g in graphs:
                vocab.update(t.surface.lower() for t in g.tokens)
    for name in [*CHEMICALS.values(), *DISEASES.values(), *(n for n, _ in CHEMICAL_CLASSES.values()),
                 *(n for n, _ in DISEASE_CLASSES.values())]:
        vocab.update(surface_words(name))
    words = sorted(vocab)
    vectors = rng.uniform(-0.5, 0.5, size=(len(words), d))
    return MiniCorpus(train, train_parses, test, test_parses, ctd, mesh_edges, words, vectors,
                      mini_config(d))


def mini_config(d: int = 16) -> dict:
    """Run configuration sized for the mini corpus (paths relative to the config file)."""
    return {
        "version": 1,
        "seed": 7,
        "paths": {
            "train_corpus": "train.pubtator",
            "train_parses": "train.conll",
            "test_corpus": "test.pubtator",
            "test_parses": "test.conll",
            "ctd": "ctd.tsv",
            "mesh": "mesh.tsv",
            "embeddings": "embeddings.txt",
            "out_dir": "out",
        },
        "transe": {"k": d, "margin": 1.0, "epochs": 100, "learning_rate": 0.01, "batch_size": 1000,
                   "distance_norm": "L2", "normalize_entities": True, "negatives": "sample"},
        "model": {"d": d, "k": d, "filters": 8, "widths": [1, 2, 3], "hidden": 16, "max_len": 128},
        "variant": {"entity_mode": "KbEmbedding", "attention_mode": "RelationGuided", "gate_kind": "GTRU",
                    "pooling": "Attention", "share_gates": False, "share_attention": True},
        "train": {"batch_size": 20, "lr_intra": 0.005, "lr_inter": 0.01, "max_epochs": 20, "patience": 4,
                  "split_fraction": 0.8},
    }


def write_mini_corpus(corpus: MiniCorpus, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)

    def text(name, writer, *args):
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            writer(*args, fh)

    text("train.pubtator", write_pubtator, corpus.train)
    text("test.pubtator", write_pubtator, corpus.test)
    text("train.conll", write_conll, corpus.train_parses)
    text("test.conll", write_conll, corpus.test_parses)
    text("ctd.tsv", write_triples, corpus.ctd)
    with open(out / "mesh.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{c}\t{p}\n" for c, p in corpus.mesh_edges)
    text("embeddings.txt", write_word_embeddings, corpus.words, corpus.vectors)
    with open(out / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(corpus.config, fh, indent=2)
        fh.write("\n")
    return out

