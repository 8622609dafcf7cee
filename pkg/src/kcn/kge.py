"""Chemical-disease triples and TransE embeddings."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .corpus_io import (
    CHEMICAL,
    DISEASE,
    Document,
    WordEmbeddingTable,
    load_word_embeddings,
    surface_words,
    write_word_embeddings,
)

log = logging.getLogger(__name__)

INFERRED = "inferred-association"
THERAPEUTIC = "therapeutic"
MARKER = "marker/mechanism"
NULL_RELATION = "null"
RELATIONS = (INFERRED, THERAPEUTIC, MARKER, NULL_RELATION)
# by_pair keeps one relation per pair; stronger evidence wins
_PRIORITY = {MARKER: 0, THERAPEUTIC: 1, INFERRED: 2, NULL_RELATION: 3}

REGIMES = ("-train&test", "-train", "-test")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class Triple:
    chemical_id: str
    relation: str
    disease_id: str

    def __post_init__(self):
        if self.relation not in _PRIORITY:
            raise ValueError(f"unknown relation {self.relation!r}")


class TripleStore:
    """Set of triples with a per-pair relation index."""

    def __init__(self, triples: Iterable[Triple] = ()):
        self.triples: set[Triple] = set()
        self.by_pair: dict[tuple[str, str], str] = {}
        self._chemicals: set[str] = set()
        self._diseases: set[str] = set()
        self._index = None
        for t in triples:
            self.add(t)

    def add(self, t: Triple) -> None:
        if t in self.triples:
            return
        self.triples.add(t)
        self._chemicals.add(t.chemical_id)
        self._diseases.add(t.disease_id)
        pair = (t.chemical_id, t.disease_id)
        cur = self.by_pair.get(pair)
        if cur is None or _PRIORITY[t.relation] < _PRIORITY[cur]:
            self.by_pair[pair] = t.relation
        self._index = None

    def __len__(self):
        return len(self.triples)

    def __contains__(self, t: Triple) -> bool:
        return t in self.triples

    @property
    def chemicals(self) -> list[str]:
        return sorted(self._chemicals)

    @property
    def diseases(self) -> list[str]:
        return sorted(self._diseases)

    @property
    def entities(self) -> list[str]:
        return sorted(self._chemicals | self._diseases)

    def relation_of(self, chemical_id: str, disease_id: str) -> str:
        return self.by_pair.get((chemical_id, disease_id), NULL_RELATION)

    def without_pairs(self, pairs: set[tuple[str, str]]) -> "TripleStore":
        return TripleStore(t for t in self.triples if (t.chemical_id, t.disease_id) not in pairs)

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples)

    def index(self) -> "_TripleIndex":
        if self._index is None:
            self._index = _TripleIndex(self)
        return self._index


class _TripleIndex:
    """Integer encoding of a store used by the vectorised trainer."""

    def __init__(self, store: TripleStore):
        self.entities = store.entities
        self.ent = {e: i for i, e in enumerate(self.entities)}
        self.rel = {r: i for i, r in enumerate(RELATIONS)}
        self.chem_ids = np.array([self.ent[c] for c in store.chemicals], dtype=np.int64)
        self.dis_ids = np.array([self.ent[d] for d in store.diseases], dtype=np.int64)
        rows = [(self.ent[t.chemical_id], self.rel[t.relation], self.ent[t.disease_id])
                for t in store.sorted_triples()]
        self.triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
        self.keys = np.sort(self.encode(self.triples))

    def encode(self, rows: np.ndarray) -> np.ndarray:
        n_e, n_r = len(self.entities), len(RELATIONS)
        return (rows[:, 0] * n_r + rows[:, 1]) * n_e + rows[:, 2]

    def contains(self, rows: np.ndarray) -> np.ndarray:
        keys = self.encode(rows)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def decode(self, row) -> Triple:
        return Triple(self.entities[row[0]], RELATIONS[row[1]], self.entities[row[2]])


# ---------------------------------------------------------------------------
# triple I/O and construction


def load_triples(stream: TextIO | str) -> TripleStore:
    """Read chemical<TAB>relation<TAB>disease rows."""
    text = stream if isinstance(stream, str) else stream.read()
    store = TripleStore()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected chemical<TAB>relation<TAB>disease")
        if fields[1] not in _PRIORITY:
            raise ValueError(f"line {lineno}: field 2 (relation) {fields[1]!r} is not one of {RELATIONS}")
        store.add(Triple(fields[0], fields[1], fields[2]))
    return store


def write_triples(store: TripleStore, stream: TextIO) -> None:
    for t in store.sorted_triples():
        stream.write(f"{t.chemical_id}\t{t.relation}\t{t.disease_id}\n")


def document_pairs(docs: Iterable[Document]) -> set[tuple[str, str]]:
    """Every (chemical, disease) concept pair co-occurring in a document."""
    pairs = set()
    for doc in docs:
        chems = {c for m in doc.mentions_of(CHEMICAL) for c in m.grounded_ids}
        diss = {d for m in doc.mentions_of(DISEASE) for d in m.grounded_ids}
        pairs.update((c, d) for c in chems for d in diss)
    return pairs


def build_triples(cdr: Iterable[Document], ctd: TripleStore) -> TripleStore:
    store = TripleStore(ctd.triples)
    for c, d in sorted(document_pairs(cdr)):
        if (c, d) not in ctd.by_pair:
            store.add(Triple(c, NULL_RELATION, d))
    return store


def remove_cdr_triples(ctd: TripleStore, docs: Iterable[Document]) -> TripleStore:
    """Drop every CTD triple whose pair co-occurs in ``docs``."""
    return ctd.without_pairs(document_pairs(docs))


def apply_regime(ctd: TripleStore, regime: str, train_docs: Sequence[Document],
                 test_docs: Sequence[Document]) -> TripleStore:
    if regime == "-train&test":
        return remove_cdr_triples(ctd, list(train_docs) + list(test_docs))
    if regime == "-train":
        return remove_cdr_triples(ctd, train_docs)
    if regime == "-test":
        return remove_cdr_triples(ctd, test_docs)
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def mention_surfaces(docs: Iterable[Document]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for doc in docs:
        for m in doc.mentions:
            for c in m.grounded_ids:
                out.setdefault(c, []).append(m.surface)
    return out


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class TransEConfig:
    k: int = 100
    margin: float = 1.0
    epochs: int = 500
    learning_rate: float = 0.01
    batch_size: int = 1000
    distance_norm: str = "L2"
    seed: int = 0
    normalize_entities: bool = True
    negatives: str = "sample"  # "sample": one corruption per positive; "all": every corruption

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.k < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("k and batch_size must be positive, epochs non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.distance_norm not in ("L1", "L2"):
            raise ValueError("distance_norm must be L1 or L2")
        if self.negatives not in ("sample", "all"):
            raise ValueError("negatives must be 'sample' or 'all'")


@dataclass
class EmbeddingTable:
    k: int
    entities: list[str]
    entity_matrix: np.ndarray
    relations: list[str] = field(default_factory=lambda: list(RELATIONS))
    relation_matrix: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._ent = {e: i for i, e in enumerate(self.entities)}
        self._rel = {r: i for i, r in enumerate(self.relations)}

    def has_entity(self, e: str) -> bool:
        return e in self._ent

    def entity(self, e: str) -> np.ndarray:
        return self.entity_matrix[self._ent[e]]

    def relation(self, r: str) -> np.ndarray:
        return self.relation_matrix[self._rel[r]]

    @property
    def entity_vec(self) -> dict[str, np.ndarray]:
        return {e: self.entity_matrix[i] for i, e in enumerate(self.entities)}

    @property
    def relation_vec(self) -> dict[str, np.ndarray]:
        return {r: self.relation_matrix[i] for i, r in enumerate(self.relations)}

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.k, list(self.entities), self.entity_matrix.copy(), list(self.relations),
                              self.relation_matrix.copy(), list(self.loss_trace))


def averaged_word_vector(entity: str, words: WordEmbeddingTable, mention_text: Mapping[str, Sequence[str]]):
    """Mean of the word vectors of every mention surface of ``entity``.

    Returns None when the entity has no mention words.
    """
    toks = [w for s in mention_text.get(entity, ()) for w in surface_words(s)]
    if not toks:
        return None
    return np.mean([words.lookup(w) for w in toks], axis=0)


def init_embeddings(store: TripleStore, words: WordEmbeddingTable, mention_text: Mapping[str, Sequence[str]],
                    seed: int, k: int | None = None) -> EmbeddingTable:
    k = words.d if k is None else k
    if words.d != k:
        raise ValueError(f"word dimension {words.d} differs from embedding dimension {k}")
    rng = np.random.default_rng(seed)
    relation_matrix = rng.uniform(-0.25, 0.25, size=(len(RELATIONS), k))
    entities = store.entities
    E = np.empty((len(entities), k))
    missing = 0
    for i, e in enumerate(entities):
        v = averaged_word_vector(e, words, mention_text)
        if v is None:
            missing += 1
            v = words.unk_vector
        E[i] = v
    if missing:
        log.warning("%d of %d entities have no mention text; initialised from the unknown-word vector",
                    missing, len(entities))
    return EmbeddingTable(k, entities, E, list(RELATIONS), relation_matrix)


def write_embedding_table(emb: EmbeddingTable, stream: TextIO) -> None:
    names = [f"entity:{e}" for e in emb.entities] + [f"relation:{r}" for r in emb.relations]
    write_word_embeddings(names, np.vstack([emb.entity_matrix, emb.relation_matrix]), stream)


def read_embedding_table(stream: TextIO | str) -> EmbeddingTable:
    table = load_word_embeddings(stream, lowercase=False)
    entities, erows, relations, rrows = [], [], [], []
    for i, name in enumerate(table.words):
        kind, _, key = name.partition(":")
        if kind == "entity":
            entities.append(key)
            erows.append(table.matrix[i])
        elif kind == "relation":
            relations.append(key)
            rrows.append(table.matrix[i])
        else:
            raise ValueError(f"row {name!r} is neither 'entity:' nor 'relation:'")
    k = table.d
    return EmbeddingTable(k, entities, np.array(erows).reshape(-1, k), relations, np.array(rrows).reshape(-1, k))


# ---------------------------------------------------------------------------
# negative sampling


def _corrupt(index: _TripleIndex, rows: np.ndarray, rng: np.random.Generator, max_rounds: int = 30) -> np.ndarray:
    """Replace the chemical or the disease of each row (probability 1/2 each)
    by a uniformly drawn entity of the same side so the result is not a
    known triple."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    out = rows.copy()
    chem_side = rng.random(len(rows)) < 0.5
    todo = np.arange(len(rows))
    for _ in range(max_rounds):
        if not len(todo):
            return out
        side = chem_side[todo]
        cand = out[todo].copy()
        n_c = int(side.sum())
        cand[side, 0] = index.chem_ids[rng.integers(len(index.chem_ids), size=n_c)]
        cand[~side, 2] = index.dis_ids[rng.integers(len(index.dis_ids), size=len(todo) - n_c)]
        ok = ~index.contains(cand)
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
    for i in todo:
        out[i] = _corrupt_exhaustive(index, rows[i], bool(chem_side[i]), rng)
    return out


def _valid_corruptions(index: _TripleIndex, row: np.ndarray, chem_side: bool) -> np.ndarray:
    pool = index.chem_ids if chem_side else index.dis_ids
    cand = np.repeat(row[None, :], len(pool), axis=0)
    cand[:, 0 if chem_side else 2] = pool
    return cand[~index.contains(cand)]


def _corrupt_exhaustive(index, row, chem_side, rng):
    valid = _valid_corruptions(index, row, chem_side)
    if not len(valid):
        valid = _valid_corruptions(index, row, not chem_side)
    if not len(valid):
        raise SamplingError(f"no corruption of {index.decode(row)} lies outside the triple set")
    return valid[rng.integers(len(valid))]


def sample_negative(triple: Triple, store: TripleStore, rng: np.random.Generator) -> Triple:
    if len(store.chemicals) < 2 or len(store.diseases) < 2:
        raise SamplingError("negative sampling needs at least two chemicals and two diseases")
    index = store.index()
    row = np.array([[index.ent[triple.chemical_id], index.rel[triple.relation], index.ent[triple.disease_id]]])
    return index.decode(_corrupt(index, row, rng)[0])


def all_negatives(store: TripleStore) -> tuple[np.ndarray, np.ndarray]:
    """Every corrupt-one-side negative of every triple, as (positive row id, negative row) arrays."""
    index = store.index()
    pos_ids, negs = [], []
    for i, row in enumerate(index.triples):
        for chem_side in (True, False):
            valid = _valid_corruptions(index, row, chem_side)
            pos_ids.extend([i] * len(valid))
            negs.append(valid)
    return np.array(pos_ids, dtype=np.int64), np.vstack(negs) if negs else np.empty((0, 3), np.int64)


# ---------------------------------------------------------------------------
# loss


def _distance(diff: np.ndarray, norm: str):
    """Row-wise distance and its (sub)gradient; the subgradient at 0 is 0."""
    if norm == "L1":
        return np.abs(diff).sum(axis=-1), np.sign(diff)
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    return dist, np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)


def _batch_loss_grad(E, R, pos, neg, margin, norm):
    dp, gp = _distance(E[pos[:, 0]] + R[pos[:, 1]] - E[pos[:, 2]], norm)
    dn, gn = _distance(E[neg[:, 0]] + R[neg[:, 1]] - E[neg[:, 2]], norm)
    hinge = margin + dp - dn
    active = hinge > 0
    loss = np.where(active, hinge, 0.0)
    gp = gp * active[:, None]
    gn = gn * active[:, None]
    dE = np.zeros_like(E)
    dR = np.zeros_like(R)
    np.add.at(dE, pos[:, 0], gp)
    np.add.at(dE, pos[:, 2], -gp)
    np.add.at(dR, pos[:, 1], gp)
    np.add.at(dE, neg[:, 0], -gn)
    np.add.at(dE, neg[:, 2], gn)
    np.add.at(dR, neg[:, 1], -gn)
    return loss, dE, dR


def transe_loss_and_grad(pos: Triple, neg: Triple, emb: EmbeddingTable, margin: float = 1.0, norm: str = "L2"):
    """Margin hinge for one (positive, negative) pair.

    Gradients are keyed ``("entity", id)`` / ``("relation", name)`` and summed
    when the negative reuses an entity of the positive.
    """
    ents = sorted({pos.chemical_id, pos.disease_id, neg.chemical_id, neg.disease_id})
    rels = sorted({pos.relation, neg.relation})
    eid = {e: i for i, e in enumerate(ents)}
    rid = {r: i for i, r in enumerate(rels)}
    E = np.array([emb.entity(e) for e in ents])
    R = np.array([emb.relation(r) for r in rels])
    p = np.array([[eid[pos.chemical_id], rid[pos.relation], eid[pos.disease_id]]])
    n = np.array([[eid[neg.chemical_id], rid[neg.relation], eid[neg.disease_id]]])
    loss, dE, dR = _batch_loss_grad(E, R, p, n, margin, norm)
    grads = {("entity", e): dE[i] for e, i in eid.items()}
    grads.update({("relation", r): dR[i] for r, i in rid.items()})
    return float(loss[0]), grads


# ---------------------------------------------------------------------------
# training


def _renormalize(E: np.ndarray) -> None:
    norms = np.linalg.norm(E, axis=1)
    E /= np.maximum(norms, 1.0)[:, None]


def train_transe(store: TripleStore, config: TransEConfig, words: WordEmbeddingTable,
                 mention_text: Mapping[str, Sequence[str]], init: EmbeddingTable | None = None) -> EmbeddingTable:
    """Mini-batch SGD on the margin loss; returns the table and its per-epoch mean loss trace."""
    config.validate()
    emb = init.copy() if init is not None else init_embeddings(store, words, mention_text, config.seed, config.k)
    index = store.index()
    if list(emb.entities) != index.entities:
        raise ValueError("initial embedding table does not cover the store's entities")
    if len(index.chem_ids) < 2 or len(index.dis_ids) < 2:
        raise SamplingError("negative sampling needs at least two chemicals and two diseases")
    rng = np.random.default_rng(config.seed + 1)
    E, R = emb.entity_matrix, emb.relation_matrix
    if config.negatives == "all":
        pair_pos, pair_neg = all_negatives(store)
        n_items = len(pair_pos)
    else:
        n_items = len(index.triples)
    if config.normalize_entities:
        _renormalize(E)
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, config.batch_size):
            batch = order[start:start + config.batch_size]
            if config.negatives == "all":
                pos, neg = index.triples[pair_pos[batch]], pair_neg[batch]
            else:
                pos = index.triples[batch]
                neg = _corrupt(index, pos, rng)
            loss, dE, dR = _batch_loss_grad(E, R, pos, neg, config.margin, config.distance_norm)
            total += float(loss.sum())
            step = config.learning_rate / len(batch)
            E -= step * dE
            R -= step * dR
        if config.normalize_entities:
            _renormalize(E)
        trace.append(total / max(n_items, 1))
    emb.loss_trace = trace
    return emb


def hits_at_1(store: TripleStore, emb: EmbeddingTable, norm: str = "L2", triples: Iterable[Triple] | None = None) -> float:
    """Filtered corrupt-tail ranking: share of triples whose true disease is strictly closest."""
    index = store.index()
    rows = [t for t in (triples if triples is not None else store.sorted_triples())]
    if not rows:
        return 0.0
    dis = index.dis_ids
    hits = 0
    for t in rows:
        h = emb.entity(t.chemical_id) + emb.relation(t.relation)
        d_true, _ = _distance(h - emb.entity(t.disease_id), norm)
        for j in dis:
            other = index.entities[j]
            if other == t.disease_id or Triple(t.chemical_id, t.relation, other) in store:
                continue
            d_other, _ = _distance(h - emb.entity_matrix[emb._ent[other]], norm)
            if d_other <= d_true:
                break
        else:
            hits += 1
    return hits / len(rows)


# ---------------------------------------------------------------------------
# pair lookup


@dataclass
class Knowledge:
    """Everything the relation classifier needs to look up prior knowledge."""

    store: TripleStore
    embeddings: EmbeddingTable
    words: WordEmbeddingTable
    mention_text: Mapping[str, Sequence[str]] = field(default_factory=dict)

    def averaged(self, entity: str) -> np.ndarray:
        v = averaged_word_vector(entity, self.words, self.mention_text)
        return self.words.unk_vector if v is None else v

    def entity(self, entity: str) -> np.ndarray:
        if self.embeddings.has_entity(entity):
            return self.embeddings.entity(entity)
        return self.averaged(entity)

    def lookup(self, chemical_id: str, disease_id: str):
        return lookup_pair_knowledge(chemical_id, disease_id, self.store, self.embeddings,
                                     self.words, self.mention_text)

    def with_store(self, store: TripleStore) -> "Knowledge":
        return Knowledge(store, self.embeddings, self.words, self.mention_text)


def lookup_pair_knowledge(chemical_id: str, disease_id: str, store: TripleStore, emb: EmbeddingTable,
                          words: WordEmbeddingTable | None = None,
                          mention_text: Mapping[str, Sequence[str]] | None = None):
    """(e_c, e_d, r) for a pair; unseen entities fall back to averaged word vectors."""

    def vec(e):
        if emb.has_entity(e):
            return emb.entity(e)
        if words is None:
            raise KeyError(f"entity {e} has no embedding and no word table was given")
        v = averaged_word_vector(e, words, mention_text or {})
        return words.unk_vector if v is None else v

    return vec(chemical_id), vec(disease_id), emb.relation(store.relation_of(chemical_id, disease_id))


def dumps_embedding_table(emb: EmbeddingTable) -> str:
    buf = io.StringIO()
    write_embedding_table(emb, buf)
    return buf.getvalue()
