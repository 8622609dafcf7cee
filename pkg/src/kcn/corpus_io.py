"""Readers and writers for the corpus-side inputs.

Formats handled here:

* PubTator text (title/abstract lines, tab-separated mentions, CID lines);
* CoNLL-style dependency parses with ``#doc <id>`` boundary comments;
* a flat child<TAB>parent MeSH hierarchy;
* word2vec text embeddings.
"""

from __future__ import annotations

import graphlib
import io
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, TextIO

import numpy as np

log = logging.getLogger(__name__)

CHEMICAL = "Chemical"
DISEASE = "Disease"
ENTITY_KINDS = (CHEMICAL, DISEASE)
UNGROUNDED_ID = "-1"


class FormatError(ValueError):
    """Malformed input; the message names the offending line and field."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    surface: str
    kind: str
    concept_ids: tuple[str, ...]

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def grounded_ids(self) -> tuple[str, ...]:
        return tuple(c for c in self.concept_ids if c != UNGROUNDED_ID)


@dataclass(frozen=True)
class GoldRelation:
    chemical_id: str
    disease_id: str


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    abstract: str
    mentions: tuple[Mention, ...] = ()
    gold_relations: frozenset = frozenset()

    @property
    def text(self) -> str:
        return self.title + " " + self.abstract

    def gold_pairs(self) -> set[tuple[str, str]]:
        return {(g.chemical_id, g.disease_id) for g in self.gold_relations}

    def mentions_of(self, kind: str) -> list[Mention]:
        return [m for m in self.mentions if m.kind == kind]


@dataclass(frozen=True)
class Token:
    surface: str
    head: int
    label: str
    start: int | None = None
    end: int | None = None


@dataclass(frozen=True)
class DependencyGraph:
    """One parsed sentence. Token positions are 1-based; head 0 is the root."""

    sentence_index: int
    tokens: tuple[Token, ...]

    def __len__(self):
        return len(self.tokens)

    def token(self, i: int) -> Token:
        return self.tokens[i - 1]

    def head(self, i: int) -> int:
        return self.tokens[i - 1].head

    @property
    def root(self) -> int:
        return next(i for i, t in enumerate(self.tokens, 1) if t.head == 0)

    def path_to_root(self, i: int) -> list[int]:
        path = [i]
        while self.head(path[-1]) != 0:
            path.append(self.head(path[-1]))
        return path


@dataclass
class MeshHierarchy:
    parent_edges: set = field(default_factory=set)

    def __post_init__(self):
        self._parents: dict[str, set[str]] = {}
        for child, parent in self.parent_edges:
            if child == parent:
                raise FormatError(f"MeSH self-edge on {child}")
            self._parents.setdefault(child, set()).add(parent)
        sorter = graphlib.TopologicalSorter(self._parents)
        try:
            sorter.prepare()
        except graphlib.CycleError as exc:
            raise FormatError(f"MeSH hierarchy contains a cycle: {exc.args[1]}") from None
        self._ancestors: dict[str, frozenset] = {}

    def ancestors(self, concept: str) -> frozenset:
        cached = self._ancestors.get(concept)
        if cached is not None:
            return cached
        out: set[str] = set()
        stack = list(self._parents.get(concept, ()))
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self._parents.get(p, ()))
        result = frozenset(out)
        self._ancestors[concept] = result
        return result

    def is_ancestor(self, ancestor: str, descendant: str) -> bool:
        """True iff ``ancestor`` is a strict ancestor of ``descendant``."""
        return ancestor in self.ancestors(descendant)


class WordEmbeddingTable:
    """Word vectors with a total, lower-casing lookup."""

    def __init__(self, words: list[str], matrix: np.ndarray, unk_vector: np.ndarray | None = None,
                 lowercase: bool = True):
        self.lowercase = lowercase
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(words):
            raise ValueError("embedding matrix must have one row per word")
        self.words = list(words)
        self.matrix = matrix
        self.d = matrix.shape[1]
        self.index = {w: i for i, w in enumerate(self.words)}
        if unk_vector is None:
            unk_vector = matrix.mean(axis=0) if len(words) else np.zeros(self.d)
        self.unk_vector = np.asarray(unk_vector, dtype=np.float64)

    def _key(self, word: str) -> str:
        return word.lower() if self.lowercase else word

    def __contains__(self, word: str) -> bool:
        return self._key(word) in self.index

    def __len__(self):
        return len(self.words)

    @property
    def vectors(self) -> dict[str, np.ndarray]:
        return {w: self.matrix[i] for i, w in enumerate(self.words)}

    def lookup(self, word: str) -> np.ndarray:
        i = self.index.get(self._key(word))
        return self.unk_vector if i is None else self.matrix[i]


@dataclass(frozen=True)
class CorpusStats:
    articles: int = 0
    chemical_mentions: int = 0
    chemical_ids: int = 0
    disease_mentions: int = 0
    disease_ids: int = 0
    cid_count: int = 0

    def as_row(self) -> tuple[int, ...]:
        return (self.articles, self.chemical_mentions, self.chemical_ids,
                self.disease_mentions, self.disease_ids, self.cid_count)


# ---------------------------------------------------------------------------
# PubTator


def _readlines(stream) -> list[str]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    return stream.read().splitlines()


def parse_pubtator(stream: str | TextIO) -> list[Document]:
    lines = _readlines(stream)
    docs: list[Document] = []
    block: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines + [""], 1):
        if line.strip():
            block.append((lineno, line))
        elif block:
            docs.append(_parse_block(block))
            block = []
    return docs


_TEXT_LINE = re.compile(r"^([^\t|]+)\|([ta])\|(.*)$")


def _parse_block(block: list[tuple[int, str]]) -> Document:
    doc_id = title = abstract = None
    mentions: list[Mention] = []
    relations: set[GoldRelation] = set()
    for lineno, line in block:
        text_line = _TEXT_LINE.match(line)
        if text_line:
            line_id, part, body = text_line.groups()
            if doc_id is not None and line_id != doc_id:
                raise FormatError(f"line {lineno}: doc id {line_id!r} differs from block id {doc_id!r}")
            doc_id = line_id
            if part == "t":
                title = body
            else:
                abstract = body
            continue
        if "\t" not in line:
            raise FormatError(f"line {lineno}: expected 'docid|t|…', 'docid|a|…' or a tab-separated annotation")
        fields = line.split("\t")
        if doc_id is None or title is None or abstract is None:
            raise FormatError(f"line {lineno}: annotation before title/abstract lines")
        if fields[0] != doc_id:
            raise FormatError(f"line {lineno}: field 1 (doc id) is {fields[0]!r}, block is {doc_id!r}")
        if len(fields) == 4:
            if fields[1] != "CID":
                raise FormatError(f"line {lineno}: field 2 (relation type) must be 'CID', got {fields[1]!r}")
            relations.add(GoldRelation(fields[2], fields[3]))
        elif len(fields) >= 6:
            mentions.append(_parse_mention(lineno, fields))
        else:
            raise FormatError(f"line {lineno}: expected 4 (relation) or >= 6 (mention) fields, got {len(fields)}")
    if doc_id is None or title is None or abstract is None:
        raise FormatError(f"line {block[0][0]}: block lacks title or abstract line")
    doc = Document(doc_id, title, abstract, tuple(mentions), frozenset(relations))
    _validate_document(doc)
    return doc


def _parse_mention(lineno: int, fields: list[str]) -> Mention:
    try:
        start = int(fields[1])
    except ValueError:
        raise FormatError(f"line {lineno}: field 2 (start) is not an integer: {fields[1]!r}") from None
    try:
        end = int(fields[2])
    except ValueError:
        raise FormatError(f"line {lineno}: field 3 (end) is not an integer: {fields[2]!r}") from None
    if end <= start or start < 0:
        raise FormatError(f"line {lineno}: field 3 (end={end}) must exceed field 2 (start={start})")
    kind = fields[4]
    if kind not in ENTITY_KINDS:
        raise FormatError(f"line {lineno}: field 5 (type) must be Chemical or Disease, got {kind!r}")
    ids = tuple(c.strip() for c in fields[5].split("|") if c.strip())
    if not ids:
        raise FormatError(f"line {lineno}: field 6 (MeSH ids) is empty")
    return Mention(start, end, fields[3], kind, ids)


def _validate_document(doc: Document) -> None:
    text = doc.text
    for m in doc.mentions:
        if m.end > len(text):
            raise FormatError(f"doc {doc.doc_id}: mention {m.surface!r} span [{m.start}, {m.end}) "
                              f"lies outside the {len(text)}-character text")
        if text[m.start:m.end] != m.surface:
            log.warning("doc %s: mention text %r differs from span text %r",
                        doc.doc_id, m.surface, text[m.start:m.end])
    concepts = {c for m in doc.mentions for c in m.concept_ids}
    for rel in doc.gold_relations:
        missing = [c for c in (rel.chemical_id, rel.disease_id) if c not in concepts]
        if missing:
            raise FormatError(f"doc {doc.doc_id}: CID relation refers to {missing} absent from the mentions")


def write_pubtator(docs: Iterable[Document], stream: TextIO) -> None:
    for doc in docs:
        stream.write(f"{doc.doc_id}|t|{doc.title}\n")
        stream.write(f"{doc.doc_id}|a|{doc.abstract}\n")
        for m in doc.mentions:
            stream.write(f"{doc.doc_id}\t{m.start}\t{m.end}\t{m.surface}\t{m.kind}\t{'|'.join(m.concept_ids)}\n")
        for rel in sorted(doc.gold_relations, key=lambda r: (r.chemical_id, r.disease_id)):
            stream.write(f"{doc.doc_id}\tCID\t{rel.chemical_id}\t{rel.disease_id}\n")
        stream.write("\n")


def dumps_pubtator(docs: Iterable[Document]) -> str:
    buf = io.StringIO()
    write_pubtator(docs, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# CoNLL dependency parses
#
# Native rows:    index  surface  head  label  [start  end]
# CoNLL-X rows:   10 columns, HEAD in column 7 and DEPREL in column 8;
#                 offsets may be given as "TokenRange=s:e" in the last column.


_RANGE = re.compile(r"TokenRange=(\d+):(\d+)")


def parse_conll(stream: str | TextIO) -> dict[str, list[DependencyGraph]]:
    lines = _readlines(stream)
    out: dict[str, list[DependencyGraph]] = {}
    doc_id: str | None = None
    rows: list[tuple[int, list[str]]] = []

    def flush():
        nonlocal rows
        if rows:
            if doc_id is None:
                raise FormatError(f"line {rows[0][0]}: sentence before any '#doc' line")
            sentences = out.setdefault(doc_id, [])
            sentences.append(_build_graph(len(sentences), rows))
        rows = []

    for lineno, line in enumerate(lines + [""], 1):
        stripped = line.strip()
        if not stripped:
            flush()
        elif stripped.startswith("#"):
            flush()
            body = stripped[1:].strip()
            if body.startswith("doc"):
                parts = body.split(None, 1)
                if len(parts) != 2:
                    raise FormatError(f"line {lineno}: '#doc' comment without an id")
                doc_id = parts[1].strip()
                out.setdefault(doc_id, [])
        else:
            rows.append((lineno, line.rstrip("\n").split("\t")))
    return out


def _build_graph(sentence_index: int, rows: list[tuple[int, list[str]]]) -> DependencyGraph:
    tokens = []
    n = len(rows)
    for expected, (lineno, cols) in enumerate(rows, 1):
        if len(cols) >= 10:
            idx, surface, head, label, extra = cols[0], cols[1], cols[6], cols[7], cols[9]
            m = _RANGE.search(extra)
            start, end = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        elif len(cols) in (4, 6):
            idx, surface, head, label = cols[:4]
            start = end = None
            if len(cols) == 6:
                try:
                    start, end = int(cols[4]), int(cols[5])
                except ValueError:
                    raise FormatError(f"line {lineno}: token offsets are not integers") from None
        else:
            raise FormatError(f"line {lineno}: expected 4, 6 or 10 tab-separated columns, got {len(cols)}")
        try:
            idx_i, head_i = int(idx), int(head)
        except ValueError:
            raise FormatError(f"line {lineno}: index/head must be integers") from None
        if idx_i != expected:
            raise FormatError(f"line {lineno}: token index {idx_i}, expected {expected}")
        if not 0 <= head_i <= n:
            raise FormatError(f"line {lineno}: head {head_i} out of range [0, {n}]")
        if head_i == idx_i:
            raise FormatError(f"line {lineno}: token {idx_i} is its own head (cycle)")
        tokens.append(Token(surface, head_i, label, start, end))
    graph = DependencyGraph(sentence_index, tuple(tokens))
    _validate_tree(graph, rows[0][0])
    return graph


def _validate_tree(graph: DependencyGraph, lineno: int) -> None:
    roots = [i for i, t in enumerate(graph.tokens, 1) if t.head == 0]
    if len(roots) != 1:
        raise FormatError(f"sentence at line {lineno}: expected exactly one root, found {len(roots)}")
    state = [0] * (len(graph) + 1)  # 0 unseen, 1 on stack, 2 reaches root
    state[0] = 2
    for i in range(1, len(graph) + 1):
        chain = []
        j = i
        while state[j] == 0:
            state[j] = 1
            chain.append(j)
            j = graph.head(j)
        if state[j] == 1:
            raise FormatError(f"sentence at line {lineno}: cyclic head chain through token {j}")
        for c in chain:
            state[c] = 2


def write_conll(parses: dict[str, list[DependencyGraph]], stream: TextIO) -> None:
    for doc_id, graphs in parses.items():
        stream.write(f"#doc {doc_id}\n")
        for g in graphs:
            for i, t in enumerate(g.tokens, 1):
                row = [str(i), t.surface, str(t.head), t.label]
                if t.start is not None:
                    row += [str(t.start), str(t.end)]
                stream.write("\t".join(row) + "\n")
            stream.write("\n")


_PTB_BRACKETS = {"-LRB-": "(", "-RRB-": ")", "-LSB-": "[", "-RSB-": "]", "-LCB-": "{", "-RCB-": "}",
                 "``": '"', "''": '"'}


def attach_offsets(graphs: list[DependencyGraph], text: str) -> list[DependencyGraph]:
    """Fill missing token offsets by scanning ``text`` left to right."""
    cursor = 0
    out = []
    for g in graphs:
        toks = []
        for t in g.tokens:
            if t.start is not None:
                cursor = t.end
                toks.append(t)
                continue
            surface = _PTB_BRACKETS.get(t.surface, t.surface)
            pos = text.find(surface, cursor)
            if pos < 0:
                raise FormatError(f"cannot locate token {t.surface!r} in text after offset {cursor}")
            cursor = pos + len(surface)
            toks.append(Token(t.surface, t.head, t.label, pos, cursor))
        out.append(DependencyGraph(g.sentence_index, tuple(toks)))
    return out


# ---------------------------------------------------------------------------
# MeSH hierarchy


def load_mesh_hierarchy(stream: str | TextIO) -> MeshHierarchy:
    edges = set()
    for lineno, line in enumerate(_readlines(stream), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0].strip() or not fields[1].strip():
            raise FormatError(f"line {lineno}: expected child<TAB>parent")
        child, parent = fields[0].strip(), fields[1].strip()
        if child == parent:
            raise FormatError(f"line {lineno}: self-edge on {child}")
        edges.add((child, parent))
    return MeshHierarchy(edges)


# ---------------------------------------------------------------------------
# word embeddings


def load_word_embeddings(stream: str | TextIO, expected_d: int | None = None,
                         lowercase: bool = True) -> WordEmbeddingTable:
    """Read word2vec text format.

    Keys are lower-cased unless ``lowercase`` is false; when two rows collapse
    onto one key the first row wins (word2vec files are frequency-sorted).
    """
    lines = [ln for ln in _readlines(stream) if ln.strip()]
    if not lines:
        raise FormatError("line 1: empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise FormatError("line 1: expected header 'vocab_size dimension'")
    try:
        vocab, d = int(header[0]), int(header[1])
    except ValueError:
        raise FormatError("line 1: header fields must be integers") from None
    if expected_d is not None and d != expected_d:
        raise FormatError(f"line 1: dimension {d} differs from expected {expected_d}")
    if len(lines) - 1 != vocab:
        raise FormatError(f"header announces {vocab} vectors, file has {len(lines) - 1}")
    words: list[str] = []
    rows = []
    seen = set()
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.rstrip().split(" ")
        if len(parts) != d + 1:
            raise FormatError(f"line {lineno}: expected {d} components, got {len(parts) - 1}")
        try:
            vec = [float(x) for x in parts[1:]]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric vector component") from None
        key = parts[0].lower() if lowercase else parts[0]
        if key in seen:
            continue
        seen.add(key)
        words.append(key)
        rows.append(vec)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return WordEmbeddingTable(words, matrix, lowercase=lowercase)


def write_word_embeddings(words: list[str], matrix: np.ndarray, stream: TextIO) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    stream.write(f"{len(words)} {matrix.shape[1]}\n")
    for w, row in zip(words, matrix):
        stream.write(w + " " + " ".join(repr(float(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# text helpers shared by the entity-averaging code


_WORD = re.compile(r"\w+(?:[-'’]\w+)*")


def is_punctuation(surface: str) -> bool:
    return bool(surface) and all(unicodedata.category(ch)[0] in "PS" for ch in surface)


@lru_cache(maxsize=65536)
def surface_words(surface: str) -> tuple[str, ...]:
    return tuple(w.lower() for w in _WORD.findall(surface))


# ---------------------------------------------------------------------------
# statistics

STATS_HEADER = ("Dataset", "Articles", "Chemical Men", "Chemical ID", "Disease Men", "Disease ID", "CID")


def corpus_stats(corpus: Iterable[Document]) -> CorpusStats:
    articles = chem_men = dis_men = cid = 0
    chem_ids: set[str] = set()
    dis_ids: set[str] = set()
    for doc in corpus:
        articles += 1
        cid += len(doc.gold_relations)
        for m in doc.mentions:
            if m.kind == CHEMICAL:
                chem_men += 1
                chem_ids.update(m.grounded_ids)
            else:
                dis_men += 1
                dis_ids.update(m.grounded_ids)
    return CorpusStats(articles, chem_men, len(chem_ids), dis_men, len(dis_ids), cid)


def format_stats_tsv(rows: list[tuple[str, CorpusStats]]) -> str:
    out = ["\t".join(STATS_HEADER)]
    for name, stats in rows:
        out.append("\t".join([name, *(str(v) for v in stats.as_row())]))
    return "\n".join(out) + "\n"
