"""Candidate instance construction and shortest-dependency-path sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence, TextIO

from .corpus_io import (
    CHEMICAL,
    DISEASE,
    DependencyGraph,
    Document,
    Mention,
    MeshHierarchy,
    is_punctuation,
)

log = logging.getLogger(__name__)

WORD, DEP, DIRECTION = "Word", "DepLabel", "Direction"
UP, DOWN = "↑", "↓"
INTRA, INTER = "Intra", "Inter"
CID, NULL = "CID", "Null"
ROOT_LABEL = "root"
MAX_SENTENCE_GAP = 3


class AlignmentError(ValueError):
    def __init__(self, mention: Mention, message: str = "mention overlaps no parsed token"):
        super().__init__(f"{message}: {mention.surface!r} [{mention.start}, {mention.end})")
        self.mention = mention


class PathError(ValueError):
    pass


class SdpToken(NamedTuple):
    kind: str
    text: str

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class CandidateInstance:
    doc_id: str
    chemical_id: str
    disease_id: str
    level: str
    sdp: tuple[SdpToken, ...]
    label: str | None = None
    chemical_token: tuple[int, int] | None = None
    disease_token: tuple[int, int] | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.doc_id, self.chemical_id, self.disease_id)

    @property
    def tokens(self) -> list[str]:
        return [t.text for t in self.sdp]


@dataclass
class InstanceSet:
    intra: list[CandidateInstance] = field(default_factory=list)
    inter: list[CandidateInstance] = field(default_factory=list)

    def level(self, level: str) -> list[CandidateInstance]:
        return self.intra if level == INTRA else self.inter

    def extend(self, other: "InstanceSet") -> None:
        self.intra.extend(other.intra)
        self.inter.extend(other.inter)

    def all(self) -> list[CandidateInstance]:
        return self.intra + self.inter


# ---------------------------------------------------------------------------
# alignment


def align_mention(mention: Mention, parses: Sequence[DependencyGraph]) -> tuple[int, int]:
    """Anchor a mention on the syntactic head of the tokens it covers."""
    for g in parses:
        inside = {i for i, t in enumerate(g.tokens, 1)
                  if t.start is not None and t.start < mention.end and t.end > mention.start}
        if not inside:
            continue
        for i in sorted(inside):
            if g.head(i) not in inside:
                return (g.sentence_index, i)
    raise AlignmentError(mention)


def _aligned(doc: Document, parses: Sequence[DependencyGraph]) -> list[tuple[Mention, tuple[int, int]]]:
    out = []
    for m in doc.mentions:
        if not m.grounded_ids:
            continue
        try:
            out.append((m, align_mention(m, parses)))
        except AlignmentError as exc:
            log.warning("doc %s: %s", doc.doc_id, exc)
    return out


def _label(doc: Document, chem: str, dis: str, labeled: bool) -> str | None:
    if not labeled:
        return None
    return CID if (chem, dis) in doc.gold_pairs() else NULL


# ---------------------------------------------------------------------------
# intra / inter construction


def build_intra(doc: Document, parses: Sequence[DependencyGraph], labeled: bool = True) -> list[CandidateInstance]:
    aligned = _aligned(doc, parses)
    chems = [(m, p) for m, p in aligned if m.kind == CHEMICAL]
    diss = [(m, p) for m, p in aligned if m.kind == DISEASE]
    out = []
    for cm, cp in chems:
        for dm, dp in diss:
            if cp[0] != dp[0]:
                continue
            try:
                sdp = sdp_sequence(cp, dp, parses)
            except PathError as exc:
                log.warning("doc %s: skipping %r/%r: %s", doc.doc_id, cm.surface, dm.surface, exc)
                continue
            for c in cm.grounded_ids:
                for d in dm.grounded_ids:
                    out.append(CandidateInstance(doc.doc_id, c, d, INTRA, sdp,
                                                 _label(doc, c, d, labeled), cp, dp))
    return out


def _char_gap(a: Mention, b: Mention) -> int:
    first, second = (a, b) if a.start <= b.start else (b, a)
    return max(0, second.start - first.end)


def build_inter(doc: Document, parses: Sequence[DependencyGraph], intra: Iterable[CandidateInstance],
                labeled: bool = True) -> list[CandidateInstance]:
    intra_pairs = {(i.chemical_id, i.disease_id) for i in intra if i.doc_id == doc.doc_id}
    aligned = _aligned(doc, parses)
    chems = [(m, p) for m, p in aligned if m.kind == CHEMICAL]
    diss = [(m, p) for m, p in aligned if m.kind == DISEASE]

    # concept pair -> (distance key, chemical, disease)
    best: dict[tuple[str, str], tuple] = {}
    for cm, cp in chems:
        for dm, dp in diss:
            gap = abs(cp[0] - dp[0])
            if gap == 0 or gap > MAX_SENTENCE_GAP:
                continue
            dist = (gap, _char_gap(cm, dm), cm.start, dm.start)
            for c in cm.grounded_ids:
                for d in dm.grounded_ids:
                    if (c, d) in intra_pairs:
                        continue
                    cur = best.get((c, d))
                    if cur is None or dist < cur[0]:
                        best[(c, d)] = (dist, cp, dp)
    out = []
    for (c, d), (_, cp, dp) in sorted(best.items(), key=lambda kv: (kv[1][0], kv[0])):
        try:
            sdp = sdp_sequence(cp, dp, parses)
        except PathError as exc:
            log.warning("doc %s: skipping inter pair %s/%s: %s", doc.doc_id, c, d, exc)
            continue
        out.append(CandidateInstance(doc.doc_id, c, d, INTER, sdp, _label(doc, c, d, labeled), cp, dp))
    return out


def hypernym_filter(instances: Sequence[CandidateInstance], mesh: MeshHierarchy) -> list[CandidateInstance]:
    """Drop instances whose chemical or disease is a MeSH ancestor of another
    participating concept of the same type in the same document."""
    chems: dict[str, set[str]] = {}
    diss: dict[str, set[str]] = {}
    for inst in instances:
        chems.setdefault(inst.doc_id, set()).add(inst.chemical_id)
        diss.setdefault(inst.doc_id, set()).add(inst.disease_id)

    def general(concept: str, others: set[str]) -> bool:
        return any(o != concept and mesh.is_ancestor(concept, o) for o in others)

    return [inst for inst in instances
            if not general(inst.chemical_id, chems[inst.doc_id])
            and not general(inst.disease_id, diss[inst.doc_id])]


def build_instances(doc: Document, parses: Sequence[DependencyGraph], mesh: MeshHierarchy | None = None,
                    labeled: bool = True) -> InstanceSet:
    intra = build_intra(doc, parses, labeled)
    inter = build_inter(doc, parses, intra, labeled)
    if mesh is not None:
        kept = set(map(id, hypernym_filter(intra + inter, mesh)))
        intra = [i for i in intra if id(i) in kept]
        inter = [i for i in inter if id(i) in kept]
    return InstanceSet(intra, inter)


def build_corpus_instances(docs: Iterable[Document], parses: dict[str, list[DependencyGraph]],
                           mesh: MeshHierarchy | None = None, labeled: bool = True) -> InstanceSet:
    out = InstanceSet()
    for doc in docs:
        graphs = parses.get(doc.doc_id)
        if not graphs:
            log.warning("doc %s: no dependency parse, skipped", doc.doc_id)
            continue
        out.extend(build_instances(doc, graphs, mesh, labeled))
    return out


# ---------------------------------------------------------------------------
# shortest dependency path

_VROOT = ("root",)


def _tree_path(chem: tuple[int, int], dis: tuple[int, int], graphs: dict[int, DependencyGraph]):
    """Node sequence and (direction, label) links from chem to dis."""
    for s in (chem[0], dis[0]):
        if s not in graphs:
            raise PathError(f"sentence {s} has no parse")
    gc, gd = graphs[chem[0]], graphs[dis[0]]
    for g, (_, t) in ((gc, chem), (gd, dis)):
        if not 1 <= t <= len(g):
            raise PathError(f"token {t} outside sentence {g.sentence_index}")
    up_c = [(chem[0], i) for i in gc.path_to_root(chem[1])]
    up_d = [(dis[0], i) for i in gd.path_to_root(dis[1])]
    if chem[0] != dis[0]:
        up_c.append(_VROOT)
        up_d.append(_VROOT)
    on_d = {n: k for k, n in enumerate(up_d)}
    ic = next(k for k, n in enumerate(up_c) if n in on_d)
    id_ = on_d[up_c[ic]]

    def label(node):
        s, i = node
        g = graphs[s]
        return ROOT_LABEL if g.head(i) == 0 and chem[0] != dis[0] else g.token(i).label

    nodes = up_c[:ic + 1] + up_d[:id_][::-1]
    links = [(UP, label(n)) for n in up_c[:ic]] + [(DOWN, label(n)) for n in up_d[:id_][::-1]]
    return nodes, links


def sdp_sequence(chem: tuple[int, int], dis: tuple[int, int],
                 parses: Sequence[DependencyGraph]) -> tuple[SdpToken, ...]:
    """Render the tree path from the chemical token to the disease token.

    Nodes that contribute no word (the artificial root joining two sentences
    and punctuation-only tokens inside the path) are collapsed: the two links
    around them merge into one, keeping the first link's label and the outer
    directions, so the output always reads Word (Dir Label Dir Word)*.
    """
    if tuple(chem) == tuple(dis):
        raise PathError("chemical and disease anchor on the same token")
    graphs = {g.sentence_index: g for g in parses}
    nodes, links = _tree_path(tuple(chem), tuple(dis), graphs)

    def word(node):
        s, i = node
        return graphs[s].token(i).surface.lower()

    out = [SdpToken(WORD, word(nodes[0]))]
    pending = None  # (first direction, label) of a link awaiting its far end
    last = len(nodes) - 1
    for j in range(1, len(nodes)):
        direction, label = links[j - 1]
        first_dir, first_label = pending if pending else (direction, label)
        node = nodes[j]
        skip = j < last and (node is _VROOT or is_punctuation(graphs[node[0]].token(node[1]).surface))
        if skip:
            pending = (first_dir, first_label)
            continue
        pending = None
        out += [SdpToken(DIRECTION, first_dir), SdpToken(DEP, first_label),
                SdpToken(DIRECTION, direction), SdpToken(WORD, word(node))]
    return tuple(out)


def token_kinds(texts: Sequence[str]) -> tuple[SdpToken, ...]:
    """Recover token kinds from the positional Word/Dir/Label/Dir pattern."""
    kinds = (WORD, DIRECTION, DEP, DIRECTION)
    return tuple(SdpToken(kinds[i % 4], t) for i, t in enumerate(texts))


# ---------------------------------------------------------------------------
# serialization: doc_id, chem_id, dis_id, level, label, space-joined SDP


def write_instances(instances: Iterable[CandidateInstance], stream: TextIO) -> None:
    for inst in instances:
        label = inst.label if inst.label is not None else "-"
        stream.write("\t".join([inst.doc_id, inst.chemical_id, inst.disease_id, inst.level, label,
                                " ".join(inst.tokens)]) + "\n")


def read_instances(stream: TextIO | str) -> list[CandidateInstance]:
    text = stream if isinstance(stream, str) else stream.read()
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ValueError(f"line {lineno}: expected 6 tab-separated fields, got {len(fields)}")
        doc_id, chem, dis, level, label, sdp = fields
        if level not in (INTRA, INTER):
            raise ValueError(f"line {lineno}: field 4 (level) must be Intra or Inter, got {level!r}")
        if label not in (CID, NULL, "-"):
            raise ValueError(f"line {lineno}: field 5 (label) must be CID, Null or -, got {label!r}")
        out.append(CandidateInstance(doc_id, chem, dis, level, token_kinds(sdp.split(" ")),
                                     None if label == "-" else label))
    return out
