"""Hand-built documents and parses for tests."""

from kcn.corpus_io import DependencyGraph, Document, GoldRelation, Mention, Token

# Seizures were induced by pilocarpine injections in trained and non-trained control groups.
FIG1_ROWS = [
    ("Seizures", 3, "vmod"),
    ("were", 0, "root"),
    ("induced", 2, "vc"),
    ("by", 3, "vmod"),
    ("pilocarpine", 6, "nmod"),
    ("injections", 4, "pmod"),
    ("in", 6, "nmod"),
    ("trained", 12, "nmod"),
    ("and", 8, "coord"),
    ("non-trained", 9, "conj"),
    ("control", 12, "nmod"),
    ("groups", 7, "pmod"),
    (".", 2, "p"),
]
FIG1_SDP = ["pilocarpine", "↑", "nmod", "↑", "injections", "↑", "pmod", "↑", "by", "↑", "vmod", "↑",
            "induced", "↓", "vmod", "↓", "seizures"]


def make_doc(doc_id, sentences, mentions, gold=()):
    """Lay out ``sentences`` (lists of (word, head, label)) separated by single spaces.

    ``mentions`` are (sentence, first token, last token, kind, ids) with 1-based
    token positions; ``ids`` is a string, possibly '|'-joined.
    """
    graphs, texts, spans = [], [], []
    pos = 0
    for si, rows in enumerate(sentences):
        toks, words, sent_spans = [], [], []
        for w, h, lab in rows:
            toks.append(Token(w, h, lab, pos, pos + len(w)))
            sent_spans.append((pos, pos + len(w)))
            words.append(w)
            pos += len(w) + 1
        graphs.append(DependencyGraph(si, tuple(toks)))
        texts.append(" ".join(words))
        spans.append(sent_spans)
    title = texts[0]
    abstract = " ".join(texts[1:])
    full = title + " " + abstract
    ms = []
    for si, a, b, kind, ids in mentions:
        start, end = spans[si][a - 1][0], spans[si][b - 1][1]
        ms.append(Mention(start, end, full[start:end], kind, tuple(ids.split("|"))))
    doc = Document(doc_id, title, abstract, tuple(sorted(ms, key=lambda m: (m.start, m.end))),
                   frozenset(GoldRelation(c, d) for c, d in gold))
    return doc, graphs


def simple_sentence(*words):
    """A flat sentence: every word attaches to the first, which is the root."""
    return [(w, 0 if i == 0 else 1, "root" if i == 0 else "dep") for i, w in enumerate(words)]
