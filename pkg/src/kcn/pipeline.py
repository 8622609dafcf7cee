"""Training, prediction, document-level merging, scoring and ablations."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import nn
from .corpus_io import Document, WordEmbeddingTable
from .instances import CID, INTER, INTRA, NULL, CandidateInstance, InstanceSet
from .kge import (
    MARKER,
    REGIMES,
    Knowledge,
    TransEConfig,
    TripleStore,
    apply_regime,
    build_triples,
    train_transe,
)
from .model import (
    AVERAGED_WORDS,
    GLU,
    GTU,
    KCN,
    MAX,
    PLAIN_TANH,
    SELF_ATTENTION,
    ModelConfig,
    TokenVocab,
    VariantConfig,
    instance_knowledge,
    label_index,
)

log = logging.getLogger(__name__)

Key = tuple[str, str, str]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    lr_intra: float = 1e-4
    lr_inter: float = 2e-4
    max_epochs: int = 100
    patience: int = 5
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, max_epochs non-negative")

    def lr(self, level: str) -> float:
        return self.lr_intra if level == INTRA else self.lr_inter


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f, tp, fp, fn)


@dataclass(frozen=True)
class InstancePrediction:
    instance: CandidateInstance
    label: str
    cid_probability: float


@dataclass
class PredictionSet:
    pairs: set = field(default_factory=set)
    scores: dict = field(default_factory=dict)

    def __contains__(self, key: Key) -> bool:
        return key in self.pairs


@dataclass
class LevelResult:
    intra: PRF
    inter: PRF
    document: PRF


# ---------------------------------------------------------------------------
# data split


def split_train_val(instances: Sequence[CandidateInstance], fraction: float, seed: int):
    """Seeded document-level split; every document lands on exactly one side."""
    docs = sorted({i.doc_id for i in instances})
    if len(docs) < 2:
        raise TrainingError("need at least two documents to split train/validation")
    rng = np.random.default_rng(seed)
    order = [docs[i] for i in rng.permutation(len(docs))]
    n_train = min(len(docs) - 1, max(1, int(round(fraction * len(docs)))))
    train_docs = set(order[:n_train])
    train = [i for i in instances if i.doc_id in train_docs]
    val = [i for i in instances if i.doc_id not in train_docs]
    return train, val


# ---------------------------------------------------------------------------
# prediction, merging, scoring


def predict(instances: Sequence[CandidateInstance], model: KCN, knowledge: Knowledge,
            variant: VariantConfig | None = None, threshold: float | None = None) -> list[InstancePrediction]:
    """Argmax labels by default; an exact 0.5/0.5 tie goes to Null.

    With ``threshold`` an instance is CID when its CID probability exceeds it.
    """
    variant = variant or model.variant
    out = []
    for inst in instances:
        p = model.predict_proba(model.encode(inst), instance_knowledge(inst, knowledge, variant))
        positive = p[0] > p[1] if threshold is None else p[0] > threshold
        out.append(InstancePrediction(inst, CID if positive else NULL, float(p[0])))
    return out


def merge_relations(*levels: Iterable[InstancePrediction]) -> PredictionSet:
    """A pair is positive iff any of its instances, at any level, is CID."""
    out = PredictionSet()
    for preds in levels:
        for pred in preds:
            key = pred.instance.key
            out.scores[key] = max(out.scores.get(key, 0.0), pred.cid_probability)
            if pred.label == CID:
                out.pairs.add(key)
    return out


def gold_keys(docs: Iterable[Document]) -> set[Key]:
    return {(d.doc_id, g.chemical_id, g.disease_id) for d in docs for g in d.gold_relations}


def evaluate_prf(pred: PredictionSet | set, gold: Iterable[Document] | set) -> PRF:
    pairs = pred.pairs if isinstance(pred, PredictionSet) else set(pred)
    gold_set = gold if isinstance(gold, set) else gold_keys(gold)
    tp = len(pairs & gold_set)
    return PRF.from_counts(tp, len(pairs) - tp, len(gold_set) - tp)


def evaluate_levels(intra: Sequence[InstancePrediction], inter: Sequence[InstancePrediction],
                    gold: Iterable[Document] | set) -> LevelResult:
    """Per-level scores use the full document-level gold set as the recall base."""
    gold_set = gold if isinstance(gold, set) else gold_keys(gold)
    return LevelResult(evaluate_prf(merge_relations(intra), gold_set),
                       evaluate_prf(merge_relations(inter), gold_set),
                       evaluate_prf(merge_relations(intra, inter), gold_set))


def only_kb_baseline(instances: InstanceSet, store: TripleStore):
    """Label every candidate by whether the store says marker/mechanism."""
    def run(level):
        return [InstancePrediction(i, CID if store.relation_of(i.chemical_id, i.disease_id) == MARKER else NULL,
                                   1.0 if store.relation_of(i.chemical_id, i.disease_id) == MARKER else 0.0)
                for i in level]
    return run(instances.intra), run(instances.inter)


def write_predictions(pred: PredictionSet, stream: TextIO) -> None:
    for doc_id, chem, dis in sorted(pred.pairs):
        stream.write(f"{doc_id}\tCID\t{chem}\t{dis}\n")


def read_predictions(stream: TextIO | str) -> PredictionSet:
    text = stream if isinstance(stream, str) else stream.read()
    out = PredictionSet()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4 or fields[1] != "CID":
            raise ValueError(f"line {lineno}: expected docid<TAB>CID<TAB>chemical<TAB>disease")
        out.pairs.add((fields[0], fields[2], fields[3]))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_f1: float


@dataclass
class TrainResult:
    model: KCN
    log: list[TrainLogRow]
    best_epoch: int


def _level_gold(instances: Sequence[CandidateInstance]) -> set[Key]:
    return {i.key for i in instances if i.label == CID}


def _mean_loss(model: KCN, encoded, kvs, labels) -> float:
    total = 0.0
    for enc, kv, y in zip(encoded, kvs, labels):
        _, _, cache = model.forward(enc, kv)
        total -= float(nn.log_softmax(cache[8])[y])
    return total / max(len(encoded), 1)


def train_kcn(level: str, instances: Sequence[CandidateInstance], knowledge: Knowledge, variant: VariantConfig,
              config: TrainConfig, model_config: ModelConfig, words: WordEmbeddingTable | None = None,
              val_instances: Sequence[CandidateInstance] | None = None,
              vocab_instances: Sequence[CandidateInstance] | None = None) -> TrainResult:
    """Adam mini-batch training with early stopping on validation F1.

    Without ``val_instances`` the training instances are split by document.
    Validation ties on F1 are broken by the lower validation loss.
    """
    if not instances:
        raise TrainingError(f"no {level} training instances")
    wrong = [i for i in instances if i.level != level]
    if wrong:
        raise TrainingError(f"{len(wrong)} instances are not of level {level}")
    if any(i.label is None for i in instances):
        raise TrainingError("training instances must be labeled")
    if val_instances is None:
        train, val = split_train_val(instances, config.split_fraction, config.seed)
    else:
        train, val = list(instances), list(val_instances)
    vocab = TokenVocab.from_instances(list(vocab_instances or []) + list(instances) + list(val))
    model = KCN(replace(model_config, seed=config.seed), variant, vocab, words)
    enc = [model.encode(i) for i in train]
    kvs = [instance_knowledge(i, knowledge, variant) for i in train]
    ys = [label_index(i.label) for i in train]
    val_enc = [model.encode(i) for i in val]
    val_kvs = [instance_knowledge(i, knowledge, variant) for i in val]
    val_ys = [label_index(i.label) for i in val]
    val_gold = _level_gold(val)

    rng = np.random.default_rng(config.seed)
    state = nn.AdamState()
    lr = config.lr(level)
    rows: list[TrainLogRow] = []
    best = (-1.0, math.inf)
    best_state, best_epoch, stale = model.copy_state(), 0, 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        losses = np.zeros(n)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            scale = 1.0 / len(batch)
            for j in batch:
                _, _, cache = model.forward(enc[j], kvs[j])
                losses[j] = model.backward(cache, ys[j], scale)
            nn.adam_step(model.params, state, lr)
        train_loss = float(losses.sum() / n)
        if not math.isfinite(train_loss):
            raise TrainingError(f"{level} training diverged at epoch {epoch}")
        if val:
            preds = predict(val, model, knowledge, variant)
            val_f1 = evaluate_prf(merge_relations(preds), val_gold).f1
            val_loss = _mean_loss(model, val_enc, val_kvs, val_ys)
        else:
            val_f1, val_loss = 0.0, train_loss
        rows.append(TrainLogRow(epoch, train_loss, val_f1))
        log.info("%s epoch %d loss %.6f val F1 %.4f", level, epoch, train_loss, val_f1)
        if val_f1 > best[0] or (val_f1 == best[0] and val_loss < best[1]):
            best = (val_f1, val_loss)
            best_state, best_epoch, stale = model.copy_state(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    return TrainResult(model, rows, best_epoch)


def accuracy(model: KCN, instances: Sequence[CandidateInstance], knowledge: Knowledge) -> float:
    preds = predict(instances, model, knowledge)
    return sum(p.label == p.instance.label for p in preds) / max(len(preds), 1)


def write_train_log(rows: Sequence[TrainLogRow], stream: TextIO) -> None:
    stream.write("epoch,train_loss,val_f1\n")
    for r in rows:
        stream.write(f"{r.epoch},{r.train_loss!r},{r.val_f1!r}\n")


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS: dict[str, VariantConfig] = {
    "KCN": VariantConfig(),
    "AE": VariantConfig(entity_mode=AVERAGED_WORDS),
    "SA": VariantConfig(attention_mode=SELF_ATTENTION),
    "AE-SA": VariantConfig(entity_mode=AVERAGED_WORDS, attention_mode=SELF_ATTENTION),
    "w/o GTRU": VariantConfig(gate_kind=PLAIN_TANH, share_gates=True),
    "w/o Att": VariantConfig(pooling=MAX),
    "SGate-SAtt": VariantConfig(share_gates=True, share_attention=True),
    "DGate-DAtt": VariantConfig(share_gates=False, share_attention=False),
    "SGate-DAtt": VariantConfig(share_gates=True, share_attention=False),
    "GTU": VariantConfig(gate_kind=GTU),
    "GLU": VariantConfig(gate_kind=GLU),
}


@dataclass
class Experiment:
    train: InstanceSet
    test: InstanceSet
    test_docs: list[Document]
    knowledge: Knowledge
    model_config: ModelConfig
    train_config: TrainConfig


@dataclass
class RunOutput:
    result: LevelResult
    intra: list[InstancePrediction]
    inter: list[InstancePrediction]
    models: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)


def run_variant(exp: Experiment, variant: VariantConfig, knowledge: Knowledge | None = None) -> RunOutput:
    """Train the intra and inter models independently and score the test set."""
    knowledge = knowledge or exp.knowledge
    preds, models, logs = {}, {}, {}
    for level in (INTRA, INTER):
        train = exp.train.level(level)
        test = exp.test.level(level)
        if not train:
            log.warning("no %s training instances; every %s test instance is predicted Null", level, level)
            preds[level] = [InstancePrediction(i, NULL, 0.0) for i in test]
            continue
        res = train_kcn(level, train, knowledge, variant, exp.train_config, exp.model_config,
                        knowledge.words, vocab_instances=test)
        models[level], logs[level] = res.model, res.log
        preds[level] = predict(test, res.model, knowledge, variant)
    result = evaluate_levels(preds[INTRA], preds[INTER], exp.test_docs)
    return RunOutput(result, preds[INTRA], preds[INTER], models, logs)


def _cell(args):
    name, exp, variant, knowledge = args
    return name, run_variant(exp, variant, knowledge).result


def run_ablation_matrix(exp: Experiment, variants: dict[str, VariantConfig] | None = None,
                        jobs: int = 1) -> list[tuple[str, LevelResult]]:
    """One training + evaluation run per named variant, all with the same seed."""
    variants = variants or ABLATION_VARIANTS
    cells = [(name, exp, v, None) for name, v in variants.items()]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = dict(pool.map(_cell, cells))
    else:
        done = dict(map(_cell, cells))
    return [(name, done[name]) for name in variants]


def regime_knowledge(knowledge: Knowledge, ctd: TripleStore, regime: str, train_docs: Sequence[Document],
                     test_docs: Sequence[Document], transe: TransEConfig | None = None) -> Knowledge:
    """Knowledge whose store lacks the regime's CDR pairs.

    Removed pairs fall back to the null relation. Entity and relation vectors
    are kept unless ``transe`` is given, in which case they are retrained on
    the reduced store.
    """
    store = build_triples(list(train_docs) + list(test_docs), apply_regime(ctd, regime, train_docs, test_docs))
    if transe is None:
        return knowledge.with_store(store)
    emb = train_transe(store, transe, knowledge.words, knowledge.mention_text)
    return Knowledge(store, emb, knowledge.words, knowledge.mention_text)


def run_kb_regimes(exp: Experiment, ctd: TripleStore, train_docs: Sequence[Document],
                   test_docs: Sequence[Document], transe: TransEConfig | None = None,
                   kcn_result: LevelResult | None = None, jobs: int = 1) -> list[tuple[str, LevelResult]]:
    """KCN under the CDR-triple removal regimes, plus the knowledge-only baseline."""
    if kcn_result is None:
        kcn_result = run_variant(exp, ABLATION_VARIANTS["KCN"]).result
    rows = [("KCN", kcn_result)]
    cells = [(regime, exp, ABLATION_VARIANTS["KCN"],
              regime_knowledge(exp.knowledge, ctd, regime, train_docs, test_docs, transe))
             for regime in REGIMES]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows += list(pool.map(_cell, cells))
    else:
        rows += list(map(_cell, cells))
    intra, inter = only_kb_baseline(exp.test, exp.knowledge.store)
    rows.append(("Only KB", evaluate_levels(intra, inter, exp.test_docs)))
    return rows


RESULT_HEADER = ("Method", "Intra P", "Intra R", "Intra F", "Inter P", "Inter R", "Inter F",
                 "Doc P", "Doc R", "Doc F")


def format_results_tsv(rows: Sequence[tuple[str, LevelResult]]) -> str:
    lines = ["\t".join(RESULT_HEADER)]
    for name, res in rows:
        vals = []
        for prf in (res.intra, res.inter, res.document):
            vals += [f"{100 * prf.precision:.2f}", f"{100 * prf.recall:.2f}", f"{100 * prf.f1:.2f}"]
        lines.append("\t".join([name, *vals]))
    return "\n".join(lines) + "\n"
