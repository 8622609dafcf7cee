"""Command-line entry point: ``kcn <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Input paths in the config resolve against the config file's directory; the
output directory resolves against the working directory. Without ``--config``
the bundled mini corpus is used. Set ``KCN_LOG_LEVEL`` (DEBUG, INFO, ...) for
progress output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .corpus_io import (
    FormatError,
    MeshHierarchy,
    attach_offsets,
    corpus_stats,
    format_stats_tsv,
    load_mesh_hierarchy,
    load_word_embeddings,
    parse_conll,
    parse_pubtator,
)
from .instances import CID, INTER, INTRA, InstanceSet, build_corpus_instances, write_instances
from .kge import (
    Knowledge,
    TransEConfig,
    build_triples,
    load_triples,
    mention_surfaces,
    read_embedding_table,
    train_transe,
    write_embedding_table,
    write_triples,
)
from .model import GATE_KINDS, KCN, ModelConfig, VariantConfig, instance_knowledge, kcn_forward, toy_gradient_check
from .pipeline import (
    ABLATION_VARIANTS,
    Experiment,
    InstancePrediction,
    LevelResult,
    TrainConfig,
    TrainingError,
    evaluate_levels,
    evaluate_prf,
    format_results_tsv,
    gold_keys,
    merge_relations,
    only_kb_baseline,
    predict,
    read_predictions,
    run_ablation_matrix,
    run_kb_regimes,
    train_kcn,
    write_predictions,
    write_train_log,
)

log = logging.getLogger("kcn")

CONFIG_VERSION = 1
GRADCHECK_TOLERANCE = 1e-5
BUNDLED_CONFIG = Path(__file__).parent / "data" / "mini" / "config.json"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class InputPathError(FileNotFoundError):
    def __init__(self, path, role: str):
        super().__init__(f"{role} not found: {path}")
        self.path = str(path)
        self.role = role


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Paths:
    train_corpus: str = "train.pubtator"
    train_parses: str = "train.conll"
    test_corpus: str = "test.pubtator"
    test_parses: str = "test.conll"
    ctd: str = "ctd.tsv"
    mesh: str = "mesh.tsv"
    embeddings: str = "embeddings.txt"
    out_dir: str = "out"
    dev_corpus: str | None = None
    dev_parses: str | None = None


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    transe: TransEConfig = field(default_factory=TransEConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = Path(".")

    def input_path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    def seeded(self):
        """Section configs with the run seed applied."""
        return (dataclasses.replace(self.transe, seed=self.seed),
                dataclasses.replace(self.model, seed=self.seed),
                dataclasses.replace(self.train, seed=self.seed))


_SECTIONS = {"paths": Paths, "transe": TransEConfig, "model": ModelConfig, "variant": VariantConfig,
             "train": TrainConfig}


def _check_value(name: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = value is None or isinstance(value, str)
    if not ok:
        raise ConfigError(name, f"expected a value like {default!r}, got {value!r}")
    return value


def _section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(name, "expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls) if f.name != "seed"}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            hint = " (set the top-level seed instead)" if key == "seed" else ""
            raise ConfigError(f"{name}.{key}", "unknown key" + hint)
        kwargs[key] = _check_value(f"{name}.{key}", value, getattr(defaults, key))
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None
    return obj


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = set(data) - {"version", "seed", *_SECTIONS}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError("version", f"expected {CONFIG_VERSION}, got {data.get('version')!r}")
    seed = _check_value("seed", data.get("seed", 0), 0)
    sections = {name: _section(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(version=CONFIG_VERSION, seed=seed, base_dir=base_dir, **sections)
    if cfg.model.k != cfg.transe.k:
        raise ConfigError("model.k", f"must equal transe.k ({cfg.transe.k})")
    if cfg.model.d != cfg.model.k:
        raise ConfigError("model.d", "entity vectors are initialised from word vectors, so d must equal k")
    return cfg


def default_config_dict() -> dict:
    out = {"version": CONFIG_VERSION, "seed": 0}
    for name, cls in _SECTIONS.items():
        d = dataclasses.asdict(cls())
        d.pop("seed", None)
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out


def _apply_override(data: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(assignment, "override must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "not a section")
    node[parts[-1]] = value


def load_config(path: str | None, overrides=(), seed: int | None = None, out: str | None = None) -> RunConfig:
    cfg_path = Path(path) if path else BUNDLED_CONFIG
    if not cfg_path.is_file():
        raise InputPathError(cfg_path, "config file")
    try:
        data = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    for o in overrides:
        _apply_override(data, o)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data.setdefault("paths", {})["out_dir"] = out
    return parse_config(data, cfg_path.parent)


# ---------------------------------------------------------------------------
# lazily loaded inputs


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.transe_cfg, self.model_cfg, self.train_cfg = cfg.seeded()

    def path(self, name: str, role: str, required: bool = True) -> Path | None:
        p = self.cfg.input_path(name)
        if p is None:
            if required:
                raise ConfigError(f"paths.{name}", "required for this subcommand")
            return None
        if not p.is_file():
            raise InputPathError(p, role)
        return p

    def output(self, name: str) -> Path:
        out = self.cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        return out / name

    def existing_output(self, name: str, produced_by: str) -> Path:
        p = self.cfg.out_dir / name
        if not p.is_file():
            raise InputPathError(p, f"{name} (run `kcn {produced_by}` first)")
        return p

    def _read(self, name, role):
        return self.path(name, role).read_text(encoding="utf-8")

    def corpus(self, split: str):
        p = self.path(f"{split}_corpus", f"{split} corpus", required=split != "dev")
        return None if p is None else parse_pubtator(p.read_text(encoding="utf-8"))

    def parses(self, split: str, docs):
        parses = parse_conll(self._read(f"{split}_parses", f"{split} parses"))
        texts = {d.doc_id: d.text for d in docs}
        return {doc_id: attach_offsets(graphs, texts[doc_id]) if doc_id in texts else graphs
                for doc_id, graphs in parses.items()}

    @cached_property
    def train_docs(self):
        return self.corpus("train")

    @cached_property
    def test_docs(self):
        return self.corpus("test")

    @cached_property
    def dev_docs(self):
        return self.corpus("dev")

    @cached_property
    def labeled_docs(self):
        """Training documents, including the development set when configured."""
        return self.train_docs + (self.dev_docs or [])

    @cached_property
    def mesh(self) -> MeshHierarchy:
        return load_mesh_hierarchy(self._read("mesh", "MeSH hierarchy"))

    @cached_property
    def words(self):
        return load_word_embeddings(self._read("embeddings", "word embeddings"), expected_d=self.model_cfg.d)

    @cached_property
    def ctd(self):
        return load_triples(self._read("ctd", "CTD triples"))

    @cached_property
    def train_instances(self) -> InstanceSet:
        out = build_corpus_instances(self.train_docs, self.parses("train", self.train_docs), self.mesh)
        if self.dev_docs:
            out.extend(build_corpus_instances(self.dev_docs, self.parses("dev", self.dev_docs), self.mesh))
        return out

    @cached_property
    def test_instances(self) -> InstanceSet:
        return build_corpus_instances(self.test_docs, self.parses("test", self.test_docs), self.mesh)

    @cached_property
    def all_docs(self):
        return self.labeled_docs + self.test_docs

    @cached_property
    def mention_text(self):
        return mention_surfaces(self.all_docs)

    def store(self):
        return build_triples(self.all_docs, self.ctd)

    def knowledge(self, train_if_missing: bool = False) -> Knowledge:
        kge = self.cfg.out_dir / "kge.txt"
        triples = self.cfg.out_dir / "triples.tsv"
        if kge.is_file() and triples.is_file():
            store = load_triples(triples.read_text(encoding="utf-8"))
            emb = read_embedding_table(kge.read_text(encoding="utf-8"))
            if emb.k != self.transe_cfg.k:
                raise ConfigError("transe.k", f"{kge} holds k={emb.k} vectors")
            return Knowledge(store, emb, self.words, self.mention_text)
        if not train_if_missing:
            self.existing_output("kge.txt", "train-kge")
        store = self.store()
        emb = train_transe(store, self.transe_cfg, self.words, self.mention_text)
        return Knowledge(store, emb, self.words, self.mention_text)

    def experiment(self, knowledge: Knowledge) -> Experiment:
        return Experiment(self.train_instances, self.test_instances, self.test_docs, knowledge,
                          self.model_cfg, self.train_cfg)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_stats(ws: Workspace, args) -> int:
    rows = [("Training", corpus_stats(ws.train_docs))]
    if ws.dev_docs:
        rows.append(("Development", corpus_stats(ws.dev_docs)))
    rows.append(("Test", corpus_stats(ws.test_docs)))
    text = format_stats_tsv(rows)
    _write(ws.output("stats.tsv"), text)
    sys.stdout.write(text)
    return 0


def cmd_build_instances(ws: Workspace, args) -> int:
    for name, inst in (("train", ws.train_instances), ("test", ws.test_instances)):
        with open(ws.output(f"instances_{name}.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            write_instances(inst.all(), fh)
        print(f"{name}: {len(inst.intra)} intra, {len(inst.inter)} inter instances")
    return 0


def cmd_train_kge(ws: Workspace, args) -> int:
    store = ws.store()
    emb = train_transe(store, ws.transe_cfg, ws.words, ws.mention_text)
    with open(ws.output("triples.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        write_triples(store, fh)
    with open(ws.output("kge.txt"), "w", encoding="utf-8", newline="\n") as fh:
        write_embedding_table(emb, fh)
    _write(ws.output("kge_loss.csv"),
           "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(emb.loss_trace, 1)))
    last = emb.loss_trace[-1] if emb.loss_trace else float("nan")
    print(f"{len(store.triples)} triples, {len(emb.entities)} entities, final loss {last:.6f}")
    return 0


def _levels(arg: str):
    return (INTRA, INTER) if arg == "both" else (arg,)


def cmd_train_kcn(ws: Workspace, args) -> int:
    knowledge = ws.knowledge()
    for level in _levels(args.level):
        train = ws.train_instances.level(level)
        if not train:
            log.warning("no %s training instances; no %s model written", level, level)
            continue
        res = train_kcn(level, train, knowledge, ws.cfg.variant, ws.train_cfg, ws.model_cfg, ws.words,
                        vocab_instances=ws.test_instances.level(level))
        res.model.save(ws.output(f"kcn_{level.lower()}.ckpt"))
        with open(ws.output(f"train_log_{level.lower()}.csv"), "w", encoding="utf-8", newline="\n") as fh:
            write_train_log(res.log, fh)
        print(f"{level}: {len(res.log)} epochs, best epoch {res.best_epoch}")
    return 0


def _load_model(ws: Workspace, level: str) -> KCN | None:
    p = ws.cfg.out_dir / f"kcn_{level.lower()}.ckpt"
    if not p.is_file():
        if ws.test_instances.level(level) and ws.train_instances.level(level):
            raise InputPathError(p, f"{level} checkpoint (run `kcn train-kcn` first)")
        return None
    return KCN.load(p)


def _predict_level(ws: Workspace, level: str, knowledge: Knowledge) -> list[InstancePrediction]:
    model = _load_model(ws, level)
    test = ws.test_instances.level(level)
    if model is None:
        return [InstancePrediction(i, "Null", 0.0) for i in test]
    return predict(test, model, knowledge, model.variant)


def _write_scores(path: Path, preds) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("doc_id\tchemical_id\tdisease_id\tlevel\tlabel\tcid_probability\n")
        for p in preds:
            i = p.instance
            fh.write(f"{i.doc_id}\t{i.chemical_id}\t{i.disease_id}\t{i.level}\t{p.label}\t{p.cid_probability!r}\n")


def _read_scores(path: Path):
    levels = {INTRA: set(), INTER: set()}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["level"] not in levels:
                raise FormatError(f"{path}: unknown level {row['level']!r}")
            if row["label"] == CID:
                levels[row["level"]].add((row["doc_id"], row["chemical_id"], row["disease_id"]))
    return levels


def cmd_predict(ws: Workspace, args) -> int:
    knowledge = ws.knowledge()
    intra = _predict_level(ws, INTRA, knowledge)
    inter = _predict_level(ws, INTER, knowledge)
    merged = merge_relations(intra, inter)
    with open(ws.output("predictions.pubtator"), "w", encoding="utf-8", newline="\n") as fh:
        write_predictions(merged, fh)
    _write_scores(ws.output("instance_scores.tsv"), intra + inter)
    print(f"{len(merged.pairs)} positive pairs over {len(intra) + len(inter)} instances")
    return 0


def cmd_evaluate(ws: Workspace, args) -> int:
    gold = gold_keys(ws.test_docs)
    doc_pred = read_predictions(ws.existing_output("predictions.pubtator", "predict").read_text(encoding="utf-8"))
    levels = _read_scores(ws.existing_output("instance_scores.tsv", "predict"))
    result = LevelResult(evaluate_prf(levels[INTRA], gold), evaluate_prf(levels[INTER], gold),
                         evaluate_prf(doc_pred, gold))
    text = format_results_tsv([("KCN", result)])
    _write(ws.output("evaluation.tsv"), text)
    sys.stdout.write(text)
    return 0


def cmd_baseline_kb(ws: Workspace, args) -> int:
    store = ws.knowledge().store if (ws.cfg.out_dir / "triples.tsv").is_file() else ws.store()
    intra, inter = only_kb_baseline(ws.test_instances, store)
    text = format_results_tsv([("Only KB", evaluate_levels(intra, inter, ws.test_docs))])
    _write(ws.output("only_kb.tsv"), text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(ws: Workspace, args) -> int:
    knowledge = ws.knowledge(train_if_missing=True)
    exp = ws.experiment(knowledge)
    variants = ABLATION_VARIANTS
    if args.variants:
        unknown = [v for v in args.variants if v not in ABLATION_VARIANTS]
        if unknown:
            raise ConfigError("--variants", f"unknown variant {unknown[0]!r}; known: {list(ABLATION_VARIANTS)}")
        variants = {v: ABLATION_VARIANTS[v] for v in args.variants}
    rows = run_ablation_matrix(exp, variants, jobs=args.jobs)
    text = format_results_tsv(rows)
    _write(ws.output("ablation.tsv"), text)
    sys.stdout.write(text)
    if args.regimes:
        kcn = dict(rows).get("KCN")
        regime_rows = run_kb_regimes(exp, ws.ctd, ws.labeled_docs, ws.test_docs,
                                     ws.transe_cfg if args.retrain_kge else None, kcn, jobs=args.jobs)
        text = format_results_tsv(regime_rows)
        _write(ws.output("kb_regimes.tsv"), text)
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(ws: Workspace, args) -> int:
    if args.all:
        variants = [dataclasses.replace(ws.cfg.variant, gate_kind=g, attention_mode=a)
                    for g in GATE_KINDS for a in ("RelationGuided", "SelfAttention")]
    else:
        variants = [ws.cfg.variant]
    lines = ["gate_kind\tattention_mode\tparameter\trelative_error"]
    worst = 0.0
    for v in variants:
        report = {}
        err = toy_gradient_check(v, seed=ws.cfg.seed, report=report)
        worst = max(worst, err)
        lines += [f"{v.gate_kind}\t{v.attention_mode}\t{name}\t{e:.3e}" for name, e in report.items()]
    _write(ws.output("gradcheck.tsv"), "\n".join(lines) + "\n")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_export_weights(ws: Workspace, args) -> int:
    knowledge = ws.knowledge()
    with open(ws.output("diagnostics.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["doc_id", "chemical_id", "disease_id", "level", "position", "token",
                         "alpha_chem", "alpha_dis", "gate_chem", "gate_dis"])
        for level in (INTRA, INTER):
            model = _load_model(ws, level)
            if model is None:
                continue
            for inst in ws.test_instances.level(level):
                _, diag = kcn_forward(model, inst, instance_knowledge(inst, knowledge, model.variant))
                for j, tok in enumerate(diag.tokens):
                    writer.writerow([inst.doc_id, inst.chemical_id, inst.disease_id, level, j, tok,
                                     _fmt(None if diag.alpha_chem is None else diag.alpha_chem[j]),
                                     _fmt(None if diag.alpha_dis is None else diag.alpha_dis[j]),
                                     _fmt(diag.gate_chem[j]), _fmt(diag.gate_dis[j])])
    return 0


COMMANDS = {
    "stats": (cmd_stats, "corpus statistics table"),
    "build-instances": (cmd_build_instances, "write intra/inter candidate instances"),
    "train-kge": (cmd_train_kge, "build the triple store and train TransE"),
    "train-kcn": (cmd_train_kcn, "train the intra and inter relation classifiers"),
    "predict": (cmd_predict, "predict test relations and merge them per document"),
    "evaluate": (cmd_evaluate, "score written predictions against the test gold standard"),
    "baseline-kb": (cmd_baseline_kb, "knowledge-base-only baseline"),
    "ablate": (cmd_ablate, "train and score every ablation variant"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check of the network"),
    "export-weights": (cmd_export_weights, "dump attention and gate activations per token"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kcn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (default: bundled mini corpus)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override paths.out_dir")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON-parsed); may repeat")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=help_)
               for name, (_, help_) in COMMANDS.items()}
    parsers["train-kcn"].add_argument("--level", choices=[INTRA, INTER, "both"], default="both")
    p = parsers["ablate"]
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--variants", nargs="+", help="subset of variant names")
    p.add_argument("--regimes", action="store_true", help="also run the CDR-triple removal regimes")
    p.add_argument("--retrain-kge", action="store_true", help="retrain TransE for each removal regime")
    parsers["gradcheck"].add_argument("--all", action="store_true", help="every gate kind and attention mode")
    return parser


def _error_record(exc: BaseException) -> tuple[int, dict]:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["field"] = exc.field
        return 2, record
    if isinstance(exc, InputPathError):
        record.update(path=exc.path, role=exc.role)
        return 3, record
    if isinstance(exc, FileNotFoundError):
        record["path"] = exc.filename
        return 3, record
    return 1, record


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KCN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
        return COMMANDS[args.command][0](Workspace(cfg), args)
    except (ConfigError, OSError, FormatError, TrainingError, ValueError, KeyError) as exc:
        code, record = _error_record(exc)
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
