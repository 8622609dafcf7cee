"""Knowledge-guided two-branch gated convolutional relation classifier.

Both branches read the same SDP embedding matrix. Each branch runs gated
convolutions whose gates see one entity embedding, then pools its feature
columns with attention driven by the pair's relation embedding. The pooled
features of the chemical and disease branches are concatenated and classified
as CID / Null.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .corpus_io import WordEmbeddingTable
from .instances import CID, DEP, DIRECTION, DOWN, NULL, UP, WORD, CandidateInstance, SdpToken
from .nn import DTYPE, Param

GTRU, GTU, GLU, PLAIN_TANH = "GTRU", "GTU", "GLU", "PlainTanh"
GATE_KINDS = (GTRU, GTU, GLU, PLAIN_TANH)
KB_EMBEDDING, AVERAGED_WORDS = "KbEmbedding", "AveragedWords"
RELATION_GUIDED, SELF_ATTENTION = "RelationGuided", "SelfAttention"
ATTENTION, MAX = "Attention", "Max"

# output index 0 is CID, index 1 is Null
LABELS = (CID, NULL)
UNK = "<unk>"


@dataclass(frozen=True)
class VariantConfig:
    entity_mode: str = KB_EMBEDDING
    attention_mode: str = RELATION_GUIDED
    gate_kind: str = GTRU
    pooling: str = ATTENTION
    share_gates: bool = False
    share_attention: bool = True

    def __post_init__(self):
        checks = (("entity_mode", (KB_EMBEDDING, AVERAGED_WORDS)),
                  ("attention_mode", (RELATION_GUIDED, SELF_ATTENTION)),
                  ("gate_kind", GATE_KINDS), ("pooling", (ATTENTION, MAX)))
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def single_network(self) -> bool:
        """Ungated shared convolutions make the two branches one network."""
        return self.gate_kind == PLAIN_TANH and self.share_gates


@dataclass
class ModelConfig:
    d: int = 100
    k: int = 100
    filters: int = 100
    widths: tuple = (1, 2, 3, 4, 5)
    hidden: int = 100
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(h) for h in self.widths)

    @property
    def L(self) -> int:
        return self.filters * len(self.widths)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class TokenVocab:
    words: list[str]
    deps: list[str]
    directions: tuple = (UP, DOWN)
    word_index: dict = field(init=False)
    dep_index: dict = field(init=False)

    def __post_init__(self):
        if not self.words or self.words[0] != UNK:
            self.words = [UNK] + [w for w in self.words if w != UNK]
        if not self.deps or self.deps[0] != UNK:
            self.deps = [UNK] + [d for d in self.deps if d != UNK]
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.dep_index = {d: i for i, d in enumerate(self.deps)}

    @classmethod
    def from_instances(cls, instances: Sequence[CandidateInstance]) -> "TokenVocab":
        words, deps = set(), set()
        for inst in instances:
            for t in inst.sdp:
                if t.kind == WORD:
                    words.add(t.text.lower())
                elif t.kind == DEP:
                    deps.add(t.text)
        return cls(sorted(words), sorted(deps))

    def encode(self, sdp: Sequence[SdpToken]) -> tuple[np.ndarray, np.ndarray]:
        """Per token: table code (0 word, 1 dep, 2 direction) and row index."""
        kinds = np.empty(len(sdp), dtype=np.int64)
        ids = np.empty(len(sdp), dtype=np.int64)
        for i, t in enumerate(sdp):
            if t.kind == WORD:
                kinds[i], ids[i] = 0, self.word_index.get(t.text.lower(), 0)
            elif t.kind == DEP:
                kinds[i], ids[i] = 1, self.dep_index.get(t.text, 0)
            elif t.kind == DIRECTION:
                kinds[i], ids[i] = 2, self.directions.index(t.text)
            else:
                raise ValueError(f"unknown token kind {t.kind!r}")
        return kinds, ids


def truncate(sdp: Sequence, max_len: int) -> Sequence:
    """Keep both ends; drop the middle when longer than ``max_len``."""
    if len(sdp) <= max_len:
        return sdp
    head = max_len // 2
    return list(sdp[:head]) + list(sdp[len(sdp) - (max_len - head):])


# ---------------------------------------------------------------------------
# layer functions (plain arrays in, plain arrays out)


def embed_sequence(encoded, tables: Sequence[np.ndarray]) -> np.ndarray:
    """Gather the d x n input matrix from the word / dep-label / direction tables."""
    kinds, ids = encoded
    d = tables[0].shape[1]
    X = np.empty((d, len(kinds)), dtype=DTYPE)
    for code, table in enumerate(tables):
        sel = kinds == code
        if sel.any():
            X[:, sel] = table[ids[sel]].T
    return X


def gated_conv_branch(X: np.ndarray, e: np.ndarray | None, params: dict, gate_kind: str):
    """Gated convolutions over all widths; returns (M: L x n, cache).

    ``params`` maps width h to a dict with W_s, b_s, W_a, b_a (l x d x h and l)
    and V_a (l x k). Rows of M are ordered by ascending width, then filter.
    """
    maps, caches = [], []
    for h in sorted(params):
        p = params[h]
        if p["W_s"].shape[1] != X.shape[0]:
            raise ValueError(f"filter depth {p['W_s'].shape[1]} does not match embedding size {X.shape[0]}")
        win = nn.unfold(X, h)
        pre_s = nn.conv1d(X, p["W_s"], p["b_s"], win)
        s = pre_s if gate_kind == GLU else nn.tanh(pre_s)
        if gate_kind == PLAIN_TANH:
            pre_a = None
            g = np.ones_like(s)
        else:
            if e is None or p["V_a"].shape[1] != e.shape[0]:
                raise ValueError("entity vector missing or of the wrong length")
            pre_a = nn.conv1d(X, p["W_a"], p["b_a"], win) + (p["V_a"] @ e)[:, None]
            g = nn.relu(pre_a) if gate_kind == GTRU else nn.sigmoid(pre_a)
        maps.append(s * g)
        caches.append((h, s, g, pre_a, win))
    return np.vstack(maps), (X, e, gate_kind, caches)


def gated_conv_backward(cache, dM: np.ndarray, params: dict):
    """Returns dX and {h: {name: grad}} for :func:`gated_conv_branch`."""
    X, e, gate_kind, caches = cache
    dX = np.zeros_like(X)
    grads = {}
    row = 0
    for h, s, g, pre_a, win in caches:
        p = params[h]
        l = s.shape[0]
        dMh = dM[row:row + l]
        row += l
        ds = dMh * g
        dpre_s = ds if gate_kind == GLU else ds * nn.tanh_grad(s)
        dXs, dW_s, db_s = nn.conv1d_backward(X, p["W_s"], dpre_s, win)
        dX += dXs
        gh = {"W_s": dW_s, "b_s": db_s}
        if gate_kind != PLAIN_TANH:
            dg = dMh * s
            dpre_a = dg * nn.relu_grad(pre_a) if gate_kind == GTRU else dg * nn.sigmoid_grad(g)
            dXa, dW_a, db_a = nn.conv1d_backward(X, p["W_a"], dpre_a, win)
            dX += dXa
            gh.update(W_a=dW_a, b_a=db_a, V_a=np.outer(db_a, e))
        grads[h] = gh
    return dX, grads


def attention_pool(M: np.ndarray, r: np.ndarray | None, params: dict, mode: str):
    """Attention-weighted sum of the columns of M; returns (m, alpha, cache)."""
    if mode == RELATION_GUIDED:
        U = nn.tanh(params["W_g"] @ M + params["b_g"][:, None])
        scores = r @ U
    else:
        U = None
        scores = nn.tanh(params["w_g"] @ M + params["b_sa"][0])
    alpha = nn.softmax(scores)
    return M @ alpha, alpha, (M, r, mode, U, scores, alpha)


def attention_backward(cache, dm: np.ndarray, params: dict):
    M, r, mode, U, scores, alpha = cache
    dM = np.outer(dm, alpha)
    dscores = nn.softmax_backward(alpha, M.T @ dm)
    if mode == RELATION_GUIDED:
        dA = np.outer(r, dscores) * nn.tanh_grad(U)
        dM += params["W_g"].T @ dA
        grads = {"W_g": dA @ M.T, "b_g": dA.sum(axis=1)}
    else:
        da = dscores * nn.tanh_grad(scores)
        dM += np.outer(params["w_g"], da)
        grads = {"w_g": M @ da, "b_sa": np.array([da.sum()])}
    return dM, grads


def max_pool(M: np.ndarray):
    idx = M.argmax(axis=1)
    return M[np.arange(M.shape[0]), idx], idx


def max_pool_backward(M: np.ndarray, idx: np.ndarray, dm: np.ndarray) -> np.ndarray:
    dM = np.zeros_like(M)
    dM[np.arange(M.shape[0]), idx] = dm
    return dM


# ---------------------------------------------------------------------------
# the network


@dataclass
class Diagnostics:
    tokens: list[str]
    alpha_chem: np.ndarray | None
    alpha_dis: np.ndarray | None
    gate_chem: np.ndarray
    gate_dis: np.ndarray


class KCN:
    """Parameters and forward/backward passes of the two-branch network."""

    def __init__(self, config: ModelConfig, variant: VariantConfig, vocab: TokenVocab,
                 words: WordEmbeddingTable | None = None, params: dict | None = None):
        self.config = config
        self.variant = variant
        self.vocab = vocab
        if params is None:
            params = self._init_params(words)
        self.params: dict[str, Param] = params
        missing = set(self._expected_shapes()) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")

    # -- naming ------------------------------------------------------------

    @property
    def gate_prefixes(self) -> tuple[str, str]:
        return ("gate", "gate") if self.variant.share_gates else ("gate.chem", "gate.dis")

    @property
    def attention_prefixes(self) -> tuple[str, str]:
        return ("att", "att") if self.variant.share_attention else ("att.chem", "att.dis")

    def _expected_shapes(self) -> dict[str, tuple]:
        c, v = self.config, self.vocab
        shapes = {"emb.word": (len(v.words), c.d), "emb.dep": (len(v.deps), c.d), "emb.dir": (2, c.d)}
        for prefix in dict.fromkeys(self.gate_prefixes):
            for h in c.widths:
                shapes[f"{prefix}.h{h}.W_s"] = (c.filters, c.d, h)
                shapes[f"{prefix}.h{h}.b_s"] = (c.filters,)
                shapes[f"{prefix}.h{h}.W_a"] = (c.filters, c.d, h)
                shapes[f"{prefix}.h{h}.b_a"] = (c.filters,)
                shapes[f"{prefix}.h{h}.V_a"] = (c.filters, c.k)
        for prefix in dict.fromkeys(self.attention_prefixes):
            shapes[f"{prefix}.W_g"] = (c.k, c.L)
            shapes[f"{prefix}.b_g"] = (c.k,)
            shapes[f"{prefix}.w_g"] = (c.L,)
            shapes[f"{prefix}.b_sa"] = (1,)
        shapes.update({"cls.W_h": (c.hidden, 2 * c.L), "cls.b_h": (c.hidden,),
                       "cls.W_o": (2, c.hidden), "cls.b_o": (2,)})
        return shapes

    def _init_params(self, words: WordEmbeddingTable | None) -> dict[str, Param]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self._expected_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("b"):
                params[name] = Param(np.zeros(shape))
            else:
                params[name] = Param(nn.uniform_init(rng, shape))
        if words is not None:
            if words.d != self.config.d:
                raise ValueError(f"word embeddings have d={words.d}, model expects d={self.config.d}")
            table = params["emb.word"].value
            table[0] = words.unk_vector
            for i, w in enumerate(self.vocab.words[1:], 1):
                table[i] = words.lookup(w)
        return params

    def _gate_params(self, prefix: str) -> dict:
        return {h: {n: self.params[f"{prefix}.h{h}.{n}"].value for n in ("W_s", "b_s", "W_a", "b_a", "V_a")}
                for h in self.config.widths}

    def _att_params(self, prefix: str) -> dict:
        return {n: self.params[f"{prefix}.{n}"].value for n in ("W_g", "b_g", "w_g", "b_sa")}

    # -- inputs --------------------------------------------------------------

    def encode(self, instance: CandidateInstance):
        return self.vocab.encode(truncate(instance.sdp, self.config.max_len))

    # -- forward / backward ----------------------------------------------------

    def forward(self, encoded, knowledge):
        """Class probabilities, diagnostics and the cache for :meth:`backward`."""
        e_c, e_d, r = knowledge
        v = self.variant
        tables = [self.params[n].value for n in ("emb.word", "emb.dep", "emb.dir")]
        X = embed_sequence(encoded, tables)
        gp = self.gate_prefixes
        ap = self.attention_prefixes
        M_c, conv_c = gated_conv_branch(X, e_c, self._gate_params(gp[0]), v.gate_kind)
        if v.single_network:
            M_d, conv_d = M_c, None
        else:
            M_d, conv_d = gated_conv_branch(X, e_d, self._gate_params(gp[1]), v.gate_kind)

        pooled = []
        for M, prefix in ((M_c, ap[0]), (M_d, ap[1])):
            if v.pooling == ATTENTION:
                m, alpha, pc = attention_pool(M, r, self._att_params(prefix), v.attention_mode)
                pooled.append((m, alpha, ("att", prefix, pc)))
            else:
                m, idx = max_pool(M)
                pooled.append((m, None, ("max", M, idx)))
        m = np.concatenate([pooled[0][0], pooled[1][0]])
        W_h, b_h = self.params["cls.W_h"].value, self.params["cls.b_h"].value
        W_o, b_o = self.params["cls.W_o"].value, self.params["cls.b_o"].value
        hpre = nn.linear(W_h, m, b_h)
        o = nn.relu(hpre)
        z = nn.linear(W_o, o, b_o)
        p = nn.softmax(z)

        diag = Diagnostics(tokens=[], alpha_chem=pooled[0][1], alpha_dis=pooled[1][1],
                           gate_chem=np.vstack([c[2] for c in conv_c[3]]).mean(axis=0),
                           gate_dis=np.vstack([c[2] for c in (conv_d or conv_c)[3]]).mean(axis=0))
        cache = (encoded, X, conv_c, conv_d, pooled, m, hpre, o, z, p)
        return p, diag, cache

    def backward(self, cache, label_index: int, scale: float = 1.0) -> float:
        """Accumulate ``scale`` times the cross-entropy gradient into Param.grad; returns the loss."""
        encoded, X, conv_c, conv_d, pooled, m, hpre, o, z, p = cache
        loss = float(-nn.log_softmax(z)[label_index])
        dz = p.copy()
        dz[label_index] -= 1.0
        dz *= scale
        P = self.params
        P["cls.W_o"].grad += np.outer(dz, o)
        P["cls.b_o"].grad += dz
        dhpre = (P["cls.W_o"].value.T @ dz) * nn.relu_grad(hpre)
        P["cls.W_h"].grad += np.outer(dhpre, m)
        P["cls.b_h"].grad += dhpre
        dm = P["cls.W_h"].value.T @ dhpre
        L = self.config.L
        dMs = []
        for (mb, _, pc), dmb in zip(pooled, (dm[:L], dm[L:])):
            if pc[0] == "att":
                _, prefix, att_cache = pc
                dM, grads = attention_backward(att_cache, dmb, self._att_params(prefix))
                for n, g in grads.items():
                    P[f"{prefix}.{n}"].grad += g
            else:
                _, M, idx = pc
                dM = max_pool_backward(M, idx, dmb)
            dMs.append(dM)

        gp = self.gate_prefixes
        if conv_d is None:
            branches = [(conv_c, dMs[0] + dMs[1], gp[0])]
        else:
            branches = [(conv_c, dMs[0], gp[0]), (conv_d, dMs[1], gp[1])]
        dX = np.zeros_like(X)
        for conv_cache, dM, prefix in branches:
            dXb, grads = gated_conv_backward(conv_cache, dM, self._gate_params(prefix))
            dX += dXb
            for h, gh in grads.items():
                for n, g in gh.items():
                    P[f"{prefix}.h{h}.{n}"].grad += g

        kinds, ids = encoded
        for code, name in enumerate(("emb.word", "emb.dep", "emb.dir")):
            sel = kinds == code
            if sel.any():
                np.add.at(P[name].grad, ids[sel], dX[:, sel].T)
        return loss

    # -- convenience -------------------------------------------------------

    def predict_proba(self, encoded, knowledge) -> np.ndarray:
        return self.forward(encoded, knowledge)[0]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self.params.items()}

    def copy_state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self.params[n].value[...] = v

    def save(self, path) -> None:
        meta = {"model": asdict(self.config), "variant": asdict(self.variant),
                "vocab": {"words": self.vocab.words, "deps": self.vocab.deps}}
        nn.save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "KCN":
        tensors, meta = nn.load_checkpoint(path)
        config = ModelConfig(**meta["model"])
        variant = VariantConfig(**meta["variant"])
        vocab = TokenVocab(meta["vocab"]["words"], meta["vocab"]["deps"])
        return cls(config, variant, vocab, params={n: Param(v) for n, v in tensors.items()})


def label_index(label: str) -> int:
    return LABELS.index(label)


def instance_knowledge(instance: CandidateInstance, knowledge, variant: VariantConfig):
    """(e_c, e_d, r) as the variant sees it."""
    e_c, e_d, r = knowledge.lookup(instance.chemical_id, instance.disease_id)
    if variant.entity_mode == AVERAGED_WORDS:
        e_c = knowledge.averaged(instance.chemical_id)
        e_d = knowledge.averaged(instance.disease_id)
    return e_c, e_d, r


def kcn_forward(model: KCN, instance: CandidateInstance, knowledge_vectors):
    p, diag, _ = model.forward(model.encode(instance), knowledge_vectors)
    diag.tokens = [t.text for t in truncate(instance.sdp, model.config.max_len)]
    return p, diag


def kcn_loss_and_grad(model: KCN, batch: Sequence[CandidateInstance], knowledge_vectors: Sequence) -> float:
    """Mean cross-entropy over ``batch``; gradients are left in ``Param.grad``."""
    model.zero_grad()
    total = 0.0
    scale = 1.0 / len(batch)
    for inst, kv in zip(batch, knowledge_vectors):
        if inst.label is None:
            raise ValueError(f"instance {inst.key} is unlabeled")
        _, _, cache = model.forward(model.encode(inst), kv)
        total += model.backward(cache, label_index(inst.label), scale)
    return total * scale


# ---------------------------------------------------------------------------
# gradient check on a small random network

_TOY_PATH = ("aspirin", UP, "dep", DOWN, "ulcer")


def toy_gradient_check(variant: VariantConfig, seed: int = 0, report: dict | None = None,
                       config: ModelConfig | None = None) -> float:
    """Max relative gradient error of a randomly initialised small network.

    Uses a 5-symbol path, d = k = 8, 4 filters per width in {1, 2, 3}
    and a hidden layer of 6 unless ``config`` says otherwise. Parameters and
    knowledge vectors are drawn from U[-1, 1] so that no unit sits idle.
    """
    from .instances import INTRA, token_kinds

    config = config or ModelConfig(d=8, k=8, filters=4, widths=(1, 2, 3), hidden=6, seed=seed)
    rng = np.random.default_rng(seed)
    inst = CandidateInstance("toy", "C", "D", INTRA, token_kinds(_TOY_PATH), CID)
    model = KCN(config, variant, TokenVocab.from_instances([inst]))
    for p in model.params.values():
        p.value[...] = rng.uniform(-1.0, 1.0, p.value.shape)
    kv = tuple(rng.uniform(-1.0, 1.0, config.k) for _ in range(3))
    encoded = model.encode(inst)
    model.zero_grad()
    _, _, cache = model.forward(encoded, kv)
    model.backward(cache, label_index(inst.label))

    def objective():
        z = model.forward(encoded, kv)[2][8]
        return float(-nn.log_softmax(z)[label_index(inst.label)])

    return nn.grad_check(objective, model.params, report=report)
