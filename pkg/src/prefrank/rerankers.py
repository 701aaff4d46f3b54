"""Three list-scoring backbones behind one interface.

All three consume, per item, concat(item embedding, [user embedding], [broadcast
knowledge vector]) and emit one score per item:

- dlcm: a GRU consumes items in reverse presentation order; each item's score
  comes from an MLP over (hidden state at that item, item input).
- prm: learned positional embeddings + user embedding, pre-norm self-attention
  blocks, per-item MLP head.
- setrank: the identical attention stack with no positional or user embeddings,
  which makes it permutation-equivariant by construction.

Training is pointwise binary cross-entropy of sigmoid(score) against labels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel
from .dataio import CandidateList, require_train_side
from .kernel import Rng, Tensor

log = logging.getLogger(__name__)

KINDS = ("dlcm", "prm", "setrank")


@dataclass(frozen=True)
class RerankerConfig:
    kind: str
    list_len: int = 10
    item_embed_dim: int = 32
    hidden_dim: int = 64
    n_heads: int = 2
    n_layers: int = 1
    d_feat: int = 0
    n_items: int = 1
    n_users: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reranker kind {self.kind!r}")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.list_len < 2:
            raise ValueError("list_len must be >= 2")

    @property
    def input_dim(self) -> int:
        extra = self.item_embed_dim if self.kind == "prm" else 0
        return self.item_embed_dim + extra + self.d_feat

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


@dataclass
class RerankerModel:
    config: RerankerConfig
    params: dict[str, Tensor]

    def score(self, clist: CandidateList, knowledge=None) -> "ScoredList":
        return score(self, clist, knowledge)


@dataclass(frozen=True)
class ScoredList:
    clist: CandidateList
    scores: np.ndarray
    permutation: np.ndarray

    def ranked_labels(self) -> list[int]:
        return [self.clist.labels[j] for j in self.permutation]


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Descending argsort; equal scores keep ascending original index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def create_reranker(config: RerankerConfig, seed: int = 0) -> RerankerModel:
    rng = Rng(seed, "reranker", config.kind)
    de, H, L = config.item_embed_dim, config.hidden_dim, config.list_len
    din = config.input_dim
    p: dict[str, Tensor] = {
        "item_emb": Tensor(rng.normal(scale=0.1, size=(config.n_items, de)), requires_grad=True)
    }
    if config.kind == "prm":
        p["user_emb"] = Tensor(rng.normal(scale=0.1, size=(config.n_users, de)), requires_grad=True)
        p["pos_emb"] = Tensor(rng.normal(scale=0.1, size=(L, H)), requires_grad=True)

    if config.kind == "dlcm":
        s_in, s_h = 1.0 / np.sqrt(din), 1.0 / np.sqrt(H)
        for gate in ("z", "r", "n"):
            p[f"gru.w{gate}"] = Tensor(rng.normal(scale=s_in, size=(din, H)), requires_grad=True)
            p[f"gru.u{gate}"] = Tensor(rng.normal(scale=s_h, size=(H, H)), requires_grad=True)
            p[f"gru.b{gate}"] = Tensor(np.zeros(H), requires_grad=True)
        head_in = H + din
    else:
        p["w_in"] = Tensor(rng.normal(scale=1.0 / np.sqrt(din), size=(din, H)), requires_grad=True)
        p["b_in"] = Tensor(np.zeros(H), requires_grad=True)
        s = 1.0 / np.sqrt(H)
        for l in range(config.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"l{l}.{w}"] = Tensor(rng.normal(scale=s, size=(H, H)), requires_grad=True)
            p[f"l{l}.ffn_w1"] = Tensor(rng.normal(scale=s, size=(H, 2 * H)), requires_grad=True)
            p[f"l{l}.ffn_b1"] = Tensor(np.zeros(2 * H), requires_grad=True)
            p[f"l{l}.ffn_w2"] = Tensor(rng.normal(scale=1.0 / np.sqrt(2 * H), size=(2 * H, H)), requires_grad=True)
            p[f"l{l}.ffn_b2"] = Tensor(np.zeros(H), requires_grad=True)
        head_in = H

    p["head.w1"] = Tensor(rng.normal(scale=1.0 / np.sqrt(head_in), size=(head_in, H)), requires_grad=True)
    p["head.b1"] = Tensor(np.zeros(H), requires_grad=True)
    p["head.w2"] = Tensor(rng.normal(scale=1.0 / np.sqrt(H), size=(H, 1)), requires_grad=True)
    p["head.b2"] = Tensor(np.zeros(1), requires_grad=True)
    return RerankerModel(config, p)


def _item_inputs(model: RerankerModel, clist: CandidateList, knowledge) -> Tensor:
    cfg = model.config
    p = model.params
    ids = np.asarray(clist.items, dtype=np.int64)
    parts = [kernel.embedding(p["item_emb"], ids)]
    if cfg.kind == "prm":
        uid = np.full(cfg.list_len, clist.user_id, dtype=np.int64)
        parts.append(kernel.embedding(p["user_emb"], uid))
    if cfg.d_feat > 0:
        k = knowledge if isinstance(knowledge, Tensor) else Tensor(np.asarray(knowledge, dtype=np.float64))
        if k.ndim == 1:
            k = kernel.tslice(k, (None,))
        if k.shape != (1, cfg.d_feat):
            raise kernel.ShapeError(f"knowledge vector shape {k.shape}, expected (1, {cfg.d_feat})")
        parts.append(kernel.add(Tensor(np.zeros((cfg.list_len, cfg.d_feat))), k))
    return kernel.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def _head(model: RerankerModel, feats: Tensor) -> Tensor:
    p = model.params
    h = kernel.relu(kernel.add(kernel.matmul(feats, p["head.w1"]), p["head.b1"]))
    out = kernel.add(kernel.matmul(h, p["head.w2"]), p["head.b2"])
    return kernel.tslice(out, (slice(None), 0))


def _gru_scores(model: RerankerModel, x: Tensor) -> Tensor:
    cfg = model.config
    p = model.params
    L = cfg.list_len
    h = Tensor(np.zeros((1, cfg.hidden_dim)))
    hidden: dict[int, Tensor] = {}
    for i in reversed(range(L)):
        xi = kernel.tslice(x, (slice(i, i + 1), slice(None)))
        z = kernel.sigmoid(kernel.add(kernel.add(kernel.matmul(xi, p["gru.wz"]), kernel.matmul(h, p["gru.uz"])), p["gru.bz"]))
        r = kernel.sigmoid(kernel.add(kernel.add(kernel.matmul(xi, p["gru.wr"]), kernel.matmul(h, p["gru.ur"])), p["gru.br"]))
        n = kernel.tanh(kernel.add(kernel.add(kernel.matmul(xi, p["gru.wn"]), kernel.mul(r, kernel.matmul(h, p["gru.un"]))), p["gru.bn"]))
        one_minus_z = kernel.add(kernel.mul(z, -1.0), 1.0)
        h = kernel.add(kernel.mul(z, h), kernel.mul(one_minus_z, n))
        hidden[i] = h
    rows = [kernel.concat([hidden[i], kernel.tslice(x, (slice(i, i + 1), slice(None)))], axis=1) for i in range(L)]
    return _head(model, kernel.concat(rows, axis=0))


def _attention_scores(model: RerankerModel, x: Tensor) -> Tensor:
    cfg = model.config
    p = model.params
    h = kernel.add(kernel.matmul(x, p["w_in"]), p["b_in"])
    if cfg.kind == "prm":
        h = kernel.add(h, p["pos_emb"])
    scale = Tensor(np.float64(1.0 / np.sqrt(cfg.head_dim)))
    for l in range(cfg.n_layers):
        hn = kernel.layer_norm(h)
        q = kernel.matmul(hn, p[f"l{l}.wq"])
        k = kernel.matmul(hn, p[f"l{l}.wk"])
        v = kernel.matmul(hn, p[f"l{l}.wv"])
        heads = []
        for hh in range(cfg.n_heads):
            sl = (slice(None), slice(hh * cfg.head_dim, (hh + 1) * cfg.head_dim))
            qh, kh, vh = kernel.tslice(q, sl), kernel.tslice(k, sl), kernel.tslice(v, sl)
            att = kernel.softmax(kernel.mul(kernel.matmul(qh, kh, transpose_b=True), scale), axis=-1)
            heads.append(kernel.matmul(att, vh))
        h = kernel.add(h, kernel.matmul(kernel.concat(heads, axis=-1), p[f"l{l}.wo"]))
        hn2 = kernel.layer_norm(h)
        ff = kernel.relu(kernel.add(kernel.matmul(hn2, p[f"l{l}.ffn_w1"]), p[f"l{l}.ffn_b1"]))
        ff = kernel.add(kernel.matmul(ff, p[f"l{l}.ffn_w2"]), p[f"l{l}.ffn_b2"])
        h = kernel.add(h, ff)
    return _head(model, h)


def forward_scores(model: RerankerModel, clist: CandidateList, knowledge=None) -> Tensor:
    """Score tensor (L,) with gradients flowing to params and knowledge."""
    cfg = model.config
    if len(clist.items) != cfg.list_len:
        raise kernel.ShapeError(
            f"list length {len(clist.items)} != configured {cfg.list_len}"
        )
    if (knowledge is None) and cfg.d_feat > 0:
        raise ValueError("knowledge vector required: model configured with d_feat > 0")
    if (knowledge is not None) and cfg.d_feat == 0:
        raise ValueError("knowledge vector supplied to a knowledge-free model")
    x = _item_inputs(model, clist, knowledge)
    if cfg.kind == "dlcm":
        return _gru_scores(model, x)
    return _attention_scores(model, x)


def score(model: RerankerModel, clist: CandidateList, knowledge=None) -> ScoredList:
    with kernel.no_grad():
        s = forward_scores(model, clist, knowledge).data.copy()
    return ScoredList(clist=clist, scores=s, permutation=rank_scores(s))


def _bce(scores: Tensor, labels) -> Tensor:
    """Mean over items of -log sigmoid(+/- score), the stable composite form."""
    y = Tensor(np.asarray(labels, dtype=np.float64))
    one_minus_y = Tensor(1.0 - np.asarray(labels, dtype=np.float64))
    pos = kernel.mul(y, kernel.softplus(kernel.mul(scores, -1.0)))
    neg = kernel.mul(one_minus_y, kernel.softplus(scores))
    return kernel.tmean(kernel.add(pos, neg))


def _check_knowledge_map(config: RerankerConfig, lists, knowledge_map):
    if config.d_feat == 0:
        return
    if not knowledge_map:
        raise ValueError("d_feat > 0 but knowledge_map is empty")
    missing = [c.user_id for c in lists if c.user_id not in knowledge_map]
    if missing:
        raise ValueError(f"knowledge_map missing users (first few): {missing[:5]}")


def train_reranker(
    model: RerankerModel,
    train_lists: list[CandidateList],
    knowledge_map: dict[int, np.ndarray] | None = None,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_lists: int = 32,
) -> tuple[RerankerModel, list[float]]:
    """Pointwise BCE training over fixed per-user knowledge vectors (or none)."""
    if not train_lists:
        raise ValueError("train_reranker: no training lists")
    require_train_side(train_lists, "train_reranker")
    _check_knowledge_map(model.config, train_lists, knowledge_map)

    def knowledge_for(clist):
        return knowledge_map[clist.user_id] if model.config.d_feat > 0 else None

    return _train_loop(model, train_lists, knowledge_for, (), epochs, lr, seed, batch_lists)


def train_reranker_joint(
    model: RerankerModel,
    train_lists: list[CandidateList],
    texts_by_user: dict[int, str],
    encoder,
    adapter,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_lists: int = 32,
) -> tuple[RerankerModel, list[float]]:
    """End-to-end training: gradients reach the text encoder and adapter too."""
    if model.config.d_feat == 0:
        raise ValueError("joint training requires d_feat > 0")
    if not train_lists:
        raise ValueError("train_reranker_joint: no training lists")
    require_train_side(train_lists, "train_reranker_joint")
    missing = [c.user_id for c in train_lists if c.user_id not in texts_by_user]
    if missing:
        raise ValueError(f"texts_by_user missing users (first few): {missing[:5]}")

    def knowledge_for(clist):
        return adapter.apply(encoder.encode(texts_by_user[clist.user_id]))

    extra = (encoder.params(), adapter.params())
    return _train_loop(model, train_lists, knowledge_for, extra, epochs, lr, seed, batch_lists)


def _train_loop(model, train_lists, knowledge_for, extra_param_dicts, epochs, lr, seed, batch_lists):
    params = dict(model.params)
    for d in extra_param_dicts:
        params.update(d)
    state = kernel.OptimState(learning_rate=lr)
    curve = []
    for epoch in range(epochs):
        order = Rng(seed, "rr-order", epoch).permutation(len(train_lists))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_lists):
            batch = [train_lists[j] for j in order[start : start + batch_lists]]
            kernel.zero_grads(params)
            batch_loss = 0.0
            for bi, clist in enumerate(batch):
                s = forward_scores(model, clist, knowledge_for(clist))
                loss = kernel.mul(_bce(s, clist.labels), 1.0 / len(batch))
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite reranker loss at epoch {epoch}, batch item {bi}"
                    )
                loss.backward()
                batch_loss += float(loss.data)
            kernel.opt_step(params, kernel.collect_grads(params), state)
            epoch_loss += batch_loss * len(batch)
        curve.append(epoch_loss / len(train_lists))
    return model, curve


def evaluate(scorer, lists: list[CandidateList], knowledge_map=None, k: int = 5):
    """Mean NDCG@k and MAP@k with equal per-list weight.

    Any object with .score(clist, knowledge=...) -> ScoredList works here.
    """
    from .reward import map_at_k, ndcg_at_k

    if not lists:
        raise ValueError("evaluate: empty list set")
    nd, mp = 0.0, 0.0
    for clist in lists:
        knowledge = knowledge_map.get(clist.user_id) if knowledge_map else None
        ranked = scorer.score(clist, knowledge=knowledge).ranked_labels()
        nd += ndcg_at_k(ranked, k)
        mp += map_at_k(ranked, k)
    return nd / len(lists), mp / len(lists)


def save_reranker(model: RerankerModel, path: str) -> None:
    kernel.save_tensors(path, {k: v.data for k, v in model.params.items()}, meta={"config": asdict(model.config)})


def load_reranker(path: str) -> RerankerModel:
    tensors, meta = kernel.load_tensors(path)
    config = RerankerConfig(**meta["config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return RerankerModel(config, params)
