"""Word-level tokenizer and a tiny decoder-only generator.

The generator stands in for a large instruction-tuned model: it samples N
preference summaries per prompt and exposes exact sequence log-probabilities,
which is all the preference-tuning stage needs. Output projection is tied to
the token embedding table.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .kernel import Rng, Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_SPECIALS = 4
_SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+")


class ContextOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocab(texts, max_size: int = 2048) -> Vocab:
    counts: dict[str, int] = {}
    for text in texts:
        for w in _words(text):
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[: max_size - N_SPECIALS]
    id_to_token = list(_SPECIAL_TOKENS) + ranked
    return Vocab(
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        id_to_token=tuple(id_to_token),
    )


def tokenize(vocab: Vocab, text: str) -> list[int]:
    """Content ids only; unknown words map to UNK."""
    return [vocab.token_to_id.get(w, UNK) for w in _words(text)]


def detokenize(vocab: Vocab, ids) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids if i >= N_SPECIALS)


def frame_sequence(content_ids) -> list[int]:
    """Full sequence form: BOS + content + EOS (empty text -> [BOS, EOS])."""
    return [BOS] + list(content_ids) + [EOS]


@dataclass(frozen=True)
class PolicyConfig:
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    ffn_dim: int = 128

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass
class PolicyModel:
    config: PolicyConfig
    vocab: Vocab
    params: dict[str, Tensor]


def create_policy(vocab: Vocab, config: PolicyConfig | None = None, seed: int = 0) -> PolicyModel:
    config = config or PolicyConfig()
    rng = Rng(seed, "policy-init")
    d, f = config.model_dim, config.ffn_dim
    params: dict[str, Tensor] = {
        "tok_emb": Tensor(rng.normal(scale=0.1, size=(vocab.size, d)), requires_grad=True),
        "pos_emb": Tensor(rng.normal(scale=0.05, size=(config.context_len, d)), requires_grad=True),
    }
    for l in range(config.n_layers):
        lr_ = rng.stream("layer", l)
        s = 1.0 / np.sqrt(d)
        params[f"l{l}.wq"] = Tensor(lr_.normal(scale=s, size=(d, d)), requires_grad=True)
        params[f"l{l}.wk"] = Tensor(lr_.normal(scale=s, size=(d, d)), requires_grad=True)
        params[f"l{l}.wv"] = Tensor(lr_.normal(scale=s, size=(d, d)), requires_grad=True)
        params[f"l{l}.wo"] = Tensor(lr_.normal(scale=s, size=(d, d)), requires_grad=True)
        params[f"l{l}.ffn_w1"] = Tensor(lr_.normal(scale=s, size=(d, f)), requires_grad=True)
        params[f"l{l}.ffn_b1"] = Tensor(np.zeros(f), requires_grad=True)
        params[f"l{l}.ffn_w2"] = Tensor(lr_.normal(scale=1.0 / np.sqrt(f), size=(f, d)), requires_grad=True)
        params[f"l{l}.ffn_b2"] = Tensor(np.zeros(d), requires_grad=True)
    return PolicyModel(config, vocab, params)


def clone_policy(model: PolicyModel, trainable: bool = False) -> PolicyModel:
    params = {
        k: Tensor(v.data.copy(), requires_grad=trainable) for k, v in model.params.items()
    }
    return PolicyModel(model.config, model.vocab, params)


def forward(model: PolicyModel, ids, params: dict[str, Tensor] | None = None, last_only: bool = False) -> Tensor:
    """Logits over the vocabulary: (B, T, V), or (B, 1, V) with last_only."""
    p = params if params is not None else model.params
    cfg = model.config
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    B, T = ids.shape
    if T > cfg.context_len:
        raise ContextOverflowError(f"sequence length {T} exceeds context {cfg.context_len}")

    x = kernel.add(
        kernel.embedding(p["tok_emb"], ids),
        kernel.embedding(p["pos_emb"], np.arange(T)),
    )
    causal = Tensor(np.triu(np.full((T, T), -1e9), k=1))
    scale = Tensor(np.float64(1.0 / np.sqrt(cfg.head_dim)))

    for l in range(cfg.n_layers):
        h = kernel.layer_norm(x)
        q = kernel.matmul(h, p[f"l{l}.wq"])
        k = kernel.matmul(h, p[f"l{l}.wk"])
        v = kernel.matmul(h, p[f"l{l}.wv"])
        heads = []
        for hh in range(cfg.n_heads):
            sl = (Ellipsis, slice(hh * cfg.head_dim, (hh + 1) * cfg.head_dim))
            qh, kh, vh = kernel.tslice(q, sl), kernel.tslice(k, sl), kernel.tslice(v, sl)
            att = kernel.mul(kernel.matmul(qh, kh, transpose_b=True), scale)
            att = kernel.softmax(kernel.add(att, causal), axis=-1)
            heads.append(kernel.matmul(att, vh))
        attn = kernel.matmul(kernel.concat(heads, axis=-1), p[f"l{l}.wo"])
        x = kernel.add(x, attn)

        h2 = kernel.layer_norm(x)
        ff = kernel.relu(kernel.add(kernel.matmul(h2, p[f"l{l}.ffn_w1"]), p[f"l{l}.ffn_b1"]))
        ff = kernel.add(kernel.matmul(ff, p[f"l{l}.ffn_w2"]), p[f"l{l}.ffn_b2"])
        x = kernel.add(x, ff)

    x = kernel.layer_norm(x)
    if last_only:
        x = kernel.tslice(x, (slice(None), slice(T - 1, T)))
    return kernel.matmul(x, p["tok_emb"], transpose_b=True)


@dataclass
class ReasoningResponse:
    user_id: int
    sample_index: int
    token_ids: tuple[int, ...]
    text: str
    logprob_policy: float
    reward: float | None = None


def _masked_dist(logits_row_np: np.ndarray, temperature: float):
    """Sampling distribution over tokens with structural specials excluded."""
    masked = logits_row_np.copy()
    masked[:, [PAD, BOS, UNK]] = -np.inf
    if temperature == 0.0:
        return np.argmax(masked, axis=1), None
    shifted = (masked - masked.max(axis=1, keepdims=True)) / temperature
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return None, probs


def sample_n(
    model: PolicyModel,
    prompt_ids,
    n: int,
    max_new_tokens: int = 32,
    temperature: float = 0.8,
    seed: int = 0,
    user_id: int = 0,
) -> list[ReasoningResponse]:
    """Draw n sequences; sample k consumes only its own (seed, user, k) stream.

    Log-probabilities accumulate under the raw (untempered) distribution, so
    they agree with sequence_logprob. Generation stops per row at EOS or after
    max_new_tokens tokens (in which case the row has no terminal EOS).
    """
    prompt_ids = list(prompt_ids)
    if not prompt_ids:
        raise ValueError("sample_n: empty prompt")
    if len(prompt_ids) + max_new_tokens > model.config.context_len:
        raise ContextOverflowError(
            f"prompt ({len(prompt_ids)}) + max_new_tokens ({max_new_tokens}) "
            f"exceeds context {model.config.context_len}"
        )
    if n < 1:
        raise ValueError("sample_n: n must be >= 1")

    streams = [Rng(seed, "gen", user_id, k) for k in range(n)]
    generated: list[list[int]] = [[] for _ in range(n)]
    logprobs = [0.0] * n
    alive = [True] * n
    V = model.vocab.size

    with kernel.no_grad():
        for _ in range(max_new_tokens):
            if not any(alive):
                break
            ids = np.array(
                [prompt_ids + g + [PAD] * (max(len(x) for x in generated) - len(g)) for g in generated],
                dtype=np.int64,
            )
            logits = forward(model, ids, last_only=True).data[:, 0, :]
            lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True))
            raw_logp = logits - logits.max(axis=1, keepdims=True) - lse
            argmaxes, probs = _masked_dist(logits, temperature)
            for k in range(n):
                if not alive[k]:
                    continue
                if argmaxes is not None:
                    tok = int(argmaxes[k])
                else:
                    row = probs[k] / probs[k].sum()
                    tok = int(streams[k].choice(V, p=row))
                generated[k].append(tok)
                logprobs[k] += float(raw_logp[k, tok])
                if tok == EOS:
                    alive[k] = False

    out = []
    for k in range(n):
        toks = list(generated[k])
        if EOS in toks:
            toks = toks[: toks.index(EOS) + 1]
        out.append(
            ReasoningResponse(
                user_id=user_id,
                sample_index=k,
                token_ids=tuple(toks),
                text=detokenize(model.vocab, toks),
                logprob_policy=logprobs[k],
            )
        )
    return out


def sequence_logprob_t(
    model: PolicyModel, prompt_ids, response_ids, params: dict[str, Tensor] | None = None
) -> Tensor:
    """Scalar tensor: sum of log P(response token | prefix) over the response."""
    prompt_ids = list(prompt_ids)
    response_ids = list(response_ids)
    if not prompt_ids:
        raise ValueError("sequence_logprob: empty prompt")
    if not response_ids:
        raise ValueError("sequence_logprob: empty response")
    full = prompt_ids + response_ids
    if len(full) > model.config.context_len:
        raise ContextOverflowError(
            f"prompt + response length {len(full)} exceeds context {model.config.context_len}"
        )
    ids = np.asarray([full], dtype=np.int64)
    logits = forward(model, ids[:, :-1], params=params)
    lp = kernel.log_softmax(logits, axis=-1)
    picked = kernel.gather_last(lp, ids[:, 1:])
    P = len(prompt_ids)
    resp = kernel.tslice(picked, (slice(None), slice(P - 1, len(full) - 1)))
    return kernel.tsum(resp)


def sequence_logprob(model: PolicyModel, prompt_ids, response_ids) -> float:
    with kernel.no_grad():
        return float(sequence_logprob_t(model, prompt_ids, response_ids).data)


def train_lm(
    model: PolicyModel,
    sequences: list[list[int]],
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Next-token cross-entropy over framed sequences; returns per-epoch mean CE."""
    if not sequences:
        raise ValueError("train_lm: empty corpus")
    for s in sequences:
        if len(s) > model.config.context_len:
            raise ContextOverflowError("train_lm: sequence exceeds context length")
    state = kernel.OptimState(learning_rate=lr)
    curve = []
    for epoch in range(epochs):
        order = Rng(seed, "lm-order", epoch).permutation(len(sequences))
        total_nll, total_tok = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [sequences[j] for j in order[start : start + batch_size]]
            T = max(len(s) for s in batch)
            ids = np.full((len(batch), T), PAD, dtype=np.int64)
            for r, s in enumerate(batch):
                ids[r, : len(s)] = s
            targets = ids[:, 1:]
            mask = (targets != PAD).astype(np.float64)
            n_tok = int(mask.sum())
            if n_tok == 0:
                continue
            logits = forward(model, ids[:, :-1])
            lp = kernel.gather_last(kernel.log_softmax(logits, axis=-1), targets)
            loss = kernel.mul(kernel.tsum(kernel.mul(lp, Tensor(mask))), Tensor(np.float64(-1.0 / n_tok)))
            kernel.zero_grads(model.params)
            loss.backward()
            kernel.opt_step(model.params, kernel.collect_grads(model.params), state)
            total_nll += float(loss.data) * n_tok
            total_tok += n_tok
        curve.append(total_nll / total_tok)
    return curve


def save_policy(model: PolicyModel, path: str) -> None:
    from dataclasses import asdict

    meta = {"config": asdict(model.config), "vocab": list(model.vocab.id_to_token)}
    kernel.save_tensors(path, {k: v.data for k, v in model.params.items()}, meta=meta)


def load_policy(path: str) -> PolicyModel:
    tensors, meta = kernel.load_tensors(path)
    vocab_tokens = meta["vocab"]
    vocab = Vocab(
        token_to_id={t: i for i, t in enumerate(vocab_tokens)}, id_to_token=tuple(vocab_tokens)
    )
    config = PolicyConfig(**meta["config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return PolicyModel(config, vocab, params)


def write_responses_jsonl(path: str, responses_by_user: dict[int, list[ReasoningResponse]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid in sorted(responses_by_user):
            for r in responses_by_user[uid]:
                f.write(
                    json.dumps(
                        {"user": uid, "k": r.sample_index, "text": r.text, "logprob": r.logprob_policy}
                    )
                    + "\n"
                )
