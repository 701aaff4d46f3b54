"""Prompt construction, text encoding, and the adapter into reranker features.

The text a generator produces about a user is turned into a d_text vector by
mean-pooling learned token embeddings, then mapped by a small two-layer
adapter into the d_feat space the rerankers consume as an extra input feature.
Both stages are differentiable so they can be trained jointly with a reranker.
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

_PLACEHOLDERS = ("user_fields", "history_items", "genres")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    max_history: int = 50

    def __post_init__(self):
        for name in re.findall(r"\{(\w*)\}", self.text):
            if name not in _PLACEHOLDERS:
                raise TemplateError(f"unknown placeholder {{{name}}}")
        try:
            self.text.format(**{p: "" for p in _PLACEHOLDERS})
        except (KeyError, IndexError, ValueError) as exc:
            raise TemplateError(f"malformed template: {exc}") from exc


DEFAULT_TEMPLATE = PromptTemplate(
    "You are a movie recommendation expert. {user_fields}"
    "The user recently watched: {history_items}. "
    "Genres they liked: {genres}. "
    "Summarize this user's movie preferences in one short sentence.",
    max_history=50,
)


def load_template(path: str, max_history: int = 50) -> PromptTemplate:
    with open(path, encoding="utf-8") as f:
        return PromptTemplate(f.read().strip(), max_history=max_history)


def render_prompt(template: PromptTemplate, profile, catalog) -> str:
    """Fill the template from a profile. Deterministic; empty demographic
    fields drop the whole attribute clause."""
    if not profile.history:
        raise ValueError(f"render_prompt: user {profile.user_id} has empty history")

    if profile.fields:
        pairs = ", ".join(f"{k} {profile.fields[k]}" for k in sorted(profile.fields))
        user_fields = f"User attributes: {pairs}. "
    else:
        user_fields = ""

    recent = profile.history[-template.max_history :]
    titles = [catalog.titles.get(item, f"item {item}") for _, item, _ in recent]
    history_items = ", ".join(titles)

    counts: dict[str, int] = {}
    for _, item, lab in recent:
        if lab != 1:
            continue
        for g in catalog.genres_of(item):
            counts[g] = counts.get(g, 0) + 1
    if not counts:
        for _, item, _ in recent:
            for g in catalog.genres_of(item):
                counts[g] = counts.get(g, 0) + 1
    ranked = sorted(counts, key=lambda g: (-counts[g], g))
    genres = ", ".join(ranked) if ranked else "unknown"

    return template.text.format(
        user_fields=user_fields, history_items=history_items, genres=genres
    )


class TextEncoder:
    """Bag-of-embeddings: mean of learned vectors over in-vocab word tokens.

    Specials and unknown-word tokens are excluded from the mean; a text with
    nothing left encodes to the zero vector (counted in empty_count).
    """

    def __init__(self, vocab, embed: Tensor):
        self.vocab = vocab
        self.embed = embed
        self.d_text = embed.shape[1]
        self.empty_count = 0

    @classmethod
    def create(cls, vocab, d_text: int = 64, seed: int = 0) -> "TextEncoder":
        rng = Rng(seed, "textenc")
        table = rng.normal(scale=0.1, size=(vocab.size, d_text))
        return cls(vocab, Tensor(table, requires_grad=True))

    def content_ids(self, text: str) -> list[int]:
        from .policy import N_SPECIALS, tokenize

        return [i for i in tokenize(self.vocab, text) if i >= N_SPECIALS]

    def encode(self, text: str) -> Tensor:
        """(1, d_text) tensor; part of the autodiff graph when grad is enabled."""
        ids = self.content_ids(text)
        if not ids:
            self.empty_count += 1
            return Tensor(np.zeros((1, self.d_text)))
        rows = kernel.embedding(self.embed, np.asarray(ids, dtype=np.int64))
        return kernel.tmean(rows, axis=0, keepdims=True)

    def params(self) -> dict[str, Tensor]:
        return {"enc.embed": self.embed}


def encode_text(encoder: TextEncoder, text: str) -> Tensor:
    return encoder.encode(text)


@dataclass
class Adapter:
    """Two affine layers with relu between: d_text -> hidden -> d_feat."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    d_text: int = field(init=False)
    d_feat: int = field(init=False)

    def __post_init__(self):
        self.d_text = self.w1.shape[0]
        self.d_feat = self.w2.shape[1]

    @classmethod
    def create(cls, d_text: int = 64, hidden: int = 64, d_feat: int = 32, seed: int = 0) -> "Adapter":
        rng = Rng(seed, "adapter")
        return cls(
            w1=Tensor(rng.normal(scale=1.0 / np.sqrt(d_text), size=(d_text, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, d_feat)), requires_grad=True),
            b2=Tensor(np.zeros(d_feat), requires_grad=True),
        )

    def apply(self, v: Tensor) -> Tensor:
        """(1, d_text) -> (1, d_feat)."""
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
        if v.ndim != 2 or v.shape[1] != self.d_text:
            raise kernel.ShapeError(f"adapter expects (1, {self.d_text}), got {v.shape}")
        h = kernel.relu(kernel.add(kernel.matmul(v, self.w1), self.b1))
        return kernel.add(kernel.matmul(h, self.w2), self.b2)

    def params(self) -> dict[str, Tensor]:
        return {"adapter.w1": self.w1, "adapter.b1": self.b1, "adapter.w2": self.w2, "adapter.b2": self.b2}


def adapt(adapter: Adapter, v) -> Tensor:
    return adapter.apply(v)


def write_knowledge_cache(path: str, rows: list[dict]) -> None:
    """rows: {"user": int, "response_id": int, "text": str}."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_knowledge_cache(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out
