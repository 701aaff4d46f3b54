"""Dataset ingestion, user splits, candidate-list construction, synthetic world.

Real data arrives either in the "::"-separated MovieLens layout or as JSONL
records {"user","item","rating","ts"}. Everything downstream consumes the same
three collections: interactions, per-user profiles, and an item catalog.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

from .kernel import Rng, derive_seed

log = logging.getLogger(__name__)

POSITIVE_RATING_THRESHOLD = 4


class SplitLeakError(RuntimeError):
    """A test-tagged candidate list reached a train-side stage."""


class IngestError(RuntimeError):
    pass


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int
    label: int


def make_interaction(user_id: int, item_id: int, rating: int, timestamp: int) -> Interaction:
    if user_id < 0 or item_id < 0:
        raise ValueError(f"negative id in interaction ({user_id}, {item_id})")
    label = 1 if rating >= POSITIVE_RATING_THRESHOLD else 0
    return Interaction(user_id, item_id, rating, timestamp, label)


@dataclass(frozen=True)
class UserProfile:
    """History is (timestamp, item_id, label), sorted ascending by timestamp."""

    user_id: int
    fields: dict[str, str]
    history: tuple[tuple[int, int, int], ...]

    def items(self) -> list[int]:
        return [item for _, item, _ in self.history]

    def positives(self) -> list[int]:
        return [item for _, item, lab in self.history if lab == 1]

    def without_items(self, excluded) -> "UserProfile":
        excluded = set(excluded)
        kept = tuple(h for h in self.history if h[1] not in excluded)
        return UserProfile(self.user_id, dict(self.fields), kept)


@dataclass
class Catalog:
    titles: dict[int, str] = field(default_factory=dict)
    genres: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.titles

    def title(self, item_id: int) -> str:
        return self.titles[item_id]

    def genres_of(self, item_id: int) -> tuple[str, ...]:
        return self.genres.get(item_id, ())

    def genre_vocab(self) -> list[str]:
        return sorted({g for gs in self.genres.values() for g in gs})


@dataclass(frozen=True)
class CandidateList:
    user_id: int
    items: tuple[int, ...]
    labels: tuple[int, ...]
    split: str

    def __post_init__(self):
        if len(self.items) != len(self.labels):
            raise ValueError("candidate list items/labels length mismatch")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate items in candidate list for user {self.user_id}")
        if sum(self.labels) == 0 or sum(self.labels) == len(self.labels):
            raise ValueError(f"candidate list for user {self.user_id} must mix both classes")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split tag {self.split!r}")


def require_train_side(lists, stage: str) -> None:
    """Hard error if any test-tagged list reaches a train-side stage."""
    for clist in lists:
        if clist.split == "test":
            raise SplitLeakError(f"{stage}: test-tagged list for user {clist.user_id}")


def build_profiles(
    interactions: list[Interaction], fields_by_user: dict[int, dict[str, str]] | None = None
) -> dict[int, UserProfile]:
    by_user: dict[int, list[tuple[int, int, int]]] = {}
    for it in interactions:
        by_user.setdefault(it.user_id, []).append((it.timestamp, it.item_id, it.label))
    fields_by_user = fields_by_user or {}
    profiles = {}
    for uid, hist in by_user.items():
        hist.sort()
        profiles[uid] = UserProfile(uid, dict(fields_by_user.get(uid, {})), tuple(hist))
    return profiles


def _read_lines(path: str):
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            yield lineno, raw.decode("latin-1").rstrip("\r\n")


def ingest_ml1m(ratings_path: str, movies_path: str | None = None, users_path: str | None = None):
    """Parse "::"-separated rating/movie/user files into the canonical triple.

    Interactions referencing items absent from the movies file are dropped
    (counted); malformed lines are skipped with their line numbers logged.
    """
    for p in (ratings_path, movies_path, users_path):
        if p is not None and not os.path.exists(p):
            raise IngestError(f"missing input file: {p}")

    catalog = Catalog()
    if movies_path is not None:
        for lineno, line in _read_lines(movies_path):
            parts = line.split("::")
            if len(parts) != 3 or not parts[0].isdigit():
                log.warning("movies line %d malformed, skipped", lineno)
                continue
            item = int(parts[0])
            catalog.titles[item] = parts[1]
            catalog.genres[item] = tuple(g for g in parts[2].split("|") if g)

    fields_by_user: dict[int, dict[str, str]] = {}
    if users_path is not None:
        for lineno, line in _read_lines(users_path):
            parts = line.split("::")
            if len(parts) < 4 or not parts[0].isdigit():
                log.warning("users line %d malformed, skipped", lineno)
                continue
            fields_by_user[int(parts[0])] = {
                "gender": parts[1],
                "age": parts[2],
                "occupation": parts[3],
            }

    interactions: list[Interaction] = []
    bad_lines: list[int] = []
    dropped_no_catalog = 0
    for lineno, line in _read_lines(ratings_path):
        parts = line.split("::")
        if len(parts) != 4:
            bad_lines.append(lineno)
            continue
        try:
            user, item, rating, ts = (int(p) for p in parts)
        except ValueError:
            bad_lines.append(lineno)
            continue
        if movies_path is not None and item not in catalog:
            dropped_no_catalog += 1
            continue
        interactions.append(make_interaction(user, item, rating, ts))

    if bad_lines:
        log.warning(
            "ratings: %d malformed lines skipped (first few: %s)", len(bad_lines), bad_lines[:5]
        )
    if dropped_no_catalog:
        log.warning("ratings: %d interactions dropped (item missing from catalog)", dropped_no_catalog)
    if not interactions:
        raise IngestError(f"no parsable interactions in {ratings_path}")

    profiles = build_profiles(interactions, fields_by_user)
    n_items = len({it.item_id for it in interactions})
    log.info(
        "ingested %d interactions, %d users, %d items", len(interactions), len(profiles), n_items
    )
    return interactions, profiles, catalog


def ingest_jsonl(interactions_path: str, catalog_path: str | None = None):
    """Canonical JSONL: {"user","item","rating","ts"}; catalog {"item","title","genres"}."""
    for p in (interactions_path, catalog_path):
        if p is not None and not os.path.exists(p):
            raise IngestError(f"missing input file: {p}")

    catalog = Catalog()
    if catalog_path is not None:
        with open(catalog_path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                catalog.titles[int(rec["item"])] = rec["title"]
                catalog.genres[int(rec["item"])] = tuple(rec.get("genres", ()))

    interactions = []
    bad_lines = []
    dropped_no_catalog = 0
    with open(interactions_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                it = make_interaction(
                    int(rec["user"]), int(rec["item"]), int(rec.get("rating", 1)), int(rec["ts"])
                )
            except (json.JSONDecodeError, KeyError, ValueError):
                bad_lines.append(lineno)
                continue
            if catalog_path is not None and it.item_id not in catalog:
                dropped_no_catalog += 1
                continue
            interactions.append(it)
    if bad_lines:
        log.warning("jsonl: %d malformed lines skipped (first few: %s)", len(bad_lines), bad_lines[:5])
    if dropped_no_catalog:
        log.warning("jsonl: %d interactions dropped (item missing from catalog)", dropped_no_catalog)
    if not interactions:
        raise IngestError(f"no parsable interactions in {interactions_path}")
    profiles = build_profiles(interactions)
    return interactions, profiles, catalog


def split_by_user(profiles: dict[int, UserProfile], train_fraction: float = 0.9, seed: int = 0):
    """Hash-ranked user partition with exactly floor(fraction * n) train users.

    Each user's rank key depends only on (seed, user_id), so membership is
    stable across runs and insensitive to dict ordering.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    users = sorted(profiles)
    if len(users) < 2:
        raise ValueError("split_by_user needs at least 2 users")
    ranked = sorted(users, key=lambda u: (derive_seed(seed, "split", u), u))
    n_train = math.floor(train_fraction * len(users))
    n_train = min(max(n_train, 1), len(users) - 1)
    train = sorted(ranked[:n_train])
    test = sorted(ranked[n_train:])
    return train, test


def build_candidate_lists(
    profiles: dict[int, UserProfile],
    L: int = 10,
    negatives_per_positive: int = 4,
    seed: int = 0,
    split_map: dict[int, str] | None = None,
    universe: list[int] | None = None,
) -> dict[int, CandidateList]:
    """One fixed-length list per user: recent held-out positives + sampled negatives.

    Up to ceil(L / (1 + negatives_per_positive)) of the user's most recent
    positives are held out into the list; the rest of the slots are items the
    user never interacted with. Users with no positive, or with too small a
    negative pool, are skipped (counted). Presentation order is shuffled.
    """
    if universe is None:
        pool_all = sorted({item for p in profiles.values() for item in p.items()})
    else:
        pool_all = sorted(set(universe))
    if len(pool_all) < L:
        raise ValueError(f"item universe ({len(pool_all)}) smaller than list length {L}")

    split_map = split_map or {}
    max_pos = max(1, math.ceil(L / (1 + negatives_per_positive)))
    lists: dict[int, CandidateList] = {}
    skipped = 0
    for uid in sorted(profiles):
        prof = profiles[uid]
        positives = prof.positives()
        if not positives:
            skipped += 1
            continue
        held = positives[-max_pos:]
        n_neg = L - len(held)
        seen = set(prof.items())
        neg_pool = [i for i in pool_all if i not in seen]
        if len(neg_pool) < n_neg or n_neg == 0:
            skipped += 1
            continue
        rng = Rng(seed, "clist", uid)
        negs = [neg_pool[j] for j in rng.choice(len(neg_pool), size=n_neg, replace=False)]
        items = held + negs
        labels = [1] * len(held) + [0] * n_neg
        order = rng.permutation(L)
        lists[uid] = CandidateList(
            user_id=uid,
            items=tuple(items[j] for j in order),
            labels=tuple(labels[j] for j in order),
            split=split_map.get(uid, "train"),
        )
    if skipped:
        log.warning("build_candidate_lists: skipped %d users (no positive or pool too small)", skipped)
    return lists


GENRE_NAMES = [
    "action", "comedy", "drama", "horror", "romance", "scifi",
    "thriller", "western", "fantasy", "mystery", "musical", "crime",
]

TITLE_NOUNS = ["story", "night", "road", "house", "river", "garden", "city", "train"]


def generate_synthetic_world(
    n_users: int, n_items: int, n_genres: int, noise: float, seed: int
):
    """A world where each user has one latent preferred genre.

    Preferred-genre items are liked with probability 1 - noise, everything
    else with probability noise. Returns (interactions, profiles, catalog,
    ground_truth) where ground_truth maps user_id -> genre name.
    """
    if n_genres < 2:
        raise ValueError("need at least 2 genres")
    if not 0 <= noise < 0.5:
        raise ValueError(f"noise must be in [0, 0.5), got {noise}")
    if n_users < 2 or n_items < 2 * n_genres:
        raise ValueError("degenerate world size")

    genre_names = [
        GENRE_NAMES[g] if g < len(GENRE_NAMES) else f"genre{g}" for g in range(n_genres)
    ]
    catalog = Catalog()
    item_genre: dict[int, int] = {}
    for item in range(n_items):
        g = item % n_genres
        item_genre[item] = g
        noun = TITLE_NOUNS[(item // n_genres) % len(TITLE_NOUNS)]
        catalog.titles[item] = f"{genre_names[g]} {noun} {item}"
        catalog.genres[item] = (genre_names[g],)

    interactions: list[Interaction] = []
    ground_truth: dict[int, str] = {}
    min_hist = min(12, n_items)
    max_hist = min(24, n_items)
    for uid in range(n_users):
        rng = Rng(seed, "user", uid)
        pref = int(rng.integers(0, n_genres))
        ground_truth[uid] = genre_names[pref]
        n_hist = int(rng.integers(min_hist, max_hist + 1))
        pref_items = [i for i in range(n_items) if item_genre[i] == pref]
        n_pref = min(len(pref_items), max(2, n_hist // 2))
        chosen_pref = [pref_items[j] for j in rng.choice(len(pref_items), size=n_pref, replace=False)]
        other_items = [i for i in range(n_items) if item_genre[i] != pref]
        n_other = min(len(other_items), n_hist - n_pref)
        chosen_other = [other_items[j] for j in rng.choice(len(other_items), size=n_other, replace=False)]
        watched = chosen_pref + chosen_other
        order = rng.permutation(len(watched))
        for t, j in enumerate(order):
            item = watched[j]
            p_like = (1.0 - noise) if item_genre[item] == pref else noise
            liked = bool(rng.bernoulli(p_like))
            rating = 5 if liked else 2
            interactions.append(make_interaction(uid, item, rating, t))

    profiles = build_profiles(interactions)
    return interactions, profiles, catalog, ground_truth


def write_interactions_jsonl(path: str, interactions: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in interactions:
            f.write(
                json.dumps(
                    {"user": it.user_id, "item": it.item_id, "rating": it.rating, "ts": it.timestamp}
                )
                + "\n"
            )


def write_catalog_jsonl(path: str, catalog: Catalog) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in sorted(catalog.titles):
            f.write(
                json.dumps(
                    {"item": item, "title": catalog.titles[item], "genres": list(catalog.genres_of(item))}
                )
                + "\n"
            )
