"""End-to-end iterative preference-tuning runs, ablations, and sweeps.

Each round: snapshot a frozen reference, sample N summaries per reward user,
reward them with the knowledge-augmented reranker, mine chosen/rejected pairs,
update the policy, optionally refresh the reranker on fresh greedy summaries,
then evaluate on the held-out test users. Reports are written as they complete
so an interrupted run resumes from the last finished round.

Determinism contract: every random draw comes from a stream addressed by the
master seed plus stage/round/user tags, so reports are byte-identical across
reruns and resume points. Wall-clock times live in a separate sidecar file
that is excluded from that contract.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernel
from .dataio import (
    CandidateList,
    build_candidate_lists,
    generate_synthetic_world,
    ingest_jsonl,
    require_train_side,
    split_by_user,
)
from .dpo import DpoConfig, dpo_train, mine_pairs
from .kernel import derive_seed, no_grad
from .knowledge import Adapter, PromptTemplate, TextEncoder, render_prompt
from .policy import (
    BOS,
    EOS,
    PolicyConfig,
    PolicyModel,
    Vocab,
    build_vocab,
    clone_policy,
    create_policy,
    load_policy,
    sample_n,
    save_policy,
    tokenize,
    train_lm,
)
from .rerankers import (
    RerankerConfig,
    RerankerModel,
    create_reranker,
    evaluate,
    load_reranker,
    save_reranker,
    train_reranker,
    train_reranker_joint,
)
from .reward import ResponseScoreTable, score_responses

log = logging.getLogger(__name__)

PROMPT_TEMPLATE_TEXT = (
    "You are a movie recommendation expert. {user_fields}"
    "The user recently watched: {history_items}. "
    "Genres they liked: {genres}. "
    "Summarize this user's movie preferences in one short sentence."
)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    workdir: str = "runs/default"

    # data source: synthetic world unless data_dir is set
    data_dir: str = ""
    n_users: int = 500
    n_items: int = 200
    n_genres: int = 4
    noise: float = 0.1

    # splits and lists
    train_fraction: float = 0.9
    reranker_user_fraction: float = 0.8
    list_len: int = 10
    negatives_per_positive: int = 4

    # toggles
    knowledge: bool = True
    dpo: bool = True
    refresh_reranker: bool = True
    rounds: int = 2

    # generation
    backend: str = "builtin"
    n_responses: int = 10
    max_new_tokens: int = 24
    temperature: float = 0.8
    prompt_max_history: int = 8

    # models
    reranker_kind: str = "setrank"
    d_text: int = 64
    d_feat: int = 32
    reranker_epochs: int = 25
    reranker_lr: float = 1e-3
    vocab_max: int = 2048
    warmstart_epochs: int = 5
    warmstart_lr: float = 1e-3
    warmstart_batch: int = 16

    # preference tuning
    dpo_beta: float = 0.01
    dpo_lr: float = 2e-4
    dpo_grad_accumulation: int = 8
    dpo_batch_size: int = 2
    dpo_epochs: int = 3

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.dpo and self.n_responses < 2:
            raise ValueError("preference tuning needs at least 2 responses per user")
        if self.dpo and not self.knowledge:
            raise ValueError("preference tuning requires the knowledge reward channel")

    def dpo_config(self) -> DpoConfig:
        return DpoConfig(
            beta=self.dpo_beta,
            learning_rate=self.dpo_lr,
            grad_accumulation=self.dpo_grad_accumulation,
            batch_size=self.dpo_batch_size,
            epochs=self.dpo_epochs,
        )


@dataclass
class RoundReport:
    round_index: int
    pre_mean_reward: float = 0.0
    pre_best_of_n: float = 0.0
    post_mean_reward: float = 0.0
    post_best_of_n: float = 0.0
    test_ndcg5: float = 0.0
    test_map5: float = 0.0
    pair_count: int = 0
    skipped_users: dict = field(default_factory=dict)
    dpo_loss_curve: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def report_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_seconds")  # timing lives in the sidecar, reports stay reproducible
        return d


def config_from_file(path: str) -> PipelineConfig:
    """JSON object or flat key=value lines."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise json.JSONDecodeError("top level must be an object", text, 0)
    except json.JSONDecodeError:
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    defaults = PipelineConfig()
    coerced = {}
    for key, value in raw.items():
        if not hasattr(defaults, key):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            coerced[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "on", "yes")
        elif isinstance(current, int):
            coerced[key] = int(value)
        elif isinstance(current, float):
            coerced[key] = float(value)
        else:
            coerced[key] = str(value)
    return PipelineConfig(**coerced)


@dataclass
class World:
    profiles: dict
    catalog: object
    train_users: list[int]
    test_users: list[int]
    rr_users: list[int]
    rw_users: list[int]
    lists: dict[int, CandidateList]
    prompts: dict[int, str]
    prompt_ids: dict[int, list[int]]
    vocab: Vocab


@dataclass
class RunResult:
    reports: list[RoundReport]
    workdir: str
    policy: PolicyModel | None
    reranker: RerankerModel | None
    encoder: TextEncoder | None
    adapter: Adapter | None
    world: World


def _dominant_genre(profile, catalog) -> str:
    counts: dict[str, int] = {}
    for _, item, lab in profile.history:
        if lab != 1:
            continue
        for g in catalog.genres_of(item):
            counts[g] = counts.get(g, 0) + 1
    if not counts:
        for _, item, _ in profile.history:
            for g in catalog.genres_of(item):
                counts[g] = counts.get(g, 0) + 1
    if not counts:
        return "unknown"
    return sorted(counts, key=lambda g: (-counts[g], g))[0]


def build_world(config: PipelineConfig) -> World:
    seed = config.seed
    if config.data_dir:
        interactions, profiles, catalog = ingest_jsonl(
            os.path.join(config.data_dir, "interactions.jsonl"),
            os.path.join(config.data_dir, "catalog.jsonl"),
        )
    else:
        interactions, profiles, catalog, _ = generate_synthetic_world(
            config.n_users, config.n_items, config.n_genres, config.noise, derive_seed(seed, "world")
        )

    train_users, test_users = split_by_user(profiles, config.train_fraction, derive_seed(seed, "split"))
    split_map = {u: "train" for u in train_users}
    split_map.update({u: "test" for u in test_users})
    lists = build_candidate_lists(
        profiles,
        L=config.list_len,
        negatives_per_positive=config.negatives_per_positive,
        seed=derive_seed(seed, "lists"),
        split_map=split_map,
    )

    train_with_lists = [u for u in train_users if u in lists]
    sub_profiles = {u: profiles[u] for u in train_with_lists}
    rr_users, rw_users = split_by_user(
        sub_profiles, config.reranker_user_fraction, derive_seed(seed, "slice")
    )

    template = PromptTemplate(PROMPT_TEMPLATE_TEXT, max_history=config.prompt_max_history)
    prompts = {}
    for uid in sorted(lists):
        prof = profiles[uid].without_items(lists[uid].items)
        if not prof.history:
            prof = profiles[uid]
        prompts[uid] = render_prompt(template, prof, catalog)

    corpus = list(prompts.values())
    genre_vocab = catalog.genre_vocab()
    corpus += [f"the user prefers {g} movies" for g in genre_vocab]
    vocab = build_vocab(corpus, max_size=config.vocab_max)
    prompt_ids = {uid: [BOS] + tokenize(vocab, text) for uid, text in prompts.items()}

    return World(
        profiles=profiles,
        catalog=catalog,
        train_users=train_users,
        test_users=test_users,
        rr_users=rr_users,
        rw_users=rw_users,
        lists=lists,
        prompts=prompts,
        prompt_ids=prompt_ids,
        vocab=vocab,
    )


def _warmstart_corpus(world: World, config: PipelineConfig) -> list[list[int]]:
    seqs = []
    for uid in world.rr_users + world.rw_users:
        genre = _dominant_genre(world.profiles[uid].without_items(world.lists[uid].items), world.catalog)
        target = f"the user prefers {genre} movies"
        ids = tokenize(world.vocab, world.prompts[uid] + " " + target)
        seqs.append([BOS] + ids + [EOS])
    return seqs


def _greedy_texts(policy: PolicyModel, world: World, users, max_new_tokens: int) -> dict[int, str]:
    out = {}
    for uid in sorted(users):
        resp = sample_n(
            policy, world.prompt_ids[uid], n=1, max_new_tokens=max_new_tokens, temperature=0.0,
            seed=0, user_id=uid,
        )[0]
        out[uid] = resp.text
    return out


def _knowledge_vectors(encoder: TextEncoder, adapter: Adapter, texts: dict[int, str]) -> dict[int, np.ndarray]:
    vecs = {}
    with no_grad():
        for uid in sorted(texts):
            vecs[uid] = adapter.apply(encoder.encode(texts[uid])).numpy()
    return vecs


def _train_fresh_reranker(world: World, config: PipelineConfig, policy, encoder, adapter, round_index: int):
    """Reranker (re)trained from scratch; gradients reach encoder/adapter when
    knowledge is on."""
    rr_lists = [world.lists[u] for u in world.rr_users]
    require_train_side(rr_lists, "reranker training")
    n_items = 1 + max(max(cl.items) for cl in world.lists.values())
    n_users = 1 + max(world.lists)
    rcfg = RerankerConfig(
        kind=config.reranker_kind,
        list_len=config.list_len,
        d_feat=config.d_feat if config.knowledge else 0,
        n_items=n_items,
        n_users=n_users,
    )
    model = create_reranker(rcfg, seed=derive_seed(config.seed, "reranker-init", round_index))
    train_seed = derive_seed(config.seed, "reranker-train", round_index)
    if config.knowledge:
        texts = _greedy_texts(policy, world, world.rr_users, config.max_new_tokens)
        model, curve = train_reranker_joint(
            model, rr_lists, texts, encoder, adapter,
            epochs=config.reranker_epochs, lr=config.reranker_lr, seed=train_seed,
        )
    else:
        model, curve = train_reranker(
            model, rr_lists, None,
            epochs=config.reranker_epochs, lr=config.reranker_lr, seed=train_seed,
        )
    return model, curve


def _test_metrics(world: World, config: PipelineConfig, reranker, policy, encoder, adapter):
    test_lists = [world.lists[u] for u in world.test_users if u in world.lists]
    if not test_lists:
        raise ValueError("no test lists available")
    kmap = None
    if config.knowledge:
        texts = _greedy_texts(policy, world, [cl.user_id for cl in test_lists], config.max_new_tokens)
        kmap = _knowledge_vectors(encoder, adapter, texts)
    return evaluate(reranker, test_lists, knowledge_map=kmap, k=5)


def _generate_for_users(policy, world, users, config, gen_seed) -> dict[int, list]:
    responses = {}
    for uid in sorted(users):
        responses[uid] = sample_n(
            policy,
            world.prompt_ids[uid],
            n=config.n_responses,
            max_new_tokens=config.max_new_tokens,
            temperature=config.temperature,
            seed=gen_seed,
            user_id=uid,
        )
    return responses


def _reward_stats(table: ResponseScoreTable) -> tuple[float, float]:
    means, bests = [], []
    for uid in sorted(table.rows):
        rewards = [r for _, r in table.rows[uid]]
        means.append(float(np.mean(rewards)))
        bests.append(float(np.max(rewards)))
    return float(np.mean(means)), float(np.mean(bests))


def _score_reward_users(reranker, adapter, encoder, world, responses) -> ResponseScoreTable:
    eval_lists = {u: world.lists[u] for u in responses}
    return score_responses(reranker, adapter, encoder, responses, eval_lists)


def _round_paths(workdir: str, r: int) -> dict:
    return {
        "report": os.path.join(workdir, f"round_{r}.json"),
        "policy": os.path.join(workdir, f"policy_round_{r}.ckpt"),
        "reranker": os.path.join(workdir, f"reranker_round_{r}.ckpt"),
        "knowledge": os.path.join(workdir, f"knowledge_round_{r}.ckpt"),
    }


def _save_knowledge(path: str, encoder: TextEncoder, adapter: Adapter) -> None:
    tensors = {k: v.data for k, v in {**encoder.params(), **adapter.params()}.items()}
    kernel.save_tensors(path, tensors, meta={"d_text": encoder.d_text, "d_feat": adapter.d_feat})


def _load_knowledge(path: str, vocab: Vocab) -> tuple[TextEncoder, Adapter]:
    tensors, _ = kernel.load_tensors(path)
    encoder = TextEncoder(vocab, kernel.Tensor(tensors["enc.embed"], requires_grad=True))
    adapter = Adapter(
        w1=kernel.Tensor(tensors["adapter.w1"], requires_grad=True),
        b1=kernel.Tensor(tensors["adapter.b1"], requires_grad=True),
        w2=kernel.Tensor(tensors["adapter.w2"], requires_grad=True),
        b2=kernel.Tensor(tensors["adapter.b2"], requires_grad=True),
    )
    return encoder, adapter


def _flush_report(workdir: str, report: RoundReport) -> None:
    path = _round_paths(workdir, report.round_index)["report"]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(report.report_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, path)
    timing_path = os.path.join(workdir, "timings.json")
    timings = {}
    if os.path.exists(timing_path):
        with open(timing_path, encoding="utf-8") as f:
            timings = json.load(f)
    timings[f"round_{report.round_index}"] = report.wall_clock_seconds
    with open(timing_path, "w", encoding="utf-8") as f:
        json.dump(timings, f, sort_keys=True, indent=1)
        f.write("\n")


def _load_report(workdir: str, r: int) -> RoundReport:
    with open(_round_paths(workdir, r)["report"], encoding="utf-8") as f:
        d = json.load(f)
    return RoundReport(**d)


def _round_complete(workdir: str, r: int, config: PipelineConfig) -> bool:
    paths = _round_paths(workdir, r)
    needed = [paths["report"]]
    if config.knowledge or config.dpo:
        needed += [paths["policy"], paths["knowledge"]]
    needed += [paths["reranker"]]
    return all(os.path.exists(p) for p in needed)


def write_summary_csv(workdir: str, reports: list[RoundReport]) -> str:
    path = os.path.join(workdir, "summary.csv")
    fields = [
        "round_index", "pre_mean_reward", "pre_best_of_n", "post_mean_reward",
        "post_best_of_n", "test_ndcg5", "test_map5", "pair_count",
    ]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for rep in reports:
            d = asdict(rep)
            w.writerow([d[k] for k in fields])
    return path


def run_pipeline(config: PipelineConfig) -> RunResult:
    os.makedirs(config.workdir, exist_ok=True)
    world = build_world(config)
    needs_policy = config.knowledge or config.dpo

    policy = encoder = adapter = None
    reranker = None
    reports: list[RoundReport] = []

    # round 0: warm start + initial reranker + baseline metrics
    paths0 = _round_paths(config.workdir, 0)
    if _round_complete(config.workdir, 0, config):
        reports.append(_load_report(config.workdir, 0))
        reranker = load_reranker(paths0["reranker"])
        if needs_policy:
            policy = load_policy(paths0["policy"])
            encoder, adapter = _load_knowledge(paths0["knowledge"], world.vocab)
        log.info("round 0 restored from %s", config.workdir)
    else:
        t0 = time.monotonic()
        if needs_policy:
            policy = create_policy(
                world.vocab, PolicyConfig(), seed=derive_seed(config.seed, "policy-init")
            )
            train_lm(
                policy,
                _warmstart_corpus(world, config),
                epochs=config.warmstart_epochs,
                lr=config.warmstart_lr,
                batch_size=config.warmstart_batch,
                seed=derive_seed(config.seed, "warmstart"),
            )
            encoder = TextEncoder.create(
                world.vocab, config.d_text, seed=derive_seed(config.seed, "encoder")
            )
            adapter = Adapter.create(
                config.d_text, 64, config.d_feat, seed=derive_seed(config.seed, "adapter")
            )
        reranker, _ = _train_fresh_reranker(world, config, policy, encoder, adapter, 0)
        ndcg, mp = _test_metrics(world, config, reranker, policy, encoder, adapter)
        report = RoundReport(round_index=0, test_ndcg5=ndcg, test_map5=mp)
        report.wall_clock_seconds = time.monotonic() - t0
        save_reranker(reranker, paths0["reranker"])
        if needs_policy:
            save_policy(policy, paths0["policy"])
            _save_knowledge(paths0["knowledge"], encoder, adapter)
        _flush_report(config.workdir, report)
        reports.append(report)

    rounds = config.rounds if config.dpo else 0
    for r in range(1, rounds + 1):
        paths = _round_paths(config.workdir, r)
        if _round_complete(config.workdir, r, config):
            reports.append(_load_report(config.workdir, r))
            reranker = load_reranker(paths["reranker"])
            policy = load_policy(paths["policy"])
            encoder, adapter = _load_knowledge(paths["knowledge"], world.vocab)
            log.info("round %d restored", r)
            continue

        t0 = time.monotonic()
        reference = clone_policy(policy, trainable=False)

        responses = _generate_for_users(
            policy, world, world.rw_users, config, derive_seed(config.seed, "round", r, "gen")
        )
        table = _score_reward_users(reranker, adapter, encoder, world, responses)
        pre_mean, pre_best = _reward_stats(table)

        pairs, skipped_pairs = mine_pairs(table, responses, world.prompt_ids)
        if not pairs:
            raise RuntimeError(f"round {r}: no informative pairs mined")
        policy, curve = dpo_train(
            policy, reference, pairs, config.dpo_config(), seed=derive_seed(config.seed, "round", r, "dpo")
        )

        post_responses = _generate_for_users(
            policy, world, world.rw_users, config, derive_seed(config.seed, "round", r, "gen-post")
        )
        post_table = _score_reward_users(reranker, adapter, encoder, world, post_responses)
        post_mean, post_best = _reward_stats(post_table)

        if config.refresh_reranker:
            reranker, _ = _train_fresh_reranker(world, config, policy, encoder, adapter, r)

        ndcg, mp = _test_metrics(world, config, reranker, policy, encoder, adapter)

        report = RoundReport(
            round_index=r,
            pre_mean_reward=pre_mean,
            pre_best_of_n=pre_best,
            post_mean_reward=post_mean,
            post_best_of_n=post_best,
            test_ndcg5=ndcg,
            test_map5=mp,
            pair_count=len(pairs),
            skipped_users={"pair_mining": skipped_pairs, "reward_scoring": table.skipped_users},
            dpo_loss_curve=[[c["step"], c["loss"], c["margin"]] for c in curve],
        )
        report.wall_clock_seconds = time.monotonic() - t0
        save_reranker(reranker, paths["reranker"])
        save_policy(policy, paths["policy"])
        _save_knowledge(paths["knowledge"], encoder, adapter)
        _flush_report(config.workdir, report)
        reports.append(report)

    write_summary_csv(config.workdir, reports)
    return RunResult(
        reports=reports,
        workdir=config.workdir,
        policy=policy,
        reranker=reranker,
        encoder=encoder,
        adapter=adapter,
        world=world,
    )


ABLATION_ARMS = (
    ("backbone", {"knowledge": False, "dpo": False}),
    ("knowledge", {"knowledge": True, "dpo": False}),
    ("knowledge_dpo", {"knowledge": True, "dpo": True}),
)


def run_ablation(config: PipelineConfig) -> list[dict]:
    """Three arms sharing every seed; rows report final test metrics."""
    rows = []
    for name, toggles in ABLATION_ARMS:
        arm_cfg = replace(config, workdir=os.path.join(config.workdir, name), **toggles)
        result = run_pipeline(arm_cfg)
        final = result.reports[-1]
        rows.append(
            {
                "arm": name,
                "test_ndcg5": final.test_ndcg5,
                "test_map5": final.test_map5,
                "rounds": final.round_index,
            }
        )
    path = os.path.join(config.workdir, "ablation.csv")
    os.makedirs(config.workdir, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["arm", "test_ndcg5", "test_map5", "rounds"])
        w.writeheader()
        w.writerows(rows)
    return rows


def sweep_n(config: PipelineConfig, n_values=(5, 10, 15)) -> list[dict]:
    """Reward/latency trade-off across sample counts.

    Sample streams are addressed per (user, k), so smaller-N sample sets are
    prefixes of larger ones and max-of-N rewards are exactly monotone.
    """
    if not n_values:
        raise ValueError("sweep_n: empty n_values")
    if not config.knowledge:
        raise ValueError("sweep_n: reward scoring requires knowledge on")
    base = replace(config, dpo=False, rounds=1, workdir=os.path.join(config.workdir, "prep"))
    result = run_pipeline(base)
    world, policy = result.world, result.policy
    reranker, encoder, adapter = result.reranker, result.encoder, result.adapter

    rows = []
    gen_seed = derive_seed(config.seed, "round", 1, "gen")
    for n in n_values:
        cfg_n = replace(config, n_responses=n)
        t0 = time.monotonic()
        responses = _generate_for_users(policy, world, world.rw_users, cfg_n, gen_seed)
        gen_seconds = time.monotonic() - t0
        table = _score_reward_users(reranker, adapter, encoder, world, responses)
        _, best = _reward_stats(table)
        rows.append({"n": n, "max_of_n_reward": best, "gen_seconds": gen_seconds})

    path = os.path.join(config.workdir, "sweep_n.csv")
    os.makedirs(config.workdir, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["n", "max_of_n_reward", "gen_seconds"])
        w.writeheader()
        w.writerows(rows)
    return rows
