"""Command-line entry points.

Subcommands mirror the stages: ingest, train-reranker, generate, score,
dpo-train, pipeline, ablation, sweep-n. Heavy lifting stays in the library
modules; this file only wires files and flags to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np


def _load_data_dir(path: str):
    from .dataio import ingest_jsonl

    return ingest_jsonl(
        os.path.join(path, "interactions.jsonl"), os.path.join(path, "catalog.jsonl")
    )


def cmd_ingest(args) -> int:
    from .dataio import ingest_jsonl, ingest_ml1m, write_catalog_jsonl, write_interactions_jsonl

    if args.format == "ml1m":
        interactions, profiles, catalog = ingest_ml1m(
            os.path.join(args.in_dir, "ratings.dat"),
            os.path.join(args.in_dir, "movies.dat"),
            os.path.join(args.in_dir, "users.dat"),
        )
    else:
        interactions, profiles, catalog = ingest_jsonl(
            os.path.join(args.in_dir, "interactions.jsonl"),
            os.path.join(args.in_dir, "catalog.jsonl"),
        )
    os.makedirs(args.out_dir, exist_ok=True)
    write_interactions_jsonl(os.path.join(args.out_dir, "interactions.jsonl"), interactions)
    write_catalog_jsonl(os.path.join(args.out_dir, "catalog.jsonl"), catalog)
    n_items = len({it.item_id for it in interactions})
    print(f"users={len(profiles)} items={n_items} interactions={len(interactions)}")
    return 0


def cmd_train_reranker(args) -> int:
    from .dataio import build_candidate_lists, split_by_user
    from .kernel import derive_seed
    from .knowledge import Adapter, TextEncoder, read_knowledge_cache
    from .policy import build_vocab
    from .rerankers import (
        RerankerConfig, create_reranker, evaluate, save_reranker, train_reranker, train_reranker_joint,
    )

    _, profiles, catalog = _load_data_dir(args.data)
    train_users, test_users = split_by_user(profiles, 0.9, derive_seed(args.seed, "split"))
    split_map = {u: "train" for u in train_users} | {u: "test" for u in test_users}
    lists = build_candidate_lists(profiles, seed=derive_seed(args.seed, "lists"), split_map=split_map)
    train_lists = [lists[u] for u in train_users if u in lists]
    test_lists = [lists[u] for u in test_users if u in lists]

    knowledge_on = args.knowledge == "on"
    n_items = 1 + max(max(cl.items) for cl in lists.values())
    cfg = RerankerConfig(
        kind=args.kind, d_feat=32 if knowledge_on else 0, n_items=n_items, n_users=1 + max(lists)
    )
    model = create_reranker(cfg, seed=args.seed)
    if knowledge_on:
        if not args.knowledge_cache:
            print("--knowledge on requires --knowledge-cache FILE", file=sys.stderr)
            return 2
        rows = read_knowledge_cache(args.knowledge_cache)
        texts = {int(r["user"]): r["text"] for r in rows}
        vocab = build_vocab(list(texts.values()))
        encoder = TextEncoder.create(vocab, seed=derive_seed(args.seed, "encoder"))
        adapter = Adapter.create(seed=derive_seed(args.seed, "adapter"))
        model, curve = train_reranker_joint(
            model, train_lists, texts, encoder, adapter, epochs=args.epochs, lr=args.lr, seed=args.seed
        )
    else:
        model, curve = train_reranker(model, train_lists, epochs=args.epochs, lr=args.lr, seed=args.seed)
    save_reranker(model, args.out)
    msg = f"final_loss={curve[-1]:.4f}"
    if test_lists and not knowledge_on:
        ndcg, mp = evaluate(model, test_lists)
        msg += f" test_ndcg5={ndcg:.4f} test_map5={mp:.4f}"
    print(msg)
    return 0


def cmd_generate(args) -> int:
    from .gateway import GenRequest, builtin_backend, generate, remote_backend, replay_backend

    if args.backend == "builtin":
        from .policy import load_policy

        backend = builtin_backend(load_policy(args.policy), seed=args.seed)
    elif args.backend == "remote":
        backend = remote_backend(args.endpoint, args.model, auth_env=args.auth_env, seed=args.seed)
    else:
        backend = replay_backend(args.fixture)

    prompts = []
    if args.prompt:
        prompts = [(0, args.prompt)]
    else:
        with open(args.prompts, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    prompts.append((int(rec["user"]), rec["prompt"]))

    with open(args.out, "w", encoding="utf-8") as f:
        for uid, prompt in prompts:
            resp = generate(
                backend,
                GenRequest(
                    prompt=prompt, n=args.n, temperature=args.temperature,
                    max_tokens=args.max_tokens, user_id=uid,
                ),
            )
            for k, text in enumerate(resp.texts):
                f.write(json.dumps({"user": uid, "k": k, "text": text}) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_score(args) -> int:
    from .dataio import build_candidate_lists, split_by_user
    from .kernel import derive_seed
    from .pipeline import _load_knowledge
    from .policy import load_policy
    from .reward import score_responses, write_score_table
    from .rerankers import load_reranker

    _, profiles, _ = _load_data_dir(args.data)
    train_users, test_users = split_by_user(profiles, 0.9, derive_seed(args.seed, "split"))
    split_map = {u: "train" for u in train_users} | {u: "test" for u in test_users}
    lists = build_candidate_lists(profiles, seed=derive_seed(args.seed, "lists"), split_map=split_map)

    reranker = load_reranker(args.reranker)
    policy = load_policy(args.policy)
    encoder, adapter = _load_knowledge(args.knowledge, policy.vocab)

    from .policy import ReasoningResponse

    responses: dict[int, list] = {}
    with open(args.responses, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                uid = int(rec["user"])
                responses.setdefault(uid, []).append(
                    ReasoningResponse(
                        user_id=uid, sample_index=int(rec["k"]), token_ids=(),
                        text=rec["text"], logprob_policy=0.0,
                    )
                )
    eval_lists = {u: lists[u] for u in responses if u in lists and lists[u].split == "train"}
    table = score_responses(reranker, adapter, encoder, responses, eval_lists)
    write_score_table(args.out, table)
    print(f"scored {len(table.rows)} users, skipped {table.skipped_users}")
    return 0


def cmd_dpo_train(args) -> int:
    from .dpo import DpoConfig, PreferencePair, dpo_train
    from .policy import EOS, clone_policy, load_policy, save_policy, tokenize, BOS

    policy = load_policy(args.policy)
    reference = clone_policy(policy, trainable=False)
    pairs = []
    with open(args.pairs, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            prompt = tuple([BOS] + tokenize(policy.vocab, rec["prompt"]))
            pairs.append(
                PreferencePair(
                    prompt_ids=prompt,
                    chosen_ids=tuple(tokenize(policy.vocab, rec["chosen"]) + [EOS]),
                    rejected_ids=tuple(tokenize(policy.vocab, rec["rejected"]) + [EOS]),
                    chosen_reward=float(rec["cr"]),
                    rejected_reward=float(rec["rr"]),
                    user_id=int(rec["user"]),
                )
            )
    cfg = DpoConfig(beta=args.beta, learning_rate=args.lr, epochs=args.epochs)
    policy, curve = dpo_train(policy, reference, pairs, cfg, seed=args.seed)
    save_policy(policy, args.out)
    final = curve[-1] if curve else {"loss": float("nan"), "margin": float("nan")}
    print(f"steps={len(curve)} final_loss={final['loss']:.5f} final_margin={final['margin']:.5f}")
    return 0


def _pipeline_config(args):
    from .pipeline import PipelineConfig, config_from_file

    if args.config:
        cfg = config_from_file(args.config)
    else:
        cfg = PipelineConfig()
    overrides = {}
    for name in ("seed", "workdir", "rounds", "n_responses", "reranker_kind"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    result = run_pipeline(_pipeline_config(args))
    for rep in result.reports:
        print(
            f"round {rep.round_index}: test_ndcg5={rep.test_ndcg5:.4f} "
            f"test_map5={rep.test_map5:.4f} pairs={rep.pair_count}"
        )
    print(f"reports in {result.workdir}")
    return 0


def cmd_ablation(args) -> int:
    from .pipeline import run_ablation

    rows = run_ablation(_pipeline_config(args))
    for row in rows:
        print(f"{row['arm']}: test_ndcg5={row['test_ndcg5']:.4f} test_map5={row['test_map5']:.4f}")
    return 0


def cmd_sweep_n(args) -> int:
    from .pipeline import sweep_n

    n_values = tuple(int(x) for x in args.n_values.split(","))
    rows = sweep_n(_pipeline_config(args), n_values)
    for row in rows:
        print(f"n={row['n']}: max_of_n_reward={row['max_of_n_reward']:.4f} gen_seconds={row['gen_seconds']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefrank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="convert raw data to the canonical JSONL layout")
    s.add_argument("--format", choices=("ml1m", "jsonl"), required=True)
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", dest="out_dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("train-reranker", help="train a list scorer on ingested data")
    s.add_argument("--kind", choices=("dlcm", "prm", "setrank"), required=True)
    s.add_argument("--knowledge", choices=("on", "off"), default="off")
    s.add_argument("--knowledge-cache", default="")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_reranker)

    s = sub.add_parser("generate", help="sample responses for prompts")
    s.add_argument("--backend", choices=("builtin", "remote", "replay"), default="builtin")
    s.add_argument("--policy", default="")
    s.add_argument("--endpoint", default="")
    s.add_argument("--model", default="")
    s.add_argument("--auth-env", default="")
    s.add_argument("--fixture", default="")
    s.add_argument("--prompt", default="")
    s.add_argument("--prompts", default="")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--temperature", type=float, default=0.8)
    s.add_argument("--max-tokens", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("score", help="reward responses with a trained reranker")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--reranker", required=True)
    s.add_argument("--knowledge", required=True, help="encoder+adapter checkpoint")
    s.add_argument("--policy", required=True, help="policy checkpoint (vocabulary source)")
    s.add_argument("--responses", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("dpo-train", help="preference-tune a policy on mined pairs")
    s.add_argument("--pairs", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--beta", type=float, default=0.01)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_dpo_train)

    for name, fn in (("pipeline", cmd_pipeline), ("ablation", cmd_ablation), ("sweep-n", cmd_sweep_n)):
        s = sub.add_parser(name)
        s.add_argument("--config", default="")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--workdir", default=None)
        s.add_argument("--rounds", type=int, default=None)
        s.add_argument("--n-responses", type=int, default=None)
        s.add_argument("--reranker-kind", choices=("dlcm", "prm", "setrank"), default=None)
        if name == "sweep-n":
            s.add_argument("--n-values", default="5,10,15")
        s.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.seterr(all="raise", under="ignore")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
