"""Preference-pair mining and direct preference optimization of the policy.

Per user, the highest- and lowest-reward responses form one (chosen, rejected)
pair; the policy is then pushed to widen its log-ratio margin over a frozen
reference copy. Loss uses the numerically stable softplus(-margin) form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import NonFiniteError, Rng, Tensor
from .policy import BOS, ContextOverflowError, PolicyModel, sequence_logprob, sequence_logprob_t

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreferencePair:
    prompt_ids: tuple[int, ...]
    chosen_ids: tuple[int, ...]
    rejected_ids: tuple[int, ...]
    chosen_reward: float
    rejected_reward: float
    user_id: int = 0

    def __post_init__(self):
        if not self.chosen_reward > self.rejected_reward:
            raise ValueError(
                f"pair for user {self.user_id}: chosen reward {self.chosen_reward} "
                f"not strictly above rejected {self.rejected_reward}"
            )
        if self.chosen_ids == self.rejected_ids:
            raise ValueError(f"pair for user {self.user_id}: identical sequences")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.01
    learning_rate: float = 5e-5
    grad_accumulation: int = 8
    batch_size: int = 2
    epochs: int = 3

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("grad_accumulation", "batch_size", "epochs"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be >= 1")


def mine_pairs(table, responses_by_user, prompts_by_user=None):
    """One pair per user: argmax vs argmin reward, ties to the lowest index.

    Users whose rewards are all equal (or whose extremes decode to the same
    token sequence) carry no preference signal and are skipped. Returns
    (pairs, skipped_count).
    """
    if not table.rows:
        raise ValueError("mine_pairs: empty score table")
    pairs = []
    skipped = 0
    for uid in sorted(table.rows):
        rows = table.rows[uid]
        chosen_idx, chosen_r = rows[0]
        min_r = min(r for _, r in rows)
        if chosen_r == min_r:
            skipped += 1
            continue
        rejected_idx = min(i for i, r in rows if r == min_r)
        by_index = {r.sample_index: r for r in responses_by_user[uid]}
        chosen, rejected = by_index[chosen_idx], by_index[rejected_idx]
        if chosen.token_ids == rejected.token_ids:
            skipped += 1
            continue
        prompt = tuple(prompts_by_user[uid]) if prompts_by_user else (BOS,)
        pairs.append(
            PreferencePair(
                prompt_ids=prompt,
                chosen_ids=tuple(chosen.token_ids),
                rejected_ids=tuple(rejected.token_ids),
                chosen_reward=chosen_r,
                rejected_reward=min_r,
                user_id=uid,
            )
        )
    if skipped:
        log.info("mine_pairs: skipped %d users with no informative pair", skipped)
    return pairs, skipped


def dpo_loss(
    policy: PolicyModel, reference: PolicyModel, pair: PreferencePair, beta: float = 0.01
) -> tuple[Tensor, float]:
    """softplus(-margin) where margin = beta * (policy log-ratio gap over the
    reference). Reference terms are constants; gradients reach only the policy."""
    try:
        lp_pol_c = sequence_logprob_t(policy, pair.prompt_ids, pair.chosen_ids)
        lp_pol_r = sequence_logprob_t(policy, pair.prompt_ids, pair.rejected_ids)
        ref_gap = sequence_logprob(reference, pair.prompt_ids, pair.chosen_ids) - sequence_logprob(
            reference, pair.prompt_ids, pair.rejected_ids
        )
    except ContextOverflowError as exc:
        raise ContextOverflowError(f"pair for user {pair.user_id}: {exc}") from exc
    gap = kernel.add(kernel.add(lp_pol_c, kernel.mul(lp_pol_r, -1.0)), -ref_gap)
    margin = kernel.mul(gap, beta)
    loss = kernel.softplus(kernel.mul(margin, -1.0))
    return loss, float(margin.data)


def dpo_train(
    policy: PolicyModel,
    reference: PolicyModel,
    pairs: list[PreferencePair],
    config: DpoConfig | None = None,
    seed: int = 0,
) -> tuple[PolicyModel, list[dict]]:
    """Optimizer steps fire every grad_accumulation micro-batches (mean grads).

    Returns the updated policy and a per-step curve of mean loss and margin.
    The reference model is read-only throughout.
    """
    if not pairs:
        raise ValueError("dpo_train: no pairs")
    config = config or DpoConfig()
    state = kernel.OptimState(learning_rate=config.learning_rate)
    curve: list[dict] = []

    window_losses: list[float] = []
    window_margins: list[float] = []

    def flush_window():
        if not window_losses:
            return
        n = len(window_losses)
        grads = {k: g / n for k, g in kernel.collect_grads(policy.params).items()}
        kernel.opt_step(policy.params, grads, state)
        curve.append(
            {
                "step": len(curve) + 1,
                "loss": float(np.mean(window_losses)),
                "margin": float(np.mean(window_margins)),
            }
        )
        kernel.zero_grads(policy.params)
        window_losses.clear()
        window_margins.clear()

    kernel.zero_grads(policy.params)
    for epoch in range(config.epochs):
        order = Rng(seed, "dpo-order", epoch).permutation(len(pairs))
        micro_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[j] for j in order[start : start + config.batch_size]]
            for pair in batch:
                try:
                    loss, margin = dpo_loss(policy, reference, pair, config.beta)
                    loss.backward()
                except (NonFiniteError, FloatingPointError) as exc:
                    raise FloatingPointError(
                        f"non-finite DPO loss for user {pair.user_id} (epoch {epoch}): {exc}"
                    ) from exc
                window_losses.append(float(loss.data))
                window_margins.append(margin)
            micro_batches += 1
            if micro_batches % config.grad_accumulation == 0:
                flush_window()
        flush_window()
    return policy, curve


def write_pairs_jsonl(path: str, pairs: list[PreferencePair], vocab) -> None:
    from .policy import detokenize

    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "user": p.user_id,
                        "prompt": detokenize(vocab, p.prompt_ids),
                        "chosen": detokenize(vocab, p.chosen_ids),
                        "rejected": detokenize(vocab, p.rejected_ids),
                        "cr": p.chosen_reward,
                        "rr": p.rejected_reward,
                    }
                )
                + "\n"
            )
