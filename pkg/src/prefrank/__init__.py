"""Preference-ranked response tuning for list recommenders.

The package is organised around one loop: sample reasoning responses from a
small language model, reward each response by how much it helps a trained
reranker order a user's candidate list, mine best/worst response pairs, and
preference-tune the policy on them.

Subpackages and modules:

- ``kernel``: float64 tensors with reverse-mode gradients, counter-based
  random streams, the optimizer, and checkpoint files.
- ``dataio``: ingestion, user profiles, candidate lists, synthetic worlds.
- ``rerankers``: the three list scorers (dlcm, prm, setrank) and training.
- ``knowledge``: prompt templates, text encoder, and the feature adapter.
- ``policy``: tokenizer, the small transformer LM, sampling, LM training.
- ``gateway``: builtin / remote / replay generation backends.
- ``reward``: list metrics and response scoring.
- ``dpo``: preference pairs, the DPO loss, and the tuning loop.
- ``pipeline``: end-to-end orchestration, ablations, and the N sweep.
"""

from . import dataio, dpo, gateway, kernel, knowledge, pipeline, policy, rerankers, reward
from .kernel import Rng, Tensor, derive_seed
from .pipeline import PipelineConfig, run_ablation, run_pipeline, sweep_n

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "Rng",
    "Tensor",
    "dataio",
    "derive_seed",
    "dpo",
    "gateway",
    "kernel",
    "knowledge",
    "pipeline",
    "policy",
    "rerankers",
    "reward",
    "run_ablation",
    "run_pipeline",
    "sweep_n",
    "__version__",
]
