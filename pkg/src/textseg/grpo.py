"""Group-relative policy optimisation with a mean-DICE reward.

The objective minimised by :func:`grpo_step` is

    L_PT = -(1/G) sum_g min(rho_g A_g, clip(rho_g, 1-eps, 1+eps) A_g) + beta * KL(ref || new)

with ``rho_g`` a sequence-level probability ratio, ``A_g`` the group-normalised
reward, and the KL taken exactly over the categorical next-token distributions
at every state visited by the group (averaged over rollouts).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .errors import GroupSizeError, NumericalError, ShapeError, StateError, StructuralError, VocabularyError
from .masks import ClassMap, SemanticMask
from .policy import State, ToyPolicy, context_id
from .rrle import decode_rrle


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 24
    clip_eps: float = 1e-3
    kl_beta: float = 1e-4
    dice_eps: float = 1e-6
    std_eps: float = 1e-8
    learning_rate: float = 1e-6
    include_background: bool = True
    max_new_tokens: int = 64
    # "sampling": ratio against the policy that drew the group (one update per group,
    # so rho = 1 at the step). "reference": ratio against the frozen reference policy.
    ratio_baseline: Literal["sampling", "reference"] = "sampling"

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupSizeError("group_size must be >= 2")
        if self.clip_eps <= 0:
            raise StructuralError("clip_eps must be > 0")
        if self.kl_beta < 0:
            raise StructuralError("kl_beta must be >= 0")
        if self.ratio_baseline not in ("sampling", "reference"):
            raise StructuralError(f"unknown ratio_baseline {self.ratio_baseline!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GrpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise StructuralError(f"unknown GRPO config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "GrpoConfig":
        path = Path(path)
        if path.suffix == ".toml":
            import tomli

            d = tomli.loads(path.read_text())
            d = d.get("grpo", d)
        else:
            d = json.loads(path.read_text())
        return cls.from_dict(d)


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    text: str
    logprob_new: np.ndarray
    logprob_ref: np.ndarray
    reward: float = 0.0
    advantage: float | None = None

    def __post_init__(self):
        if len(self.logprob_new) != len(self.tokens) or len(self.logprob_ref) != len(self.tokens):
            raise ShapeError("log-prob arrays must match the token count")
        if not 0.0 <= self.reward <= 1.0:
            raise StructuralError(f"reward {self.reward} outside [0, 1]")


@dataclass(frozen=True)
class RolloutGroup:
    rollouts: tuple[Rollout, ...]
    gt_patch: SemanticMask | None = None
    context: int = 0

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise GroupSizeError("a group needs at least 2 rollouts")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    @property
    def advantages(self) -> np.ndarray:
        if any(r.advantage is None for r in self.rollouts):
            raise StateError("advantages have not been computed for this group")
        return np.array([r.advantage for r in self.rollouts])


# --- reward and advantage --------------------------------------------------


def dice_reward(
    pred: SemanticMask,
    gt: SemanticMask,
    cm: ClassMap,
    eps: float = 1e-6,
    include_background: bool = True,
) -> float:
    """Mean over classes of 2|P_c & G_c| / (|P_c| + |G_c| + eps)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    classes = [c for c in cm.ids if include_background or c != cm.background_id]
    if not classes:
        raise StructuralError("no classes to average the reward over")
    total = 0.0
    for c in classes:
        a = pred.data == c
        b = gt.data == c
        total += 2.0 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b) + eps)
    return total / len(classes)


def group_advantages(rewards: Sequence[float], std_eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / std with the population std; all zeros if the std is below ``std_eps``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupSizeError("group advantages need at least 2 rewards")
    mu = r.mean()
    sigma = math.sqrt(np.mean((r - mu) ** 2))
    if sigma < std_eps:
        return np.zeros_like(r)
    return (r - mu) / sigma


def with_advantages(group: RolloutGroup, std_eps: float = 1e-8) -> RolloutGroup:
    adv = group_advantages(group.rewards, std_eps)
    return replace(group, rollouts=tuple(replace(r, advantage=float(a)) for r, a in zip(group.rollouts, adv)))


# --- surrogate loss --------------------------------------------------------


def sequence_ratio(logprob_new: Sequence[float], logprob_ref: Sequence[float]) -> float:
    new = np.asarray(logprob_new, dtype=np.float64)
    ref = np.asarray(logprob_ref, dtype=np.float64)
    if new.shape != ref.shape:
        raise ShapeError(f"log-prob length mismatch {new.shape} vs {ref.shape}")
    return math.exp(new.sum() - ref.sum())


def clipped_term(rho: float, adv: float, eps: float) -> float:
    return min(rho * adv, min(max(rho, 1.0 - eps), 1.0 + eps) * adv)


def clipped_term_grad(rho: float, adv: float, eps: float) -> float:
    """d clipped_term / d rho. Exactly zero wherever the clip binds."""
    if adv > 0 and rho > 1.0 + eps:
        return 0.0
    if adv < 0 and rho < 1.0 - eps:
        return 0.0
    return adv


def grpo_loss(group: RolloutGroup, clip_eps: float) -> float:
    """Clipped surrogate with rho_g = pi_new(t_g) / pi_ref(t_g) from the stored log-probs."""
    adv = group.advantages
    terms = [
        clipped_term(sequence_ratio(r.logprob_new, r.logprob_ref), a, clip_eps)
        for r, a in zip(group.rollouts, adv)
    ]
    return -float(np.mean(terms))


# --- KL to the reference ---------------------------------------------------


def _check_vocab(a: ToyPolicy, b: ToyPolicy) -> None:
    if a.vocab_size != b.vocab_size or a.n_contexts != b.n_contexts or a.n_buckets != b.n_buckets:
        raise VocabularyError("policies do not share a vocabulary and state space")


def kl_penalty(policy_ref: ToyPolicy, policy_new: ToyPolicy, states: Sequence[State]) -> float:
    """Sum over ``states`` of the exact KL(ref || new) between next-token distributions."""
    _check_vocab(policy_ref, policy_new)
    total = 0.0
    for s in states:
        lp = policy_ref.log_distribution(s)
        lq = policy_new.log_distribution(s)
        total += float(np.sum(np.exp(lp) * (lp - lq)))
    return max(total, 0.0)


def kl_penalty_grad(policy_ref: ToyPolicy, policy_new: ToyPolicy, states: Sequence[State]) -> np.ndarray:
    _check_vocab(policy_ref, policy_new)
    grad = np.zeros(policy_new.n_params)
    for s in states:
        p = np.exp(policy_ref.log_distribution(s))
        q = np.exp(policy_new.log_distribution(s))
        policy_new.accumulate_logit_grad(grad, s, q - p)
    return grad


def sampled_kl(logprob_ref: Sequence[float], logprob_new: Sequence[float]) -> float:
    """Per-sequence KL estimate from log-probs alone, for policies without exact tables.

    Uses the non-negative ``exp(d) - d - 1`` estimator with d = log ref - log new,
    summed over tokens sampled from the new policy.
    """
    d = np.asarray(logprob_ref, dtype=np.float64) - np.asarray(logprob_new, dtype=np.float64)
    return float(np.sum(np.exp(d) - d - 1.0))


# --- rollouts --------------------------------------------------------------


RewardFn = Callable[[Sequence[int], str], float]


def rollout_rng(seed: int, group_index: int, rollout_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(group_index, rollout_index)))


def sample_group(
    policy: ToyPolicy,
    context: int,
    reward_fn: RewardFn,
    cfg: GrpoConfig,
    seed: int = 0,
    group_index: int = 0,
    reference: ToyPolicy | None = None,
    gt_patch: SemanticMask | None = None,
    jobs: int = 1,
) -> RolloutGroup:
    """Draw ``cfg.group_size`` sequences, score them and normalise the rewards."""
    reference = policy if reference is None else reference

    def one(g: int) -> Rollout:
        tokens = policy.sample(context, cfg.max_new_tokens, rollout_rng(seed, group_index, g))
        text = policy.tokenizer.decode(tokens) if policy.tokenizer is not None else ""
        return Rollout(
            tuple(tokens),
            text,
            policy.logprobs(context, tokens),
            reference.logprobs(context, tokens),
            float(reward_fn(tokens, text)),
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rollouts = tuple(pool.map(one, range(cfg.group_size)))
    else:
        rollouts = tuple(one(g) for g in range(cfg.group_size))
    return with_advantages(RolloutGroup(rollouts, gt_patch, context), cfg.std_eps)


def dice_reward_fn(gt_patch: SemanticMask, cm: ClassMap, cfg: GrpoConfig) -> RewardFn:
    """Reward a generated text by the mean DICE of its robust decode against the patch."""

    def reward(tokens, text: str) -> float:
        pred = decode_rrle(text, cm, gt_patch.height, gt_patch.width).mask
        return dice_reward(pred, gt_patch, cm, cfg.dice_eps, cfg.include_background)

    return reward


def rollout_group(
    policy: ToyPolicy,
    sample,
    cfg: GrpoConfig,
    cm: ClassMap,
    seed: int = 0,
    group_index: int = 0,
    reference: ToyPolicy | None = None,
    jobs: int = 1,
) -> RolloutGroup:
    """Rollouts for one instruction sample, rewarded against its ground-truth patch."""
    if policy.tokenizer is None:
        raise StructuralError("policy has no tokenizer")
    p = sample.patch
    gt = decode_rrle(sample.target_rrle, cm, p.height, p.width).mask
    ctx = context_id(sample.context_key, policy.n_contexts)
    return sample_group(
        policy, ctx, dice_reward_fn(gt, cm, cfg), cfg, seed, group_index, reference, gt, jobs
    )


# --- optimisation ----------------------------------------------------------


def group_states(policy: ToyPolicy, group: RolloutGroup) -> list[State]:
    return [s for r in group.rollouts for s in policy.states(group.context, list(r.tokens))]


def pt_loss_and_grad(
    policy: ToyPolicy, reference: ToyPolicy, group: RolloutGroup, cfg: GrpoConfig
) -> tuple[float, np.ndarray, dict]:
    """Post-training loss at ``policy``'s parameters and its exact gradient."""
    adv = group.advantages
    G = len(group.rollouts)
    grad = np.zeros(policy.n_params)
    surrogate = 0.0
    clipped = 0
    for r, a in zip(group.rollouts, adv):
        tokens = list(r.tokens)
        lp = policy.logprobs(group.context, tokens)
        denom = r.logprob_new if cfg.ratio_baseline == "sampling" else r.logprob_ref
        rho = sequence_ratio(lp, denom)
        surrogate += clipped_term(rho, a, cfg.clip_eps)
        d = clipped_term_grad(rho, a, cfg.clip_eps)
        if d == 0.0:
            clipped += a != 0
            continue
        grad -= (d * rho / G) * policy.sequence_logprob_grad(group.context, tokens)
    states = group_states(policy, group)
    kl = kl_penalty(reference, policy, states) / G
    if cfg.kl_beta:
        grad += (cfg.kl_beta / G) * kl_penalty_grad(reference, policy, states)
    loss = -surrogate / G + cfg.kl_beta * kl
    return loss, grad, {"grpo_loss": -surrogate / G, "kl": kl, "clipped": int(clipped)}


def grpo_step(
    policy: ToyPolicy, reference: ToyPolicy, group: RolloutGroup, cfg: GrpoConfig
) -> tuple[ToyPolicy, dict]:
    """One gradient-descent step on the KL-penalised clipped objective."""
    loss, grad, stats = pt_loss_and_grad(policy, reference, group, cfg)
    if not (np.all(np.isfinite(grad)) and math.isfinite(loss)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NumericalError(
            f"non-finite GRPO gradient: loss={loss}, {bad.size} bad entries, first at {bad[:5].tolist()}"
        )
    stats = {"loss": loss, "mean_reward": float(group.rewards.mean()), **stats}
    return policy.with_params(policy.params - cfg.learning_rate * grad), stats


@dataclass
class GrpoHistory:
    steps: list[dict] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps])


def train_grpo(
    policy: ToyPolicy,
    prompts: Sequence[tuple[int, RewardFn]],
    cfg: GrpoConfig,
    steps: int,
    seed: int = 0,
    reference: ToyPolicy | None = None,
    on_step: Callable[[int, ToyPolicy, dict], dict | None] | None = None,
) -> tuple[ToyPolicy, GrpoHistory]:
    """Run ``steps`` updates, one fresh group per prompt per step.

    The reference defaults to a frozen copy of the starting policy and is never
    updated. ``on_step`` may return extra metrics to record for the step.
    """
    reference = policy.copy() if reference is None else reference
    history = GrpoHistory()
    group_index = 0
    for step in range(steps):
        for ctx, reward_fn in prompts:
            group = sample_group(policy, ctx, reward_fn, cfg, seed, group_index, reference)
            group_index += 1
            policy, stats = grpo_step(policy, reference, group, cfg)
            stats = {"step": step, "context": ctx, **stats}
            if on_step is not None:
                stats.update(on_step(step, policy, stats) or {})
            history.steps.append(stats)
    return policy, history


def config_dict(cfg: GrpoConfig) -> dict:
    return asdict(cfg)
