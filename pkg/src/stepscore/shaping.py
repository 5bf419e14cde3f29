"""Reward math for RL-style training on verified trajectories.

Pure functions over value inputs: mixing outcome and step rewards, forcing
the final step verdict to agree with the outcome, normalizing totals within a
rollout group, evaluating the clipped token-level objective, and the
two-factor derivation of the ternary reward scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .model import RewardValue, StepVerdict, VerdictSource

ZERO_VARIANCE_EPS = 1e-8

DEFAULT_BETA = 0.5
DEFAULT_CLIP_LOW = 0.2
DEFAULT_CLIP_HIGH = 0.28
DEFAULT_GROUP_SIZE = 4

BAYES_CELL_LABELS = {
    (1, 1): "strictly_correct",
    (0, 1): "correctable",
    (0, 0): "irrecoverable",
    (1, 0): "unassigned",
}


class EmptyRewards(ValueError):
    pass


class BetaOutOfRange(ValueError):
    pass


class GroupTooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyOutput(ValueError):
    pass


class InvalidIndicator(ValueError):
    pass


@dataclass(frozen=True)
class RewardBundle:
    """One trajectory's mixed reward: outcome, per-step rewards, and the total."""

    outcome: float
    prm_rewards: tuple[RewardValue, ...]
    beta: float
    total: float

    def __post_init__(self) -> None:
        expected = _mixed_total(self.outcome, self.prm_rewards, self.beta)
        if abs(self.total - expected) > 1e-12:
            raise ValueError(f"total {self.total} does not match the mixing formula ({expected})")


@dataclass(frozen=True)
class GroupAdvantages:
    totals: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.totals) != len(self.advantages):
            raise LengthMismatch("totals and advantages must align")


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = DEFAULT_CLIP_LOW
    eps_high: float = DEFAULT_CLIP_HIGH

    def __post_init__(self) -> None:
        if self.eps_low < 0 or self.eps_high < 0:
            raise ValueError("clip widths must be non-negative")


def _check_outcome(outcome: float) -> float:
    if float(outcome) not in (0.0, 1.0):
        raise InvalidIndicator(f"outcome must be 0 or 1, got {outcome!r}")
    return float(outcome)


def _mixed_total(outcome: float, rewards: Sequence[RewardValue], beta: float) -> float:
    mean = math.fsum(float(r) for r in rewards) / len(rewards)
    return (1.0 - beta) * outcome + beta * mean


def consistency_override(prm_final: RewardValue, outcome: float) -> RewardValue:
    """Force the final step reward to match the outcome when they disagree."""
    outcome = _check_outcome(outcome)
    if prm_final.value != outcome:
        return RewardValue(outcome)
    return prm_final


def mix_rewards(
    outcome: float,
    prm_rewards: Sequence[RewardValue],
    beta: float = DEFAULT_BETA,
) -> RewardBundle:
    """Interpolate the outcome reward with the mean step reward.

    This is the pure mixing formula; callers wanting the final-step override
    apply it to the verdict list first (shape_group does).
    """
    if not 0.0 <= beta <= 1.0:
        raise BetaOutOfRange(f"beta must lie in [0, 1], got {beta}")
    rewards = tuple(prm_rewards)
    if not rewards:
        raise EmptyRewards("need at least one step reward")
    outcome = _check_outcome(outcome)
    return RewardBundle(
        outcome=outcome,
        prm_rewards=rewards,
        beta=beta,
        total=_mixed_total(outcome, rewards, beta),
    )


def group_advantage(totals: Sequence[float]) -> GroupAdvantages:
    """Normalize totals within one rollout group (population statistics)."""
    values = tuple(float(t) for t in totals)
    if len(values) < 2:
        raise GroupTooSmall(f"group size must be >= 2, got {len(values)}")
    mean = math.fsum(values) / len(values)
    variance = math.fsum((v - mean) ** 2 for v in values) / len(values)
    std = math.sqrt(variance)
    if std < ZERO_VARIANCE_EPS:
        return GroupAdvantages(totals=values, advantages=tuple(0.0 for _ in values))
    return GroupAdvantages(totals=values, advantages=tuple((v - mean) / std for v in values))


def clipped_objective(
    token_ratios: Sequence[Sequence[float]],
    advantages: Sequence[float],
    clip: ClipConfig | None = None,
) -> float:
    """Value of the token-level clipped surrogate, averaged over all tokens.

    Each output's advantage is shared by all of its tokens; the asymmetric
    clip window widens the upper bound. Evaluation only, no gradients.
    """
    clip = clip if clip is not None else ClipConfig()
    if len(token_ratios) != len(advantages):
        raise LengthMismatch(
            f"{len(token_ratios)} outputs vs {len(advantages)} advantages"
        )
    if not token_ratios:
        raise EmptyOutput("need at least one output")
    lo, hi = 1.0 - clip.eps_low, 1.0 + clip.eps_high
    total = 0.0
    count = 0
    for ratios, adv in zip(token_ratios, advantages):
        if not ratios:
            raise EmptyOutput("every output needs at least one token ratio")
        for rho in ratios:
            clipped = min(max(rho, lo), hi)
            total += min(rho * adv, clipped * adv)
            count += 1
    return total / count


def bayes_reward(progress: int, info_gain: int, lam: float = 0.5) -> RewardValue | float:
    """Two-factor step reward: lam*progress + (1-lam)*info_gain.

    At lam=0.5 the image is the ternary scale and a RewardValue is returned;
    other weightings return the raw float. The (progress=1, info_gain=0) cell
    has no named meaning on the ternary scale (see BAYES_CELL_LABELS).
    """
    if progress not in (0, 1):
        raise InvalidIndicator(f"progress indicator must be 0 or 1, got {progress!r}")
    if info_gain not in (0, 1):
        raise InvalidIndicator(f"info gain indicator must be 0 or 1, got {info_gain!r}")
    value = lam * progress + (1.0 - lam) * info_gain
    if lam == 0.5:
        return RewardValue(value)
    return value


def bayes_cell_label(progress: int, info_gain: int) -> str:
    """Name of the (progress, info_gain) cell; 'unassigned' for the odd one out."""
    try:
        return BAYES_CELL_LABELS[(progress, info_gain)]
    except KeyError:
        raise InvalidIndicator(f"indicators must be 0 or 1, got {(progress, info_gain)!r}") from None


def shape_group(
    items: Sequence[tuple[Sequence[StepVerdict], float]],
    beta: float = DEFAULT_BETA,
) -> tuple[list[RewardBundle], GroupAdvantages]:
    """Shape one rollout group: override final verdicts, mix, then normalize.

    ``items`` pairs each trajectory's verdicts with its binary outcome reward
    (already computed by answer comparison). The override touches only the
    final verdict of each trajectory, before mixing.
    """
    if len(items) < 2:
        raise GroupTooSmall(f"group size must be >= 2, got {len(items)}")
    bundles: list[RewardBundle] = []
    for verdicts, outcome in items:
        if not verdicts:
            raise EmptyRewards("every trajectory needs at least one verdict")
        rewards = [v.reward for v in verdicts]
        rewards[-1] = consistency_override(rewards[-1], outcome)
        bundles.append(mix_rewards(outcome, rewards, beta))
    advantages = group_advantage([b.total for b in bundles])
    return bundles, advantages


def override_verdict(verdict: StepVerdict, outcome: float) -> StepVerdict:
    """Apply the consistency override to a verdict, marking the source if changed."""
    new_reward = consistency_override(verdict.reward, outcome)
    if new_reward.value == verdict.reward.value:
        return verdict
    return StepVerdict(
        step_index=verdict.step_index,
        reward=new_reward,
        rationale=verdict.rationale,
        source=VerdictSource.OVERRIDE,
    )
