"""Engine for code-executing analysis agents scored step by step.

The pieces: isolated interpreter sandboxes with string-based context replay,
an environment-interacting step verifier emitting ternary rewards, test-time
scaling search strategies, reward shaping for group-relative training, and a
supervision-data pipeline.
"""

from .model import (
    REWARD_VALUES,
    ActionKind,
    FeedbackHistory,
    FileStat,
    RewardValue,
    Step,
    StepAction,
    StepVerdict,
    Task,
    TerminationReason,
    Trajectory,
    VerdictSource,
    history_prefix,
)
from .gateway import (
    ChatBackend,
    ChatMessage,
    CompletionConfig,
    HttpChatBackend,
    ScriptedBackend,
    ToolRegistry,
    ToolSpec,
    build_default_registry,
)
from .sandbox import (
    ExecutionContext,
    ExecutionResult,
    MiniLangBackend,
    SandboxLimits,
    SandboxService,
    ShimProcessBackend,
    Workspace,
)
from .verifier import StepVerifier, VerifierOutcome, VerifierSession
from .search import (
    AggregationMethod,
    SearchBudget,
    SearchRunner,
    ScoredTrajectory,
    majority_vote,
    rollout,
)
from .shaping import (
    ClipConfig,
    GroupAdvantages,
    RewardBundle,
    bayes_reward,
    clipped_objective,
    consistency_override,
    group_advantage,
    mix_rewards,
    shape_group,
)
from .pipeline import (
    AnnotatedStep,
    ErrorCategory,
    FilterStrategy,
    TrajectoryGroup,
    annotate_group,
    diversity_filter,
    merge_error_categories,
    sample_k,
)

__version__ = "0.1.0"

__all__ = [
    "REWARD_VALUES",
    "ActionKind",
    "AggregationMethod",
    "AnnotatedStep",
    "ChatBackend",
    "ChatMessage",
    "ClipConfig",
    "CompletionConfig",
    "ErrorCategory",
    "ExecutionContext",
    "ExecutionResult",
    "FeedbackHistory",
    "FileStat",
    "FilterStrategy",
    "GroupAdvantages",
    "HttpChatBackend",
    "MiniLangBackend",
    "RewardBundle",
    "RewardValue",
    "SandboxLimits",
    "SandboxService",
    "ScoredTrajectory",
    "ScriptedBackend",
    "SearchBudget",
    "SearchRunner",
    "ShimProcessBackend",
    "Step",
    "StepAction",
    "StepVerdict",
    "StepVerifier",
    "Task",
    "TerminationReason",
    "ToolRegistry",
    "ToolSpec",
    "Trajectory",
    "TrajectoryGroup",
    "VerdictSource",
    "VerifierOutcome",
    "VerifierSession",
    "Workspace",
    "annotate_group",
    "bayes_reward",
    "build_default_registry",
    "clipped_objective",
    "consistency_override",
    "diversity_filter",
    "group_advantage",
    "history_prefix",
    "majority_vote",
    "merge_error_categories",
    "mix_rewards",
    "rollout",
    "sample_k",
    "shape_group",
    "__version__",
]
