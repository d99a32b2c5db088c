from typing import NotRequired, TypedDict


class MetricsRow(TypedDict):
    global_step: int
    loss_value: float | None
    loss_reward: float | None
    loss_steps: float | None
    eval_mean_return: float | None
    eval_episodes: int | None
    epsilon: float
    lr: float


METRICS_COLUMNS: tuple[str, ...] = (
    "global_step",
    "loss_value",
    "loss_reward",
    "loss_steps",
    "eval_mean_return",
    "eval_episodes",
    "epsilon",
    "lr",
)


class OracleRow(TypedDict):
    variant: str
    dynamics: str
    episodes: int
    greedy_mean: float
    shortest_mean: float


class EvalRow(TypedDict):
    policy: str
    depth: int
    episodes: int
    mean_return: float
    oracle_mean: NotRequired[float]


class DepthSweepRow(TypedDict):
    d_test: int
    episodes: int
    mean_return: float


class VerifyRow(TypedDict):
    check: str
    passed: bool
    max_error: float
    detail: str


ORACLE_COLUMNS: tuple[str, ...] = ("variant", "dynamics", "episodes", "greedy_mean", "shortest_mean")
EVAL_COLUMNS: tuple[str, ...] = ("policy", "depth", "episodes", "mean_return", "oracle_mean")
DEPTH_SWEEP_COLUMNS: tuple[str, ...] = ("d_test", "episodes", "mean_return")
VERIFY_COLUMNS: tuple[str, ...] = ("check", "passed", "max_error", "detail")
