"""Uncertainty-driven pose selection.

A view's epistemic uncertainty is the summed squared reconstruction error of
its normalized image. While the uncertainty stays above a calibrated
threshold the loop defers the anomaly decision and re-orients the object;
once a view falls below the threshold (or the action budget runs out) the
decision is made at the best view seen. The default selection strategy
spreads probes around the pose circle (max-min circular distance), which
needs no model of unobserved poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError, PoseExhaustedError, ShapeError
from .metrics import anomaly_map
from .simulator import K_POSES, Observation, Pose
from .tensor import no_grad

STRATEGIES = ("dispersion", "greedy-neighbor", "random")


@dataclass
class PolicyConfig:
    tau: float                      # uncertainty threshold, calibrated on training errors
    score_tau: float                # image-score threshold for the anomaly decision
    budget: int = 3                 # max re-orientation actions
    n_poses: int = K_POSES
    strategy: str = "dispersion"
    seed: int = 0                   # drives the random strategy only

    def validate(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        # budget 0 is the degenerate static baseline: observe once, decide.
        if not 0 <= self.budget <= self.n_poses - 1:
            raise ParameterError(f"budget must lie in [0, {self.n_poses - 1}], got {self.budget}")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")


@dataclass
class UncertaintyRecord:
    pose: int
    u: float
    map_scores: np.ndarray
    image_score: float
    x_norm: np.ndarray
    x_hat: np.ndarray


@dataclass
class Trajectory:
    records: list[UncertaintyRecord] = field(default_factory=list)
    converged: bool = False
    budget_exhausted: bool = False
    decision: Optional[UncertaintyRecord] = None
    anomalous: Optional[bool] = None
    error: Optional[str] = None

    @property
    def poses(self) -> list[int]:
        return [r.pose for r in self.records]


def uncertainty(x_norm: np.ndarray, x_hat: np.ndarray) -> float:
    """Summed squared pixel error between the normalized input and its reconstruction."""
    if x_norm.shape != x_hat.shape:
        raise ShapeError(f"uncertainty inputs differ: {x_norm.shape} vs {x_hat.shape}")
    d = np.asarray(x_norm, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    return float(np.sum(d * d))


def calibrate_threshold(errors, percentile: float = 0.95, margin: float = 1.5) -> float:
    """margin x linearly-interpolated empirical percentile of the errors."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ParameterError("cannot calibrate a threshold from an empty error list")
    if not 0.0 < percentile < 1.0:
        raise ParameterError(f"percentile must lie in (0, 1), got {percentile}")
    if margin < 1.0:
        raise ParameterError(f"margin must be >= 1, got {margin}")
    return float(margin * np.quantile(errors, percentile, method="linear"))


def _circular_distance(a: int, b: int, k: int) -> int:
    d = abs(a - b) % k
    return min(d, k - d)


def select_next_pose(
    visited: list[int],
    cfg: PolicyConfig,
    u_values: Optional[list[float]] = None,
    rng: Optional[np.random.Generator] = None,
) -> int:
    """Choose the next pose among the unvisited candidates.

    dispersion: maximize the minimum circular distance to every visited pose.
    greedy-neighbor: closest unvisited pose to the current minimum-U pose.
    random: seeded uniform draw. All ties break toward the lowest pose index.
    """
    k = cfg.n_poses
    unvisited = [p for p in range(k) if p not in visited]
    if not unvisited:
        raise PoseExhaustedError("all candidate poses have been visited")

    if cfg.strategy == "dispersion":
        def key(p):
            return (min(_circular_distance(p, q, k) for q in visited), -p)

        return max(unvisited, key=key)

    if cfg.strategy == "greedy-neighbor":
        if not u_values or len(u_values) != len(visited):
            raise ParameterError("greedy-neighbor needs one U value per visited pose")
        best = visited[int(np.argmin(u_values))]
        return min(unvisited, key=lambda p: (_circular_distance(p, best, k), p))

    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return int(rng.choice(np.array(unvisited)))


def run_active_loop(
    scene_access: Callable[[int], Observation],
    model,
    cfg: PolicyConfig,
    initial_pose: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Observe, score, and re-orient until confident or out of budget.

    One render per step; at most budget+1 renders. The decision record is the
    converged view or, after exhaustion, the minimum-U view (lowest pose index
    on ties); `anomalous` compares its image score against score_tau.
    """
    cfg.validate()
    traj = Trajectory()
    pose = int(initial_pose)

    for step in range(cfg.budget + 1):
        try:
            obs = scene_access(pose)
        except Exception as exc:  # environment failure is data, not a crash
            traj.error = f"pose {pose}: {exc}"
            break
        with no_grad():
            x_norm, x_hat, _, _ = model.forward(obs.image)
        xn, xh = x_norm.numpy(), x_hat.numpy()
        u = uncertainty(xn, xh)
        am = anomaly_map(xn, xh)
        traj.records.append(
            UncertaintyRecord(pose=pose, u=u, map_scores=am.scores, image_score=am.image_score, x_norm=xn, x_hat=xh)
        )
        if u < cfg.tau:
            traj.converged = True
            traj.decision = traj.records[-1]
            break
        if step == cfg.budget:
            traj.budget_exhausted = True
            break
        pose = select_next_pose(traj.poses, cfg, u_values=[r.u for r in traj.records], rng=rng)

    if traj.decision is None and traj.records:
        traj.decision = min(traj.records, key=lambda r: (r.u, r.pose))
    if traj.decision is not None:
        traj.anomalous = bool(traj.decision.image_score > cfg.score_tau)
    return traj
