"""Episode records and success-rate metrics with path-length weighting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class EpisodeRecord:
    task_type: str
    timesteps: list = field(default_factory=list)  # (m, action, success, slot)
    satisfied: int = 0
    total: int = 1
    pred_len: int = 0
    expert_len: int = 1
    failures: int = 0

    @property
    def task_success(self):
        return 1.0 if self.satisfied == self.total else 0.0

    @property
    def goal_cond(self):
        return self.satisfied / self.total

    def plw(self, score):
        # ratio first: it is exactly 1.0 when pred_len <= expert_len, so
        # the PLW <= raw identity holds bitwise
        return score * (self.expert_len / max(self.expert_len, self.pred_len))


@dataclass
class MetricsReport:
    task: float = 0.0
    goal_cond: float = 0.0
    plw_task: float = 0.0
    plw_goal_cond: float = 0.0
    per_type: dict = field(default_factory=dict)
    n_episodes: int = 0

    def to_dict(self):
        return {
            "task": self.task, "goal_cond": self.goal_cond,
            "plw_task": self.plw_task, "plw_goal_cond": self.plw_goal_cond,
            "per_type": self.per_type, "n_episodes": self.n_episodes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self):
        lines = [
            f"{'metric':<16}{'score':>8}",
            f"{'Task':<16}{self.task:>8.2f}  ({self.plw_task:.2f})",
            f"{'Goal-Cond':<16}{self.goal_cond:>8.2f}  ({self.plw_goal_cond:.2f})",
            "",
            f"{'task type':<14}{'Task':>8}{'Goal-Cond':>12}{'n':>5}",
        ]
        for name, row in sorted(self.per_type.items()):
            lines.append(f"{name:<14}{row['task']:>8.2f}{row['goal_cond']:>12.2f}"
                         f"{row['n']:>5}")
        return "\n".join(lines)


def compute_metrics(records):
    """Aggregate EpisodeRecords into percentage scores."""
    if not records:
        return MetricsReport()
    task = sum(r.task_success for r in records)
    gc = sum(r.goal_cond for r in records)
    pt = sum(r.plw(r.task_success) for r in records)
    pg = sum(r.plw(r.goal_cond) for r in records)
    n = len(records)
    per_type = {}
    for r in records:
        row = per_type.setdefault(r.task_type,
                                  {"task": 0.0, "goal_cond": 0.0, "n": 0})
        row["task"] += r.task_success
        row["goal_cond"] += r.goal_cond
        row["n"] += 1
    for row in per_type.values():
        row["task"] = 100.0 * row["task"] / row["n"]
        row["goal_cond"] = 100.0 * row["goal_cond"] / row["n"]
    return MetricsReport(
        task=100.0 * task / n, goal_cond=100.0 * gc / n,
        plw_task=100.0 * pt / n, plw_goal_cond=100.0 * pg / n,
        per_type=per_type, n_episodes=n)
