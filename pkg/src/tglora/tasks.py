from __future__ import annotations

from dataclasses import dataclass

LOSSES = {"mse": "rmse", "cross_entropy": "accuracy"}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    loss: str = "mse"
    weight: float = 1.0
    out_dim: int = 4

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"task {self.name}: unknown loss {self.loss!r}")
        if not self.weight > 0:
            raise ValueError(f"task {self.name}: weight must be positive")
        if self.out_dim < 1 or (self.loss == "cross_entropy" and self.out_dim < 2):
            raise ValueError(f"task {self.name}: bad output size {self.out_dim}")

    @property
    def metric(self) -> str:
        return LOSSES[self.loss]

    @property
    def lower_is_better(self) -> int:
        """1 when a lower metric is better (rmse), else 0."""
        return int(self.metric == "rmse")
