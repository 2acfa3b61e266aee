"""AdamW optimizer and the warmup + cosine learning-rate schedule.

Decoupled weight decay is applied only to matrices (ndim >= 2); gains,
biases, and other vectors decay at 0.  Parameter groups carry a rate
multiplier so post-training can run the backbone slower than the fresh
branch without a second optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup from zero, then cosine decay to zero.

    rate(s) = base * (s + 1) / warmup                 for s < warmup
            = base * 0.5 * (1 + cos(pi * u))          otherwise,

    with u = (s - warmup) / max(1, total - warmup) in [0, 1].
    """

    base_rate: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} outside "
                f"[0, {self.total_steps}]"
            )
        if self.base_rate < 0:
            raise ValueError(f"base_rate must be >= 0, got {self.base_rate}")

    def rate_at(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise ValueError(
                f"step {step} outside schedule range [0, {self.total_steps})"
            )
        if step < self.warmup_steps:
            return self.base_rate * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        u = (step - self.warmup_steps) / span
        return self.base_rate * 0.5 * (1.0 + math.cos(math.pi * u))


@dataclass
class ParamGroup:
    """Named parameters updated at `multiplier` times the schedule rate."""

    params: list[tuple[str, Tensor]]
    multiplier: float = 1.0


class AdamW:
    """AdamW with per-parameter first/second moments and step counts.

    Moments are keyed by parameter name, so the update set can be
    reconfigured mid-run (freeze/unfreeze) without losing state, and the
    whole state dict round-trips through checkpoints.
    """

    def __init__(
        self,
        groups: list[ParamGroup],
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
        state: dict | None = None,
    ):
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # name -> {"m": array, "v": array, "t": int}
        self.state: dict[str, dict] = state if state is not None else {}
        self._check_unique_names()

    def _check_unique_names(self) -> None:
        names = [name for g in self.groups for name, _ in g.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names across groups")

    def reconfigure(self, groups: list[ParamGroup]) -> None:
        """Swap the update set (e.g. at a freeze boundary), keeping moments."""
        self.groups = list(groups)
        self._check_unique_names()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, p) for g in self.groups for name, p in g.params]

    def step(self, rate: float) -> None:
        """One decoupled-AdamW update from the gradients stored on the
        parameters.  A parameter with no gradient this step still decays
        its moments' freshness (t advances only when updated, so an
        untouched parameter is bit-identical afterwards when rate or its
        gradient is zero and decay is zero).
        """
        b1, b2 = self.betas
        for group in self.groups:
            lr = rate * group.multiplier
            for name, p in group.params:
                g = p.grad
                if g is None:
                    g = np.zeros_like(p.data)
                st = self.state.get(name)
                if st is None:
                    st = {
                        "m": np.zeros_like(p.data),
                        "v": np.zeros_like(p.data),
                        "t": 0,
                    }
                    self.state[name] = st
                st["t"] += 1
                t = st["t"]
                st["m"] = b1 * st["m"] + (1.0 - b1) * g
                st["v"] = b2 * st["v"] + (1.0 - b2) * np.square(g)
                m_hat = st["m"] / (1.0 - b1**t)
                v_hat = st["v"] / (1.0 - b2**t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
                if self.weight_decay and p.data.ndim >= 2:
                    update = update + self.weight_decay * p.data
                p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()
