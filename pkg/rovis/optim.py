"""AdamW with per-group learning-rate multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .tensor import Parameter


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-decay Adam update. Returns (param, m, v); step is 1-based."""
    param = param * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class ParamGroup:
    name: str
    params: List[Parameter]
    lr_multiplier: float = 1.0
    weight_decay: bool = True


@dataclass
class AdamW:
    groups: List[ParamGroup]
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped_steps: int = 0
    _moments: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def parameters(self) -> List[Parameter]:
        return [p for group in self.groups for p in group.params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self, lr: Optional[float] = None) -> bool:
        """Apply one update. Non-finite gradients skip the whole step."""
        base_lr = self.lr if lr is None else lr
        for p in self.parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.skipped_steps += 1
                logger.warning(f"Skipping optimizer step {self.step_count + 1}: non-finite gradient")
                return False

        self.step_count += 1
        for group in self.groups:
            group_lr = base_lr * group.lr_multiplier
            decay = self.weight_decay if group.weight_decay else 0.0
            for p in group.params:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                m, v = self._moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                p.data, m, v = adamw_update(
                    p.data, grad, m, v, self.step_count, group_lr, decay, self.beta1, self.beta2, self.eps
                )
                self._moments[id(p)] = (m, v)
        return True
