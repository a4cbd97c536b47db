"""Adam optimizer with global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    When grad_clip > 0, gradients are rescaled so their joint L2 norm does
    not exceed the threshold before the moment update.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        grad_clip: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return total**0.5

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        self.step_count += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return norm

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([float(self.step_count)])}
        for name in self.params:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors[f"{prefix}/step"][0])
        for name in self.params:
            self.m[name] = tensors[f"{prefix}/m/{name}"].copy()
            self.v[name] = tensors[f"{prefix}/v/{name}"].copy()
