"""AdamW with global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def decays(name: str) -> bool:
    """Gains, biases and the gate bias are not decayed."""
    last = name.rsplit(".", 1)[-1]
    return not (name.endswith(".b") or last.startswith("norm") or last == "b1")


@dataclass
class AdamW:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """In-place update; returns the pre-clip global gradient norm."""
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = min(1.0, self.clip_norm / norm) if self.clip_norm and norm > 0 else 1.0
        self.step += 1
        c1 = 1 - self.beta1 ** self.step
        c2 = 1 - self.beta2 ** self.step
        for name in sorted(grads):
            g = grads[name] * scale
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = params[name]
            if self.weight_decay and decays(name):
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.step], dtype=np.float64)}
        for name in sorted(self.m):
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out

    def load_state(self, blobs: dict[str, np.ndarray]) -> None:
        self.step = int(blobs["adam.step"][0])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in blobs.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in blobs.items() if k.startswith("adam.v.")}
