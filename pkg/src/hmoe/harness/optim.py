"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from ..numkernel import Param, njit

if njit is not None:

    @njit(cache=True)
    def _adam_kernel(w, g, m, v, b1, b2, step, c2, eps):
        for i in range(w.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            w[i] -= step * mi / (np.sqrt(vi / c2) + eps)


class Adam:
    def __init__(
        self,
        params: list[Param],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        # Validate everything first so a bad gradient leaves parameters untouched.
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {p.name}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr / c1
        for p in self.params:
            m, v, g = self.m[p.name], self.v[p.name], p.grad
            if njit is not None and p.data.flags.c_contiguous and g.flags.c_contiguous:
                _adam_kernel(p.data.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), b1, b2, step, c2, self.eps)
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= step * m / denom

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([float(self.t)])}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["step"][0])
        for name in self.m:
            self.m[name] = np.array(state[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v/{name}"], dtype=np.float64)
