"""Adam optimizer over ndcore parameter tensors."""

import numpy as np


class AdamState:
    """Per-parameter first/second moments plus step count.

    Parameters are identified by node_id, so the same state object keeps
    working across training steps as long as the tensors are updated in
    place.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.node_id: np.zeros_like(p.values) for p in self.params}
        self.v = {p.node_id: np.zeros_like(p.values) for p in self.params}


def adam_step(state, grads):
    """One Adam update; grads maps node_id -> gradient (Tensor or array).

    Parameters with no gradient entry are treated as zero-gradient.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in state.params:
        g = grads.get(p.node_id)
        if g is None:
            continue
        g = g.values if hasattr(g, "values") else np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.values.shape}"
            )
        m = state.m[p.node_id]
        v = state.v[p.node_id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.values = p.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.params


class Adam:
    """Convenience wrapper: Adam(params).step(grads)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads):
        return adam_step(self.state, grads)
