"""Layers assembled from the autodiff primitives.

Recurrent cells are unrolled explicitly per timestep; there are no
fused kernels. All weights are float64 Tensors with requires_grad=True.
"""

import numpy as np

from .tensor import Tensor, concat, matmul, mul, sigmoid, slice_, tanh


def xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """y = x @ W + b, with x a vector or a stack of row vectors."""

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = Tensor(xavier(rng, in_dim, out_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return matmul(x, self.W) + self.b

    def params(self):
        return [self.W, self.b]


class LstmCell:
    """Single LSTM cell; gate order i, f, g, o. Forget bias starts at 1."""

    def __init__(self, in_dim, hidden, rng):
        self.in_dim = in_dim
        self.hidden = hidden
        self.W = Tensor(
            xavier(rng, in_dim + hidden, 4 * hidden), requires_grad=True
        )
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def init_state(self):
        h = Tensor(np.zeros(self.hidden))
        c = Tensor(np.zeros(self.hidden))
        return h, c

    def step(self, x, h, c):
        z = matmul(concat(x, h), self.W) + self.b
        H = self.hidden
        i = sigmoid(slice_(z, 0, H))
        f = sigmoid(slice_(z, H, 2 * H))
        g = tanh(slice_(z, 2 * H, 3 * H))
        o = sigmoid(slice_(z, 3 * H, 4 * H))
        c_new = mul(f, c) + mul(i, g)
        h_new = mul(o, tanh(c_new))
        return h_new, c_new

    def params(self):
        return [self.W, self.b]


def run_lstm(cell, inputs):
    """Unroll over a list of input vectors; returns (outputs, final h)."""
    h, c = cell.init_state()
    outputs = []
    for x in inputs:
        h, c = cell.step(x, h, c)
        outputs.append(h)
    return outputs, h


def bilstm_final(fwd_cell, bwd_cell, inputs):
    """Concatenated final hidden states of a forward and a backward pass."""
    _, hf = run_lstm(fwd_cell, inputs)
    _, hb = run_lstm(bwd_cell, list(reversed(inputs)))
    return concat(hf, hb)


class ParamGroup:
    """Named parameter registry shared by the models and the optimizer."""

    def __init__(self):
        self._params = {}

    def register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = tensor
        return tensor

    def register_layer(self, prefix, layer):
        for i, p in enumerate(layer.params()):
            self.register(f"{prefix}.{i}", p)
        return layer

    def named(self):
        return dict(self._params)

    def tensors(self):
        return list(self._params.values())

    def state_arrays(self):
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays):
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.values.shape:
                raise ValueError(
                    f"parameter '{name}' shape {arr.shape} != expected {t.values.shape}"
                )
            t.values = arr
