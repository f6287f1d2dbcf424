"""Recurrent cells (simple RNN, LSTM, GRU, convolutional GRU) and unrolling.

Every cell is written in terms of the recorded tensor operations, so
backpropagation through time falls out of :func:`rfcn.tensor.backward`
applied to an unrolled sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class CellState:
    h: Tensor
    c: Tensor | None = None


class _ParamsMixin:
    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)]

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)}


def _param(data, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


# --- simple RNN ---------------------------------------------------------------


@dataclass
class SimpleRnnParams(_ParamsMixin):
    theta: Tensor
    theta_x: Tensor
    theta_y: Tensor
    activation: str = "tanh"

    def __post_init__(self):
        n = self.theta.shape[0]
        if self.theta.shape != (n, n):
            raise DimensionError(f"recurrent matrix must be square, got {self.theta.shape}")
        if self.theta_x.shape[0] != n or self.theta_y.shape[1] != n:
            raise DimensionError(
                f"inconsistent shapes theta {self.theta.shape}, theta_x {self.theta_x.shape}, theta_y {self.theta_y.shape}"
            )

    @classmethod
    def init(cls, rng, n_in, n_hidden, n_out, activation="tanh", dtype=np.float64):
        return cls(
            _param(T.orthogonal(rng, (n_hidden, n_hidden)), dtype),
            _param(T.orthogonal(rng, (n_hidden, n_in)), dtype),
            _param(T.orthogonal(rng, (n_out, n_hidden)), dtype),
            activation,
        )

    def zero_state(self, x: Tensor) -> CellState:
        return CellState(Tensor(np.zeros(self.theta.shape[0], dtype=self.theta.dtype)))

    def step(self, x: Tensor, state: CellState) -> CellState:
        h, _ = simple_rnn_step(self, x, state.h)
        return CellState(h)

    def output(self, state: CellState) -> Tensor:
        return T.dense(T.apply_activation(self.activation, state.h), self.theta_y)


def simple_rnn_step(p: SimpleRnnParams, x: Tensor, h_prev: Tensor) -> tuple[Tensor, Tensor]:
    """h = theta phi(h_prev) + theta_x x ;  y = theta_y phi(h)."""
    h = T.add(T.dense(T.apply_activation(p.activation, h_prev), p.theta), T.dense(x, p.theta_x))
    y = T.dense(T.apply_activation(p.activation, h), p.theta_y)
    return h, y


# --- LSTM ---------------------------------------------------------------------


@dataclass
class LstmParams(_ParamsMixin):
    w_xi: Tensor
    w_hi: Tensor
    b_i: Tensor
    w_xf: Tensor
    w_hf: Tensor
    b_f: Tensor
    w_xo: Tensor
    w_ho: Tensor
    b_o: Tensor
    w_xc: Tensor
    w_hc: Tensor
    b_c: Tensor
    # the cell-input gate g is written with a sigmoid; conventional LSTMs use tanh
    candidate_activation: str = "sigmoid"

    def __post_init__(self):
        n = self.w_hi.shape[0]
        m = self.w_xi.shape[1]
        for name, t in self.named_tensors().items():
            want = (n, n) if name.startswith("w_h") else (n, m) if name.startswith("w_x") else (n,)
            if t.shape != want:
                raise DimensionError(f"LSTM parameter {name} has shape {t.shape}, expected {want}")

    @classmethod
    def init(cls, rng, n_in, n_hidden, candidate_activation="sigmoid", dtype=np.float64):
        slots = {}
        for gate in "ifoc":
            slots[f"w_x{gate}"] = _param(T.orthogonal(rng, (n_hidden, n_in)), dtype)
            slots[f"w_h{gate}"] = _param(T.orthogonal(rng, (n_hidden, n_hidden)), dtype)
            slots[f"b_{gate}"] = _param(np.zeros(n_hidden), dtype)
        return cls(**slots, candidate_activation=candidate_activation)

    def zero_state(self, x: Tensor) -> CellState:
        z = np.zeros(self.w_hi.shape[0], dtype=self.w_hi.dtype)
        return CellState(Tensor(z), Tensor(z.copy()))

    def step(self, x: Tensor, state: CellState) -> CellState:
        return lstm_step(self, x, state)

    def output(self, state: CellState) -> Tensor:
        return state.h


def lstm_step(p: LstmParams, x: Tensor, s: CellState) -> CellState:
    if s.c is None:
        raise ValueError("LSTM state needs a cell component")

    def gate(w_x, w_h, b, act="sigmoid"):
        return T.apply_activation(act, T.add(T.dense(x, w_x, b), T.dense(s.h, w_h)))

    i = gate(p.w_xi, p.w_hi, p.b_i)
    f = gate(p.w_xf, p.w_hf, p.b_f)
    o = gate(p.w_xo, p.w_ho, p.b_o)
    g = gate(p.w_xc, p.w_hc, p.b_c, p.candidate_activation)
    c = T.add(T.mul(f, s.c), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return CellState(h, c)


# --- GRU ----------------------------------------------------------------------


@dataclass
class GruParams(_ParamsMixin):
    w_hz: Tensor
    w_xz: Tensor
    b_z: Tensor
    w_hr: Tensor
    w_xr: Tensor
    b_r: Tensor
    w_h: Tensor
    w_x: Tensor
    b: Tensor

    def __post_init__(self):
        n = self.w_h.shape[0]
        m = self.w_x.shape[1]
        for name, t in self.named_tensors().items():
            if name in ("w_hz", "w_hr", "w_h"):
                want = (n, n)
            elif name in ("w_xz", "w_xr", "w_x"):
                want = (n, m)
            else:
                want = (n,)
            if t.shape != want:
                raise DimensionError(f"GRU parameter {name} has shape {t.shape}, expected {want}")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def init(cls, rng, n_in, n_hidden, dtype=np.float64):
        def hid():
            return _param(T.orthogonal(rng, (n_hidden, n_hidden)), dtype)

        def inp():
            return _param(T.orthogonal(rng, (n_hidden, n_in)), dtype)

        def bias():
            return _param(np.zeros(n_hidden), dtype)

        return cls(hid(), inp(), bias(), hid(), inp(), bias(), hid(), inp(), bias())

    def zero_state(self, x: Tensor) -> CellState:
        return CellState(Tensor(np.zeros(self.hidden_size, dtype=self.w_h.dtype)))

    def step(self, x: Tensor, state: CellState) -> CellState:
        return CellState(gru_step(self, x, state.h))

    def output(self, state: CellState) -> Tensor:
        return state.h


def _gru_blend(z: Tensor, h_prev: Tensor, cand: Tensor) -> Tensor:
    return T.add(T.mul(T.rsub_scalar(1.0, z), h_prev), T.mul(z, cand))


def gru_step(p: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    if x.shape != (p.input_size,) or h_prev.shape != (p.hidden_size,):
        raise DimensionError(
            f"GRU expects input ({p.input_size},) and state ({p.hidden_size},), got {x.shape} and {h_prev.shape}"
        )
    z = T.sigmoid(T.add(T.dense(h_prev, p.w_hz), T.dense(x, p.w_xz, p.b_z)))
    r = T.sigmoid(T.add(T.dense(h_prev, p.w_hr), T.dense(x, p.w_xr, p.b_r)))
    cand = T.tanh(T.add(T.dense(T.mul(r, h_prev), p.w_h), T.dense(x, p.w_x, p.b)))
    return _gru_blend(z, h_prev, cand)


# --- convolutional GRU --------------------------------------------------------


@dataclass
class ConvGruParams(_ParamsMixin):
    """Nine GRU slots with kernels in place of matrices.

    Input-side kernels are f×c×kh×kw, hidden-side f×f×kh×kw, biases one scalar
    per hidden channel.
    """

    w_hz: Tensor
    w_xz: Tensor
    b_z: Tensor
    w_hr: Tensor
    w_xr: Tensor
    b_r: Tensor
    w_h: Tensor
    w_x: Tensor
    b: Tensor

    def __post_init__(self):
        f, c, kh, kw = self.w_x.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"ConvGRU kernels must be odd-sized, got {kh}×{kw}")
        for name, t in self.named_tensors().items():
            if name in ("w_hz", "w_hr", "w_h"):
                want = (f, f, kh, kw)
            elif name in ("w_xz", "w_xr", "w_x"):
                want = (f, c, kh, kw)
            else:
                want = (f,)
            if t.shape != want:
                raise DimensionError(f"ConvGRU parameter {name} has shape {t.shape}, expected {want}")

    @property
    def filters(self) -> int:
        return self.w_x.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.w_x.shape[2], self.w_x.shape[3]

    @classmethod
    def init(cls, rng, in_channels, filters, k, dtype=np.float64):
        def kern(c):
            shape = (filters, c, k, k)
            return _param(T.glorot_uniform(rng, shape, c * k * k, filters * k * k), dtype)

        def bias():
            return _param(np.zeros(filters), dtype)

        return cls(
            kern(filters), kern(in_channels), bias(),
            kern(filters), kern(in_channels), bias(),
            kern(filters), kern(in_channels), bias(),
        )

    def zero_state(self, x: Tensor) -> CellState:
        return CellState(Tensor(np.zeros((self.filters,) + x.shape[1:], dtype=self.w_x.dtype)))

    def step(self, x: Tensor, state: CellState) -> CellState:
        return CellState(conv_gru_step(self, x, state.h))

    def output(self, state: CellState) -> Tensor:
        return state.h


def conv_gru_step(p: ConvGruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    if x.data.ndim != 3 or h_prev.data.ndim != 3 or x.shape[1:] != h_prev.shape[1:]:
        raise DimensionError(f"ConvGRU input {x.shape} and state {h_prev.shape} must share spatial size")
    if h_prev.shape[0] != p.filters:
        raise DimensionError(f"ConvGRU state has {h_prev.shape[0]} channels, expected {p.filters}")
    kh, kw = p.kernel_size
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"ConvGRU kernels must be odd-sized, got {kh}×{kw}")
    pad = kh - 1

    def conv(inp, w, b=None):
        return T.conv2d(inp, w, b, stride=1, pad=pad)

    z = T.sigmoid(T.add(conv(h_prev, p.w_hz), conv(x, p.w_xz, p.b_z)))
    r = T.sigmoid(T.add(conv(h_prev, p.w_hr), conv(x, p.w_xr, p.b_r)))
    cand = T.tanh(T.add(conv(T.mul(r, h_prev), p.w_h), conv(x, p.w_x, p.b)))
    return _gru_blend(z, h_prev, cand)


# --- unrolling ------------------------------------------------------------------

Cell = SimpleRnnParams | LstmParams | GruParams | ConvGruParams


def unroll(cell: Cell, inputs: Sequence[Tensor], h0: CellState | None = None) -> tuple[list[CellState], Tensor]:
    """Thread a state through ``inputs`` with one shared parameter set.

    Returns every hidden state (oldest first) and the cell output at the last
    step. ``h0`` defaults to zeros.
    """
    if len(inputs) == 0:
        raise ValueError("unroll needs at least one input")
    first = inputs[0].shape
    if any(x.shape != first for x in inputs):
        raise DimensionError("all inputs of one sequence must share a shape")
    state = cell.zero_state(inputs[0]) if h0 is None else h0
    states = []
    for x in inputs:
        state = cell.step(x, state)
        states.append(state)
    return states, cell.output(state)


# --- gradient-flow diagnostics ------------------------------------------------------


def gradient_flow_norms(p: SimpleRnnParams, T_steps: int, h0) -> list[float]:
    """Spectral norms of dh_T/dh_k for k = 1..T-1 under zero input, oldest first.

    The one-step Jacobian of h_i = theta phi(h_{i-1}) is
    ``theta @ diag(phi'(h_{i-1}))``; products are chained explicitly.
    """
    if T_steps < 2:
        raise ValueError("need T >= 2")
    theta = p.theta.data.astype(np.float64)
    h = np.asarray(h0.data if isinstance(h0, Tensor) else h0, dtype=np.float64)
    phi = {"tanh": np.tanh, "identity": lambda v: v, "sigmoid": T._sigmoid, "relu": lambda v: np.maximum(v, 0)}[
        p.activation
    ]
    hs = [h]
    for _ in range(T_steps):
        h = theta @ phi(h)
        hs.append(h)
    # hs[i] is h_i; step i maps h_{i-1} -> h_i
    prod = np.eye(theta.shape[0])
    norms = []
    for i in range(T_steps, 1, -1):
        prod = prod @ (theta * T.activation_derivative(p.activation, hs[i - 1])[None, :])
        norms.append(float(np.linalg.norm(prod, 2)))
    return norms[::-1]


def state_flow_norms(step: Callable[[Tensor, Tensor], Tensor], x: Tensor, T_steps: int, h0) -> list[float]:
    """Like :func:`gradient_flow_norms` for any dense-state step ``h = step(x, h_prev)``.

    One-step Jacobians come from reverse-mode passes, so this also serves as
    an independent check of the explicit simple-RNN chaining.
    """
    from .gradcheck import jacobian

    if T_steps < 2:
        raise ValueError("need T >= 2")
    h = np.asarray(h0.data if isinstance(h0, Tensor) else h0, dtype=np.float64)
    hs = [h]
    for _ in range(T_steps):
        h = step(x, Tensor(h)).data
        hs.append(h)
    prod = np.eye(h.size)
    norms = []
    for i in range(T_steps, 1, -1):
        prod = prod @ jacobian(lambda hp: step(x, hp), hs[i - 1])
        norms.append(float(np.linalg.norm(prod, 2)))
    return norms[::-1]
