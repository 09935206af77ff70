"""Time-aware LSTM: standard cell, elapsed-time memory adjustment, and
the horizon-shifted sequence network with a dense output head.

Cell math, per step, on the previous memory C and hidden state h:

    c_short = tanh(C @ W_d + b_d)          # short-term subspace
    c_hat   = c_short * g(delta)           # discounted by elapsed time
    c_long  = C - c_short                  # complementary subspace
    c_adj   = c_long + c_hat               # adjusted previous memory
    f = sigmoid(x @ W_f + h @ U_f + b_f)
    i = sigmoid(x @ W_i + h @ U_i + b_i)
    c_cand = tanh(x @ W_c + h @ U_c + b_c)
    o = sigmoid(x @ W_o + h @ U_o + b_o)
    C' = f * c_adj + i * c_cand
    h' = o * tanh(C')

Each step consumes the interval to the NEXT record, so the interval of
the last step is the prediction horizon: re-running with a different
final interval asks the network about a different future date.

Weights are stored input-major for row-major batched matmul: W_* are
(input_dim, hidden), U_* and W_d (hidden, hidden), biases (1, hidden),
W_y (hidden, 1), b_y (1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import GraphError, Node, Tape
from .preprocess import FEATURE_DIM, Standardizer

DECAY_KINDS = ("log_decay", "inverse_decay", "none")
DEFAULT_DECAY = "log_decay"
DEFAULT_HIDDEN = 64

GATE_PARAMS = (
    "W_f", "U_f", "b_f",
    "W_i", "U_i", "b_i",
    "W_c", "U_c", "b_c",
    "W_o", "U_o", "b_o",
)
PARAM_NAMES = GATE_PARAMS + ("W_d", "b_d", "W_y", "b_y")


class CellState(NamedTuple):
    c: np.ndarray  # long-term memory
    h: np.ndarray  # hidden state


@dataclass
class TlstmParams:
    """All learnable tensors of the cell plus the dense head."""

    input_dim: int
    hidden_dim: int
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_i: np.ndarray
    U_i: np.ndarray
    b_i: np.ndarray
    W_c: np.ndarray
    U_c: np.ndarray
    b_c: np.ndarray
    W_o: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray
    W_d: np.ndarray
    b_d: np.ndarray
    W_y: np.ndarray
    b_y: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array, in a fixed order. Arrays are the live tensors,
        not copies: optimizers update them in place."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "TlstmParams":
        kwargs = {name: getattr(self, name).copy() for name in PARAM_NAMES}
        return TlstmParams(self.input_dim, self.hidden_dim, **kwargs)

    def check_shapes(self) -> None:
        d, h = self.input_dim, self.hidden_dim
        expected = _expected_shapes(d, h)
        for name in PARAM_NAMES:
            array = getattr(self, name)
            if array.shape != expected[name]:
                raise ValueError(
                    f"{name} has shape {array.shape}, expected {expected[name]}"
                )
            if not np.isfinite(array).all():
                raise ValueError(f"{name} contains non-finite values")


def _expected_shapes(d: int, h: int) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    for name in PARAM_NAMES:
        if name.startswith("W_") and name[2] in "fico":
            shapes[name] = (d, h)
        elif name.startswith("U_") or name == "W_d":
            shapes[name] = (h, h)
        elif name == "W_y":
            shapes[name] = (h, 1)
        elif name == "b_y":
            shapes[name] = (1, 1)
        else:  # gate and decomposition biases
            shapes[name] = (1, h)
    return shapes


def init_params(
    input_dim: int = FEATURE_DIM,
    hidden_dim: int = DEFAULT_HIDDEN,
    seed: int = 0,
) -> TlstmParams:
    """Seeded uniform init: +/-sqrt(6/(d+h)) for input weights,
    +/-sqrt(6/(2h)) for recurrent and decomposition weights, zeros for
    biases, +/-sqrt(6/(h+1)) for the head."""
    rng = np.random.default_rng([seed, 11])
    d, h = input_dim, hidden_dim
    w_bound = math.sqrt(6.0 / (d + h))
    u_bound = math.sqrt(6.0 / (2 * h))
    y_bound = math.sqrt(6.0 / (h + 1))
    kwargs: dict[str, np.ndarray] = {}
    for name in PARAM_NAMES:
        if name.startswith("W_") and name[2] in "fico":
            kwargs[name] = rng.uniform(-w_bound, w_bound, (d, h))
        elif name.startswith("U_") or name == "W_d":
            kwargs[name] = rng.uniform(-u_bound, u_bound, (h, h))
        elif name == "W_y":
            kwargs[name] = rng.uniform(-y_bound, y_bound, (h, 1))
        elif name == "b_y":
            kwargs[name] = np.zeros((1, 1))
        else:
            kwargs[name] = np.zeros((1, h))
    return TlstmParams(input_dim=d, hidden_dim=h, **kwargs)


def decay(kind: str, delta: float) -> float:
    """Elapsed-time discount g(delta) in (0, 1], non-increasing in delta."""
    if kind == "none":
        return 1.0
    if kind == "log_decay":
        if delta < 0:
            raise ValueError(f"log_decay needs delta >= 0, got {delta}")
        return 1.0 / math.log(math.e + delta)
    if kind == "inverse_decay":
        if delta < 1:
            raise ValueError(f"inverse_decay needs delta >= 1, got {delta}")
        return 1.0 / delta
    raise ValueError(f"unknown decay kind {kind!r}, expected one of {DECAY_KINDS}")


# -- direct-formula standard LSTM (the g == 1 oracle) ---------------------


def lstm_cell(x: np.ndarray, state: CellState, params: TlstmParams) -> CellState:
    """One standard LSTM step, written straight from the gate formulas in
    plain numpy. Deliberately independent of the tape-based network so the
    two implementations can check each other."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    c_prev = np.asarray(state.c, dtype=np.float64).reshape(-1)
    h_prev = np.asarray(state.h, dtype=np.float64).reshape(-1)

    def logistic(z):
        return 1.0 / (1.0 + np.exp(-z))

    f = logistic(x @ params.W_f + h_prev @ params.U_f + params.b_f[0])
    i = logistic(x @ params.W_i + h_prev @ params.U_i + params.b_i[0])
    c_cand = np.tanh(x @ params.W_c + h_prev @ params.U_c + params.b_c[0])
    o = logistic(x @ params.W_o + h_prev @ params.U_o + params.b_o[0])
    c = f * c_prev + i * c_cand
    h = o * np.tanh(c)
    return CellState(c=c, h=h)


def lstm_forward(inputs: np.ndarray, params: TlstmParams) -> float:
    """Run the direct-formula LSTM over a sequence and apply the head."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(1, -1)
    h = params.hidden_dim
    state = CellState(c=np.zeros(h), h=np.zeros(h))
    for t in range(inputs.shape[0]):
        state = lstm_cell(inputs[t], state, params)
    return float(state.h @ params.W_y[:, 0] + params.b_y[0, 0])


def adjusted_memory(
    c_prev: np.ndarray, delta: float, params: TlstmParams, kind: str = DEFAULT_DECAY
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Direct-formula memory decomposition: returns (c_adj, c_short, c_long).

    c_long is c_prev - c_short by construction; c_adj = c_long +
    g(delta) * c_short. Used by tests to inspect the subspace identity and
    decay monotonicity without reaching into the graph."""
    c_prev = np.asarray(c_prev, dtype=np.float64).reshape(-1)
    c_short = np.tanh(c_prev @ params.W_d + params.b_d[0])
    c_long = c_prev - c_short
    c_adj = c_long + decay(kind, delta) * c_short
    return c_adj, c_short, c_long


# -- tape-based network ----------------------------------------------------


def _step(
    tape: Tape,
    pn: dict[str, Node],
    x_t: Node,
    decay_mat: Node,
    state: tuple[Node, Node],
) -> tuple[Node, Node]:
    c_prev, h_prev = state
    c_short = tape.tanh(tape.add(tape.matmul(c_prev, pn["W_d"]), pn["b_d"]))
    c_hat = tape.hadamard(c_short, decay_mat)
    c_long = tape.subtract(c_prev, c_short)
    c_adj = tape.add(c_long, c_hat)

    def gate(w, u, b, activation):
        z = tape.add(
            tape.add(tape.matmul(x_t, pn[w]), tape.matmul(h_prev, pn[u])), pn[b]
        )
        return activation(z)

    f = gate("W_f", "U_f", "b_f", tape.sigmoid)
    i = gate("W_i", "U_i", "b_i", tape.sigmoid)
    c_cand = gate("W_c", "U_c", "b_c", tape.tanh)
    o = gate("W_o", "U_o", "b_o", tape.sigmoid)
    c = tape.add(tape.hadamard(f, c_adj), tape.hadamard(i, c_cand))
    h = tape.hadamard(o, tape.tanh(c))
    return c, h


def _decay_matrix(deltas_t: np.ndarray, hidden_dim: int, kind: str) -> np.ndarray:
    g = np.array([decay(kind, float(d)) for d in deltas_t])
    return np.repeat(g[:, None], hidden_dim, axis=1)


def build_graph(
    tape: Tape,
    param_nodes: dict[str, Node],
    x: np.ndarray,
    deltas: np.ndarray,
    hidden_dim: int,
    kind: str = DEFAULT_DECAY,
) -> Node:
    """Record the whole network on `tape` for a batch of same-length
    sequences. x is (batch, steps, features); deltas (batch, steps) holds
    the interval fed to each step. Returns the (batch, 1) prediction node."""
    x = np.asarray(x, dtype=np.float64)
    deltas = np.asarray(deltas)
    if x.ndim != 3:
        raise GraphError(f"x must be (batch, steps, features), got {x.shape}")
    if deltas.shape != x.shape[:2]:
        raise GraphError(
            f"deltas shape {deltas.shape} does not match batch/steps {x.shape[:2]}"
        )
    batch, steps = x.shape[0], x.shape[1]
    c = tape.constant(np.zeros((batch, hidden_dim)))
    h = tape.constant(np.zeros((batch, hidden_dim)))
    state = (c, h)
    for t in range(steps):
        x_t = tape.constant(np.ascontiguousarray(x[:, t, :]))
        decay_mat = tape.constant(_decay_matrix(deltas[:, t], hidden_dim, kind))
        state = _step(tape, param_nodes, x_t, decay_mat, state)
    return tape.add(tape.matmul(state[1], param_nodes["W_y"]), param_nodes["b_y"])


def loss_graph(
    arrays: dict[str, np.ndarray],
    x: np.ndarray,
    deltas: np.ndarray,
    labels: np.ndarray,
    hidden_dim: int,
    kind: str = DEFAULT_DECAY,
) -> tuple[Tape, Node, dict[str, Node]]:
    """Full network + MSE against labels; returns (tape, loss, param nodes)."""
    tape = Tape()
    param_nodes = {name: tape.leaf(array) for name, array in arrays.items()}
    pred = build_graph(tape, param_nodes, x, deltas, hidden_dim, kind)
    target = tape.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    loss = tape.mse_reduce(pred, target)
    return tape, loss, param_nodes


def forward_batch(
    x: np.ndarray,
    deltas: np.ndarray,
    params: TlstmParams,
    kind: str = DEFAULT_DECAY,
) -> np.ndarray:
    """Predictions for a batch of same-length sequences, shape (batch,)."""
    tape = Tape()
    param_nodes = {name: tape.constant(a) for name, a in params.arrays().items()}
    pred = build_graph(tape, param_nodes, x, deltas, params.hidden_dim, kind)
    return pred.value[:, 0].copy()


def forward(
    inputs: np.ndarray,
    intervals: Sequence[int],
    params: TlstmParams,
    kind: str = DEFAULT_DECAY,
) -> float:
    """Prediction for one sequence; `inputs` is (steps, features) and
    `intervals` the per-step intervals ending with the horizon. The output
    lives on whatever scale the inputs do (standardized in the pipeline)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(1, -1)
    if inputs.shape[0] != len(intervals):
        raise GraphError(
            f"{inputs.shape[0]} input steps but {len(intervals)} intervals"
        )
    x = inputs[None, :, :]
    deltas = np.asarray(intervals, dtype=np.float64)[None, :]
    return float(forward_batch(x, deltas, params, kind)[0])


def tlstm_cell(
    x: np.ndarray,
    delta: float,
    state: CellState,
    params: TlstmParams,
    kind: str = DEFAULT_DECAY,
) -> CellState:
    """One time-aware step for a single sample; returns flat (H,) state."""
    tape = Tape()
    pn = {name: tape.constant(a) for name, a in params.arrays().items()}
    c = tape.constant(np.asarray(state.c, dtype=np.float64).reshape(1, -1))
    h = tape.constant(np.asarray(state.h, dtype=np.float64).reshape(1, -1))
    x_node = tape.constant(np.asarray(x, dtype=np.float64).reshape(1, -1))
    decay_mat = tape.constant(
        np.full((1, params.hidden_dim), decay(kind, delta))
    )
    c_out, h_out = _step(tape, pn, x_node, decay_mat, (c, h))
    return CellState(c=c_out.value[0].copy(), h=h_out.value[0].copy())


def predict_horizon(
    features: np.ndarray,
    record_intervals: Sequence[int],
    horizon: int,
    params: TlstmParams,
    standardizer: Standardizer,
    kind: str = DEFAULT_DECAY,
) -> float:
    """Predict SE in diopters for raw (unstandardized) history features.

    `record_intervals` are the bucketed gaps between consecutive history
    records (length T-1); `horizon` is the gap from the last record to the
    date being asked about."""
    if standardizer is None:
        raise ValueError("a fitted standardizer is required")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1 quarter, got {horizon}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if len(record_intervals) != features.shape[0] - 1:
        raise ValueError(
            f"{features.shape[0]} records need {features.shape[0] - 1} "
            f"intervals, got {len(record_intervals)}"
        )
    standardized = standardizer.transform(features)
    intervals = list(record_intervals) + [int(horizon)]
    prediction = forward(standardized, intervals, params, kind)
    return float(standardizer.se_from_standard(prediction))


def random_params(
    hidden_dim: int, seed: int, input_dim: int = FEATURE_DIM, scale: float = 0.5
) -> TlstmParams:
    """Fully random parameters (biases included), for verification runs
    where zero-initialized biases would leave paths degenerate."""
    rng = np.random.default_rng([seed, hidden_dim, 23])
    kwargs = {
        name: rng.normal(0.0, scale, shape)
        for name, shape in _expected_shapes(input_dim, hidden_dim).items()
    }
    return TlstmParams(input_dim=input_dim, hidden_dim=hidden_dim, **kwargs)


def gradcheck_network(
    n_seeds: int = 10,
    hidden_dims: Sequence[int] = (1, 4, 64),
    lengths: Sequence[int] = (1, 2, 3, 4),
    h: float = 1e-5,
    batch: int = 2,
    kind: str = DEFAULT_DECAY,
    coords_per_leaf: dict[int, int | None] | None = None,
    input_dim: int = FEATURE_DIM,
) -> float:
    """Central-difference check of the full network + head + MSE graph.

    Sweeps every parameter coordinate for small hidden sizes; for large
    ones `coords_per_leaf` caps the probes per parameter (seeded choice).
    Returns the worst relative error over the whole grid.

    Draw scales (0.25 for parameters, 0.8 for inputs) keep activations out
    of the saturated tanh tails: a saturated coordinate has a true gradient
    near zero, where the float64 roundoff floor of the finite difference
    (~1e-11 at h=1e-5) dominates the relative error and says nothing about
    gradient correctness."""
    from .autodiff import gradient_check

    if coords_per_leaf is None:
        coords_per_leaf = {64: 4}
    worst = 0.0
    for seed in range(n_seeds):
        for hidden_dim in hidden_dims:
            for steps in lengths:
                rng = np.random.default_rng([seed, hidden_dim, steps, 5])
                params = random_params(
                    hidden_dim, seed=seed, input_dim=input_dim, scale=0.25
                )
                arrays = params.arrays()
                x = 0.8 * rng.normal(size=(batch, steps, input_dim))
                deltas = rng.integers(1, 11, size=(batch, steps)).astype(np.float64)
                labels = rng.normal(size=batch)

                def value_and_grad(arrs):
                    tape, loss, nodes = loss_graph(
                        arrs, x, deltas, labels, hidden_dim, kind
                    )
                    tape.backward(loss)
                    grads = {
                        name: (
                            node.grad
                            if node.grad is not None
                            else np.zeros_like(node.value)
                        )
                        for name, node in nodes.items()
                    }
                    return float(loss.value[0, 0]), grads

                def loss_only(arrs):
                    _, loss, _ = loss_graph(arrs, x, deltas, labels, hidden_dim, kind)
                    return float(loss.value[0, 0])

                error = gradient_check(
                    value_and_grad,
                    arrays,
                    h=h,
                    coords_per_leaf=coords_per_leaf.get(hidden_dim),
                    seed=seed,
                    loss_fn=loss_only,
                )
                worst = max(worst, error)
    return worst


# -- checkpoint io ----------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    params: TlstmParams,
    kind: str,
    standardizer: Standardizer | None = None,
) -> None:
    """Self-describing text checkpoint; floats are written with repr so a
    load restores every value exactly."""
    if kind not in DECAY_KINDS:
        raise ValueError(f"unknown decay kind {kind!r}")
    params.check_shapes()
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("myoprog checkpoint v1\n")
        handle.write(f"input_dim {params.input_dim}\n")
        handle.write(f"hidden_dim {params.hidden_dim}\n")
        handle.write(f"decay_kind {kind}\n")
        handle.write("layout input_major\n")
        if standardizer is not None:
            handle.write(
                "standardizer_mean "
                + " ".join(repr(float(v)) for v in standardizer.mean)
                + "\n"
            )
            handle.write(
                "standardizer_std "
                + " ".join(repr(float(v)) for v in standardizer.std)
                + "\n"
            )
            handle.write(
                "standardizer_flags "
                + " ".join(str(int(v)) for v in standardizer.zero_variance)
                + "\n"
            )
        for name in PARAM_NAMES:
            array = getattr(params, name)
            handle.write(f"param {name} {array.shape[0]} {array.shape[1]}\n")
            for row in array:
                handle.write(" ".join(repr(float(v)) for v in row) + "\n")
        handle.write("end\n")


def load_checkpoint(
    path: str | Path,
) -> tuple[TlstmParams, str, Standardizer | None]:
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != "myoprog checkpoint v1":
        raise ValueError(f"{path}: not a checkpoint file")
    input_dim = hidden_dim = None
    kind = DEFAULT_DECAY
    std_fields: dict[str, list[str]] = {}
    arrays: dict[str, np.ndarray] = {}
    index = 1
    while index < len(lines):
        line = lines[index]
        index += 1
        if not line.strip() or line == "end":
            continue
        key, _, rest = line.partition(" ")
        if key == "input_dim":
            input_dim = int(rest)
        elif key == "hidden_dim":
            hidden_dim = int(rest)
        elif key == "decay_kind":
            kind = rest.strip()
        elif key == "layout":
            if rest.strip() != "input_major":
                raise ValueError(f"unsupported layout {rest!r}")
        elif key.startswith("standardizer_"):
            std_fields[key] = rest.split()
        elif key == "param":
            name, n_rows, n_cols = rest.split()
            n_rows, n_cols = int(n_rows), int(n_cols)
            rows = []
            for _ in range(n_rows):
                rows.append([float(v) for v in lines[index].split()])
                index += 1
            array = np.array(rows, dtype=np.float64).reshape(n_rows, n_cols)
            arrays[name] = array
        else:
            raise ValueError(f"{path}: unknown checkpoint field {key!r}")
    if input_dim is None or hidden_dim is None:
        raise ValueError(f"{path}: missing dimensions")
    missing = [name for name in PARAM_NAMES if name not in arrays]
    if missing:
        raise ValueError(f"{path}: missing parameters {missing}")
    params = TlstmParams(input_dim=input_dim, hidden_dim=hidden_dim, **arrays)
    params.check_shapes()
    standardizer = None
    if std_fields:
        standardizer = Standardizer(
            mean=np.array([float(v) for v in std_fields["standardizer_mean"]]),
            std=np.array([float(v) for v in std_fields["standardizer_std"]]),
            zero_variance=np.array(
                [bool(int(v)) for v in std_fields["standardizer_flags"]]
            ),
        )
    return params, kind, standardizer
