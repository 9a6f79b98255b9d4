"""Minimal differentiable MLP with explicit flat parameter vectors.

Every actor and critic in this package is built on these functions: a
feed-forward net with tanh hidden units and a linear, softmax, or tanh
output head.  Parameters live in a single flat float64 array whose layout
is derived from the spec, gradients are computed by hand-rolled backprop
(checkable against finite differences), and updates use an Adam-style
first-order optimizer.  No hidden state anywhere: callers own the arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIVATIONS = ("linear", "softmax", "tanh")

_HEADER = "cactor-approx 1"


@dataclass(frozen=True)
class ApproxSpec:
    """Architecture and seed; two equal specs init to bit-identical params."""

    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    output_activation: str = "linear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer sizes must be >= 1")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output_activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def init_params(spec: ApproxSpec) -> np.ndarray:
    """Deterministic init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    dims = spec.layer_dims
    chunks = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def unpack_params(spec: ApproxSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views.  W has shape (fan_in, fan_out)."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.param_count:
        raise ValueError(
            f"parameter vector has size {params.size}, spec requires {spec.param_count}"
        )
    dims = spec.layer_dims
    layers = []
    pos = 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def first_layer_size(spec: ApproxSpec) -> int:
    """Number of leading flat-vector entries belonging to the first layer (W1 and b1)."""
    dims = spec.layer_dims
    return dims[0] * dims[1] + dims[1]


def _check_input(spec: ApproxSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input has trailing dim {x.shape[-1]}, spec requires {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite entries in input")
    return x, single


def _apply_output_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "tanh":
        return np.tanh(z)
    # softmax with max-subtraction; entries floored at the smallest normal
    # float so the head always returns strictly positive probabilities
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return np.maximum(e / e.sum(axis=1, keepdims=True), np.finfo(np.float64).tiny)


def _forward_pass(spec: ApproxSpec, params: np.ndarray, x: np.ndarray):
    """Returns (output, hidden activations list) for a 2-D input batch."""
    layers = unpack_params(spec, params)
    hidden = []
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        hidden.append(h)
    w, b = layers[-1]
    out = _apply_output_activation(spec.output_activation, h @ w + b)
    return out, hidden


def forward(spec: ApproxSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the net.  Accepts a single input vector or a (batch, input_dim) matrix."""
    x, single = _check_input(spec, x)
    out, _ = _forward_pass(spec, params, x)
    return out[0] if single else out


def _output_delta(kind: str, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Jacobian-transpose product of the output activation, batched."""
    if kind == "linear":
        return upstream
    if kind == "tanh":
        return upstream * (1.0 - y * y)
    # softmax: J^T u = y * (u - <y, u>)
    return y * (upstream - np.sum(y * upstream, axis=1, keepdims=True))


def _backward(spec, params, x, upstream, want_input_grad):
    x, single = _check_input(spec, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if single and upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != (x.shape[0], spec.output_dim):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected ({x.shape[0]}, {spec.output_dim})"
        )
    if not np.all(np.isfinite(upstream)):
        raise ValueError("non-finite entries in upstream")

    out, hidden = _forward_pass(spec, params, x)
    layers = unpack_params(spec, params)
    acts = [x] + hidden  # inputs to each layer

    delta = _output_delta(spec.output_activation, out, upstream)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0 or want_input_grad:
            delta = delta @ w.T
            if i > 0:
                delta = delta * (1.0 - acts[i] * acts[i])

    if want_input_grad:
        return delta[0] if single else delta
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat


def gradient(spec: ApproxSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of upstream . forward(x) with respect to params, as a flat vector.

    For a batch the result is the sum over rows of the per-sample gradients,
    so per-sample weights and 1/batch factors fold into ``upstream``.
    """
    return _backward(spec, params, x, upstream, want_input_grad=False)


def input_gradient(spec: ApproxSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of upstream . forward(x) with respect to the input, same shape as x."""
    return _backward(spec, params, x, upstream, want_input_grad=True)


@dataclass(frozen=True)
class OptState:
    """Adam accumulator state.  One instance per parameter vector."""

    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_size: float = 1e-3
    moment_decays: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        b1, b2 = self.moment_decays
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.step_size <= 0 or self.epsilon <= 0:
            raise ValueError("step_size and epsilon must be positive")


def init_opt_state(n_params: int, step_size: float = 1e-3,
                   moment_decays: tuple[float, float] = (0.9, 0.999),
                   epsilon: float = 1e-8) -> OptState:
    return OptState(
        step_count=0,
        first_moment=np.zeros(n_params),
        second_moment=np.zeros(n_params),
        step_size=step_size,
        moment_decays=moment_decays,
        epsilon=epsilon,
    )


def optimizer_step(params: np.ndarray, grads: np.ndarray, opt: OptState,
                   direction: str = "minimize") -> tuple[np.ndarray, OptState]:
    """One bias-corrected Adam step.  direction='maximize' negates the gradient."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or opt.first_moment.shape != params.shape:
        raise ValueError("params, grads and optimizer moments must share one shape")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient entries")
    if direction == "maximize":
        grads = -grads
    elif direction != "minimize":
        raise ValueError(f"unknown direction {direction!r}")

    b1, b2 = opt.moment_decays
    t = opt.step_count + 1
    m = b1 * opt.first_moment + (1.0 - b1) * grads
    v = b2 * opt.second_moment + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - opt.step_size * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    return new_params, replace(opt, step_count=t, first_moment=m, second_moment=v)


def save_params(path, spec: ApproxSpec, params: np.ndarray) -> None:
    """Write spec header plus one %.17g decimal per parameter (bit-exact round trip)."""
    params = np.asarray(params, dtype=np.float64)
    if params.size != spec.param_count:
        raise ValueError("parameter vector inconsistent with spec")
    lines = [
        _HEADER,
        f"input_dim={spec.input_dim}",
        "hidden_layers=" + ",".join(str(h) for h in spec.hidden_layers),
        f"output_dim={spec.output_dim}",
        f"output_activation={spec.output_activation}",
        f"seed={spec.seed}",
        f"n_params={params.size}",
    ]
    lines.extend(f"{v:.17g}" for v in params)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> tuple[ApproxSpec, np.ndarray]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"{path}: not a parameter file (bad header)")
    fields = {}
    for ln in lines[1:7]:
        key, _, val = ln.partition("=")
        fields[key] = val
    hidden = tuple(int(h) for h in fields["hidden_layers"].split(",") if h)
    spec = ApproxSpec(
        input_dim=int(fields["input_dim"]),
        hidden_layers=hidden,
        output_dim=int(fields["output_dim"]),
        output_activation=fields["output_activation"],
        seed=int(fields["seed"]),
    )
    n = int(fields["n_params"])
    values = np.array([float(v) for v in lines[7 : 7 + n]], dtype=np.float64)
    if values.size != n or n != spec.param_count:
        raise ValueError(f"{path}: parameter count mismatch")
    return spec, values
