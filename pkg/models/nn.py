"""
Feed-forward networks used as feedback controls and as the y0 / z maps of the
shooting solver.

Parameters live in one flat vector ``theta``: for every layer, the bias
``(d_out,)`` followed by the weight matrix ``(d_out, d_in)`` in row-major
order. A layer computes ``h @ W.T + b``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models import autodiff as ad

ACTIVATIONS = ("relu", "sigmoid", "tanh", "sine")
INIT_SCHEMES = ("uniform_scaled", "zeros")
# slope bound of each hidden activation (used by lipschitz_bound)
ACTIVATION_SLOPE = {"relu": 1.0, "sigmoid": 0.25, "tanh": 1.0, "sine": 1.0}

_ACTIVATION_IDS = {"relu": 1, "sigmoid": 2, "tanh": 3, "sine": 4}
_MAGIC = b"MFNN"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Layer sizes [d0, ..., d_{l+1}]; the output layer is always linear."""

    layer_dims: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("an architecture needs at least input and output dims")
        if min(dims) < 1:
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation '{self.hidden_activation}' "
                f"(expected one of {', '.join(ACTIVATIONS)})"
            )
        if self.output_activation != "identity":
            raise ValueError("output activation must be 'identity'")

    @classmethod
    def mlp(
        cls, d_in: int, hidden: Sequence[int], d_out: int, activation: str = "relu"
    ) -> "Architecture":
        return cls((d_in, *hidden, d_out), activation)

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * (dims[i] + 1) for i in range(len(dims) - 1))

    def layer_slices(self) -> List[Tuple[slice, slice, Tuple[int, int]]]:
        """(bias slice, weight slice, weight shape) per layer."""
        out = []
        offset = 0
        dims = self.layer_dims
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bias = slice(offset, offset + d_out)
            offset += d_out
            weight = slice(offset, offset + d_out * d_in)
            offset += d_out * d_in
            out.append((bias, weight, (d_out, d_in)))
        return out


@dataclass(frozen=True)
class NetParams:
    arch: Architecture
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        if theta.size != self.arch.n_params:
            raise ValueError(
                f"theta has {theta.size} entries, architecture needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta: np.ndarray) -> "NetParams":
        return NetParams(self.arch, theta)

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [
            (self.theta[b], self.theta[w].reshape(shape))
            for b, w, shape in self.arch.layer_slices()
        ]


def init(arch: Architecture, seed: int = 0, scheme: str = "uniform_scaled") -> NetParams:
    """Weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and zero biases, or all zeros."""
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme '{scheme}'")
    theta = np.zeros(arch.n_params)
    if scheme == "uniform_scaled":
        rng = np.random.default_rng(seed)
        for _, w, (d_out, d_in) in arch.layer_slices():
            bound = 1.0 / np.sqrt(d_in)
            theta[w] = rng.uniform(-bound, bound, size=d_out * d_in)
    return NetParams(arch, theta)


def _activate(name: str, h):
    if name == "relu":
        return ad.relu(h)
    if name == "sigmoid":
        return ad.sigmoid(h)
    if name == "tanh":
        return ad.tanh(h)
    return ad.sin(h)


class BoundNet:
    """
    A network whose layers are ready for evaluation, either as plain arrays
    or as Vars sliced from one parameter slot of a tape.
    """

    def __init__(self, arch: Architecture, layers: List[Tuple]):
        self.arch = arch
        self.layers = layers

    def __call__(self, inputs):
        if isinstance(inputs, ad.Var):
            width = inputs.shape[-1]
        else:
            inputs = np.asarray(inputs, dtype=float)
            width = inputs.shape[-1]
        if width != self.arch.d_in:
            raise ValueError(
                f"input dimension {width} does not match network d0={self.arch.d_in}"
            )
        single = inputs.ndim == 1
        h = ad.reshape(inputs, (1, width)) if single else inputs
        last = len(self.layers) - 1
        for i, (bias, weight) in enumerate(self.layers):
            h = ad.matmul(h, ad.transpose(weight)) + bias
            if i < last:
                h = _activate(self.arch.hidden_activation, h)
        return ad.reshape(h, (self.arch.d_out,)) if single else h


def bind(params: NetParams, tape: Optional[ad.Tape] = None) -> BoundNet:
    """Prepare ``params`` for repeated evaluation; registers one slot on ``tape``."""
    if tape is None:
        return BoundNet(params.arch, params.layers())
    theta = ad.lift(tape, params.theta, parameter=True)
    layers = []
    for b, w, shape in params.arch.layer_slices():
        layers.append((theta[b], ad.reshape(theta[w], shape)))
    return BoundNet(params.arch, layers)


def forward(params: NetParams, inputs, tape: Optional[ad.Tape] = None):
    """Evaluate the network on one input vector or an (N, d0) batch."""
    return bind(params, tape)(inputs)


def clamp_output(v, box: Optional[Tuple] = None):
    """Coordinatewise clamp to [lo, hi]; bounds may be infinite."""
    if box is None:
        return v
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    if np.any(lo > hi):
        raise ValueError(f"invalid box: lo={lo} > hi={hi}")
    if np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
        return v
    return ad.clip(v, lo, hi)


def lipschitz_bound(params: NetParams) -> float:
    """Product of spectral norms times the activation slope bound per hidden layer."""
    bound = 1.0
    for _, weight in params.layers():
        bound *= float(np.linalg.norm(weight, ord=2))
    slope = ACTIVATION_SLOPE[params.arch.hidden_activation]
    return bound * slope**params.arch.n_hidden


def save(params: NetParams, path: Union[str, Path]) -> Path:
    """
    Write ``params`` as: magic ``MFNN``, then little-endian uint32 fields
    (version, activation id, number of dims, dims...), then theta as
    little-endian float64.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = params.arch.layer_dims
    header = np.array(
        [_FORMAT_VERSION, _ACTIVATION_IDS[params.arch.hidden_activation], len(dims), *dims],
        dtype="<u4",
    )
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(header.tobytes())
        handle.write(params.theta.astype("<f8").tobytes())
    return path


def load(path: Union[str, Path]) -> NetParams:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a network parameter file")
    fixed = np.frombuffer(data, dtype="<u4", count=3, offset=4)
    version, act_id, n_dims = (int(v) for v in fixed)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    dims = np.frombuffer(data, dtype="<u4", count=n_dims, offset=16)
    activation = {v: k for k, v in _ACTIVATION_IDS.items()}[act_id]
    arch = Architecture(tuple(int(d) for d in dims), activation)
    theta = np.frombuffer(data, dtype="<f8", offset=16 + 4 * n_dims)
    return NetParams(arch, theta.copy())
