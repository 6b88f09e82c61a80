"""Dense-net arithmetic on flat parameter vectors.

Provides tanh MLPs with exact reverse-mode gradients, a central-difference
gradient oracle, an adaptive-moment optimizer, and the `.ckpt` checkpoint
format. Parameters live in one flat float64 vector with a named (name, shape)
layout so whole models can be finite-differenced coordinate by coordinate.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


# -----------------------------------------------------------------------------
# Flat parameter vectors
# -----------------------------------------------------------------------------


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in layout))


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus its named segment layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = tuple((name, tuple(shape)) for name, shape in self.layout)
        if self.values.size != layout_size(self.layout):
            raise ConfigurationError(
                f"layout covers {layout_size(self.layout)} values, "
                f"vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            bad = [name for name, seg in self.segments().items() if not np.all(np.isfinite(seg))]
            raise NumericError("non-finite parameter values", {"segments": bad})

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        """View of one named segment, reshaped to its layout shape."""
        off = 0
        for seg_name, shape in self.layout:
            n = int(np.prod(shape))
            if seg_name == name:
                return self.values[off : off + n].reshape(shape)
            off += n
        raise ConfigurationError(f"no segment named {name!r}")

    def segments(self) -> dict[str, np.ndarray]:
        out = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[off : off + n].reshape(shape)
            off += n
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)


# -----------------------------------------------------------------------------
# MLP: tanh hidden layers, linear output, optional linear input->output bypass
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes of a dense net: in -> hidden (tanh each) -> out (linear).

    With `skip`, a learnable linear map from the raw input is added to the
    output, so near-identity targets are representable exactly.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    skip: bool = False

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    def layout(self) -> Layout:
        dims = self.dims
        layout = []
        for i in range(len(dims) - 1):
            layout.append((f"W{i}", (dims[i + 1], dims[i])))
            layout.append((f"b{i}", (dims[i + 1],)))
        if self.skip:
            layout.append(("S", (self.out_dim, self.in_dim)))
        return tuple(layout)

    def param_count(self) -> int:
        return layout_size(self.layout())


def mlp_init(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Fan-in scaled Gaussian weights, zero biases, zero bypass."""
    params = ParamVector.zeros(spec.layout())
    dims = spec.dims
    for i in range(len(dims) - 1):
        w = params.segment(f"W{i}")
        w[...] = rng.standard_normal(w.shape) / np.sqrt(dims[i])
    return params


def _check_input(spec: MlpSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ConfigurationError(f"input shape {x.shape} does not match in_dim {spec.in_dim}")
    return x, squeeze


def _check_params(spec: MlpSpec, params: ParamVector) -> None:
    if params.layout != spec.layout():
        raise ConfigurationError("parameter layout does not match architecture")


def _forward_hidden(params: ParamVector, x: np.ndarray, spec: MlpSpec) -> list[np.ndarray]:
    """All activations [x, a1, ..., ak] through the tanh hidden stack."""
    acts = [x]
    a = x
    for i in range(len(spec.hidden)):
        a = np.tanh(a @ params.segment(f"W{i}").T + params.segment(f"b{i}"))
        acts.append(a)
    return acts


def _output_from_hidden(params: ParamVector, acts: list[np.ndarray], spec: MlpSpec) -> np.ndarray:
    i = len(spec.hidden)
    y = acts[-1] @ params.segment(f"W{i}").T + params.segment(f"b{i}")
    if spec.skip:
        y = y + acts[0] @ params.segment("S").T
    return y


def mlp_forward(params: ParamVector, x: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """Net output for a single input vector or a (B, in_dim) batch."""
    _check_params(spec, params)
    x2, squeeze = _check_input(spec, x)
    y = _output_from_hidden(params, _forward_hidden(params, x2, spec), spec)
    return y[0] if squeeze else y


def mlp_forward_with_feature(
    params: ParamVector, x: np.ndarray, spec: MlpSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Output plus the last hidden activation (the shared backbone feature)."""
    if not spec.hidden:
        raise ConfigurationError("feature tap requires at least one hidden layer")
    _check_params(spec, params)
    x2, squeeze = _check_input(spec, x)
    acts = _forward_hidden(params, x2, spec)
    y = _output_from_hidden(params, acts, spec)
    feat = acts[-1]
    return (y[0], feat[0]) if squeeze else (y, feat)


def mlp_feature(params: ParamVector, x: np.ndarray, spec: MlpSpec) -> np.ndarray:
    return mlp_forward_with_feature(params, x, spec)[1]


def backward(
    params: ParamVector, x: np.ndarray, spec: MlpSpec, upstream: np.ndarray
) -> tuple[ParamVector, np.ndarray]:
    """Exact gradients of <upstream, output> w.r.t. params and input.

    `upstream` matches the output shape ((out,) or (B, out)); batch entries
    are summed. Returns (param gradients, input gradient shaped like x).
    """
    _check_params(spec, params)
    x2, squeeze = _check_input(spec, x)
    u = np.asarray(upstream, dtype=np.float64)
    if squeeze:
        u = u[None, :]
    if u.shape != (x2.shape[0], spec.out_dim):
        raise ConfigurationError(f"upstream shape {u.shape} does not match output")

    acts = _forward_hidden(params, x2, spec)
    grads = ParamVector.zeros(spec.layout())
    k = len(spec.hidden)

    grads.segment(f"W{k}")[...] = u.T @ acts[-1]
    grads.segment(f"b{k}")[...] = u.sum(axis=0)
    h = u @ params.segment(f"W{k}")
    for i in range(k - 1, -1, -1):
        h = h * (1.0 - acts[i + 1] ** 2)
        grads.segment(f"W{i}")[...] = h.T @ acts[i]
        grads.segment(f"b{i}")[...] = h.sum(axis=0)
        h = h @ params.segment(f"W{i}")
    if spec.skip:
        grads.segment("S")[...] = u.T @ x2
        h = h + u @ params.segment("S")
    return grads, (h[0] if squeeze else h)


def backward_from_feature(
    params: ParamVector, x: np.ndarray, spec: MlpSpec, upstream_feature: np.ndarray
) -> np.ndarray:
    """Input gradient of <upstream_feature, feature>.

    The feature is the last hidden activation; the bypass and output layer do
    not participate. Used to steer critic gradients into the generator without
    touching the frozen backbone parameters.
    """
    if not spec.hidden:
        raise ConfigurationError("feature tap requires at least one hidden layer")
    _check_params(spec, params)
    x2, squeeze = _check_input(spec, x)
    u = np.asarray(upstream_feature, dtype=np.float64)
    if squeeze:
        u = u[None, :]
    if u.shape != (x2.shape[0], spec.hidden[-1]):
        raise ConfigurationError(f"upstream shape {u.shape} does not match feature")

    acts = _forward_hidden(params, x2, spec)
    h = u
    for i in range(len(spec.hidden) - 1, -1, -1):
        h = h * (1.0 - acts[i + 1] ** 2)
        h = h @ params.segment(f"W{i}")
    return h[0] if squeeze else h


# -----------------------------------------------------------------------------
# Finite-difference oracle and gradient comparison
# -----------------------------------------------------------------------------


def finite_difference_grad(
    objective: Callable[[ParamVector], float], params: ParamVector, h: float = 1e-4
) -> ParamVector:
    """Central differences (f(p+h e_i) - f(p-h e_i)) / 2h per coordinate.

    The objective must be deterministic (evaluate losses on a frozen tape).
    """
    if h <= 0:
        raise ConfigurationError(f"h must be > 0, got {h}")
    base = params.values
    grad = np.zeros_like(base)
    for i in range(base.size):
        up = base.copy()
        up[i] += h
        down = base.copy()
        down[i] -= h
        f_up = float(objective(params.with_values(up)))
        f_down = float(objective(params.with_values(down)))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise NumericError("objective returned a non-finite value", {"coordinate": i})
        grad[i] = (f_up - f_down) / (2.0 * h)
    return params.with_values(grad)


@dataclass
class GradReport:
    """Analytic vs numeric gradient comparison.

    max_rel_err is the max over layout segments of ||a-n||_2 / max(||a||_2,
    ||n||_2); segments where both norms are below 1e-12 contribute 0. The
    segment-wise norm keeps finite-difference roundoff on near-zero
    coordinates from swamping the comparison while still localizing
    per-layer errors.
    """

    analytic: ParamVector
    numeric: ParamVector
    max_rel_err: float = field(init=False)
    segment_errors: dict[str, float] = field(init=False)

    def __post_init__(self):
        if self.analytic.layout != self.numeric.layout:
            raise ConfigurationError("gradient layouts differ")
        errs = {}
        a_segs = self.analytic.segments()
        n_segs = self.numeric.segments()
        for name in a_segs:
            na = float(np.linalg.norm(a_segs[name]))
            nn = float(np.linalg.norm(n_segs[name]))
            denom = max(na, nn)
            if denom < 1e-12:
                errs[name] = 0.0
            else:
                errs[name] = float(np.linalg.norm(a_segs[name] - n_segs[name])) / denom
        self.segment_errors = errs
        self.max_rel_err = max(errs.values()) if errs else 0.0


def check_gradients(
    objective: Callable[[ParamVector], float],
    analytic: ParamVector,
    params: ParamVector,
    h: float = 1e-4,
) -> GradReport:
    return GradReport(analytic, finite_difference_grad(objective, params, h))


# -----------------------------------------------------------------------------
# Adaptive-moment optimizer
# -----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(
    params: ParamVector,
    grads: ParamVector,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_num: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected adaptive-moment step; returns new params and state."""
    if state.m.size != params.size:
        raise ConfigurationError("optimizer state size does not match params")
    g = grads.values
    if not np.all(np.isfinite(g)):
        bad = [name for name, seg in grads.segments().items() if not np.all(np.isfinite(seg))]
        raise NumericError("non-finite gradient", {"segments": bad, "step": state.step})
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps_num)
    return params.with_values(new_values), AdamState(m, v, step)


# -----------------------------------------------------------------------------
# Checkpoint format: magic + version + JSON header (layout table, meta) + payload
# -----------------------------------------------------------------------------

CKPT_MAGIC = b"ASDCKPT1"
CKPT_VERSION = 1


def save_checkpoint(path: str, params: ParamVector, meta: dict) -> None:
    """Write params as magic, version, JSON header, little-endian f64 payload."""
    header = {
        "version": CKPT_VERSION,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "meta": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.values.astype("<f8").tobytes()
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(np.uint32(CKPT_VERSION).astype("<u4").tobytes())
            f.write(np.uint32(len(header_bytes)).astype("<u4").tobytes())
            f.write(header_bytes)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ParamVector, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint file (bad magic)")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != CKPT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
        payload = f.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != layout_size(layout):
        raise ConfigurationError(f"{path}: payload size does not match layout table")
    return ParamVector(values, layout), header["meta"]
