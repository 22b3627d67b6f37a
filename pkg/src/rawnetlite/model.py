"""RawNetLite assembly: parameter registry, forward/backward, checkpoints.

Layer stack: Conv1D(1->C, k3, s1, p1) + BN + ReLU -> n residual blocks ->
AdaptiveAvgPool1D(pool_len) -> BiGRU -> Linear + ReLU -> Linear + Sigmoid.
The registry owns every trainable tensor; batch-norm running statistics are
serialized alongside but are not parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nn_core
from .nn_core import BatchNormState, GRUDirParams, ParamTensor, ResBlockParams, ShapeError

_MAGIC = b"RNLCKPT1"
_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class RawNetLiteConfig:
    channels: int = 64
    kernel: int = 3
    n_res_blocks: int = 3
    pool_len: int = 128
    gru_hidden: int = 128
    fc_hidden: int = 64
    input_len: int = 48000
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "pool_len", "gru_hidden", "fc_hidden", "input_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kernel != 3:
            raise ConfigError(f"only kernel size 3 is supported, got {self.kernel}")
        if self.n_res_blocks < 0:
            raise ConfigError(f"n_res_blocks must be >= 0, got {self.n_res_blocks}")
        if self.pool_len > self.input_len:
            raise ConfigError(f"pool_len {self.pool_len} exceeds input_len {self.input_len}")


_GRU_FIELDS = ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn",
               "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn")
# residual-block grad keys -> registry name suffixes
_RES_FIELDS = {
    "conv1_w": "conv1.w", "conv1_b": "conv1.b",
    "bn1_gamma": "bn1.gamma", "bn1_beta": "bn1.beta",
    "conv2_w": "conv2.w", "conv2_b": "conv2.b",
    "bn2_gamma": "bn2.gamma", "bn2_beta": "bn2.beta",
}


class Model:
    """Parameter registry plus the wiring between nn_core kernels."""

    def __init__(self, config: RawNetLiteConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ParamTensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.metadata: dict = {}

    # -- construction ---------------------------------------------------

    def _add(self, name: str, values: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = ParamTensor(name, values.astype(self.dtype))

    def _add_bn(self, prefix: str, channels: int) -> None:
        self._add(f"{prefix}.gamma", np.ones(channels))
        self._add(f"{prefix}.beta", np.zeros(channels))
        self.bn_states[prefix] = BatchNormState.create(channels, dtype=self.dtype)

    @property
    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    # -- bundle views over the registry ----------------------------------

    def _res_params(self, i: int) -> ResBlockParams:
        tensors = {key: self.params[f"res{i}.{suffix}"].values for key, suffix in _RES_FIELDS.items()}
        return ResBlockParams(
            **tensors,
            bn1_state=self.bn_states[f"res{i}.bn1"],
            bn2_state=self.bn_states[f"res{i}.bn2"],
        )

    def _gru_params(self, direction: str) -> GRUDirParams:
        return GRUDirParams(**{f: self.params[f"gru.{direction}.{f}"].values for f in _GRU_FIELDS})

    # -- forward / backward ----------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        probs, _ = self._run(x, mode, collect=False)
        return probs

    def forward_train(self, x: np.ndarray):
        return self._run(x, "train", collect=True)

    def _run(self, x: np.ndarray, mode: str, collect: bool):
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.input_len:
            raise ShapeError(f"expected batch of shape (B, 1, {cfg.input_len}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        caches = [] if collect else None

        h, c = nn_core.conv1d_forward(x, self.params["stem.conv.w"].values, self.params["stem.conv.b"].values)
        if collect: caches.append(c)
        h, c = nn_core.batchnorm1d_forward(
            h, self.params["stem.bn.gamma"].values, self.params["stem.bn.beta"].values,
            self.bn_states["stem.bn"], mode)
        if collect: caches.append(c)
        h, c = nn_core.relu_forward(h)
        if collect: caches.append(c)

        for i in range(cfg.n_res_blocks):
            h, c = nn_core.residual_block_forward(h, self._res_params(i), mode)
            if collect: caches.append(c)

        h, c = nn_core.adaptive_avg_pool1d_forward(h, cfg.pool_len)
        if collect: caches.append(c)

        seq = np.ascontiguousarray(h.transpose(0, 2, 1))
        h, c = nn_core.bigru_forward(seq, self._gru_params("fwd"), self._gru_params("bwd"))
        if collect: caches.append(c)

        h, c = nn_core.linear_forward(h, self.params["head.fc1.w"].values, self.params["head.fc1.b"].values)
        if collect: caches.append(c)
        h, c = nn_core.relu_forward(h)
        if collect: caches.append(c)
        h, c = nn_core.linear_forward(h, self.params["head.fc2.w"].values, self.params["head.fc2.b"].values)
        if collect: caches.append(c)

        probs, c = nn_core.sigmoid_forward(h[:, 0])
        if collect: caches.append(c)
        return probs, caches

    def backward(self, dprobs: np.ndarray, caches: list) -> None:
        """Accumulate gradients of a scalar loss into the registry, given dL/dprob."""
        cfg = self.config
        it = iter(reversed(caches))

        d = nn_core.sigmoid_backward(dprobs, next(it))[:, None]
        d, dw, db = nn_core.linear_backward(d, next(it))
        self._acc("head.fc2.w", dw); self._acc("head.fc2.b", db)
        d = nn_core.relu_backward(d, next(it))
        d, dw, db = nn_core.linear_backward(d, next(it))
        self._acc("head.fc1.w", dw); self._acc("head.fc1.b", db)

        d, g_f, g_b = nn_core.bigru_backward(d, next(it))
        for f in _GRU_FIELDS:
            self._acc(f"gru.fwd.{f}", g_f[f])
            self._acc(f"gru.bwd.{f}", g_b[f])

        d = np.ascontiguousarray(d.transpose(0, 2, 1))
        d = nn_core.adaptive_avg_pool1d_backward(d, next(it))

        for i in range(cfg.n_res_blocks - 1, -1, -1):
            d, grads = nn_core.residual_block_backward(d, next(it))
            for key, suffix in _RES_FIELDS.items():
                self._acc(f"res{i}.{suffix}", grads[key])

        d = nn_core.relu_backward(d, next(it))
        d, dgamma, dbeta = nn_core.batchnorm1d_backward(d, next(it))
        self._acc("stem.bn.gamma", dgamma); self._acc("stem.bn.beta", dbeta)
        _, dw, db = nn_core.conv1d_backward(d, next(it))
        self._acc("stem.conv.w", dw); self._acc("stem.conv.b", db)

    def _acc(self, name: str, g: np.ndarray) -> None:
        self.params[name].grad += g

    # -- serialization ----------------------------------------------------

    def _state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every serialized tensor in a fixed order: parameters, then BN stats."""
        out = [(name, p.values) for name, p in self.params.items()]
        for name, st in self.bn_states.items():
            out.append((f"{name}.running_mean", st.running_mean))
            out.append((f"{name}.running_var", st.running_var))
        return out


def build(config: RawNetLiteConfig, dtype=np.float32) -> Model:
    """Construct a model with seeded initialization.

    Conv and linear weights ~ U(+-sqrt(6 / fan_in)) with zero biases; all GRU
    tensors ~ U(+-1/sqrt(H)); BN gamma 1 and beta 0. Equal seeds give
    bit-identical parameters.
    """
    m = Model(config, dtype=dtype)
    rng = np.random.default_rng(config.seed & ((1 << 64) - 1))
    c = config.channels

    def uniform(bound, *shape):
        return rng.uniform(-bound, bound, size=shape)

    m._add("stem.conv.w", uniform(np.sqrt(6.0 / 3.0), c, 1, 3))
    m._add("stem.conv.b", np.zeros(c))
    m._add_bn("stem.bn", c)

    conv_bound = np.sqrt(6.0 / (c * 3))
    for i in range(config.n_res_blocks):
        m._add(f"res{i}.conv1.w", uniform(conv_bound, c, c, 3))
        m._add(f"res{i}.conv1.b", np.zeros(c))
        m._add_bn(f"res{i}.bn1", c)
        m._add(f"res{i}.conv2.w", uniform(conv_bound, c, c, 3))
        m._add(f"res{i}.conv2.b", np.zeros(c))
        m._add_bn(f"res{i}.bn2", c)

    h = config.gru_hidden
    gru_bound = 1.0 / np.sqrt(h)
    for direction in ("fwd", "bwd"):
        for f in _GRU_FIELDS:
            if f.startswith("w_i"):
                shape = (h, c)
            elif f.startswith("w_h"):
                shape = (h, h)
            else:
                shape = (h,)
            m._add(f"gru.{direction}.{f}", uniform(gru_bound, *shape))

    m._add("head.fc1.w", uniform(np.sqrt(6.0 / (2 * h)), config.fc_hidden, 2 * h))
    m._add("head.fc1.b", np.zeros(config.fc_hidden))
    m._add("head.fc2.w", uniform(np.sqrt(6.0 / config.fc_hidden), 1, config.fc_hidden))
    m._add("head.fc2.b", np.zeros(1))
    return m


def save(model: Model, path) -> None:
    """Write a self-describing checkpoint: JSON header + float32 payload + checksum."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in model._state_arrays():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": _FORMAT_VERSION,
        "config": asdict(model.config),
        "tensors": entries,
        "bn_initialized": {k: bool(v.initialized) for k, v in model.bn_states.items()},
        "metadata": model.metadata,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load(path) -> Model:
    """Load a checkpoint written by `save`; round trips are bit-exact."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(_MAGIC))
    header_start = len(_MAGIC) + 8
    try:
        header = json.loads(blob[header_start : header_start + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"unreadable header: {e}") from e
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {header.get('format_version')}")

    payload = blob[header_start + header_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointIntegrityError(
            f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError("payload checksum mismatch")

    try:
        config = RawNetLiteConfig(**header["config"])
    except TypeError as e:
        raise CheckpointFormatError(f"bad config block: {e}") from e
    model = build(config)
    expected = dict(model._state_arrays())
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointFormatError(f"unknown tensor {name!r} in checkpoint")
        if name in seen:
            raise CheckpointFormatError(f"tensor {name!r} appears twice")
        seen.add(name)
        target = expected[name]
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointFormatError(
                f"tensor {name!r}: checkpoint shape {tuple(entry['shape'])} != model shape {target.shape}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise CheckpointIntegrityError(f"tensor {name!r} overruns payload")
        target[...] = np.frombuffer(payload[start:end], dtype="<f4").reshape(target.shape)
    missing = set(expected) - seen
    if missing:
        raise CheckpointFormatError(f"checkpoint missing tensors: {sorted(missing)}")

    for bn_name, flag in header["bn_initialized"].items():
        if bn_name not in model.bn_states:
            raise CheckpointFormatError(f"unknown batch-norm state {bn_name!r}")
        model.bn_states[bn_name].initialized = flag
    model.metadata = header.get("metadata", {})
    return model
