"""The motion regression network: topology, training step, checkpoints.

Per patch: four conv layers (three 3x3 stride-2, one 1x1), each followed
by batch norm and ReLU, then dropout and flatten.  The per-patch feature
sequence feeds a stacked LSTM; the last hidden state passes through a
trunk FC layer and five independent two-hidden-layer branches, one per
motion component, each ending in tanh so outputs live in (-1, 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from evtrack.geometry import RawRegression
from evtrack.regressor.layers import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Layer,
    Linear,
    LSTM,
    ReLU,
    Tanh,
)

CHECKPOINT_MAGIC = b"EVTRMODL"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class NetConfig:
    """Network topology description.

    conv_schedule pairs (kernel, stride) per conv layer; padding is always
    valid.  With the full-width preset and 64x64x2 input the flattened conv
    feature is 7*7*32 = 1568, equal to the recurrent width.
    """

    conv_filters: Tuple[int, ...] = (32, 64, 128, 32)
    conv_schedule: Tuple[Tuple[int, int], ...] = ((3, 2), (3, 2), (3, 2), (1, 1))
    recurrent_layers: int = 3
    recurrent_width: int = 1568
    trunk_fc_width: int = 1568
    branch_widths: Tuple[int, ...] = (512, 128)
    dropout_rate: float = 0.25
    input_size: int = 64
    in_channels: int = 2
    n_outputs: int = 5
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.conv_filters) != len(self.conv_schedule):
            raise ValueError("conv_filters and conv_schedule lengths differ")
        if self.recurrent_layers < 1 or self.recurrent_width < 1:
            raise ValueError("recurrent module needs >= 1 layer and width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @classmethod
    def paper_width(cls, **overrides) -> "NetConfig":
        """Full-width configuration (constructible, heavy to train on CPU)."""
        return cls(**overrides)

    @classmethod
    def lite(cls, **overrides) -> "NetConfig":
        """Reduced widths for desk-scale training and gradient checking."""
        defaults = dict(
            conv_filters=(8, 16, 32, 8),
            recurrent_layers=1,
            recurrent_width=128,
            trunk_fc_width=128,
            branch_widths=(64, 32),
        )
        defaults.update(overrides)
        return cls(**defaults)

    def conv_output_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) after the conv stack."""
        h = w = self.input_size
        for (k, stride) in self.conv_schedule:
            h = (h - k) // stride + 1
            w = (w - k) // stride + 1
            if h < 1 or w < 1:
                raise ValueError("conv stack consumes the input entirely")
        return self.conv_filters[-1], h, w

    def flat_feature_size(self) -> int:
        c, h, w = self.conv_output_shape()
        return c * h * w

    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the training recipe."""

    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    frames_per_sample: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.frames_per_sample < 1:
            raise ValueError("frames per sample must be >= 1")


class NumericError(RuntimeError):
    """Raised when a training step encounters a non-finite loss."""


def mse_loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of squared norms over the motion components."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: {predictions.shape} vs {targets.shape}"
        )
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise ValueError("expected a non-empty (batch, components) array")
    diff = predictions - targets
    return float(np.sum(diff * diff) / predictions.shape[0])


class MotionRegressor:
    """Conv + LSTM + five-branch regression network with Adam state."""

    def __init__(self, config: NetConfig) -> None:
        self.config = config
        dtype = config.np_dtype()
        init_rng = np.random.default_rng([config.seed, 0x11117])
        self.dropout_rng = np.random.default_rng([config.seed, 0xD509])

        self.conv_stack: List[Layer] = []
        c_in = config.in_channels
        for c_out, (k, stride) in zip(config.conv_filters, config.conv_schedule):
            self.conv_stack.append(Conv2d(c_in, c_out, k, stride, init_rng, dtype))
            self.conv_stack.append(BatchNorm2d(c_out, dtype))
            self.conv_stack.append(ReLU())
            c_in = c_out
        self.dropout = Dropout(config.dropout_rate, self.dropout_rng)

        flat = config.flat_feature_size()
        self.lstm = LSTM(
            flat, config.recurrent_width, config.recurrent_layers, init_rng, dtype
        )
        self.trunk = Linear(config.recurrent_width, config.trunk_fc_width,
                            init_rng, dtype)
        self.trunk_relu = ReLU()

        self.branches: List[List[Layer]] = []
        for _ in range(config.n_outputs):
            widths = [config.trunk_fc_width, *config.branch_widths]
            branch: List[Layer] = []
            for d_in, d_out in zip(widths[:-1], widths[1:]):
                branch.append(Linear(d_in, d_out, init_rng, dtype))
                branch.append(ReLU())
            branch.append(
                Linear(widths[-1], 1, init_rng, dtype,
                       weight_scale=float(np.sqrt(1.0 / widths[-1])))
            )
            branch.append(Tanh())
            self.branches.append(branch)

        # Adam moments, allocated lazily on the first step
        self.adam_step = 0
        self._adam_m: Dict[str, np.ndarray] = {}
        self._adam_v: Dict[str, np.ndarray] = {}

    # --- layer/parameter walking ---------------------------------------

    def named_layers(self) -> List[Tuple[str, Layer]]:
        named: List[Tuple[str, Layer]] = []
        conv_idx = bn_idx = 0
        for layer in self.conv_stack:
            if isinstance(layer, Conv2d):
                named.append((f"conv{conv_idx}", layer))
                conv_idx += 1
            elif isinstance(layer, BatchNorm2d):
                named.append((f"bn{bn_idx}", layer))
                bn_idx += 1
        named.append(("lstm", self.lstm))
        named.append(("trunk", self.trunk))
        for b_idx, branch in enumerate(self.branches):
            fc_idx = 0
            for layer in branch:
                if isinstance(layer, Linear):
                    named.append((f"branch{b_idx}.fc{fc_idx}", layer))
                    fc_idx += 1
        return named

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for key, value in layer.params.items():
                out[f"{prefix}.{key}"] = value
        return out

    def gradients(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for key, value in layer.grads.items():
                out[f"{prefix}.{key}"] = value
        return out

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for key, value in layer.state.items():
                out[f"{prefix}.{key}"] = value
        return out

    def zero_grads(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grads()

    # --- forward / backward ---------------------------------------------

    def _check_input(self, patches: np.ndarray) -> np.ndarray:
        cfg = self.config
        patches = np.asarray(patches, dtype=cfg.np_dtype())
        if patches.ndim == 4:
            patches = patches[None]
        if patches.ndim != 5 or patches.shape[2:] != (
            cfg.input_size, cfg.input_size, cfg.in_channels,
        ):
            raise ValueError(
                f"expected patches (N, S, {cfg.input_size}, {cfg.input_size}, "
                f"{cfg.in_channels}), got {patches.shape}"
            )
        return patches

    def forward_batch(self, patches: np.ndarray, train: bool = False) -> np.ndarray:
        """Run (N, S, P, P, 2) patch sequences to (N, 5) outputs in (-1, 1)."""
        patches = self._check_input(patches)
        n, s = patches.shape[:2]
        x = patches.transpose(0, 1, 4, 2, 3).reshape(
            n * s, self.config.in_channels,
            self.config.input_size, self.config.input_size,
        )
        for layer in self.conv_stack:
            x = layer.forward(x, train)
        x = self.dropout.forward(x, train)
        feats = x.reshape(n, s, -1)
        hs = self.lstm.forward(feats, train)
        last = hs[:, -1, :]
        trunk_out = self.trunk_relu.forward(
            self.trunk.forward(last, train), train
        )
        outs = []
        for branch in self.branches:
            y = trunk_out
            for layer in branch:
                y = layer.forward(y, train)
            outs.append(y)
        self._cache_shapes = (n, s, x.shape)
        return np.concatenate(outs, axis=1)

    def backward_batch(self, dout: np.ndarray) -> None:
        """Backpropagate d(loss)/d(outputs); accumulates parameter grads."""
        n, s, conv_out_shape = self._cache_shapes
        dtrunk = None
        for b_idx, branch in enumerate(self.branches):
            dy = dout[:, b_idx : b_idx + 1]
            for layer in reversed(branch):
                dy = layer.backward(dy)
            dtrunk = dy if dtrunk is None else dtrunk + dy
        dlast = self.trunk.backward(self.trunk_relu.backward(dtrunk))
        dhs = np.zeros((n, s, self.config.recurrent_width),
                       dtype=self.config.np_dtype())
        dhs[:, -1, :] = dlast
        dfeats = self.lstm.backward(dhs)
        dx = self.dropout.backward(dfeats.reshape(conv_out_shape))
        for layer in reversed(self.conv_stack):
            dx = layer.backward(dx)

    def predict(self, patch_sequence: np.ndarray) -> RawRegression:
        """Eval-mode forward of one patch sequence to a RawRegression."""
        out = self.forward_batch(patch_sequence, train=False)
        return RawRegression.from_array(np.clip(out[0], -1.0, 1.0))

    # --- training ---------------------------------------------------------

    def loss_on_batch(
        self, patches: np.ndarray, targets: np.ndarray, train: bool = True
    ) -> float:
        return mse_loss(self.forward_batch(patches, train=train),
                        np.asarray(targets, dtype=self.config.np_dtype()))

    def compute_gradients(
        self, patches: np.ndarray, targets: np.ndarray
    ) -> float:
        """Train-mode forward + full analytic backward; returns the loss."""
        targets = np.asarray(targets, dtype=self.config.np_dtype())
        self.zero_grads()
        preds = self.forward_batch(patches, train=True)
        loss = mse_loss(preds, targets)
        dout = (2.0 / preds.shape[0]) * (preds - targets)
        self.backward_batch(dout.astype(self.config.np_dtype()))
        return loss

    def backward_and_step(
        self, patches: np.ndarray, targets: np.ndarray, train_config: TrainConfig
    ) -> float:
        """One optimization step: gradients plus an Adam update.

        A non-finite loss aborts before any parameter is touched.
        """
        loss = self.compute_gradients(patches, targets)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}; step aborted")
        self.adam_update(train_config)
        return loss

    def adam_update(self, tc: TrainConfig) -> None:
        params = self.parameters()
        grads = self.gradients()
        if not self._adam_m:
            for key, p in params.items():
                self._adam_m[key] = np.zeros_like(p)
                self._adam_v[key] = np.zeros_like(p)
        self.adam_step += 1
        t = self.adam_step
        b1, b2 = tc.beta1, tc.beta2
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for key, p in params.items():
            g = grads[key]
            m = self._adam_m[key]
            v = self._adam_v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= tc.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + tc.eps)

    def grad_global_norm(self) -> float:
        total = 0.0
        for g in self.gradients().values():
            total += float(np.sum(g.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    # --- serialization ------------------------------------------------------

    def _all_tensors(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.parameters())
        tensors.update(self.state_tensors())
        for key, val in self._adam_m.items():
            tensors[f"adam.m.{key}"] = val
        for key, val in self._adam_v.items():
            tensors[f"adam.v.{key}"] = val
        return tensors

    def save(self, path: Union[str, Path]) -> None:
        """Checkpoint: config, optimizer step, RNG position, all tensors."""
        meta = {
            "net_config": _config_to_dict(self.config),
            "adam_step": self.adam_step,
            "has_adam_moments": bool(self._adam_m),
            "dropout_rng_state": self.dropout_rng.bit_generator.state,
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        tensors = self._all_tensors()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            fh.write(struct.pack("<I", len(tensors)))
            for name in sorted(tensors):
                arr = np.ascontiguousarray(tensors[name])
                name_b = name.encode("utf-8")
                fh.write(struct.pack("<H", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MotionRegressor":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < len(CHECKPOINT_MAGIC) + 6:
            raise CheckpointError("checkpoint truncated: missing header")
        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {data[:8]!r}")
        offset = len(CHECKPOINT_MAGIC)
        version, meta_len = struct.unpack_from("<HI", data, offset)
        offset += 6
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if offset + meta_len > len(data):
            raise CheckpointError("checkpoint truncated: metadata cut off")
        meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
        offset += meta_len

        model = cls(_config_from_dict(meta["net_config"]))
        model.adam_step = int(meta["adam_step"])
        model.dropout_rng.bit_generator.state = meta["dropout_rng_state"]
        if meta["has_adam_moments"]:
            for key, p in model.parameters().items():
                model._adam_m[key] = np.zeros_like(p)
                model._adam_v[key] = np.zeros_like(p)

        targets = model._all_tensors()
        (n_tensors,) = struct.unpack_from("<I", data, offset)
        offset += 4
        seen = set()
        for _ in range(n_tensors):
            try:
                (name_len,) = struct.unpack_from("<H", data, offset)
                offset += 2
                name = data[offset : offset + name_len].decode("utf-8")
                offset += name_len
                dtype_code, ndim = struct.unpack_from("<BB", data, offset)
                offset += 2
                shape = struct.unpack_from(f"<{ndim}I", data, offset)
                offset += 4 * ndim
            except struct.error as exc:
                raise CheckpointError("checkpoint truncated mid-tensor") from exc
            dtype = _CODE_DTYPES.get(dtype_code)
            if dtype is None:
                raise CheckpointError(f"unknown dtype code {dtype_code} for {name}")
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(data):
                raise CheckpointError(f"checkpoint truncated in tensor {name!r}")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            offset += nbytes
            target = targets.get(name)
            if target is None:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if tuple(shape) != target.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file {tuple(shape)}, "
                    f"model {target.shape}"
                )
            target[...] = arr.reshape(shape)
            seen.add(name)
        missing = set(targets) - seen
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
        if offset != len(data):
            raise CheckpointError("trailing bytes after last tensor")
        return model


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoints."""


def _config_to_dict(cfg: NetConfig) -> Dict:
    return {
        "conv_filters": list(cfg.conv_filters),
        "conv_schedule": [list(pair) for pair in cfg.conv_schedule],
        "recurrent_layers": cfg.recurrent_layers,
        "recurrent_width": cfg.recurrent_width,
        "trunk_fc_width": cfg.trunk_fc_width,
        "branch_widths": list(cfg.branch_widths),
        "dropout_rate": cfg.dropout_rate,
        "input_size": cfg.input_size,
        "in_channels": cfg.in_channels,
        "n_outputs": cfg.n_outputs,
        "dtype": cfg.dtype,
        "seed": cfg.seed,
    }


def _config_from_dict(data: Dict) -> NetConfig:
    return NetConfig(
        conv_filters=tuple(data["conv_filters"]),
        conv_schedule=tuple(tuple(p) for p in data["conv_schedule"]),
        recurrent_layers=int(data["recurrent_layers"]),
        recurrent_width=int(data["recurrent_width"]),
        trunk_fc_width=int(data["trunk_fc_width"]),
        branch_widths=tuple(data["branch_widths"]),
        dropout_rate=float(data["dropout_rate"]),
        input_size=int(data["input_size"]),
        in_channels=int(data["in_channels"]),
        n_outputs=int(data["n_outputs"]),
        dtype=str(data["dtype"]),
        seed=int(data["seed"]),
    )
