"""Event detectors: per-frame feature stage, stacked LSTM, sigmoid head, thresholding.

Variants:

* ``hist``      132-entry motion vector fed straight to the LSTM.
* ``conv``      120x160x1 appearance tensor through a small CNN.
* ``convFlow``  120x160x3 appearance+flow tensor through the same CNN.
* ``external``  vectors from a user-supplied feature provider.

CNN stack (valid convs, stride 1): conv5x5-16/ReLU, pool, conv5x5-32/ReLU,
pool, [conv3x3-64/ReLU, pool], flatten, dense-256/ReLU. Shapes for a
120x160 input: 116x156 -> 58x78 -> 54x74 -> 27x37 (flatten 31,968); with the
third block 25x35 is cropped to 24x34 before pooling -> 12x17 (13,056).

Any variant may carry a fixed elementwise affine on its input
(``input.shift``, ``input.scale``, shaped like one frame representation)
fitted on the training split. It is stored in the checkpoint next to the
weights but never updated by the optimizer. For appearance tensors it
subtracts the mean scene, which is what lets the CNN see the vehicles at all.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .clips import FRAME_HEIGHT, FRAME_WIDTH, N_EVENTS
from .nn import layers
from .nn.checkpoint import decode_checkpoint, encode_checkpoint
from .nn.core import Parameter, init_std, truncated_normal
from .nn.lstm import lstm_backward, lstm_forward, lstm_step

VARIANTS = ("hist", "conv", "convFlow", "external")
HIST_LENGTH = 132
HIST_HIDDEN = (20, 50, 132)
EXTERNAL_HIDDEN = (30, 50, 200)
DEFAULT_HIDDEN = {"hist": 50, "conv": 128, "convFlow": 128, "external": 50}
CONV_CHUNK = 25  # frames per CNN mini-batch during training
SCALE_FLOOR = 1e-2  # smallest per-element scale: ~2.5 grey levels, a third of one vehicle in a stripe


class ConfigError(ValueError):
    pass


class RepresentationError(TypeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "hist"
    conv_layers: int = 2
    rnn_layers: int = 1
    hidden_size: int | None = None
    thresholds: tuple = (0.5, 0.5, 0.5, 0.5)
    feature_length: int = HIST_LENGTH  # external variant only
    conv_widths: tuple = (16, 32, 64)
    dense_units: int = 256
    standardize: bool = False  # fixed per-element input affine fitted on training data

    def __post_init__(self):
        v = {"convflow": "convFlow"}.get(self.variant, self.variant)
        object.__setattr__(self, "variant", v)
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden_size is None:
            object.__setattr__(self, "hidden_size", DEFAULT_HIDDEN[v])
        object.__setattr__(self, "thresholds", tuple(float(g) for g in self.thresholds))
        object.__setattr__(self, "conv_widths", tuple(int(c) for c in self.conv_widths))
        if self.rnn_layers not in (1, 2):
            raise ConfigError("rnn_layers must be 1 or 2")
        if self.conv_layers not in (2, 3):
            raise ConfigError("conv_layers must be 2 or 3")
        if self.hidden_size <= 0:
            raise ConfigError("hidden_size must be positive")
        if v == "hist" and self.hidden_size not in HIST_HIDDEN:
            raise ConfigError(f"hist hidden size must be one of {HIST_HIDDEN}")
        if v == "external":
            if self.hidden_size not in EXTERNAL_HIDDEN:
                raise ConfigError(f"external hidden size must be one of {EXTERNAL_HIDDEN}")
            if self.feature_length <= 0:
                raise ConfigError("external feature_length must be positive")
        if len(self.thresholds) != N_EVENTS or not all(0.0 < g < 1.0 for g in self.thresholds):
            raise ConfigError("thresholds must be 4 values in (0, 1)")

    @property
    def uses_cnn(self) -> bool:
        return self.variant in ("conv", "convFlow")

    @property
    def input_channels(self) -> int:
        return 3 if self.variant == "convFlow" else 1

    @property
    def representation_shape(self) -> tuple:
        if self.uses_cnn:
            return (FRAME_HEIGHT, FRAME_WIDTH, self.input_channels)
        if self.variant == "hist":
            return (HIST_LENGTH,)
        return (self.feature_length,)

    def with_thresholds(self, thresholds) -> "ModelConfig":
        d = asdict(self)
        d["thresholds"] = tuple(float(g) for g in thresholds)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def cnn_plan(config: ModelConfig):
    """Conv blocks as ``(kernel, channels_in, channels_out)`` plus the flattened length."""
    h, w, c = config.representation_shape
    blocks = []
    kernels = (5, 5, 3)[: config.conv_layers]
    for k, f in zip(kernels, config.conv_widths):
        blocks.append((k, c, f))
        h, w, c = (h - k + 1) // 2, (w - k + 1) // 2, f
    return blocks, h * w * c


def decide(p, thresholds) -> np.ndarray:
    """``y_h = 1`` iff ``p_h >= gamma_h``."""
    return np.asarray(p) >= np.asarray(thresholds)


class EventDetectorModel:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter], dtype=np.float32, buffers=None):
        self.config = config
        self.params = params
        self.dtype = dtype
        # non-trainable tensors, kept in float32 so a reloaded checkpoint computes identically
        self.buffers: dict[str, np.ndarray] = {}
        if config.standardize:
            shape = config.representation_shape
            given = buffers or {}
            self.buffers = {
                "input.shift": np.asarray(given.get("input.shift", np.zeros(shape)), dtype=np.float32),
                "input.scale": np.asarray(given.get("input.scale", np.ones(shape)), dtype=np.float32),
            }
        self.reset_state()

    # --- parameters -------------------------------------------------------

    def parameter_list(self) -> list[Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "EventDetectorModel":
        params = {k: Parameter(k, p.value.astype(dtype)) for k, p in self.params.items()}
        return EventDetectorModel(self.config, params, dtype, self.buffers)

    def fit_standardization(self, reps) -> None:
        """Set the input affine to the per-element mean and std over all frames.

        ``reps`` is one ``(frames, *representation_shape)`` array or an iterable
        of them (one per clip), so appearance tensors never have to be
        concatenated in memory. Per-batch moments are merged exactly.
        """
        if not self.config.standardize:
            raise ConfigError("model was not configured with standardize=True")
        batches = [reps] if isinstance(reps, np.ndarray) else reps
        n, mean, m2 = 0, 0.0, 0.0
        for batch in batches:
            b = np.asarray(batch, dtype=np.float64)
            k = len(b)
            if k == 0:
                continue
            b_mean = b.mean(axis=0)
            b_m2 = ((b - b_mean) ** 2).sum(axis=0)
            delta = b_mean - mean
            total = n + k
            mean = mean + delta * (k / total)
            m2 = m2 + b_m2 + delta**2 * (n * k / total)
            n = total
        if n == 0:
            raise ValueError("cannot fit standardization on zero frames")
        std = np.sqrt(m2 / n)
        self.buffers["input.shift"] = np.broadcast_to(mean, std.shape).astype(np.float32)
        self.buffers["input.scale"] = np.maximum(std, SCALE_FLOOR).astype(np.float32)

    def _standardize(self, r):
        if not self.buffers:
            return r
        out = (r.astype(np.float32) - self.buffers["input.shift"]) / self.buffers["input.scale"]
        return out.astype(self.dtype, copy=False)

    def _v(self, name):
        return self.params[name].value

    # --- state ------------------------------------------------------------

    def reset_state(self) -> None:
        hid = self.config.hidden_size
        self.state = [
            (np.zeros(hid, dtype=self.dtype), np.zeros(hid, dtype=self.dtype)) for _ in range(self.config.rnn_layers)
        ]

    # --- per-frame inference ---------------------------------------------

    def _check_rep(self, r, batched: bool):
        r = np.asarray(r)
        want = self.config.representation_shape
        got = r.shape[1:] if batched else r.shape
        if got != want or not np.issubdtype(r.dtype, np.floating):
            raise RepresentationError(
                f"{self.config.variant} model expects representation of shape {want}, got {r.shape} {r.dtype}"
            )
        return r.astype(self.dtype, copy=False)

    def _features(self, r):
        """Feature stage for one frame (identity for vector variants)."""
        if not self.config.uses_cnn:
            return r
        blocks, _ = cnn_plan(self.config)
        a = r
        for i, _ in enumerate(blocks, start=1):
            z, _ = layers.conv2d_forward(a, self._v(f"conv{i}.W"), self._v(f"conv{i}.b"))
            a, _ = layers.maxpool2x2_forward(_even_crop(z))
            a = layers.relu(a)
        out, _ = layers.dense_forward(a.reshape(-1), self._v("fc.W"), self._v("fc.b"), "relu")
        return out

    def step(self, r) -> np.ndarray:
        """Advance the recurrent state by one frame and return the 4 event scores."""
        x = self._features(self._standardize(self._check_rep(r, batched=False)))
        new_state = []
        for layer, (h, c) in enumerate(self.state, start=1):
            h, c = lstm_step(x, h, c, self._v(f"lstm{layer}.W"), self._v(f"lstm{layer}.b"))
            new_state.append((h, c))
            x = h
        self.state = new_state
        p, _ = layers.dense_forward(x, self._v("head.W"), self._v("head.b"), "sigmoid")
        return p

    def forward_clip(self, reps) -> np.ndarray:
        """Scores for every frame of a clip, starting from a zero state."""
        self.reset_state()
        return np.stack([self.step(r) for r in reps])

    def decide(self, p, thresholds=None) -> np.ndarray:
        return decide(p, self.config.thresholds if thresholds is None else thresholds)

    # --- training path ----------------------------------------------------

    def forward_train(self, reps):
        """Batched forward over a clip; returns ``(logits, cache)`` for :meth:`backward`."""
        reps = self._standardize(self._check_rep(reps, batched=True))
        cache = {}
        if self.config.uses_cnn:
            xs, cache["cnn"] = self._cnn_forward_batch(reps)
        else:
            xs = reps
        cache["lstm"] = []
        for layer in range(1, self.config.rnn_layers + 1):
            xs, lc = lstm_forward(xs, self._v(f"lstm{layer}.W"), self._v(f"lstm{layer}.b"))
            cache["lstm"].append(lc)
        logits, cache["head"] = layers.dense_forward(xs, self._v("head.W"), self._v("head.b"))
        return logits, cache

    def backward(self, dlogits, cache) -> None:
        """Accumulate parameter gradients for ``dL/dlogits`` of shape ``(T, 4)``."""
        dh, dW, db = layers.dense_backward(dlogits.astype(self.dtype, copy=False), cache["head"])
        self.params["head.W"].grad += dW
        self.params["head.b"].grad += db
        for layer in range(self.config.rnn_layers, 0, -1):
            dh, dW, db = lstm_backward(dh, cache["lstm"][layer - 1])
            self.params[f"lstm{layer}.W"].grad += dW
            self.params[f"lstm{layer}.b"].grad += db
        if self.config.uses_cnn:
            self._cnn_backward_batch(dh, cache["cnn"])

    def _cnn_forward_batch(self, reps):
        blocks, _ = cnn_plan(self.config)
        outs = []
        chunks = []
        for start in range(0, len(reps), CONV_CHUNK):
            a = reps[start:start + CONV_CHUNK]
            saved = []
            for i in range(1, len(blocks) + 1):
                z, _ = layers.conv2d_forward(a, self._v(f"conv{i}.W"), self._v(f"conv{i}.b"))
                # relu commutes with max, so it runs on the 4x smaller pooled map
                pooled, pool_cache = layers.maxpool2x2_forward(_even_crop(z))
                a_out = layers.relu(pooled)
                saved.append((a, z.shape, pooled > 0, pool_cache))
                a = a_out
            out, fc_cache = layers.dense_forward(a.reshape(a.shape[0], -1), self._v("fc.W"), self._v("fc.b"), "relu")
            outs.append(out)
            chunks.append((saved, a.shape, fc_cache))
        return np.concatenate(outs), chunks

    def _cnn_backward_batch(self, dxs, chunks):
        start = 0
        for saved, pooled_shape, fc_cache in chunks:
            n = pooled_shape[0]
            dflat, dW, db = layers.dense_backward(dxs[start:start + n], fc_cache)
            start += n
            self.params["fc.W"].grad += dW
            self.params["fc.b"].grad += db
            da = dflat.reshape(pooled_shape)
            for i in range(len(saved), 0, -1):
                a_in, z_shape, active, pool_cache = saved[i - 1]
                dcrop = layers.maxpool2x2_backward(da * active, pool_cache)
                dz = np.zeros(z_shape, dtype=dcrop.dtype)
                dz[:, : dcrop.shape[1], : dcrop.shape[2]] = dcrop
                da, dK, dbias = layers.conv2d_backward(dz, (a_in, self._v(f"conv{i}.W")), need_dx=i > 1)
                self.params[f"conv{i}.W"].grad += dK
                self.params[f"conv{i}.b"].grad += dbias

    # --- persistence --------------------------------------------------------

    def to_bytes(self, extra: dict | None = None) -> bytes:
        tensors = {k: p.value for k, p in self.params.items()}
        tensors.update(self.buffers)
        return encode_checkpoint(self.config.to_dict(), tensors, extra)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EventDetectorModel":
        header, tensors = decode_checkpoint(data)
        config = ModelConfig.from_dict(header["config"])
        expected = build_model(config, seed=0)
        layout = {k: p.value.shape for k, p in expected.params.items()}
        layout.update({k: b.shape for k, b in expected.buffers.items()})
        if set(tensors) != set(layout):
            raise ValueError(f"checkpoint tensors {sorted(tensors)} do not match {config.variant} layout")
        for name, shape in layout.items():
            if tensors[name].shape != shape:
                raise ValueError(f"tensor {name}: shape {tensors[name].shape} != {shape}")
        params = {name: Parameter(name, tensors[name]) for name in expected.params}
        return cls(config, params, buffers={name: tensors[name] for name in expected.buffers})


def _even_crop(x):
    """Drop a trailing row/column so 2x2 pooling tiles the map exactly."""
    h, w = x.shape[-3], x.shape[-2]
    return x[..., : h - h % 2, : w - w % 2, :]


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> EventDetectorModel:
    """Deterministically initialised model for ``config``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def add(name, value):
        params[name] = Parameter(name, np.asarray(value, dtype=dtype))

    if config.uses_cnn:
        blocks, flat = cnn_plan(config)
        for i, (k, cin, cout) in enumerate(blocks, start=1):
            fan_in = k * k * cin
            add(f"conv{i}.W", truncated_normal(rng, (k, k, cin, cout), init_std(fan_in)))
            add(f"conv{i}.b", np.zeros(cout))
        add("fc.W", truncated_normal(rng, (config.dense_units, flat), init_std(flat)))
        add("fc.b", np.zeros(config.dense_units))
        n_in = config.dense_units
    else:
        n_in = config.representation_shape[0]

    hid = config.hidden_size
    for layer in range(1, config.rnn_layers + 1):
        fan_in = n_in + hid
        bound = 1.0 / np.sqrt(fan_in)
        add(f"lstm{layer}.W", rng.uniform(-bound, bound, size=(4 * hid, fan_in)))
        b = np.zeros(4 * hid)
        b[hid:2 * hid] = 1.0  # forget gate
        add(f"lstm{layer}.b", b)
        n_in = hid
    add("head.W", truncated_normal(rng, (N_EVENTS, hid), init_std(hid)))
    add("head.b", np.zeros(N_EVENTS))
    return EventDetectorModel(config, params, dtype)


def save_model(model: EventDetectorModel, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(model.to_bytes(extra))


def load_model(path) -> EventDetectorModel:
    return EventDetectorModel.from_bytes(Path(path).read_bytes())
