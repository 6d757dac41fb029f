"""Compact convolutional baseline over the same log-mel features.

Four conv(3x3) + ReLU + max-pool stages, global average pooling over
time, and the same five affine heads as the transformer. This is a
stand-in architecture for training-protocol experiments; it is not a
reproduction of any published CNN scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d, maxpool2d, uniform_init, zeros_param
from .quality import TASKS, QualityScores, clip_score
from .training import TrainConfig, fit
from .transformer import PAD_LOG_VALUE, ModelError


@dataclass(frozen=True)
class CnnConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3
    pool: tuple[int, ...] = (2, 2, 2, 2)
    n_mels: int = 128
    max_duration_s: float = 12.0
    frame_hop_s: float = 0.010
    tasks: tuple[str, ...] = TASKS
    head_input: int = 0  # 0 means derived from the stages
    pad_log_value: float = PAD_LOG_VALUE

    def __post_init__(self):
        if len(self.channels) != len(self.pool):
            raise ModelError("channels and pool must have one entry per stage")
        if self.kernel != 3:
            raise ModelError("only 3x3 kernels are supported")
        if self.reduced_mels < 1:
            raise ModelError("pooling collapses the mel axis to nothing")
        if self.head_input and self.head_input != self.derived_head_input:
            raise ModelError(
                f"head_input {self.head_input} does not match final feature "
                f"width {self.derived_head_input}"
            )

    @property
    def max_frames(self) -> int:
        return int(round(self.max_duration_s / self.frame_hop_s))

    @property
    def reduced_mels(self) -> int:
        mels = self.n_mels
        for p in self.pool:
            mels //= p
        return mels

    @property
    def derived_head_input(self) -> int:
        return self.channels[-1] * self.reduced_mels


def desk_cnn_config(**overrides) -> CnnConfig:
    base = dict(max_duration_s=2.0)
    base.update(overrides)
    return CnnConfig(**base)


def init_cnn_params(config: CnnConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    in_ch = 1
    for i, out_ch in enumerate(config.channels):
        fan_in = in_ch * config.kernel**2
        params[f"conv{i}_w"] = uniform_init(rng, (out_ch, in_ch, config.kernel, config.kernel), fan_in)
        params[f"conv{i}_b"] = zeros_param((out_ch,))
        in_ch = out_ch
    width = config.derived_head_input
    for task in config.tasks:
        params[f"head_{task}_w"] = uniform_init(rng, (width, 1), width)
        params[f"head_{task}_b"] = zeros_param((1,))
    return params


def pad_to_max_frames(values: np.ndarray, config: CnnConfig) -> np.ndarray:
    """(frames, mels) -> (1, mels, max_frames) plane, floor-padded."""
    plane = values.T
    n_real = min(plane.shape[1], config.max_frames)
    padded = np.full((config.n_mels, config.max_frames), config.pad_log_value)
    padded[:, :n_real] = plane[:, :n_real]
    return padded[None]


def cnn_forward_batch(
    x: np.ndarray, params: dict[str, Tensor], config: CnnConfig
) -> dict[str, Tensor]:
    """(B, 1, mels, max_frames) input to raw per-task scores."""
    if x.shape[2] != config.n_mels or x.shape[3] != config.max_frames:
        raise ModelError(f"input plane {x.shape[2:]} != ({config.n_mels}, {config.max_frames})")
    h = Tensor(x)
    for i, factor in enumerate(config.pool):
        h = conv2d(h, params[f"conv{i}_w"], params[f"conv{i}_b"], padding=1).relu()
        h = maxpool2d(h, factor)
    pooled = h.mean(axis=3)  # global average over time
    batch = x.shape[0]
    feats = pooled.reshape((batch, config.derived_head_input))
    out = {}
    for task in config.tasks:
        raw = feats @ params[f"head_{task}_w"] + params[f"head_{task}_b"]
        out[task] = raw.reshape((batch,))
    return out


def cnn_forward(values: np.ndarray, params: dict[str, Tensor], config: CnnConfig) -> QualityScores:
    """Score one (frames, mels) feature matrix; outputs clipped to [1, 5]."""
    raw = cnn_forward_batch(pad_to_max_frames(values, config)[None], params, config)
    return QualityScores(**{t: clip_score(raw[t].data[0]) for t in config.tasks})


class ConvBaseline:
    """Training-loop adapter mirroring SpectrogramTransformer's surface."""

    kind = "cnn"

    def __init__(self, config: CnnConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_cnn_params(config, seed)

    def prepare(self, values: np.ndarray) -> np.ndarray:
        return pad_to_max_frames(values, self.config)

    def collate(self, inputs: list[np.ndarray]) -> np.ndarray:
        return np.stack(inputs)

    def forward_batch(self, batch: np.ndarray) -> dict[str, Tensor]:
        return cnn_forward_batch(batch, self.params, self.config)

    def predict_scores(self, values: np.ndarray) -> QualityScores:
        raw = self.forward_batch(self.collate([self.prepare(values)]))
        return QualityScores(**{t: clip_score(raw[t].data[0]) for t in self.config.tasks})

    def config_echo(self) -> dict[str, str]:
        cfg = self.config
        return {
            "model.kind": self.kind,
            "model.channels": ",".join(str(c) for c in cfg.channels),
            "model.kernel": str(cfg.kernel),
            "model.pool": ",".join(str(p) for p in cfg.pool),
            "model.n_mels": str(cfg.n_mels),
            "model.max_duration_s": repr(cfg.max_duration_s),
            "model.frame_hop_s": repr(cfg.frame_hop_s),
        }

    @classmethod
    def config_from_echo(cls, echo: dict[str, str]) -> CnnConfig:
        return CnnConfig(
            channels=tuple(int(c) for c in echo["model.channels"].split(",")),
            kernel=int(echo["model.kernel"]),
            pool=tuple(int(p) for p in echo["model.pool"].split(",")),
            n_mels=int(echo["model.n_mels"]),
            max_duration_s=float(echo["model.max_duration_s"]),
            frame_hop_s=float(echo["model.frame_hop_s"]),
        )


def baseline_train_config(**overrides) -> TrainConfig:
    """Training protocol defaults for the baseline: lr 0.001, up to 500
    epochs, early stop 20, LR patience 15, batch size 100."""
    base = dict(
        learning_rate=0.001, max_epochs=500, early_stop_patience=20, lr_patience=15, batch_size=100
    )
    base.update(overrides)
    return TrainConfig(**base)


def train_baseline(model: ConvBaseline, train_samples, val_samples, config: TrainConfig | None = None, history_path=None):
    """Train the baseline with the standard protocol (see baseline_train_config)."""
    return fit(model, train_samples, val_samples, config or baseline_train_config(), history_path)
