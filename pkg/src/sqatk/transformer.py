"""Spectrogram transformer scorer: overlapping 16x16 patches over the
log-mel plane, a CLS token, learned positional embeddings, pre-norm
encoder blocks with attention masking for padded frames, and five
affine heads (mos, col, dis, loud, noi) reading the CLS state.

Positional embeddings are stored as a (freq, time) grid plus a CLS
vector, so a model configured for a longer maximum duration extends the
grid along time without disturbing the positions of existing patches.
Shapes below use B=batch, P=patches, N=P+1 tokens, D=embed dim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, layer_norm, uniform_init, zeros_param
from .frontend import LogMelSpectrogram
from .quality import TASKS, QualityScores, clip_score

PAD_LOG_VALUE = math.log(1e-10)  # matches the front end's log floor


class ModelError(ValueError):
    pass


class NonFiniteError(ModelError):
    """Non-finite activations, a divergence signal."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 768
    patch_size: int = 16
    patch_stride_time: int = 10
    patch_stride_freq: int = 10
    n_layers: int = 12
    n_heads: int = 12
    mlp_ratio: float = 4.0
    max_duration_s: float = 12.0
    n_mels: int = 128
    frame_hop_s: float = 0.010
    tasks: tuple[str, ...] = TASKS
    pad_log_value: float = PAD_LOG_VALUE

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ModelError("embed_dim must be divisible by n_heads")
        if not (1 <= self.patch_stride_time <= self.patch_size):
            raise ModelError("patch_stride_time must be in [1, patch_size]")
        if not (1 <= self.patch_stride_freq <= self.patch_size):
            raise ModelError("patch_stride_freq must be in [1, patch_size]")
        if self.max_duration_s <= 0:
            raise ModelError("max_duration_s must be positive")
        if self.n_layers < 0:
            raise ModelError("n_layers must be >= 0")

    @property
    def max_frames(self) -> int:
        return int(round(self.max_duration_s / self.frame_hop_s))

    @property
    def n_freq_patches(self) -> int:
        return (self.n_mels - self.patch_size) // self.patch_stride_freq + 1

    @property
    def n_time_patches(self) -> int:
        return (self.max_frames - self.patch_size) // self.patch_stride_time + 1

    @property
    def n_patches(self) -> int:
        return self.n_freq_patches * self.n_time_patches

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration for tests and quick experiments."""
    base = dict(embed_dim=64, n_layers=2, n_heads=4, max_duration_s=2.0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class PatchSequence:
    """Flattened overlapping patches plus per-patch validity flags."""

    patches: np.ndarray  # (P, patch_size**2)
    valid: np.ndarray  # (P,) bool; False iff the patch is entirely padding
    grid: tuple[int, int]  # (n_freq_patches, n_time_patches)


def extract_patches(spec: LogMelSpectrogram, config: ModelConfig) -> PatchSequence:
    """Cut the spectrogram into overlapping patches in (freq, time) order.

    The time axis is padded with the log floor (or truncated) to exactly
    config.max_frames before patching. Patch i = f * n_time + t covers
    mel rows [f*stride_f, f*stride_f+patch) and frames
    [t*stride_t, t*stride_t+patch); it is invalid iff every frame it
    covers is padding.
    """
    if spec.n_mels != config.n_mels:
        raise ModelError(f"spectrogram has {spec.n_mels} mel bins, config expects {config.n_mels}")
    p = config.patch_size
    if config.n_mels < p or config.max_frames < p:
        raise ModelError("spectrogram narrower than one patch")

    plane = spec.values.T  # (n_mels, frames)
    n_real = min(plane.shape[1], config.max_frames)
    padded = np.full((config.n_mels, config.max_frames), config.pad_log_value)
    padded[:, :n_real] = plane[:, :n_real]

    windows = np.lib.stride_tricks.sliding_window_view(padded, (p, p))[
        :: config.patch_stride_freq, :: config.patch_stride_time
    ]
    n_f, n_t = windows.shape[:2]
    patches = np.ascontiguousarray(windows).reshape(n_f * n_t, p * p)

    time_starts = np.arange(n_t) * config.patch_stride_time
    valid = np.tile(time_starts < n_real, n_f)
    return PatchSequence(patches=patches, valid=valid, grid=(n_f, n_t))


# ------------------------------------------------------------- parameters


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministic parameter init: uniform +/-1/sqrt(fan_in) weights,
    zero biases, zero CLS token, ones/zeros layer-norm scales."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    p2 = config.patch_size**2
    params: dict[str, Tensor] = {
        "proj_w": uniform_init(rng, (p2, d), p2),
        "proj_b": zeros_param((d,)),
        "cls": zeros_param((d,)),
        "pos_cls": uniform_init(rng, (d,), d),
        "pos_grid": uniform_init(rng, (config.n_freq_patches, config.n_time_patches, d), d),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}_"
        params[pre + "ln1_gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln1_beta"] = zeros_param((d,))
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + name] = uniform_init(rng, (d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            params[pre + name] = zeros_param((d,))
        params[pre + "ln2_gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln2_beta"] = zeros_param((d,))
        params[pre + "mlp_w1"] = uniform_init(rng, (d, config.mlp_hidden), d)
        params[pre + "mlp_b1"] = zeros_param((config.mlp_hidden,))
        params[pre + "mlp_w2"] = uniform_init(rng, (config.mlp_hidden, d), config.mlp_hidden)
        params[pre + "mlp_b2"] = zeros_param((d,))
    for task in config.tasks:
        params[f"head_{task}_w"] = uniform_init(rng, (d, 1), d)
        params[f"head_{task}_b"] = zeros_param((1,))
    return params


# ----------------------------------------------------------------- forward


def embed_batch(
    patches: np.ndarray, valid: np.ndarray, params: dict[str, Tensor], config: ModelConfig
) -> tuple[Tensor, np.ndarray]:
    """Project patches, prepend CLS, add positions. Returns (B,N,D) tokens
    and the (B,N) token mask with the CLS position always valid."""
    batch, n_patches, patch_dim = patches.shape
    if patch_dim != params["proj_w"].shape[0]:
        raise ModelError(
            f"patch width {patch_dim} does not match projection input {params['proj_w'].shape[0]}"
        )
    if n_patches != config.n_patches:
        raise ModelError(f"{n_patches} patches, config expects {config.n_patches}")
    d = config.embed_dim

    x = Tensor(patches) @ params["proj_w"] + params["proj_b"]
    pos = params["pos_grid"].reshape((n_patches, d))
    x = x + pos
    cls_tok = (params["cls"] + params["pos_cls"]).reshape((1, 1, d)).broadcast_to((batch, 1, d))
    tokens = concat([cls_tok, x], axis=1)

    mask = np.concatenate([np.ones((batch, 1), dtype=bool), valid], axis=1)
    return tokens, mask


def embed(
    seq: PatchSequence, params: dict[str, Tensor], config: ModelConfig
) -> tuple[Tensor, np.ndarray]:
    """Single-clip embedding; returns (N, D) tokens and the (N,) mask."""
    tokens, mask = embed_batch(seq.patches[None], seq.valid[None], params, config)
    return tokens.reshape((seq.patches.shape[0] + 1, config.embed_dim)), mask[0]


def _attention(x: Tensor, bias: np.ndarray, params, prefix: str, config: ModelConfig) -> Tensor:
    batch, n, d = x.shape
    heads = config.n_heads
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):  # (B,N,D) -> (B,H,N,dh)
        return t.reshape((batch, n, heads, dh)).transpose((0, 2, 1, 3))

    q = split(x @ params[prefix + "wq"] + params[prefix + "bq"])
    k = split(x @ params[prefix + "wk"] + params[prefix + "bk"])
    v = split(x @ params[prefix + "wv"] + params[prefix + "bv"])

    scores = (q @ k.transpose((0, 1, 3, 2))) * scale + Tensor(bias)
    attn = scores.softmax()
    ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape((batch, n, d))
    return ctx @ params[prefix + "wo"] + params[prefix + "bo"]


def encoder_forward(
    tokens: Tensor, mask: np.ndarray, params: dict[str, Tensor], config: ModelConfig
) -> Tensor:
    """Pre-norm transformer stack over (B,N,D) tokens (or (N,D) for one
    clip). Masked positions contribute -inf attention logits as keys, so
    no valid token attends to padding. n_layers == 0 is the identity."""
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape((1,) + tuple(tokens.shape))
        mask = mask[None]
    if mask.shape != tokens.shape[:2]:
        raise ModelError(f"mask shape {mask.shape} does not match tokens {tokens.shape[:2]}")
    if not mask[:, 0].all():
        raise ModelError("CLS position must be valid in the attention mask")

    bias = np.where(mask, 0.0, -np.inf)[:, None, None, :]  # (B,1,1,N) over keys
    x = tokens
    for i in range(config.n_layers):
        pre = f"layer{i}_"
        h = layer_norm(x, params[pre + "ln1_gamma"], params[pre + "ln1_beta"])
        x = x + _attention(h, bias, params, pre, config)
        h = layer_norm(x, params[pre + "ln2_gamma"], params[pre + "ln2_beta"])
        h = (h @ params[pre + "mlp_w1"] + params[pre + "mlp_b1"]).gelu()
        x = x + (h @ params[pre + "mlp_w2"] + params[pre + "mlp_b2"])

    if not np.isfinite(x.data).all():
        raise NonFiniteError("non-finite encoder activations")
    return x.reshape(tuple(x.shape[1:])) if single else x


def head_outputs(cls_state: Tensor, params: dict[str, Tensor], config: ModelConfig) -> dict[str, Tensor]:
    """Apply the five independent affine heads to (B,D) CLS states."""
    batch = cls_state.shape[0]
    out = {}
    for task in config.tasks:
        raw = cls_state @ params[f"head_{task}_w"] + params[f"head_{task}_b"]
        out[task] = raw.reshape((batch,))
    return out


def forward_scores(
    patches: np.ndarray, valid: np.ndarray, params: dict[str, Tensor], config: ModelConfig
) -> dict[str, Tensor]:
    """Full batched forward pass: (B,P,patch^2) patches to raw per-task
    scores, unclipped so training gradients are unimpeded."""
    tokens, mask = embed_batch(patches, valid, params, config)
    encoded = encoder_forward(tokens, mask, params, config)
    return head_outputs(encoded[:, 0, :], params, config)


def predict(
    spec: LogMelSpectrogram, params: dict[str, Tensor], config: ModelConfig
) -> QualityScores:
    """Score one clip; reported values are clipped to [1, 5]."""
    seq = extract_patches(spec, config)
    raw = forward_scores(seq.patches[None], seq.valid[None], params, config)
    return QualityScores(**{t: clip_score(raw[t].data[0]) for t in config.tasks})


# ------------------------------------------------------------ model facade


class SpectrogramTransformer:
    """Bundles config + parameters and adapts them to the training loop."""

    kind = "ast"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def prepare(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Turn a (frames, mels) feature matrix into per-clip model input."""
        spec = LogMelSpectrogram(
            values=values,
            n_mels=values.shape[1],
            frame_hop_s=self.config.frame_hop_s,
            frame_len_s=0.025,
        )
        seq = extract_patches(spec, self.config)
        return seq.patches, seq.valid

    def collate(self, inputs: list[tuple[np.ndarray, np.ndarray]]):
        patches = np.stack([p for p, _ in inputs])
        valid = np.stack([v for _, v in inputs])
        return patches, valid

    def forward_batch(self, batch) -> dict[str, Tensor]:
        patches, valid = batch
        return forward_scores(patches, valid, self.params, self.config)

    def predict_scores(self, values: np.ndarray) -> QualityScores:
        inputs = self.prepare(values)
        raw = self.forward_batch(self.collate([inputs]))
        return QualityScores(**{t: clip_score(raw[t].data[0]) for t in self.config.tasks})

    def config_echo(self) -> dict[str, str]:
        cfg = self.config
        return {
            "model.kind": self.kind,
            "model.embed_dim": str(cfg.embed_dim),
            "model.patch_size": str(cfg.patch_size),
            "model.patch_stride_time": str(cfg.patch_stride_time),
            "model.patch_stride_freq": str(cfg.patch_stride_freq),
            "model.n_layers": str(cfg.n_layers),
            "model.n_heads": str(cfg.n_heads),
            "model.mlp_ratio": repr(cfg.mlp_ratio),
            "model.max_duration_s": repr(cfg.max_duration_s),
            "model.n_mels": str(cfg.n_mels),
            "model.frame_hop_s": repr(cfg.frame_hop_s),
        }

    @classmethod
    def config_from_echo(cls, echo: dict[str, str]) -> ModelConfig:
        return ModelConfig(
            embed_dim=int(echo["model.embed_dim"]),
            patch_size=int(echo["model.patch_size"]),
            patch_stride_time=int(echo["model.patch_stride_time"]),
            patch_stride_freq=int(echo["model.patch_stride_freq"]),
            n_layers=int(echo["model.n_layers"]),
            n_heads=int(echo["model.n_heads"]),
            mlp_ratio=float(echo["model.mlp_ratio"]),
            max_duration_s=float(echo["model.max_duration_s"]),
            n_mels=int(echo["model.n_mels"]),
            frame_hop_s=float(echo["model.frame_hop_s"]),
        )


def widen_max_duration(
    params: dict[str, Tensor], old: ModelConfig, new: ModelConfig, seed: int = 0
) -> dict[str, Tensor]:
    """Carry parameters to a config with a longer max duration: the
    positional grid keeps existing (freq, time) entries and appends
    freshly initialized columns for the new time positions."""
    if new.n_time_patches < old.n_time_patches or new.n_freq_patches != old.n_freq_patches:
        raise ModelError("target config must extend the time axis only")
    fresh = init_params(new, seed)
    out = {}
    for name, tensor in fresh.items():
        if name == "pos_grid":
            grid = tensor.data.copy()
            grid[:, : old.n_time_patches, :] = params["pos_grid"].data
            out[name] = Tensor(grid, requires_grad=True)
        else:
            out[name] = Tensor(params[name].data.copy(), requires_grad=True)
    return out
