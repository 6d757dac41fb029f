"""Central finite-difference gradient checks for every differentiable
primitive and for the full desk-scale models. Shared by the test suite
and the `gradcheck` CLI command."""

from __future__ import annotations

import numpy as np

from . import cnn as cnn_mod
from . import transformer as tf_mod
from .autodiff import Tensor, conv2d, layer_norm, maxpool2d
from .quality import TASKS
from .training import mse_loss

DEFAULT_TOLERANCE = 1e-3


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-4)
    return abs(a - b) / scale


def check_function(build_loss, tensors: dict[str, Tensor], h: float = 1e-5,
                   coords_per_tensor: int = 6, seed: int = 0) -> float:
    """Compare analytic gradients against central differences.

    build_loss() must rebuild the scalar loss from the live tensors each
    call. Returns the max relative error over sampled coordinates.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        n = flat.size
        picks = range(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + h
            up = float(build_loss().data)
            flat[idx] = original - h
            down = float(build_loss().data)
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
    return worst


def _rand(rng, shape):
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative FD error for each primitive on small random tensors."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    x = _rand(rng, (3, 5))
    w = _rand(rng, (5, 4))
    b = _rand(rng, (4,))
    results["linear"] = check_function(lambda: ((x @ w + b) * (x @ w + b)).sum(), {"x": x, "w": w, "b": b})

    s = _rand(rng, (4, 6))
    probe = Tensor(rng.normal(size=(4, 6)))
    results["softmax"] = check_function(lambda: (s.softmax() * probe).sum(), {"s": s})

    ln_x = _rand(rng, (3, 8))
    gamma = Tensor(rng.normal(1.0, 0.2, size=(8,)), requires_grad=True)
    beta = _rand(rng, (8,))
    ln_probe = Tensor(rng.normal(size=(3, 8)))
    results["layer_norm"] = check_function(
        lambda: (layer_norm(ln_x, gamma, beta) * ln_probe).sum(),
        {"x": ln_x, "gamma": gamma, "beta": beta},
    )

    g = _rand(rng, (5, 5))
    results["gelu"] = check_function(lambda: (g.gelu() * g.gelu()).sum(), {"g": g})

    r = _rand(rng, (5, 5))
    r_probe = Tensor(rng.normal(size=(5, 5)))
    results["relu"] = check_function(lambda: (r.relu() * r_probe).sum(), {"r": r})

    # Attention: q/k/v projections, masked scores, softmax, value mix.
    att_x = _rand(rng, (2, 5, 8))
    wq, wk, wv = (_rand(rng, (8, 8)) for _ in range(3))
    mask = np.array([[True, True, True, True, False], [True, True, True, False, False]])
    bias = np.where(mask, 0.0, -np.inf)[:, None, :]
    att_probe = Tensor(rng.normal(size=(2, 5, 8)))

    def attention_loss():
        q, k, v = att_x @ wq, att_x @ wk, att_x @ wv
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(8)) + Tensor(bias)
        return ((scores.softmax() @ v) * att_probe).sum()

    results["attention"] = check_function(attention_loss, {"x": att_x, "wq": wq, "wk": wk, "wv": wv})

    cx = _rand(rng, (2, 3, 6, 7))
    cw = _rand(rng, (4, 3, 3, 3))
    cb = _rand(rng, (4,))
    c_probe = Tensor(rng.normal(size=(2, 4, 6, 7)))
    results["conv2d"] = check_function(
        lambda: (conv2d(cx, cw, cb) * c_probe).sum(), {"x": cx, "w": cw, "b": cb}
    )

    # Max pooling away from ties: distinct values guaranteed by arange jitter.
    base = np.arange(2 * 2 * 6 * 6, dtype=np.float64).reshape(2, 2, 6, 6)
    mp = Tensor(base + rng.uniform(0.0, 0.3, size=base.shape), requires_grad=True)
    mp_probe = Tensor(rng.normal(size=(2, 2, 3, 3)))
    results["maxpool"] = check_function(lambda: (maxpool2d(mp, 2) * mp_probe).sum(), {"x": mp})

    mse_pred = _rand(rng, (6,))
    target = rng.normal(size=6)
    m = np.array([True, False, True, True, False, True])
    results["mse"] = check_function(lambda: mse_loss(mse_pred, target, m), {"pred": mse_pred})

    return results


def full_model_check(seed: int = 0, h: float = 1e-3, coords_per_tensor: int = 4) -> float:
    """FD check of the complete 2-layer desk transformer loss."""
    config = tf_mod.desk_config(max_duration_s=0.6)
    params = tf_mod.init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1)

    batch = 2
    frames = rng.integers(30, config.max_frames, size=batch)
    inputs = []
    for n in frames:
        values = rng.normal(-5.0, 2.0, size=(int(n), config.n_mels))
        spec = tf_mod.LogMelSpectrogram(values, config.n_mels, config.frame_hop_s, 0.025)
        seq = tf_mod.extract_patches(spec, config)
        inputs.append((seq.patches, seq.valid))
    patches = np.stack([p for p, _ in inputs])
    valid = np.stack([v for _, v in inputs])
    labels = {t: rng.uniform(1.0, 5.0, size=batch) for t in TASKS}
    mask = np.ones(batch, dtype=bool)

    def build_loss():
        preds = tf_mod.forward_scores(patches, valid, params, config)
        total = None
        for t in TASKS:
            loss = mse_loss(preds[t], labels[t], mask)
            total = loss if total is None else total + loss
        return total

    return check_function(build_loss, params, h=h, coords_per_tensor=coords_per_tensor, seed=seed)


def full_cnn_check(seed: int = 0, h: float = 1e-4, coords_per_tensor: int = 4) -> float:
    """FD check of the CNN baseline loss on a small input plane.

    The network is piecewise linear (ReLU + max pool), so the step is
    smaller than the transformer's to stay away from kink crossings."""
    config = cnn_mod.CnnConfig(channels=(4, 8), pool=(2, 2), n_mels=32, max_duration_s=0.4)
    params = cnn_mod.init_cnn_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    batch = 2
    x = rng.normal(-5.0, 2.0, size=(batch, 1, config.n_mels, config.max_frames))
    labels = {t: rng.uniform(1.0, 5.0, size=batch) for t in TASKS}
    mask = np.ones(batch, dtype=bool)

    def build_loss():
        preds = cnn_mod.cnn_forward_batch(x, params, config)
        total = None
        for t in TASKS:
            loss = mse_loss(preds[t], labels[t], mask)
            total = loss if total is None else total + loss
        return total

    return check_function(build_loss, params, h=h, coords_per_tensor=coords_per_tensor, seed=seed)


def run_suite(seed: int = 0) -> dict[str, float]:
    results = primitive_checks(seed)
    results["desk_transformer"] = full_model_check(seed)
    results["desk_cnn"] = full_cnn_check(seed)
    return results
