"""Small numpy network core with hand-written reverse-mode gradients.

Parameters live in plain ``dict[str, ndarray]`` objects so that a student
and its EMA teacher can share one architecture object. Layers follow the
dtype of their parameters: float32 for training, float64 when
:func:`grad_check` promotes a copy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, FormatError, NumericError

Params = dict[str, np.ndarray]

STD_EPS = 1e-5


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


# ----------------------------------------------------------------------------
# Elementwise activations
# ----------------------------------------------------------------------------

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0)
    if name == "gelu":
        return (0.5 * x * (1.0 + erf(x * _SQRT_HALF))).astype(x.dtype, copy=False)
    raise ConfigError(f"unknown activation {name!r}")


def activation_backward(name: str, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient wrt the pre-activation ``x``."""
    if name == "relu":
        return grad * (x > 0)
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf)).astype(grad.dtype, copy=False)
    raise ConfigError(f"unknown activation {name!r}")


# ----------------------------------------------------------------------------
# Temporal convolution (same padding), batch-first (B, T, C)
# ----------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    B, T, C = x.shape
    pad = dilation * (kernel - 1) // 2
    if kernel == 1:
        return x
    xp = np.zeros((B, T + 2 * pad, C), dtype=x.dtype)
    xp[:, pad : pad + T] = x
    return np.concatenate([xp[:, j * dilation : j * dilation + T] for j in range(kernel)], axis=2)


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1):
    """``w`` has shape (kernel, C_in, C_out). Returns output and the im2col cache."""
    kernel, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DataError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    cols = _im2col(x, kernel, dilation)
    y = cols @ w.reshape(kernel * cin, cout) + b
    return y, cols


def conv1d_backward(grad: np.ndarray, cols: np.ndarray, w: np.ndarray, dilation: int, need_input_grad: bool = True):
    kernel, cin, cout = w.shape
    B, T, _ = grad.shape
    flat_grad = grad.reshape(-1, cout)
    dw = (cols.reshape(-1, kernel * cin).T @ flat_grad).reshape(w.shape)
    db = flat_grad.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = grad @ w.reshape(kernel * cin, cout).T
    if kernel == 1:
        return dcols, dw, db
    pad = dilation * (kernel - 1) // 2
    dxp = np.zeros((B, T + 2 * pad, cin), dtype=grad.dtype)
    for j in range(kernel):
        dxp[:, j * dilation : j * dilation + T] += dcols[..., j * cin : (j + 1) * cin]
    return dxp[:, pad : pad + T], dw, db


# ----------------------------------------------------------------------------
# Pooling and normalisation
# ----------------------------------------------------------------------------


def stats_pool(x: np.ndarray, eps: float = STD_EPS):
    """Mean and population std over time: (..., T, D) -> (..., 2D)."""
    if x.shape[-2] < 1:
        raise DataError("stats_pool needs at least one frame")
    mean = x.mean(axis=-2)
    centred = x - mean[..., None, :]
    std = np.sqrt((centred * centred).mean(axis=-2) + eps)
    return np.concatenate([mean, std], axis=-1), (centred, std)


def stats_pool_backward(grad: np.ndarray, cache) -> np.ndarray:
    centred, std = cache
    T = centred.shape[-2]
    D = std.shape[-1]
    gmean, gstd = grad[..., :D], grad[..., D:]
    return (gmean[..., None, :] + centred * (gstd / std)[..., None, :]) / T


def l2_normalize(v: np.ndarray):
    """Row-wise unit normalisation; returns output and the row norms."""
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise NumericError("l2_normalize of a zero vector")
    return v / norm, norm


def l2_normalize_backward(grad: np.ndarray, out: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (grad - out * (grad * out).sum(axis=-1, keepdims=True)) / norm


def weight_norm_linear(w_dir: np.ndarray, v: np.ndarray):
    """Cosine logits between unit inputs ``v`` (..., D) and the row directions of ``w_dir`` (K, D)."""
    w_hat, w_norm = l2_normalize(w_dir)
    return v @ w_hat.T, (w_hat, w_norm)


def weight_norm_linear_backward(grad: np.ndarray, v: np.ndarray, cache):
    w_hat, w_norm = cache
    dv = grad @ w_hat
    dw_hat = grad.reshape(-1, grad.shape[-1]).T @ v.reshape(-1, v.shape[-1])
    return dv, l2_normalize_backward(dw_hat, w_hat, w_norm)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# Encoder: conv stack -> stats pooling -> affine embedding
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    dilation: int = 1


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 24
    conv: tuple[ConvSpec, ...] = (ConvSpec(64, 3, 1), ConvSpec(64, 3, 2))
    activation: str = "relu"
    embed_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv))

    def validate(self) -> None:
        if self.feature_dim < 1 or self.embed_dim < 1:
            raise ConfigError("feature_dim and embed_dim must be >= 1")
        for c in self.conv:
            if c.kernel < 1 or c.kernel % 2 == 0:
                raise ConfigError("conv kernels must be odd")
            if c.dilation < 1 or c.out_channels < 1:
                raise ConfigError("conv dilation/out_channels must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def pooled_dim(self) -> int:
        return 2 * (self.conv[-1].out_channels if self.conv else self.feature_dim)


class Encoder:
    """Frame-level conv stack with mean+std pooling and a final affine layer."""

    POST_POOL = ("embed.w", "embed.b")

    def __init__(self, config: EncoderConfig):
        config.validate()
        self.config = config

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        cfg = self.config
        params: Params = {}
        cin = cfg.feature_dim
        for i, c in enumerate(cfg.conv):
            fan_in = c.kernel * cin
            params[f"conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (c.kernel, cin, c.out_channels)).astype(dtype)
            params[f"conv{i}.b"] = np.zeros(c.out_channels, dtype)
            cin = c.out_channels
        params["embed.w"] = rng.normal(0, np.sqrt(1.0 / cfg.pooled_dim), (cfg.pooled_dim, cfg.embed_dim)).astype(dtype)
        params["embed.b"] = np.zeros(cfg.embed_dim, dtype)
        return params

    def forward(self, params: Params, x: np.ndarray):
        """``x`` is (T, F) or (B, T, F); returns embeddings (embed_dim,) or (B, embed_dim)."""
        single = x.ndim == 2
        h = np.asarray(x)[None] if single else np.asarray(x)
        if h.shape[-1] != self.config.feature_dim:
            raise DataError(f"encoder expects {self.config.feature_dim} features, got {h.shape[-1]}")
        h = h.astype(params["embed.w"].dtype, copy=False)
        layers = []
        for i, c in enumerate(self.config.conv):
            pre, cols = conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], c.dilation)
            h = activation(self.config.activation, pre)
            layers.append((pre, cols))
        pooled, pool_cache = stats_pool(h)
        emb = pooled @ params["embed.w"] + params["embed.b"]
        cache = (single, layers, pooled, pool_cache)
        return (emb[0] if single else emb), cache

    def embed(self, params: Params, frames: np.ndarray) -> np.ndarray:
        return self.forward(params, frames)[0]

    def backward(self, params: Params, cache, grad: np.ndarray, post_pool_only: bool = False) -> Params:
        single, layers, pooled, pool_cache = cache
        g = grad[None] if single else grad
        grads: Params = {
            "embed.w": pooled.T @ g,
            "embed.b": g.sum(axis=0),
        }
        if post_pool_only:
            return grads
        gh = stats_pool_backward(g @ params["embed.w"].T, pool_cache)
        for i in range(len(layers) - 1, -1, -1):
            pre, cols = layers[i]
            gpre = activation_backward(self.config.activation, pre, gh)
            gh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv1d_backward(
                gpre, cols, params[f"conv{i}.w"], self.config.conv[i].dilation, need_input_grad=i > 0
            )
        return grads


# ----------------------------------------------------------------------------
# Projection head: 3 linear layers -> l2 norm -> weight-normalised linear
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 256
    hidden: int = 256
    bottleneck: int = 64
    n_outputs: int = 1024
    activation: str = "gelu"

    def validate(self) -> None:
        if self.n_outputs < 2:
            raise ConfigError("head needs at least 2 outputs")
        if self.hidden < self.bottleneck:
            raise ConfigError("head hidden dim must be >= bottleneck")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


class ProjectionHead:
    def __init__(self, config: HeadConfig):
        config.validate()
        self.config = config

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        c = self.config
        dims = [c.in_dim, c.hidden, c.hidden, c.bottleneck]
        params: Params = {}
        for i in range(3):
            params[f"l{i}.w"] = rng.normal(0, np.sqrt(2.0 / dims[i]), (dims[i], dims[i + 1])).astype(dtype)
            params[f"l{i}.b"] = np.zeros(dims[i + 1], dtype)
        params["proto"] = rng.normal(0, 1.0, (c.n_outputs, c.bottleneck)).astype(dtype)
        return params

    def forward(self, params: Params, e: np.ndarray):
        h = e.astype(params["proto"].dtype, copy=False)
        acts = []
        for i in range(3):
            pre = h @ params[f"l{i}.w"] + params[f"l{i}.b"]
            acts.append((h, pre))
            h = activation(self.config.activation, pre) if i < 2 else pre
        z, znorm = l2_normalize(h)
        logits, wcache = weight_norm_linear(params["proto"], z)
        return logits, (acts, z, znorm, wcache)

    def backward(self, params: Params, cache, grad: np.ndarray):
        acts, z, znorm, wcache = cache
        grads: Params = {}
        gz, grads["proto"] = weight_norm_linear_backward(grad, z, wcache)
        gh = l2_normalize_backward(gz, z, znorm)
        for i in (2, 1, 0):
            h_in, pre = acts[i]
            gpre = gh if i == 2 else activation_backward(self.config.activation, pre, gh)
            grads[f"l{i}.w"] = h_in.T @ gpre
            grads[f"l{i}.b"] = gpre.sum(axis=0)
            gh = gpre @ params[f"l{i}.w"].T
        return gh, grads


# ----------------------------------------------------------------------------
# Optimiser
# ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: Params = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def sgd_step(params: Params, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float | None = None) -> Params:
    """In-place momentum SGD: ``buf = m*buf + g + wd*p; p -= lr*buf``.

    Parameters without a gradient entry are left untouched.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DataError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        buf = state.buffers.get(name)
        step = g + state.weight_decay * p if state.weight_decay else g
        if buf is None:
            buf = state.buffers[name] = np.array(step, dtype=p.dtype)
        else:
            buf *= state.momentum
            buf += step
        p -= (lr * buf).astype(p.dtype, copy=False)
    return params


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up over the first ``warmup_frac`` of training, then constant."""
    warm = int(round(warmup_frac * total_steps))
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * (step + 1) / warm


# ----------------------------------------------------------------------------
# Helpers on parameter dicts
# ----------------------------------------------------------------------------


def copy_params(params: Mapping[str, np.ndarray], dtype=None) -> Params:
    return {k: np.array(v, dtype=dtype or v.dtype) for k, v in params.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# Finite-difference gradient check
# ----------------------------------------------------------------------------


def grad_check(
    fn: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    max_coords: int | None = 400,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a parameter dict to ``(loss, grads)``. It is evaluated on a
    float64 copy. When there are more than ``max_coords`` coordinates a
    random subset of that size (at least 200) is checked, spread over all
    tensors. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    p64 = copy_params(params, np.float64)
    loss0, grads = fn(p64)
    loss0_again, _ = fn(p64)
    if loss0 != loss0_again:
        raise NumericError("grad_check: function is not deterministic")
    coords = [(k, i) for k in p64 for i in range(p64[k].size)]
    if max_coords is not None and len(coords) > max_coords:
        max_coords = max(max_coords, 200)
        rng = np.random.default_rng(seed)
        # at least one coordinate per tensor, remainder uniform
        chosen = {(k, int(rng.integers(p64[k].size))) for k in p64}
        rest = [c for c in coords if c not in chosen]
        pick = rng.choice(len(rest), size=max_coords - len(chosen), replace=False)
        coords = sorted(chosen) + [rest[j] for j in pick]
    worst = 0.0
    for name, i in coords:
        flat = p64[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = fn(p64)
        flat[i] = orig - eps
        down, _ = fn(p64)
        flat[i] = orig
        numeric = (float(up) - float(down)) / (2 * eps)
        g = grads.get(name)
        analytic = float(np.asarray(g).reshape(-1)[i]) if g is not None else 0.0
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# DINOCKPT1 checkpoint files
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"DINOCKPT1\n"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Magic line, one-line JSON manifest, then little-endian float32 payloads.

    Tensor offsets in the manifest are relative to the first payload byte.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(manifest.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a DINOCKPT1 checkpoint")
    end = data.index(b"\n", len(CKPT_MAGIC))
    try:
        manifest = json.loads(data[len(CKPT_MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint manifest") from exc
    payload = memoryview(data)[end + 1 :]
    tensors: Params = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 4 * n > len(payload):
            raise FormatError(f"{path}: tensor {e['name']} runs past end of file")
        tensors[e["name"]] = np.frombuffer(payload[start : start + 4 * n], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})


def config_dict(cfg) -> dict:
    return asdict(cfg)
