"""Implicit scene field: one-blob encoding and three small MLPs.

    enc    = one_blob(x)
    s, f   = sdf_mlp(enc)
    shared = [enc, f]
    color  = sigmoid(color_mlp(shared))
    probs  = softmax(plane_mlp(shared))

Every MLP is Linear -> softplus -> Linear. Forward and backward passes are
written out by hand in numpy. In the backward pass the plane branch never
feeds gradients into the SDF MLP; the color branch does, through ``f``.
"""

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonFiniteGradient, ShapeError, StaleCache

MAGIC = b"PNRF"
FORMAT_VERSION = 1
BRANCHES = ("sdf", "color", "plane")
LAYER_ORDER = tuple(f"{b}.{n}" for b in BRANCHES for n in ("W1", "b1", "W2", "b2"))


@dataclass(frozen=True)
class OneBlobConfig:
    bins_per_axis: int = 16
    sigma_bins: float = 1.0
    domain_min: tuple = (-1.0, -1.0, -1.0)
    domain_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "domain_min", tuple(float(v) for v in self.domain_min))
        object.__setattr__(self, "domain_max", tuple(float(v) for v in self.domain_max))
        if self.bins_per_axis < 4:
            raise ValueError("bins_per_axis must be >= 4")
        if not self.sigma_bins > 0:
            raise ValueError("sigma_bins must be positive")
        if not all(lo < hi for lo, hi in zip(self.domain_min, self.domain_max)):
            raise ValueError("domain_min must be below domain_max on every axis")

    @property
    def width(self) -> int:
        return 3 * self.bins_per_axis


@dataclass(frozen=True)
class FieldConfig:
    oneblob: OneBlobConfig = field(default_factory=OneBlobConfig)
    hidden: int = 32
    feature_dim: int = 15
    n_classes: int = 64

    def shapes(self) -> dict:
        E, H, F, C = self.oneblob.width, self.hidden, self.feature_dim, self.n_classes
        out = {"sdf": (E, 1 + F), "color": (E + F, 3), "plane": (E + F, C)}
        shapes = {}
        for b in BRANCHES:
            n_in, n_out = out[b]
            shapes.update({f"{b}.W1": (n_in, H), f"{b}.b1": (H,),
                           f"{b}.W2": (H, n_out), f"{b}.b2": (n_out,)})
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["oneblob"] = OneBlobConfig(**d["oneblob"])
        return cls(**d)


@dataclass
class FieldOutput:
    sdf: np.ndarray
    feature: np.ndarray
    color: np.ndarray
    plane_probs: np.ndarray


def encode_oneblob(x, cfg: OneBlobConfig, return_clamped: bool = False):
    """Per-axis Gaussian soft binning, each axis block normalized to sum 1.

    Points outside the domain are clamped to it; ``return_clamped`` also
    returns how many points needed clamping.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    lo = np.asarray(cfg.domain_min)
    hi = np.asarray(cfg.domain_max)
    u = (x - lo) / (hi - lo)
    outside = np.any((u < 0) | (u > 1), axis=1)
    u = np.clip(u, 0.0, 1.0)
    B = cfg.bins_per_axis
    centers = (np.arange(B) + 0.5) / B
    k = (u[:, :, None] - centers) * (B / cfg.sigma_bins)
    k *= k
    k *= -0.5
    np.exp(k, out=k)
    k /= k.sum(axis=2, keepdims=True)
    enc = k.reshape(len(x), 3 * B)
    if single:
        enc = enc[0]
    if return_clamped:
        return enc, int(outside.sum())
    return enc


def init_params(cfg: FieldConfig, seed=0) -> dict:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.shapes().items():
        if len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: dict, cfg: FieldConfig):
    shapes = cfg.shapes()
    for name, shape in shapes.items():
        if name not in params:
            raise ShapeError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus_and_slope(h):
    """softplus(h) and its derivative sigmoid(h)."""
    a = np.exp(-np.abs(h))
    np.log1p(a, out=a)
    a += np.maximum(h, 0.0)
    slope = np.tanh(0.5 * h)
    slope += 1.0
    slope *= 0.5
    return a, slope


def _mlp(x, params, branch):
    """Returns (output, softplus slope at the hidden layer, hidden activation)."""
    h = x @ params[f"{branch}.W1"] + params[f"{branch}.b1"]
    a, slope = _softplus_and_slope(h)
    return a @ params[f"{branch}.W2"] + params[f"{branch}.b2"], slope, a


def field_sdf(x, params: dict, cfg: FieldConfig) -> np.ndarray:
    """SDF values only; cheaper than a full forward pass."""
    enc = encode_oneblob(np.asarray(x, dtype=float).reshape(-1, 3), cfg.oneblob)
    h = enc @ params["sdf.W1"] + params["sdf.b1"]
    return _softplus(h) @ params["sdf.W2"][:, 0] + params["sdf.b2"][0]


def field_forward(x, params: dict, cfg: FieldConfig, with_plane: bool = True):
    """Evaluate the field at points ``x`` (N, 3). Returns (FieldOutput, cache).

    With ``with_plane=False`` the plane head is skipped and ``plane_probs`` is None.
    """
    check_params(params, cfg)
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    enc = encode_oneblob(x, cfg.oneblob)
    o_s, h_s, a_s = _mlp(enc, params, "sdf")
    sdf, feat = o_s[:, 0], o_s[:, 1:]
    shared = np.concatenate([enc, feat], axis=1)
    o_c, h_c, a_c = _mlp(shared, params, "color")
    color = _sigmoid(o_c)
    probs = h_p = a_p = None
    if with_plane:
        logits, h_p, a_p = _mlp(shared, params, "plane")
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
    cache = {"enc": enc, "shared": shared, "h_s": h_s, "a_s": a_s, "h_c": h_c, "a_c": a_c,
             "color": color, "h_p": h_p, "a_p": a_p, "probs": probs}
    return FieldOutput(sdf, feat, color, probs), cache


def _mlp_backward(d_out, x, slope, a, params, branch, grads, input_from=None):
    """Fills ``grads`` for one MLP. Returns the gradient w.r.t. the input
    columns ``input_from:`` when ``input_from`` is given, else None."""
    grads[f"{branch}.W2"] = a.T @ d_out
    grads[f"{branch}.b2"] = d_out.sum(axis=0)
    d_h = d_out @ params[f"{branch}.W2"].T
    d_h *= slope
    grads[f"{branch}.W1"] = x.T @ d_h
    grads[f"{branch}.b1"] = d_h.sum(axis=0)
    if input_from is None:
        return None
    return d_h @ params[f"{branch}.W1"][input_from:].T


def field_backward(cache, d_sdf, d_color, d_plane, params: dict, cfg: FieldConfig) -> dict:
    """Parameter gradients given upstream gradients on sdf (N,), color (N, 3)
    and plane probabilities (N, C). Any upstream term may be None."""
    if cache is None:
        raise StaleCache("no cached forward activations")
    n, E = cache["enc"].shape
    C = cfg.n_classes
    d_sdf = np.zeros(n) if d_sdf is None else np.asarray(d_sdf, dtype=float).reshape(n)
    d_color = np.zeros((n, 3)) if d_color is None else np.asarray(d_color, dtype=float).reshape(n, 3)
    grads = {}

    # plane branch: the gradient w.r.t. its input is dropped, so nothing
    # from here reaches the SDF MLP
    p = cache["probs"]
    if p is None:
        if d_plane is not None:
            raise StaleCache("forward pass skipped the plane head")
        grads.update({k: np.zeros_like(params[k]) for k in LAYER_ORDER if k.startswith("plane.")})
    else:
        d_plane = np.zeros((n, C)) if d_plane is None else np.asarray(d_plane, dtype=float).reshape(n, C)
        d_logits = p * (d_plane - np.sum(d_plane * p, axis=1, keepdims=True))
        _mlp_backward(d_logits, cache["shared"], cache["h_p"], cache["a_p"], params, "plane", grads)

    c = cache["color"]
    d_oc = d_color * c * (1.0 - c)
    d_feat = _mlp_backward(d_oc, cache["shared"], cache["h_c"], cache["a_c"], params, "color", grads,
                           input_from=E)

    d_os = np.concatenate([d_sdf[:, None], d_feat], axis=1)
    _mlp_backward(d_os, cache["enc"], cache["h_s"], cache["a_s"], params, "sdf", grads)
    return {k: grads[k] for k in LAYER_ORDER}


class NeuralField:
    """Parameters plus configuration, with a guard against stale caches."""

    def __init__(self, cfg: FieldConfig | None = None, seed=0, params: dict | None = None):
        self.cfg = cfg or FieldConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        check_params(self.params, self.cfg)
        self.version = 0
        self.n_clamped = 0

    def forward(self, x, with_plane: bool = True):
        out, cache = field_forward(x, self.params, self.cfg, with_plane)
        cache["version"] = self.version
        return out, cache

    def sdf(self, x) -> np.ndarray:
        return field_sdf(x, self.params, self.cfg)

    def count_clamped(self, x) -> int:
        _, n = encode_oneblob(x, self.cfg.oneblob, return_clamped=True)
        self.n_clamped += n
        return n

    def backward(self, cache, d_sdf=None, d_color=None, d_plane=None) -> dict:
        if cache is None or cache.get("version") != self.version:
            raise StaleCache("cached activations predate the latest parameter update")
        return field_backward(cache, d_sdf, d_color, d_plane, self.params, self.cfg)

    def mark_updated(self):
        self.version += 1


class Adam:
    """Adam with a per-parameter step count, so parameters that skip a step
    (the plane head during local steps) keep correct bias correction."""

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = {}
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Update the parameters named in ``grads`` in place and return ``params``."""
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        for name, g in grads.items():
            t = self.t.get(name, 0) + 1
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.t[name], self.m[name], self.v[name] = t, m, v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def sgd_adam_step(params: dict, grads: dict, lr: float, state: Adam | None = None) -> tuple:
    """Functional wrapper: one Adam step; returns (params, state)."""
    state = state or Adam(lr=lr)
    state.lr = lr
    return state.step(params, grads), state


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def save_checkpoint(path, fld: NeuralField, extra: dict | None = None):
    """Binary weights (magic, u32 version, float32 LE in LAYER_ORDER) plus a JSON sidecar."""
    blob = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in LAYER_ORDER:
        blob.append(np.ascontiguousarray(fld.params[name], dtype="<f4").tobytes())
    _atomic_write(path, b"".join(blob))
    meta = {"format": "PNRF", "version": FORMAT_VERSION, "field": fld.cfg.to_dict(),
            "layers": [[name, list(fld.params[name].shape)] for name in LAYER_ORDER]}
    if extra:
        meta.update(extra)
    _atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path) -> tuple:
    """Returns (NeuralField, sidecar metadata dict)."""
    with open(sidecar_path(path)) as f:
        meta = json.load(f)
    cfg = FieldConfig.from_dict(meta["field"])
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a PNRF checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    flat = np.frombuffer(data, dtype="<f4", offset=8)
    shapes = cfg.shapes()
    expected = sum(int(np.prod(shapes[n])) for n in LAYER_ORDER)
    if flat.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {flat.size}")
    params, off = {}, 0
    for name in LAYER_ORDER:
        size = int(np.prod(shapes[name]))
        params[name] = flat[off: off + size].astype(float).reshape(shapes[name])
        off += size
    return NeuralField(cfg, params=params), meta
