"""Compact convolutional transformer in plain numpy with hand-written backprop.

Layout of one encoder (pre-norm, skip connections around both sub-blocks)::

    h  -> LN1 -> QKV -> scaled dot-product attention -> projection -(+h)-> x1
    x1 -> LN2 -> Linear1 -> GELU -> Linear2 -(+x1)-> x2

All weight matrices are stored ``(out, in)`` so a layer computes ``x @ W.T + b``
and pruning masks line up with the weights element for element.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SITES = (
    "layernorm_out",
    "qkv_out",
    "attention_out",
    "projection_out",
    "linear1_out",
    "linear2_out",
    "block_out",
)
SKIP_SITES = ("projection_out", "linear2_out")

LN_EPS = 1e-5


class ConfigError(ValueError):
    """Invalid model configuration or tap request."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    num_heads: int = 4
    ff_hidden: int = 64
    num_encoders: int = 2
    num_labels: int = 10
    kernel_sizes: tuple[int, ...] = (3,)
    image_shape: tuple[int, int, int] = (3, 8, 8)
    positional: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        for name in ("embed_dim", "num_heads", "ff_hidden", "num_encoders", "num_labels"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.kernel_sizes or any(k <= 0 for k in self.kernel_sizes):
            raise ConfigError("kernel sizes must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> tuple[int, int]:
        _, h, w = self.image_shape
        for _ in self.kernel_sizes:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def cct_7_3x1(num_labels: int = 100) -> ModelConfig:
    """Full-size CIFAR preset: one 3x3 tokenizer convolution, seven encoders."""
    return ModelConfig(256, 4, 512, 7, num_labels, (3,), (3, 32, 32))


def cct_7_7x2(num_labels: int = 102) -> ModelConfig:
    """Full-size Flowers preset: 7x7 then 3x3 tokenizer convolutions."""
    return ModelConfig(256, 4, 512, 7, num_labels, (7, 3), (3, 224, 224))


@dataclass(frozen=True)
class TapPoint:
    encoder: int
    site: str = "block_out"
    include_skip: bool = False

    @property
    def name(self) -> str:
        return f"enc{self.encoder}.{self.site}" + ("+skip" if self.include_skip else "")

    @classmethod
    def parse(cls, name: str) -> "TapPoint":
        skip = name.endswith("+skip")
        if skip:
            name = name[: -len("+skip")]
        enc, _, site = name.partition(".")
        if not enc.startswith("enc") or not site:
            raise ConfigError(f"bad tap name {name!r}")
        return cls(int(enc[3:]), site, skip)

    def width(self, cfg: ModelConfig) -> int:
        validate_tap(cfg, self)
        if self.site == "qkv_out":
            return 3 * cfg.embed_dim
        if self.site == "linear1_out":
            return cfg.ff_hidden
        return cfg.embed_dim


def validate_tap(cfg: ModelConfig, tap: TapPoint) -> None:
    if not 1 <= tap.encoder <= cfg.num_encoders:
        raise ConfigError(
            f"encoder {tap.encoder} out of range 1..{cfg.num_encoders}"
        )
    if tap.site not in SITES:
        raise ConfigError(f"unknown tap site {tap.site!r}")
    if tap.include_skip and tap.site not in SKIP_SITES:
        raise ConfigError(f"site {tap.site} has no skip field to include")


# ---------------------------------------------------------------------------
# primitive ops: each forward returns (out, cache), each backward takes cache


def linear(x, w, b):
    return x @ w.T + b, x


def linear_back(dy, x, w):
    lead = dy.reshape(-1, dy.shape[-1])
    xin = x.reshape(-1, x.shape[-1])
    return dy @ w, lead.T @ xin, lead.sum(0)


def layernorm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layernorm_back(dy, cache, gamma):
    xhat, inv = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(0)
    dbeta = dy.reshape(-1, n).sum(0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    # tanh approximation
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_back(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def conv_same(x, w, b):
    """Stride-1 same-padded convolution on channel-last input (B, H, W, C)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, k - 1 - p), (p, k - 1 - p), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # B,H,W,C,k,k
    B, H, W = x.shape[:3]
    cols = cols.reshape(B, H, W, -1)
    wf = w.reshape(w.shape[0], -1)
    return cols @ wf.T + b, (cols, x.shape)


def conv_same_back(dy, cache, w):
    cols, xshape = cache
    B, H, W, C = xshape
    k = w.shape[-1]
    p = k // 2
    wf = w.reshape(w.shape[0], -1)
    d2 = dy.reshape(-1, dy.shape[-1])
    dw = (d2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = d2.sum(0)
    dcols = (dy @ wf).reshape(B, H, W, C, k, k)
    dxp = np.zeros((B, H + k - 1, W + k - 1, C), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + H, j : j + W, :] += dcols[..., i, j]
    return dxp[:, p : p + H, p : p + W, :], dw, db


def maxpool3s2(x):
    B, H, W, C = x.shape
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (1, 2 * Ho - H), (1, 2 * Wo - W), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    win = win.reshape(B, Ho, Wo, C, 9)
    arg = win.argmax(-1)
    out = np.take_along_axis(win, arg[..., None], -1)[..., 0]
    return out, (arg, x.shape, xp.shape)


def maxpool3s2_back(dy, cache):
    arg, xshape, pshape = cache
    B, Ho, Wo, C = dy.shape
    dxp = np.zeros(pshape, dtype=dy.dtype)
    for r in range(9):
        di, dj = divmod(r, 3)
        dxp[:, di : di + 2 * Ho : 2, dj : dj + 2 * Wo : 2, :] += dy * (arg == r)
    H, W = xshape[1:3]
    return dxp[:, 1 : 1 + H, 1 : 1 + W, :]


def label_smoothing_ce(logits, labels, smoothing=0.0):
    """Mean label-smoothing cross-entropy and its gradient w.r.t. logits."""
    n, k = logits.shape
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    nll = -logp[np.arange(n), labels]
    smooth = -logp.mean(1)
    loss = float(((1.0 - smoothing) * nll + smoothing * smooth).mean())
    target = np.full_like(logp, smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    grad = (np.exp(logp) - target) / n
    return loss, grad


# ---------------------------------------------------------------------------
# classifier head: sequence pooling + FC


class ClassifierHead:
    """Attention-weighted sequence pooling followed by a fully connected layer.

    ``params`` holds ``pool`` (width,), ``fc_w`` (num_labels, width), ``fc_b``.
    """

    def __init__(self, width: int, num_labels: int, rng=None, dtype=np.float32, params=None):
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(rng)
            bound = 1.0 / math.sqrt(width)
            self.params = {
                "pool": rng.uniform(-bound, bound, width).astype(dtype),
                "fc_w": rng.uniform(-bound, bound, (num_labels, width)).astype(dtype),
                "fc_b": np.zeros(num_labels, dtype),
            }
        self.width = self.params["fc_w"].shape[1]
        self.num_labels = self.params["fc_w"].shape[0]

    def pool(self, z):
        """Pooled features (B, width) and the token weights (B, T)."""
        if z.shape[-1] != self.width:
            raise ConfigError(f"head width {self.width} does not match features {z.shape[-1]}")
        a = softmax(z @ self.params["pool"], axis=1)
        return np.einsum("bt,btw->bw", a, z), a

    def forward(self, z):
        pooled, a = self.pool(z)
        logits = pooled @ self.params["fc_w"].T + self.params["fc_b"]
        return logits, (z, a, pooled)

    def backward(self, dlogits, cache):
        z, a, pooled = cache
        g = {
            "fc_w": dlogits.T @ pooled,
            "fc_b": dlogits.sum(0),
        }
        dpooled = dlogits @ self.params["fc_w"]
        dot = np.einsum("btw,bw->bt", z, dpooled)
        ds = a * (dot - (a * dot).sum(1, keepdims=True))
        g["pool"] = np.einsum("bt,btw->w", ds, z)
        dz = a[:, :, None] * dpooled[:, None, :] + ds[:, :, None] * self.params["pool"]
        return dz, g

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(0, 0, params={k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------


class Model:
    """Tokenizer + encoders + classifier head with named parameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.masks: dict[str, np.ndarray] = {}
        self._caches = None

    @property
    def dtype(self):
        return self.params["head.fc_w"].dtype

    def head(self) -> ClassifierHead:
        return ClassifierHead(0, 0, params={k[5:]: v for k, v in self.params.items() if k.startswith("head.")})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "Model":
        m = Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})
        m.masks = dict(self.masks)
        return m

    def copy(self) -> "Model":
        m = Model(self.cfg, {k: v.copy() for k, v in self.params.items()})
        m.masks = {k: v.copy() for k, v in self.masks.items()}
        return m

    # -- forward -----------------------------------------------------------

    def forward(self, x, taps: Iterable[TapPoint] = (), stop_at: TapPoint | None = None, train=False):
        """Run the network on a batch of channel-first images.

        Returns ``(logits, tapped)`` where ``tapped`` maps each requested
        TapPoint to its (B, T, width) activation.  With ``stop_at`` the pass ends
        once that tap has been captured and ``logits`` is None.
        """
        cfg, p = self.cfg, self.params
        taps = list(taps)
        if stop_at is not None:
            taps.append(stop_at)
        for t in taps:
            validate_tap(cfg, t)
        want = {(t.encoder, t.site, t.include_skip) for t in taps}
        last = max((t.encoder for t in taps), default=0) if stop_at is not None else None
        tapped = {}
        caches = [] if train else None

        h = np.transpose(np.asarray(x, dtype=self.dtype), (0, 2, 3, 1))
        for i, _ in enumerate(cfg.kernel_sizes):
            h, c1 = conv_same(h, p[f"tok.conv{i}.weight"], p[f"tok.conv{i}.bias"])
            relu_mask = h > 0
            h = h * relu_mask
            h, c2 = maxpool3s2(h)
            if train:
                caches.append(("tok", i, c1, relu_mask, c2))
        B = h.shape[0]
        h = h.reshape(B, -1, cfg.embed_dim)
        if cfg.positional:
            h = h + p["pos"]

        H, dh = cfg.num_heads, cfg.head_dim
        for m in range(1, cfg.num_encoders + 1):
            pre = f"enc{m}."

            def grab(site, val, skip=False):
                if (m, site, skip) in want:
                    tapped[(m, site, skip)] = val

            a, ln1 = layernorm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            grab("layernorm_out", a)
            qkv, _ = linear(a, p[pre + "qkv.weight"], p[pre + "qkv.bias"])
            grab("qkv_out", qkv)
            T = qkv.shape[1]
            q, k, v = (
                qkv[..., i * cfg.embed_dim : (i + 1) * cfg.embed_dim].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
                for i in range(3)
            )
            att = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.embed_dim)
            grab("attention_out", o)
            proj, _ = linear(o, p[pre + "proj.weight"], p[pre + "proj.bias"])
            grab("projection_out", proj)
            x1 = h + proj
            grab("projection_out", x1, True)
            a2, ln2 = layernorm(x1, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            z1, _ = linear(a2, p[pre + "ff1.weight"], p[pre + "ff1.bias"])
            g1, gc = gelu(z1)
            grab("linear1_out", g1)
            z2, _ = linear(g1, p[pre + "ff2.weight"], p[pre + "ff2.bias"])
            grab("linear2_out", z2)
            x2 = x1 + z2
            grab("linear2_out", x2, True)
            grab("block_out", x2)
            if train:
                caches.append(("enc", m, h, ln1, a, q, k, v, att, o, x1, ln2, a2, gc, g1))
            h = x2
            if last is not None and m == last:
                break

        out = {t: tapped[(t.encoder, t.site, t.include_skip)] for t in taps}
        if stop_at is not None:
            return None, out
        logits, hc = self.head().forward(h)
        if train:
            caches.append(("head", hc))
            self._caches = caches
        return logits, out

    def attention_maps(self, x, encoder: int) -> np.ndarray:
        """Scaled dot-product attention outputs of one encoder, (B, H, T, head_dim)."""
        _, t = self.forward(x, stop_at=TapPoint(encoder, "attention_out"))
        o = t[TapPoint(encoder, "attention_out")]
        B, T, _ = o.shape
        return o.reshape(B, T, self.cfg.num_heads, self.cfg.head_dim).transpose(0, 2, 1, 3)

    # -- backward ----------------------------------------------------------

    def backward(self, dlogits) -> dict[str, np.ndarray]:
        """Gradients of all parameters given dL/dlogits from the last train forward."""
        if self._caches is None:
            raise RuntimeError("backward() needs a preceding forward(train=True)")
        cfg, p = self.cfg, self.params
        H, dh, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim
        grads: dict[str, np.ndarray] = {}
        caches = self._caches
        head = self.head()
        dh_, hg = head.backward(dlogits, caches[-1][1])
        for k, v in hg.items():
            grads["head." + k] = v
        dx = dh_
        for c in reversed(caches[:-1]):
            if c[0] == "enc":
                _, m, hin, ln1, a, q, k, v, att, o, x1, ln2, a2, gc, g1 = c
                pre = f"enc{m}."
                B, T, _ = hin.shape
                # FF sub-block
                dx1 = dx.copy()
                dg1, grads[pre + "ff2.weight"], grads[pre + "ff2.bias"] = linear_back(dx, g1, p[pre + "ff2.weight"])
                dz1 = gelu_back(dg1, gc)
                da2, grads[pre + "ff1.weight"], grads[pre + "ff1.bias"] = linear_back(dz1, a2, p[pre + "ff1.weight"])
                dln, grads[pre + "ln2.gamma"], grads[pre + "ln2.beta"] = layernorm_back(da2, ln2, p[pre + "ln2.gamma"])
                dx1 += dln
                # MHA sub-block
                dhin = dx1.copy()
                do, grads[pre + "proj.weight"], grads[pre + "proj.bias"] = linear_back(dx1, o, p[pre + "proj.weight"])
                do = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
                datt = do @ v.transpose(0, 1, 3, 2)
                dv = att.transpose(0, 1, 3, 2) @ do
                ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh)
                dq = ds @ k
                dk = ds.transpose(0, 1, 3, 2) @ q
                dqkv = np.concatenate(
                    [t.transpose(0, 2, 1, 3).reshape(B, T, d) for t in (dq, dk, dv)], axis=-1
                )
                da, grads[pre + "qkv.weight"], grads[pre + "qkv.bias"] = linear_back(dqkv, a, p[pre + "qkv.weight"])
                dln, grads[pre + "ln1.gamma"], grads[pre + "ln1.beta"] = layernorm_back(da, ln1, p[pre + "ln1.gamma"])
                dx = dhin + dln
            else:
                _, i, c1, relu_mask, c2 = c
                if dx.ndim == 3:
                    if cfg.positional:
                        grads["pos"] = dx.sum(0)
                    gh, gw = cfg.grid
                    dx = dx.reshape(dx.shape[0], gh, gw, d)
                dx = maxpool3s2_back(dx, c2) * relu_mask
                dx, grads[f"tok.conv{i}.weight"], grads[f"tok.conv{i}.bias"] = conv_same_back(
                    dx, c1, p[f"tok.conv{i}.weight"]
                )
        return grads

    def loss_and_grads(self, x, labels, smoothing=0.0):
        logits, _ = self.forward(x, train=True)
        loss, dl = label_smoothing_ce(logits, labels, smoothing)
        grads = self.backward(dl)
        self._caches = None
        return loss, grads

    def predict(self, x, batch_size=256) -> np.ndarray:
        out = []
        for s in range(0, len(x), batch_size):
            logits, _ = self.forward(x[s : s + batch_size])
            out.append(logits.argmax(1))
        return np.concatenate(out) if out else np.zeros(0, int)

    def accuracy(self, x, y) -> float:
        return float((self.predict(x) == y).mean())


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic fan-in uniform initialization; zero biases."""
    rng = np.random.default_rng(seed)
    d, f, L = cfg.embed_dim, cfg.ff_hidden, cfg.num_labels
    params: dict[str, np.ndarray] = {}

    def w(name, out, fan_in, *shape):
        bound = 1.0 / math.sqrt(fan_in)
        params[name + ".weight"] = rng.uniform(-bound, bound, (out, *shape) if shape else (out, fan_in))
        params[name + ".bias"] = np.zeros(out)

    cin = cfg.image_shape[0]
    for i, k in enumerate(cfg.kernel_sizes):
        w(f"tok.conv{i}", d, cin * k * k, cin, k, k)
        cin = d
    if cfg.positional:
        params["pos"] = rng.uniform(-0.02, 0.02, (cfg.num_tokens, d))
    for m in range(1, cfg.num_encoders + 1):
        pre = f"enc{m}."
        params[pre + "ln1.gamma"] = np.ones(d)
        params[pre + "ln1.beta"] = np.zeros(d)
        w(pre + "qkv", 3 * d, d)
        w(pre + "proj", d, d)
        params[pre + "ln2.gamma"] = np.ones(d)
        params[pre + "ln2.beta"] = np.zeros(d)
        w(pre + "ff1", f, d)
        w(pre + "ff2", d, f)
    head = ClassifierHead(d, L, rng, np.float64)
    for k, v in head.params.items():
        params["head." + k] = v
    return Model(cfg, {k: v.astype(dtype) for k, v in params.items()})


def layer_kind(name: str) -> str:
    """Group a parameter name into a layer kind (conv, qkv, ff1, ...)."""
    if name.startswith("tok."):
        return "tokenizer"
    if name == "pos":
        return "positional"
    if name.startswith("head."):
        return "pooling" if name == "head.pool" else "classifier"
    part = name.split(".")[1]
    return "layernorm" if part.startswith("ln") else part
