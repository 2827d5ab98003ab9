"""Attention-based multiple-instance learning model with hand-derived gradients.

A bag of K tiles flows through a small convolutional feature extractor, an
attention pooling layer and a logistic classifier::

    h_k = extractor(tile_k)                 # D-vector per tile
    e_k = w . tanh(V h_k)                   # attention logit
    a   = softmax(e)
    z   = sum_k a_k h_k
    s   = sigmoid(weight . z + bias)

Everything is plain numpy. ``forward`` records the activations that
``backward`` needs to produce exact gradients of the weighted binary
cross-entropy for every parameter tensor.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOSS_EPS = 1e-7

FEATURE_MAGIC = b"MILF"
FEATURE_VERSION = 1


class StaleCacheError(RuntimeError):
    """Raised when ``backward`` receives a cache it cannot use."""


@dataclass
class LossWeights:
    w_pos: float = 1.0
    w_neg: float = 1.0

    @classmethod
    def balanced(cls, labels) -> "LossWeights":
        """Weights ``N / (2 N_c)``, so that ``w_pos N_pos + w_neg N_neg = N``."""
        labels = np.asarray(labels).astype(bool)
        n = labels.size
        n_pos = int(labels.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            raise ValueError("class weights need both classes present")
        return cls(w_pos=n / (2.0 * n_pos), w_neg=n / (2.0 * n_neg))


@dataclass
class MilModel:
    """Parameters plus the architecture settings needed to interpret them.

    With ``use_extractor=False`` the model consumes precomputed per-tile
    feature vectors and only holds attention and classifier parameters.
    """

    params: dict[str, np.ndarray]
    feature_dim: int = 32
    attention_dim: int = 128
    dropout_rate: float = 0.1
    channels: tuple[int, ...] = (8, 16, 32)
    input_pool: int = 1
    gated: bool = False
    use_extractor: bool = True

    @property
    def dtype(self):
        return self.params["cls.weight"].dtype

    def architecture(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "attention_dim": self.attention_dim,
            "dropout_rate": self.dropout_rate,
            "channels": list(self.channels),
            "input_pool": self.input_pool,
            "gated": self.gated,
            "use_extractor": self.use_extractor,
        }

    def copy(self) -> "MilModel":
        params = {k: v.copy() for k, v in self.params.items()}
        return MilModel(params=params, **_arch_kwargs(self.architecture()))


def _arch_kwargs(arch: dict) -> dict:
    kw = dict(arch)
    kw["channels"] = tuple(kw["channels"])
    return kw


def model_from_arrays(params: dict[str, np.ndarray], arch: dict) -> MilModel:
    return MilModel(params=params, **_arch_kwargs(arch))


def init_model(
    rng: np.random.Generator,
    feature_dim: int = 32,
    attention_dim: int = 128,
    dropout_rate: float = 0.1,
    channels: tuple[int, ...] = (8, 16, 32),
    input_pool: int = 1,
    gated: bool = False,
    in_features: int | None = None,
    dtype=np.float32,
) -> MilModel:
    """Random initialisation (He for convolutions, scaled normal elsewhere).

    Passing ``in_features`` builds a feature-only model whose attention works
    directly on precomputed vectors of that length.
    """
    if attention_dim < 1:
        raise ValueError("attention_dim must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    params: dict[str, np.ndarray] = {}
    use_extractor = in_features is None
    if use_extractor:
        c_in = 3
        for i, c_out in enumerate(channels, start=1):
            fan_in = c_in * 9
            params[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3))
            params[f"conv{i}.bias"] = np.zeros(c_out)
            c_in = c_out
        params["proj.weight"] = rng.normal(0.0, 1.0 / np.sqrt(c_in), (feature_dim, c_in))
        params["proj.bias"] = np.zeros(feature_dim)
    else:
        feature_dim = int(in_features)
    params["attn.V"] = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (attention_dim, feature_dim))
    if gated:
        params["attn.U"] = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (attention_dim, feature_dim))
    params["attn.w"] = rng.normal(0.0, 1.0 / np.sqrt(attention_dim), attention_dim)
    params["cls.weight"] = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), feature_dim)
    params["cls.bias"] = np.zeros(())
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    return MilModel(
        params=params,
        feature_dim=feature_dim,
        attention_dim=attention_dim,
        dropout_rate=dropout_rate,
        channels=tuple(channels),
        input_pool=input_pool,
        gated=gated,
        use_extractor=use_extractor,
    )


# ---------------------------------------------------------------------------
# convolutional building blocks


def avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    n, c, h, w = x.shape
    h2, w2 = h // k, w // k
    x = x[:, :, : h2 * k, : w2 * k]
    # strided slice sums are several times faster than reshape().mean()
    acc = x[:, :, :, 0::k].copy()
    for j in range(1, k):
        acc += x[:, :, :, j::k]
    out = acc[:, :, 0::k].copy()
    for i in range(1, k):
        out += acc[:, :, i::k]
    return out * (1.0 / (k * k))


# The extractor runs channel-major (C x N x H x W) internally: im2col rows are
# contiguous slice copies, the matmul output lands in the same layout and
# weight gradients come out in the public O x C x 3 x 3 order.


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Valid 3x3 convolution (cross-correlation) of a C x N x H x W array.

    Returns the O x N x H' x W' output and the column matrix kept for the
    backward pass.
    """
    c, n, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for a {kh}x{kw} kernel")
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i : i + ho, j : j + wo]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = weight.reshape(o, -1) @ cols
    out += bias[:, None]
    return out.reshape(o, n, ho, wo), cols


def conv2d_backward(dout, cols, weight, in_shape, need_input_grad=True):
    c, n, h, w = in_shape
    o, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    dflat = dout.reshape(o, -1)
    dweight = (dflat @ cols.T).reshape(weight.shape)
    dbias = dflat.sum(axis=1)
    if not need_input_grad:
        return None, dweight, dbias
    dcols = (weight.reshape(o, -1).T @ dflat).reshape(c, kh, kw, n, ho, wo)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
    return dx, dweight, dbias


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def max_pool2(x: np.ndarray):
    """2x2 max-pool over the last two axes with floor cropping.

    Returns the output and the index (0..3, first maximum wins) of the
    winning element of each window.
    """
    h2, w2 = x.shape[-2] // 2, x.shape[-1] // 2
    views = [x[..., di : 2 * h2 : 2, dj : 2 * w2 : 2] for di, dj in _POOL_OFFSETS]
    out = views[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for k in (1, 2, 3):
        better = views[k] > out
        np.copyto(out, views[k], where=better)
        idx[better] = k
    return out, idx


def max_pool2_backward(dout, idx, in_shape):
    h2, w2 = dout.shape[-2:]
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for k, (di, dj) in enumerate(_POOL_OFFSETS):
        dx[..., di : 2 * h2 : 2, dj : 2 * w2 : 2] = np.where(idx == k, dout, 0)
    return dx


# ---------------------------------------------------------------------------
# forward / backward


def _check_tiles(bag: np.ndarray, model: MilModel) -> np.ndarray:
    bag = np.asarray(bag)
    if model.use_extractor:
        if bag.ndim != 4 or bag.shape[1] != 3:
            raise ValueError(f"expected a K x 3 x H x W bag, got shape {bag.shape}")
    else:
        if bag.ndim != 2 or bag.shape[1] != model.feature_dim:
            raise ValueError(
                f"expected a K x {model.feature_dim} feature bag, got shape {bag.shape}"
            )
    if bag.shape[0] < 1:
        raise ValueError("bag must contain at least one tile")
    return bag.astype(model.dtype, copy=False)


def extract_features(bag: np.ndarray, model: MilModel, keep_cache: bool = False):
    """Map K normalised tiles to a K x D feature matrix.

    Each row depends on its own tile only. Feature-only models return the
    input unchanged.
    """
    x = _check_tiles(bag, model)
    if not model.use_extractor:
        return (x, None) if keep_cache else x
    p = model.params
    cache = []
    h = np.ascontiguousarray(avg_pool(x, model.input_pool).transpose(1, 0, 2, 3))
    for i in range(1, len(model.channels) + 1):
        in_shape = h.shape
        pre, cols = conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        act = np.maximum(pre, 0)
        h, idx = max_pool2(act)
        if keep_cache:
            cache.append((in_shape, cols, pre > 0, idx, act.shape))
    spatial = h.shape[2] * h.shape[3]
    g = h.mean(axis=(2, 3)).T
    feats = g @ p["proj.weight"].T + p["proj.bias"]
    if keep_cache:
        return feats, {"convs": cache, "g": g, "last_shape": h.shape, "spatial": spatial}
    return feats


def extract_features_chunked(bag: np.ndarray, model: MilModel, chunk: int = 64) -> np.ndarray:
    """Inference-time extraction in fixed-size chunks to bound memory."""
    bag = np.asarray(bag)
    if not model.use_extractor or bag.shape[0] <= chunk:
        return extract_features(bag, model)
    parts = [extract_features(bag[i : i + chunk], model) for i in range(0, bag.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def _attention_logits(H: np.ndarray, params: dict, gated: bool):
    A = np.tanh(H @ params["attn.V"].T)
    G = None
    if gated:
        G = 1.0 / (1.0 + np.exp(-(H @ params["attn.U"].T)))
        e = (A * G) @ params["attn.w"]
    else:
        e = A @ params["attn.w"]
    return e, A, G


def softmax(e: np.ndarray) -> np.ndarray:
    ex = np.exp(e - e.max())
    return ex / ex.sum()


def attention_pool(H, model: MilModel, rng=None, training=False, _cache=None):
    """Attention pooling of a K x D matrix. Returns ``(z, a)``.

    In training mode dropout is applied to each feature row before the
    attention logits are computed.
    """
    H = np.asarray(H, dtype=model.dtype)
    mask_h = None
    if training:
        mask_h = _dropout_mask(H.shape, model.dropout_rate, rng, H.dtype)
    Hd = H * mask_h if mask_h is not None else H
    e, A, G = _attention_logits(Hd, model.params, model.gated)
    a = softmax(e)
    z = a @ Hd
    if _cache is not None:
        _cache.update(mask_h=mask_h, Hd=Hd, A=A, G=G, a=a, z=z)
    return z, a


def classify(z, model: MilModel, rng=None, training=False, _cache=None) -> float:
    """Sigmoid probability from the pooled embedding (dropout on ``z`` when training)."""
    z = np.asarray(z, dtype=model.dtype)
    mask_z = None
    if training:
        mask_z = _dropout_mask(z.shape, model.dropout_rate, rng, z.dtype)
    zd = z * mask_z if mask_z is not None else z
    logit = float(zd @ model.params["cls.weight"] + model.params["cls.bias"])
    s = _sigmoid(logit)
    if _cache is not None:
        _cache.update(mask_z=mask_z, zd=zd, logit=logit, s=s)
    return s


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    ex = np.exp(x)
    return ex / (1.0 + ex)


def weighted_bce(s: float, label, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    sc = min(max(float(s), LOSS_EPS), 1.0 - LOSS_EPS)
    if _is_positive(label):
        return -weights.w_pos * np.log(sc)
    return -weights.w_neg * np.log(1.0 - sc)


def _is_positive(label) -> bool:
    if isinstance(label, str):
        return label == "MSI_H"
    return bool(label)


@dataclass
class ForwardCache:
    training: bool
    model: MilModel
    store: dict = field(default_factory=dict)
    consumed: bool = False


def forward(bag, model: MilModel, training: bool = False, rng: np.random.Generator | None = None):
    """Score one bag. Returns ``(s, a, cache)``."""
    if training and model.dropout_rate > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    cache = ForwardCache(training=training, model=model)
    if training:
        H, ext = extract_features(bag, model, keep_cache=True)
        cache.store["ext"] = ext
    else:
        H = extract_features_chunked(bag, model)
    cache.store["H"] = H
    z, a = attention_pool(H, model, rng, training, _cache=cache.store)
    s = classify(z, model, rng, training, _cache=cache.store)
    return s, a, cache


def backward(cache: ForwardCache | None, label, weights: LossWeights | None = None):
    """Gradients of ``weighted_bce(forward(...))`` for every parameter.

    Returns ``(grads, loss)``. A cache can be consumed once.
    """
    if cache is None:
        raise StaleCacheError("backward called without a forward cache")
    if not cache.training:
        raise StaleCacheError("backward needs a cache recorded with training=True")
    if cache.consumed:
        raise StaleCacheError("forward cache already consumed by an earlier backward call")
    cache.consumed = True
    weights = weights or LossWeights()
    model, st = cache.model, cache.store
    p = model.params
    dtype = model.dtype
    s = st["s"]
    positive = _is_positive(label)
    loss = weighted_bce(s, label, weights)

    # d loss / d logit, zero where the clamp is active
    if LOSS_EPS < s < 1.0 - LOSS_EPS:
        g_logit = weights.w_pos * (s - 1.0) if positive else weights.w_neg * s
    else:
        g_logit = 0.0

    grads: dict[str, np.ndarray] = {}
    grads["cls.weight"] = (g_logit * st["zd"]).astype(dtype)
    grads["cls.bias"] = np.asarray(g_logit, dtype=dtype)
    dz = g_logit * p["cls.weight"]
    if st["mask_z"] is not None:
        dz = dz * st["mask_z"]

    Hd, A, G, a = st["Hd"], st["A"], st["G"], st["a"]
    dHd = np.outer(a, dz)
    da = Hd @ dz
    de = a * (da - a @ da)
    if model.gated:
        grads["attn.w"] = (A * G).T @ de
        dAG = np.outer(de, p["attn.w"])
        dP = dAG * G * (1.0 - A * A)
        dQ = dAG * A * G * (1.0 - G)
        grads["attn.U"] = dQ.T @ Hd
        dHd += dQ @ p["attn.U"]
    else:
        grads["attn.w"] = A.T @ de
        dP = np.outer(de, p["attn.w"]) * (1.0 - A * A)
    grads["attn.V"] = dP.T @ Hd
    dHd += dP @ p["attn.V"]
    dH = dHd * st["mask_h"] if st["mask_h"] is not None else dHd

    if model.use_extractor:
        _extractor_backward(dH, st["ext"], model, grads)
    grads = {k: np.asarray(v, dtype=dtype) for k, v in grads.items()}
    st.clear()
    return grads, loss


def _extractor_backward(dH, ext, model: MilModel, grads: dict):
    p = model.params
    g = ext["g"]
    grads["proj.weight"] = dH.T @ g
    grads["proj.bias"] = dH.sum(axis=0)
    dg = dH @ p["proj.weight"]
    c, n, h, w = ext["last_shape"]
    dh = np.broadcast_to((dg.T / ext["spatial"])[:, :, None, None], (c, n, h, w)).astype(dH.dtype)
    convs = ext["convs"]
    for i in range(len(convs), 0, -1):
        in_shape, cols, relu_mask, idx, act_shape = convs[i - 1]
        dact = max_pool2_backward(dh, idx, act_shape)
        dpre = dact * relu_mask
        dh, dw, db = conv2d_backward(dpre, cols, p[f"conv{i}.weight"], in_shape, need_input_grad=i > 1)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db


def predict_bag(bag, model: MilModel):
    """Eval-mode score and attention vector for one bag."""
    s, a, _ = forward(bag, model, training=False)
    return s, a


# ---------------------------------------------------------------------------
# precomputed feature files


def write_feature_file(path, features: np.ndarray) -> None:
    feats = np.asarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be K x D")
    k, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, k, d))
        fh.write(feats.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, k, d = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    body = data[16:]
    if len(body) != 4 * k * d:
        raise ValueError(f"{path}: expected {k}x{d} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(k, d).copy()
