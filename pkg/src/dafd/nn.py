"""Double-precision 1-D CNN engine with hand-written gradients.

The architecture is fixed: a three-stage convolutional feature extractor
(conv k=3 full padding -> batch norm -> ReLU -> max-pool 2) feeding two
identical dense heads, a fall detector and a domain classifier.  The domain
classifier sits behind a gradient reversal layer.

Tensors are plain ``numpy`` float64 arrays laid out ``(batch, channel, time)``.
Every layer is a pair of functions: a forward that returns ``(out, cache)``
and a backward that consumes the cache.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

INPUT_LENGTH = 66
N_AXES = 3
N_CHANNELS = 4
KERNEL = 3
HIDDEN = 50
N_CLASSES = 2
FEATURE_DIM = 40

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EXTRACTOR_PREFIX = "f."
FALL_PREFIX = "fall."
DOMAIN_PREFIX = "domain."


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in activations, losses or gradients."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# layers


def conv1d_full(x, W, b):
    """Stride-1 convolution with ``kernel - 1`` zeros of padding per side.

    ``x`` is ``(B, C_in, L)``, ``W`` is ``(C_out, C_in, K)``.  Output length is
    ``L + K - 1``.
    """
    if x.ndim != 3 or W.ndim != 3 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"conv1d shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    B, C, L = x.shape
    k = W.shape[2]
    L_out = L + k - 1
    xp = np.zeros((B, C, L + 2 * (k - 1)))
    xp[:, :, k - 1:k - 1 + L] = x
    # column blocks are tap-major: rows j*C .. (j+1)*C hold tap j
    cols = np.concatenate([xp[:, :, j:j + L_out] for j in range(k)], axis=1)
    Wm = W.transpose(0, 2, 1).reshape(W.shape[0], k * C)
    out = Wm @ cols + b[:, None]
    return out, (cols, x.shape)


def conv1d_full_backward(g, cache, W):
    cols, (B, C, L) = cache
    D, _, k = W.shape
    L_out = g.shape[2]
    dWm = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
    dW = dWm.reshape(D, k, C).transpose(0, 2, 1)
    db = g.sum(axis=(0, 2))
    Wm = W.transpose(0, 2, 1).reshape(D, k * C)
    dcols = Wm.T @ g
    dxp = np.zeros((B, C, L + 2 * (k - 1)))
    for j in range(k):
        dxp[:, :, j:j + L_out] += dcols[:, j * C:(j + 1) * C]
    return dxp[:, :, k - 1:k - 1 + L], dW, db


def batchnorm1d(x, gamma, beta, running_mean, running_var, mode):
    """Per-channel normalisation over batch and time.

    Train mode normalises with the batch statistics (biased variance) and
    reports them in the cache so the caller can fold them into the running
    estimates; eval mode uses the running estimates.
    """
    if mode == "train":
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, mean, var, mode)


def batchnorm1d_backward(g, cache, gamma):
    xhat, inv_std, _, _, mode = cache
    dgamma = (g * xhat).sum(axis=(0, 2))
    dbeta = g.sum(axis=(0, 2))
    dxhat = g * gamma[None, :, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    m = g.shape[0] * g.shape[2]
    dx = (inv_std[None, :, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def update_running_stats(running_mean, running_var, batch_mean, batch_var, n):
    """Momentum update of running statistics; variance is stored unbiased."""
    unbiased = batch_var * n / (n - 1) if n > 1 else batch_var
    new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * batch_mean
    new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased
    return new_mean, new_var


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(g, mask):
    return g * mask


def maxpool2(x):
    """Non-overlapping max over pairs; a trailing odd sample is dropped."""
    B, C, L = x.shape
    if L < 2:
        raise ValueError("maxpool2 needs at least 2 samples")
    half = L // 2
    pairs = x[:, :, :2 * half].reshape(B, C, half, 2)
    # ties route to the first element
    second = pairs[..., 1] > pairs[..., 0]
    out = np.where(second, pairs[..., 1], pairs[..., 0])
    return out, (second, L)


def maxpool2_backward(g, cache):
    second, L = cache
    B, C, half = g.shape
    dx = np.zeros((B, C, L))
    pairs = dx[:, :, :2 * half].reshape(B, C, half, 2)
    pairs[..., 0] = np.where(second, 0.0, g)
    pairs[..., 1] = np.where(second, g, 0.0)
    return dx


def linear(x, W, b):
    if x.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, x


def linear_backward(g, x, W):
    return g @ W.T, x.T @ g, g.sum(axis=0)


def dropout(x, rate, rng, mode):
    """Inverted dropout.  Identity at eval time or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(g, mask):
    return g if mask is None else g * mask


def grl(x, lam):
    """Gradient reversal: identity forward."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return x


def grl_backward(g, lam):
    return -lam * g


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits, targets, weights=None):
    """Weighted cross-entropy of softmax outputs.

    ``weights`` defaults to ``1/B`` per row, giving the batch mean.  Returns
    ``(loss, grad_logits)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    B = logits.shape[0]
    if weights is None:
        weights = np.full(B, 1.0 / B) if B else np.zeros(0)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    nll = logsum - z[rows, targets]
    loss = float(np.dot(weights, nll))
    grad = softmax(logits)
    grad[rows, targets] -= 1.0
    grad *= weights[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelParams:
    """Learnable arrays plus batch-norm running statistics.

    ``params`` keys are prefixed by component: ``f.`` (extractor), ``fall.``
    and ``domain.`` (heads).  ``buffers`` holds ``f.bnK.running_mean`` /
    ``f.bnK.running_var``.
    """

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def group(self, prefix):
        return [k for k in self.params if k.startswith(prefix)]


def init_params(rng):
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit BN gain."""
    params, buffers = {}, {}
    c_in = N_AXES
    for i in (1, 2, 3):
        bound = np.sqrt(1.0 / (c_in * KERNEL))
        params[f"f.conv{i}.W"] = rng.uniform(-bound, bound, (N_CHANNELS, c_in, KERNEL))
        params[f"f.conv{i}.b"] = np.zeros(N_CHANNELS)
        params[f"f.bn{i}.gamma"] = np.ones(N_CHANNELS)
        params[f"f.bn{i}.beta"] = np.zeros(N_CHANNELS)
        buffers[f"f.bn{i}.running_mean"] = np.zeros(N_CHANNELS)
        buffers[f"f.bn{i}.running_var"] = np.ones(N_CHANNELS)
        c_in = N_CHANNELS
    for head in ("fall", "domain"):
        b1 = np.sqrt(1.0 / FEATURE_DIM)
        b2 = np.sqrt(1.0 / HIDDEN)
        params[f"{head}.W1"] = rng.uniform(-b1, b1, (FEATURE_DIM, HIDDEN))
        params[f"{head}.b1"] = np.zeros(HIDDEN)
        params[f"{head}.W2"] = rng.uniform(-b2, b2, (HIDDEN, N_CLASSES))
        params[f"{head}.b2"] = np.zeros(N_CLASSES)
    return ModelParams(params, buffers)


@dataclass
class ForwardCache:
    mode: str
    lam: float
    batch_size: int
    extractor: list
    feat_shape: tuple
    heads: dict
    bn_stats: dict
    shapes: list


def _head_forward(p, prefix, x, rate, rng, mode):
    h, c1 = linear(x, p[prefix + "W1"], p[prefix + "b1"])
    h, m = relu(h)
    h, dmask = dropout(h, rate, rng, mode)
    out, c2 = linear(h, p[prefix + "W2"], p[prefix + "b2"])
    return out, (c1, m, dmask, c2)


def _head_backward(g, p, prefix, cache):
    c1, m, dmask, c2 = cache
    dh, dW2, db2 = linear_backward(g, c2, p[prefix + "W2"])
    dh = dropout_backward(dh, dmask)
    dh = relu_backward(dh, m)
    dx, dW1, db1 = linear_backward(dh, c1, p[prefix + "W1"])
    return dx, {prefix + "W1": dW1, prefix + "b1": db1, prefix + "W2": dW2, prefix + "b2": db2}


def extract(model, x, mode):
    """Run only the feature extractor.  Returns ``(features, cache_list, bn_stats, shapes)``."""
    p, buf = model.params, model.buffers
    caches, stats, shapes = [], {}, []
    h = x
    for i in (1, 2, 3):
        h, cc = conv1d_full(h, p[f"f.conv{i}.W"], p[f"f.conv{i}.b"])
        shapes.append(h.shape[2])
        h, cb = batchnorm1d(h, p[f"f.bn{i}.gamma"], p[f"f.bn{i}.beta"],
                            buf[f"f.bn{i}.running_mean"], buf[f"f.bn{i}.running_var"], mode)
        stats[i] = (cb[2], cb[3], h.shape[0] * h.shape[2])
        h, cr = relu(h)
        h, cp = maxpool2(h)
        shapes.append(h.shape[2])
        caches.append((cc, cb, cr, cp))
    feat_shape = h.shape
    return h.reshape(h.shape[0], -1), caches, stats, shapes, feat_shape


def forward_pass(model, batch, lam=1.0, mode="train", rng=None, dropout_rate=0.0):
    """Forward through extractor and both heads.

    ``batch`` is ``(B, 3, 66)``.  Returns ``(features, fall_logits,
    domain_logits, cache)``.  The model is not mutated; batch statistics for
    the running estimates are left in ``cache.bn_stats``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (N_AXES, INPUT_LENGTH):
        raise ValueError(f"expected batch of shape (B, {N_AXES}, {INPUT_LENGTH}), got {batch.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and dropout_rate > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    p = model.params
    feats, caches, stats, shapes, feat_shape = extract(model, batch, mode)
    fall_logits, fall_cache = _head_forward(p, FALL_PREFIX, feats, dropout_rate, rng, mode)
    rev = grl(feats, lam)
    dom_logits, dom_cache = _head_forward(p, DOMAIN_PREFIX, rev, dropout_rate, rng, mode)
    _check_finite(fall_logits, "fall logits")
    _check_finite(dom_logits, "domain logits")
    cache = ForwardCache(mode, lam, batch.shape[0], caches, feat_shape,
                         {"fall": (fall_cache, fall_logits), "domain": (dom_cache, dom_logits)},
                         stats, shapes)
    return feats, fall_logits, dom_logits, cache


def compute_losses(cache, fall_targets=None, domain_targets=None, fall_weights=None,
                   domain_weights=None):
    """Cross-entropy losses and logit gradients for one forward cache.

    ``fall_targets`` may contain ``-1`` for unlabeled rows; those rows get zero
    weight.  Default weights give the mean over the rows that count.
    """
    out = {}
    fall_logits = cache.heads["fall"][1]
    dom_logits = cache.heads["domain"][1]
    if fall_targets is not None:
        t = np.asarray(fall_targets, dtype=np.int64)
        labeled = t >= 0
        if fall_weights is None:
            n = labeled.sum()
            fall_weights = labeled / n if n else np.zeros(len(t))
        w = np.where(labeled, fall_weights, 0.0)
        out["fall"] = softmax_ce(fall_logits, np.where(labeled, t, 0), w)
    if domain_targets is not None:
        out["domain"] = softmax_ce(dom_logits, domain_targets, domain_weights)
    return out


def backward_pass(model, cache, fall_targets=None, domain_targets=None, loss_weights=(1.0, 1.0),
                  fall_weights=None, domain_weights=None):
    """Gradients of ``w_fall * E_fall + w_domain * E_domain``.

    The domain error reaches the extractor only through the reversal layer, so
    its contribution there is scaled by ``-lambda``; domain-head gradients are
    not reversed.  Returns ``(grads, losses)`` where ``losses`` maps
    ``"fall"``/``"domain"`` to floats.
    """
    if cache.mode != "train":
        raise ValueError("backward_pass needs a train-mode forward cache")
    p = model.params
    losses = compute_losses(cache, fall_targets, domain_targets, fall_weights, domain_weights)
    grads = {}
    B = cache.batch_size
    dfeat = np.zeros((B, FEATURE_DIM))
    w_fall, w_dom = loss_weights
    if "fall" in losses:
        g = losses["fall"][1] * w_fall
        dx, hg = _head_backward(g, p, FALL_PREFIX, cache.heads["fall"][0])
        grads.update(hg)
        dfeat += dx
    if "domain" in losses:
        g = losses["domain"][1] * w_dom
        dx, hg = _head_backward(g, p, DOMAIN_PREFIX, cache.heads["domain"][0])
        grads.update(hg)
        dfeat += grl_backward(dx, cache.lam)
    h = dfeat.reshape(cache.feat_shape)
    for i in (3, 2, 1):
        cc, cb, cr, cp = cache.extractor[i - 1]
        h = maxpool2_backward(h, cp)
        h = relu_backward(h, cr)
        h, dgamma, dbeta = batchnorm1d_backward(h, cb, p[f"f.bn{i}.gamma"])
        h, dW, db = conv1d_full_backward(h, cc, p[f"f.conv{i}.W"])
        grads[f"f.bn{i}.gamma"] = dgamma
        grads[f"f.bn{i}.beta"] = dbeta
        grads[f"f.conv{i}.W"] = dW
        grads[f"f.conv{i}.b"] = db
    for k, v in p.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return grads, {k: v[0] for k, v in losses.items()}


def apply_running_stats(model, cache):
    """Fold a train-mode forward's batch statistics into the running estimates."""
    for i, (mean, var, n) in cache.bn_stats.items():
        rm, rv = f"f.bn{i}.running_mean", f"f.bn{i}.running_var"
        model.buffers[rm], model.buffers[rv] = update_running_stats(
            model.buffers[rm], model.buffers[rv], mean, var, n)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def copy(self):
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(model, grads, state, lr, weight_decay=0.0, keys=None):
    """One Adam update with coupled L2 decay (``g + wd * param``).

    Only ``keys`` are touched (default: every key in ``grads``); the step
    counter advances once per call.
    """
    keys = list(grads) if keys is None else list(keys)
    for k in keys:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteError(f"non-finite gradient for {k}; step aborted")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for k in keys:
        p = model.params[k]
        g = grads[k] + weight_decay * p if weight_decay else grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = ADAM_BETA1 * state.m[k] + (1 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * (g * g)
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        model.params[k] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return model, state


# ---------------------------------------------------------------------------
# gradient check


def grad_check(model, batch, lam=1.0, eps=1e-5, fall_targets=None, domain_targets=None,
               keys=None, return_details=False):
    """Max relative error between analytic and central-difference gradients.

    The reference for extractor parameters is ``dE_fall - lambda * dE_domain``
    (what the reversal layer produces); heads are checked against their own
    loss.  Batch norm runs in train mode on the fixed batch, dropout is off.
    Entries whose perturbation crosses a ReLU or pooling kink are skipped;
    they show up as a jump between the two one-sided slopes larger than
    ``10 * eps``.  The relative error uses ``max(|a|, |n|, 1e-6)`` as
    denominator so exact zeros do not blow up.
    """
    batch = np.asarray(batch, dtype=np.float64)
    B = batch.shape[0]
    if fall_targets is None:
        fall_targets = np.arange(B) % 2
    if domain_targets is None:
        domain_targets = (np.arange(B) // max(1, B // 2)).clip(0, 1)
    _, _, _, cache = forward_pass(model, batch, lam, "train")
    grads, _ = backward_pass(model, cache, fall_targets, domain_targets)

    feats = forward_pass(model, batch, lam, "train")[0]
    fall_w = np.full(B, 1.0 / B)

    def both_losses(k):
        if k.startswith(EXTRACTOR_PREFIX):
            _, _, _, c = forward_pass(model, batch, lam, "train")
            ls = compute_losses(c, fall_targets, domain_targets)
            return ls["fall"][0], ls["domain"][0]
        # heads do not feed back into the extractor: reuse its output
        prefix = FALL_PREFIX if k.startswith(FALL_PREFIX) else DOMAIN_PREFIX
        logits, _ = _head_forward(model.params, prefix, feats, 0.0, None, "eval")
        if prefix == FALL_PREFIX:
            return softmax_ce(logits, fall_targets, fall_w)[0], 0.0
        return 0.0, softmax_ce(logits, domain_targets)[0]

    worst, skipped, checked = 0.0, 0, 0
    for k in (keys or list(model.params)):
        arr = model.params[k]
        scale = -lam if k.startswith(EXTRACTOR_PREFIX) else 1.0
        flat = arr.reshape(-1)
        gflat = grads[k].reshape(-1)
        base = np.array(both_losses(k))
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            plus = np.array(both_losses(k))
            flat[idx] = old - eps
            minus = np.array(both_losses(k))
            flat[idx] = old
            d_plus = (plus - base) / eps
            d_minus = (base - minus) / eps
            if np.any(np.abs(d_plus - d_minus) > 10 * eps * np.maximum(1.0, np.abs(d_plus))):
                skipped += 1
                continue
            num = (plus - minus) / (2 * eps)
            numeric = num[0] + scale * num[1]
            analytic = gflat[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
            checked += 1
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"DAFDCKPT1\n"


def save_checkpoint(path, model, adam=None, hyperparams=None, extra=None):
    """Write a self-describing checkpoint.

    Layout: magic line, 8-byte little-endian header length, a JSON header
    listing each array's name/shape/offset, then raw float64 little-endian
    data.  No timestamps, so identical inputs give identical bytes.
    """
    arrays = [("param/" + k, v) for k, v in model.params.items()]
    arrays += [("buffer/" + k, v) for k, v in model.buffers.items()]
    if adam is not None:
        arrays += [("adam_m/" + k, v) for k, v in adam.m.items()]
        arrays += [("adam_v/" + k, v) for k, v in adam.v.items()]
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "dafd-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "adam_t": None if adam is None else adam.t,
        "hyperparams": hyperparams or {},
        "extra": extra or {},
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, adam_or_None, header)``."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = fh.read()
    model = ModelParams()
    adam = None if header["adam_t"] is None else AdamState(t=header["adam_t"])
    for e in header["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=e["offset"]).reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            model.params[name] = arr
        elif kind == "buffer":
            model.buffers[name] = arr
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr
    return model, adam, header
