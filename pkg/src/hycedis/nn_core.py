"""Minimal float64 neural-network substrate with hand-written backward passes.

Every layer follows the same protocol::

    out, cache = layer.forward(x)
    dx, grads = layer.backward(dout, cache)

``grads`` is keyed exactly like ``layer.named_parameters()``, which lets the
optimizer and the finite-difference checker treat any model uniformly.
Forward passes never mutate the layer, so a frozen model can be evaluated
from several threads at once.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, DomainError, TrainingError

BCE_EPS = 1e-7
ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softmax")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def activation_forward(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(dy: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    """Gradient wrt the pre-activation, expressed through the activation output ``y``."""
    if activation == "identity":
        return dy
    if activation == "relu":
        return dy * (y > 0)
    if activation == "tanh":
        return dy * (1.0 - y * y)
    if activation == "sigmoid":
        return dy * y * (1.0 - y)
    if activation == "softmax":
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {activation!r}")


def prefixed(grads: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


class Module:
    """Parameter container; leaves fill ``params``, composites fill ``children``."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into existing parameters in place (shapes must agree)."""
        for name, param in self.named_parameters(prefix).items():
            if name not in values:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != param.shape:
                raise DimensionError(f"{name}: expected shape {param.shape}, got {src.shape}")
            np.copyto(param, src)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)[0]


class Dense(Module):
    """Affine map ``y = act(x W^T + b)`` over the last axis."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "identity",
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise DimensionError("dense dimensions must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.params["W"] = glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim))
        if bias:
            self.params["b"] = np.zeros(out_dim)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"dense expects last dim {self.in_dim}, got {x.shape[-1]}")
        z = x @ self.params["W"].T
        if "b" in self.params:
            z = z + self.params["b"]
        y = activation_forward(z, self.activation)
        return y, (x, y)

    def backward(self, dy: np.ndarray, cache):
        x, y = cache
        dz = activation_backward(dy, y, self.activation)
        dz2 = dz.reshape(-1, self.out_dim)
        x2 = x.reshape(-1, self.in_dim)
        grads = {"W": dz2.T @ x2}
        if "b" in self.params:
            grads["b"] = dz2.sum(axis=0)
        dx = dz @ self.params["W"]
        return dx, grads


def dense_forward(params: dict[str, np.ndarray], x: np.ndarray, activation: str = "identity") -> np.ndarray:
    """Stateless dense forward over a ``{"W", "b"}`` parameter dict."""
    W = np.asarray(params["W"], dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"dense expects last dim {W.shape[1]}, got {x.shape[-1]}")
    z = x @ W.T
    if params.get("b") is not None:
        b = np.asarray(params["b"], dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise DimensionError("bias length must equal out_dim")
        z = z + b
    return activation_forward(z, activation)


class MLP(Module):
    """A stack of Dense layers; ``dims`` lists every width including input."""

    def __init__(
        self,
        dims: Iterable[int],
        activations: Iterable[str],
        rng: np.random.Generator | None = None,
        bias: bool = True,
    ) -> None:
        super().__init__()
        dims = list(dims)
        activations = list(activations)
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: list[Dense] = []
        for i, (a, b, act) in enumerate(zip(dims[:-1], dims[1:], activations)):
            layer = Dense(a, b, act, bias=bias, rng=rng)
            self.layers.append(layer)
            self.children[str(i)] = layer
        self.in_dim, self.out_dim = dims[0], dims[-1]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        grads = {}
        for i in reversed(range(len(self.layers))):
            dy, g = self.layers[i].backward(dy, caches[i])
            grads.update(prefixed(g, str(i)))
        return dy, grads


class LSTM(Module):
    """Single-layer many-to-one LSTM with gate order (input, forget, cell, output).

    Batched over padded sequences: steps past a sequence's length leave its
    state untouched, so the returned state is ``h`` at each sequence's last
    real step.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if input_size <= 0 or hidden_size <= 0:
            raise DimensionError("LSTM sizes must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        H, I = hidden_size, input_size
        self.input_size, self.hidden_size = I, H
        self.params["W"] = np.concatenate([glorot_uniform(rng, I, H, (H, I)) for _ in range(4)])
        self.params["U"] = np.concatenate([glorot_uniform(rng, H, H, (H, H)) for _ in range(4)])
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.params["b"] = b

    def forward(self, x: np.ndarray, lengths: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        N, T, I = x.shape
        if I != self.input_size:
            raise DimensionError(f"LSTM expects input size {self.input_size}, got {I}")
        if T < 1:
            raise DomainError("LSTM needs at least one timestep")
        H = self.hidden_size
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        lengths = np.full(N, T) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1):
            raise DomainError("every sequence needs at least one timestep")
        xw = x @ W.T + b
        h = np.zeros((N, H))
        c = np.zeros((N, H))
        steps = []
        for t in range(T):
            a = xw[:, t] + h @ U.T
            s = sigmoid(a)
            i, f, o = s[:, :H], s[:, H:2 * H], s[:, 3 * H:]
            g = np.tanh(a[:, 2 * H:3 * H])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            m = (t < lengths)[:, None]
            steps.append((h, c, i, f, g, o, tc, m))
            if m.all():
                h, c = h_new, c_new
            else:
                h = np.where(m, h_new, h)
                c = np.where(m, c_new, c)
        return h, (x, steps)

    def backward(self, dh: np.ndarray, cache, need_dx: bool = False):
        x, steps = cache
        N, T, I = x.shape
        H = self.hidden_size
        U = self.params["U"]
        dc = np.zeros((N, H))
        da_all = np.empty((N, T, 4 * H))
        dU = np.zeros_like(U)
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, g, o, tc, m = steps[t]
            dh_new = dh * m
            dc_new = dc * m + dh_new * o * (1.0 - tc * tc)
            da = da_all[:, t]
            da[:, :H] = dc_new * g * i * (1.0 - i)
            da[:, H:2 * H] = dc_new * c_prev * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
            da[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
            dU += da.T @ h_prev
            dc = dc_new * f + dc * ~m
            dh = da @ U + dh * ~m
        flat = da_all.reshape(-1, 4 * H)
        grads = {"W": flat.T @ x.reshape(-1, I), "U": dU, "b": flat.sum(axis=0)}
        dx = da_all @ self.params["W"] if need_dx else None
        return dx, grads


def lstm_many_to_one(params: LSTM, sequence: np.ndarray) -> np.ndarray:
    """Final hidden state of ``params`` run over a single ``T x input_size`` sequence."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise DomainError("sequence must be a non-empty T x input_size array")
    return params(seq[None])[0]


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.uniform(size=shape) >= rate) / (1.0 - rate)


# losses --------------------------------------------------------------------


def bce_loss(p, y, eps: float = BCE_EPS):
    """Binary cross-entropy with probabilities clamped to ``[eps, 1-eps]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def bce_grad(p, y, eps: float = BCE_EPS) -> np.ndarray:
    """d bce / d p, zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > eps) & (p < 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    return np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0)


def binary_softmax_bce(logits: np.ndarray, y: np.ndarray, pos_weight: float = 1.0):
    """Mean BCE of ``softmax(logits)[:, 1]`` against ``y``, with grad wrt logits."""
    probs = softmax(logits)
    p = probs[:, 1]
    w = np.where(np.asarray(y) > 0.5, pos_weight, 1.0)
    n = len(p)
    loss = float(np.sum(w * bce_loss(p, y)) / n)
    dp = w * bce_grad(p, y) / n
    # d p1 / d z1 = p1 p0, d p1 / d z0 = -p1 p0
    dz = np.empty_like(logits)
    dz[:, 1] = dp * p * probs[:, 0]
    dz[:, 0] = -dz[:, 1]
    return loss, dz, p


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean multiclass NLL and its gradient wrt the logits."""
    probs = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, targets], 1e-300))))
    d = probs.copy()
    d[idx, targets] -= 1.0
    return loss, d / n


def triplet_loss(anchor, positive, negative, margin: float):
    """Hinge on squared euclidean distances; batched inputs give per-row losses."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise DimensionError("triplet members must share a shape")
    d_ap = np.sum((a - p) ** 2, axis=-1)
    d_an = np.sum((a - n) ** 2, axis=-1)
    loss = np.maximum(0.0, d_ap - d_an + margin)
    return float(loss) if loss.ndim == 0 else loss


def triplet_loss_grad(anchor, positive, negative, margin: float):
    """Per-row triplet losses and gradients wrt (anchor, positive, negative)."""
    a, p, n = anchor, positive, negative
    d_ap = np.sum((a - p) ** 2, axis=-1)
    d_an = np.sum((a - n) ** 2, axis=-1)
    loss = np.maximum(0.0, d_ap - d_an + margin)
    active = (loss > 0)[..., None].astype(np.float64)
    ga = active * 2.0 * (n - p)
    gp = active * -2.0 * (a - p)
    gn = active * 2.0 * (a - n)
    return loss, ga, gp, gn


def gaussian_kl(mu, log_var) -> float:
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise DimensionError("mu and log_var must have the same shape")
    # expm1 keeps exp(lv) - 1 - lv from cancelling below zero when lv is tiny
    kl = 0.5 * np.sum(np.maximum(np.expm1(log_var) - log_var, 0.0) + mu * mu, axis=-1)
    return float(kl) if kl.ndim == 0 else kl


def gaussian_kl_grad(mu, log_var):
    return mu, 0.5 * np.expm1(log_var)


# optimizer -----------------------------------------------------------------


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One in-place Adam update with bias correction.

    ``state`` holds ``t`` plus first/second moment dicts and is updated in
    place. Nothing is touched if any gradient is non-finite. A non-zero
    ``weight_decay`` shrinks parameters directly (decoupled, AdamW style).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    scratch = state.setdefault("scratch", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = m_all.get(name)
        if m is None:
            m = m_all[name] = np.zeros_like(g)
            v_all[name] = np.zeros_like(g)
            scratch[name] = np.empty_like(g)
        v, tmp = v_all[name], scratch[name]
        # in place: these arrays can hold ~1e6 entries
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=tmp)
        m += tmp
        v *= beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(c2)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        if weight_decay:
            params[name] *= 1.0 - lr * weight_decay
        params[name] -= tmp
    return params, state


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict = {"t": 0}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps,
                  self.weight_decay)


# verification --------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must read ``params`` (perturbed in place here) and return
    ``(loss, grads)``; any randomness inside it has to be frozen by the caller.
    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-6, 1e-4]")
    _, grads = loss_fn()
    worst = 0.0
    for name, p in params.items():
        analytic = np.asarray(grads[name])
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_fn()[0]
            flat[k] = orig - epsilon
            down = loss_fn()[0]
            flat[k] = orig
            num = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
