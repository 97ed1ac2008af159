"""Feedforward fully connected network, trained with Adam, from scratch.

Maps the encoded wind ``(mu1 cos mu2, mu1 sin mu2)`` to flux POD
coefficients.  Hidden layers use ReLU (or tanh); the output layer is
affine.  Inputs and targets are standardised internally.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .storage import read_matrix, write_matrix

__all__ = [
    "Mlp",
    "TrainConfig",
    "TrainingDiverged",
    "encode_wind",
    "forward",
    "gradient_check",
    "loss",
    "loss_and_gradients",
    "min_abs_preactivation",
    "train",
    "write_loss_csv",
]

_ACTIVATIONS = ("relu", "tanh")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


def encode_wind(mu1, mu2) -> np.ndarray:
    """``(mu1 cos mu2, mu1 sin mu2)``; broadcasts over arrays."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float) % (2.0 * math.pi)
    return np.stack([mu1 * np.cos(mu2), mu1 * np.sin(mu2)], axis=-1)


class Mlp:
    """Dense network with layer sizes ``[n_in, m_1, ..., m_L, n_out]``.

    ``weights[l]`` has shape ``(sizes[l + 1], sizes[l])``.
    """

    def __init__(self, sizes, activation="relu", weights=None, biases=None, seed=0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        self.sizes = sizes
        self.activation = activation
        if weights is None:
            rng = np.random.default_rng(seed)
            gain = 2.0 if activation == "relu" else 1.0
            weights = [
                rng.normal(0.0, math.sqrt(gain / n_in), size=(n_out, n_in))
                for n_in, n_out in zip(sizes[:-1], sizes[1:])
            ]
            biases = [np.zeros(n) for n in sizes[1:]]
        self.weights = [np.array(W, dtype=float) for W in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ValueError(f"layer {l} has inconsistent parameter shapes")
        self.x_shift = np.zeros(sizes[0])
        self.x_scale = np.ones(sizes[0])
        self.y_shift = np.zeros(sizes[-1])
        self.y_scale = np.ones(sizes[-1])

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        net = Mlp(self.sizes, self.activation, self.weights, self.biases)
        for k in ("x_shift", "x_scale", "y_shift", "y_scale"):
            setattr(net, k, getattr(self, k).copy())
        return net

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x) -> np.ndarray:
        return forward(self, x)

    def predict(self, x) -> np.ndarray:
        """Physical output for encoded input(s): scales in and out."""
        x = np.asarray(x, dtype=float)
        z = forward(self, (x - self.x_shift) / self.x_scale)
        return z * self.y_scale + self.y_shift

    def predict_wind(self, mu1, mu2) -> np.ndarray:
        return self.predict(encode_wind(mu1, mu2))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = dict(sizes=self.sizes, activation=self.activation)
        (d / "net.json").write_text(json.dumps(header, indent=1) + "\n")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            write_matrix(d / f"W{l}.rmdm", W)
            write_matrix(d / f"b{l}.rmdm", b)
        write_matrix(d / "scaling.rmdm", np.vstack(
            [np.pad(v, (0, max(self.sizes[0], self.sizes[-1]) - v.size))
             for v in (self.x_shift, self.x_scale, self.y_shift, self.y_scale)]
        ))

    @classmethod
    def load(cls, directory) -> "Mlp":
        d = Path(directory)
        header = json.loads((d / "net.json").read_text())
        sizes = header["sizes"]
        L = len(sizes) - 1
        weights = [read_matrix(d / f"W{l}.rmdm") for l in range(L)]
        biases = [read_matrix(d / f"b{l}.rmdm")[:, 0] for l in range(L)]
        net = cls(sizes, header["activation"], weights, biases)
        sc = read_matrix(d / "scaling.rmdm")
        net.x_shift, net.x_scale = sc[0, : sizes[0]], sc[1, : sizes[0]]
        net.y_shift, net.y_scale = sc[2, : sizes[-1]], sc[3, : sizes[-1]]
        return net


def _act(kind, z):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _dact(kind, z, a):
    return (z > 0.0).astype(float) if kind == "relu" else 1.0 - a * a


def forward(net: Mlp, x) -> np.ndarray:
    """Raw network output ``y_L`` for one input vector or a batch (rows)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} entries, network expects {net.sizes[0]}")
    a = x
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        a = z if l == last else _act(net.activation, z)
    return a


def min_abs_preactivation(net: Mlp, x) -> float:
    """Smallest hidden pre-activation magnitude (distance from the ReLU kink)."""
    a = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.inf
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = a @ W.T + b
        out = min(out, float(np.abs(z).min()))
        a = _act(net.activation, z)
    return out


def _check_batch(net, X, Y, weights):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    lam = np.asarray(weights, dtype=float)
    if lam.shape != (net.sizes[-1],):
        raise ValueError(f"need {net.sizes[-1]} loss weights, got {lam.shape}")
    if Y.shape != (X.shape[0], net.sizes[-1]):
        raise ValueError("targets do not match batch size / output width")
    return X, Y, lam


def loss(net: Mlp, X, Y, weights, decay: float = 0.0) -> float:
    """Batch mean of ``sum_j w_j (y_j - yhat_j)^2`` plus ``decay * sum W^2``."""
    X, Y, lam = _check_batch(net, X, Y, weights)
    R = forward(net, X) - Y
    data = float(np.mean((R * R) @ lam))
    return data + decay * sum(float(np.sum(W * W)) for W in net.weights)


def loss_and_gradients(net: Mlp, X, Y, weights, decay: float = 0.0):
    """Loss and its gradients ``[dW_0, db_0, dW_1, db_1, ...]`` by back-propagation."""
    X, Y, lam = _check_batch(net, X, Y, weights)
    B = X.shape[0]
    zs, acts = [], [X]
    a = X
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        a = z if l == last else _act(net.activation, z)
        zs.append(z)
        acts.append(a)
    R = a - Y
    value = float(np.mean((R * R) @ lam))
    value += decay * sum(float(np.sum(W * W)) for W in net.weights)

    delta = (2.0 / B) * R * lam
    grads = [None] * (2 * len(net.weights))
    for l in range(last, -1, -1):
        grads[2 * l] = delta.T @ acts[l] + 2.0 * decay * net.weights[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * _dact(net.activation, zs[l - 1], acts[l])
    return value, grads


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-8
    epochs: int = 3000
    batch_size: int = 32
    seed: int = 0
    loss_weights: np.ndarray | None = None
    standardize: bool = True
    homogeneous: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss_weights is not None and np.any(np.asarray(self.loss_weights) < 0):
            raise ValueError("loss weights must be non-negative")


def train(net: Mlp, X, Y, cfg: TrainConfig, X_test=None, Y_test=None):
    """Adam with minibatching; returns ``[(epoch, train_loss, test_loss), ...]``.

    Losses are reported in the standardised target space used for training
    (test loss is NaN when no held-out set is given).  With
    ``cfg.homogeneous`` the biases are zeroed and frozen and scaling uses the
    RMS without a shift, so a ReLU network stays positively homogeneous of
    degree one: ``predict(a x) = a predict(x)`` for ``a >= 0``.  ``net`` is updated in
    place and also returned as the first element of the result.
    """
    cfg.validate()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    lam = np.ones(net.sizes[-1]) if cfg.loss_weights is None else np.asarray(cfg.loss_weights, float)
    if cfg.homogeneous:
        for b in net.biases:
            b[:] = 0.0
    if cfg.standardize and cfg.homogeneous:
        net.x_shift = np.zeros(X.shape[1])
        sx = np.sqrt(np.mean(X * X, axis=0))
        net.x_scale = np.where(sx > 0, sx, 1.0)
        net.y_shift = np.zeros(Y.shape[1])
        sy = np.sqrt(np.mean(Y * Y, axis=0))
        net.y_scale = np.where(sy > 0, sy, 1.0)
    elif cfg.standardize:
        net.x_shift = X.mean(axis=0)
        sx = X.std(axis=0)
        net.x_scale = np.where(sx > 0, sx, 1.0)
        net.y_shift = Y.mean(axis=0)
        sy = Y.std(axis=0)
        net.y_scale = np.where(sy > 0, sy, 1.0)
    Xs = (X - net.x_shift) / net.x_scale
    Ys = (Y - net.y_shift) / net.y_scale
    if X_test is not None:
        Xt = (np.atleast_2d(X_test) - net.x_shift) / net.x_scale
        Yt = (np.atleast_2d(Y_test) - net.y_shift) / net.y_scale

    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    if cfg.homogeneous:
        params = params[0::2]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    n = Xs.shape[0]
    t = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            value, grads = loss_and_gradients(net, Xs[idx], Ys[idx], lam, cfg.weight_decay)
            if cfg.homogeneous:
                grads = grads[0::2]
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            t += 1
            c1 = 1.0 - cfg.beta1**t
            c2 = 1.0 - cfg.beta2**t
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.beta1
                mi += (1.0 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1.0 - cfg.beta2) * g * g
                p -= cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
        tr = loss(net, Xs, Ys, lam, cfg.weight_decay)
        if not math.isfinite(tr):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        te = loss(net, Xt, Yt, lam, cfg.weight_decay) if X_test is not None else float("nan")
        history.append((epoch, tr, te))
    return net, history


def gradient_check(net: Mlp, x, y, weights, *, n_params: int = 50, step: float = 1e-6,
                   decay: float = 0.0, seed: int = 0) -> float:
    """Max relative deviation between back-propagated and central-difference gradients.

    Checks a random subset of at least ``n_params`` parameters (all of them
    if the network is smaller); deviation is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    _, grads = loss_and_gradients(net, X, Y, weights, decay)
    params = net.parameters()
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_params else rng.choice(total, n_params, replace=False)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        p = params[k]
        old = p[local]
        p[local] = old + step
        lp = loss(net, X, Y, weights, decay)
        p[local] = old - step
        lm = loss(net, X, Y, weights, decay)
        p[local] = old
        numeric = (lp - lm) / (2.0 * step)
        analytic = grads[k][local]
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


def write_loss_csv(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_loss"])
        for epoch, tr, te in history:
            w.writerow([epoch, repr(float(tr)), repr(float(te))])
