"""Exposure-adaptive affine colour transform.

A small MLP reads the query image's luminance histogram and predicts a
3x3 colour matrix ``Q`` and bias ``b`` that are applied to every rendered
pixel: ``c_out = clip(Q @ c_render + b, 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DegenerateError, FormatError

N_BINS = 10
LAYER_WIDTHS = (N_BINS, 64, 64, 64, 12)
CHECKPOINT_HEADER = "ACT v1"


@dataclass(frozen=True)
class ColorAffine:
    Q: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=np.float64).reshape(3, 3)
        b = np.asarray(self.b, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(b))):
            raise ValueError("colour affine must be finite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls) -> "ColorAffine":
        return cls(np.eye(3), np.zeros(3))


def luminance(image: np.ndarray) -> np.ndarray:
    """Y channel of YUV (BT.601 weights)."""
    image = np.asarray(image, dtype=np.float64)
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def luminance_histogram(image: np.ndarray) -> np.ndarray:
    """Ten equal-width luminance bins over [0, 1], normalised by pixel count."""
    y = luminance(image).ravel()
    bins = np.clip(np.floor(y * N_BINS), 0, N_BINS - 1).astype(np.int64)
    counts = np.bincount(bins, minlength=N_BINS).astype(np.float64)
    return counts / max(len(y), 1)


def apply_act(affine: ColorAffine, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.clip(image @ affine.Q.T + affine.b, 0.0, 1.0)


def fit_affine_ls(rendered: np.ndarray, target: np.ndarray, mask=None) -> ColorAffine:
    """Closed-form least-squares colour affine mapping ``rendered`` onto ``target``."""
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        rendered, target = rendered[keep], target[keep]
    if len(rendered) < 4:
        raise DegenerateError(f"need at least 4 pixels for an affine fit, got {len(rendered)}")
    A = np.hstack([rendered, np.ones((len(rendered), 1))])
    if np.linalg.matrix_rank(A) < 4:
        raise DegenerateError("rendered colours are rank deficient (e.g. constant colour)")
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    return ColorAffine(coef[:3].T, coef[3])


def photometric_l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


class ActNetwork:
    """Four fully connected layers, ReLU between them, linear 12-d output.

    The output is read as a residual 3x3 matrix (row-major) followed by the
    bias; ``Q = I + residual``. The last layer starts at zero so a fresh
    network is the identity transform.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(LAYER_WIDTHS[:-1], LAYER_WIDTHS[1:])):
            last = i == len(LAYER_WIDTHS) - 2
            if last:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            self.weights.append(w)
            self.biases.append(np.zeros(n_out) if last else np.full(n_out, 0.01))

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "ActNetwork":
        other = ActNetwork.__new__(ActNetwork)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward_raw(self, hist: np.ndarray) -> Tuple[np.ndarray, list]:
        """Network output for a batch ``(B, 10)`` plus cached activations."""
        h = np.atleast_2d(np.asarray(hist, dtype=np.float64))
        cache = [h]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            cache.append(h)
        return h, cache

    def backward_raw(self, cache: list, grad_out: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients (same order as :attr:`params`)."""
        grads_w, grads_b = [], []
        g = grad_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (cache[i + 1] > 0)
            grads_w.append(cache[i].T @ g)
            grads_b.append(g.sum(axis=0))
            g = g @ self.weights[i].T
        out = []
        for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
            out += [gw, gb]
        return out


def _to_affine(raw: np.ndarray) -> ColorAffine:
    return ColorAffine(np.eye(3) + raw[:9].reshape(3, 3), raw[9:12])


def act_forward(net: ActNetwork, hist: np.ndarray) -> ColorAffine:
    raw, _ = net.forward_raw(np.asarray(hist).reshape(1, N_BINS))
    return _to_affine(raw[0])


def act_loss_and_grad(net: ActNetwork, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]):
    """Mean photometric L1 over ``(render, query)`` pairs and its parameter gradient."""
    hists = np.stack([luminance_histogram(q) for _, q in pairs])
    raw, cache = net.forward_raw(hists)
    grad_raw = np.zeros_like(raw)
    total = 0.0
    for k, (render, query) in enumerate(pairs):
        c = np.asarray(render, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        aff = _to_affine(raw[k])
        pre = c @ aff.Q.T + aff.b
        out = np.clip(pre, 0.0, 1.0)
        n = pre.size
        total += np.abs(out - q).sum() / n
        # d|clip(pre)-q| / d pre; zero where the clamp saturates
        g = np.sign(out - q) * ((pre > 0.0) & (pre < 1.0)) / n
        grad_raw[k, :9] = (g.T @ c).ravel()
        grad_raw[k, 9:] = g.sum(axis=0)
    m = len(pairs)
    grads = net.backward_raw(cache, grad_raw / m)
    return total / m, grads


def act_train(
    net: ActNetwork,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    steps: int = 500,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 0,
):
    """Fit ``net`` with Adam on photometric L1. Mutates and returns ``net``.

    The step size follows a cosine decay from ``lr`` to ``lr / 20``. With
    full batches (``batch_size == 0``) a step that would raise the loss is
    halved up to eight times and dropped if it still does, so the recorded
    loss never increases. Mini-batches are drawn with ``seed``.

    Returns ``(net, losses)`` where ``losses[k]`` is the loss before step k.
    """
    if not pairs:
        raise ValueError("act_train needs at least one (render, query) pair")
    rng = np.random.default_rng(seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = [np.zeros_like(p) for p in net.params]
    v = [np.zeros_like(p) for p in net.params]
    full_batch = not batch_size or batch_size >= len(pairs)
    losses = []
    loss, grads = act_loss_and_grad(net, pairs) if full_batch else (None, None)
    for step in range(1, steps + 1):
        if not full_batch:
            idx = rng.choice(len(pairs), size=batch_size, replace=False)
            loss, grads = act_loss_and_grad(net, [pairs[i] for i in sorted(idx)])
        if not np.isfinite(loss):
            raise FloatingPointError(f"ACT training diverged at step {step}")
        losses.append(loss)
        step_lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps)))
        update = []
        for g, mi, vi in zip(grads, m, v):
            mi *= beta1
            mi += (1 - beta1) * g
            vi *= beta2
            vi += (1 - beta2) * g * g
            update.append((mi / (1 - beta1**step)) / (np.sqrt(vi / (1 - beta2**step)) + eps))
        start = [p.copy() for p in net.params]
        if not full_batch:
            for p, u in zip(net.params, update):
                p -= step_lr * u
            continue
        for _ in range(9):
            for p, p0, u in zip(net.params, start, update):
                p[...] = p0 - step_lr * u
            new_loss, new_grads = act_loss_and_grad(net, pairs)
            if new_loss <= loss:
                loss, grads = new_loss, new_grads
                break
            step_lr *= 0.5
        else:
            for p, p0 in zip(net.params, start):
                p[...] = p0
    return net, losses


def save_act(net: ActNetwork, path) -> None:
    lines = [CHECKPOINT_HEADER, "layers=" + ",".join(str(w) for w in LAYER_WIDTHS)]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{i} {w.shape[0]}x{w.shape[1]} " + " ".join(f"{x:.17g}" for x in w.ravel()))
        lines.append(f"b{i} {b.shape[0]} " + " ".join(f"{x:.17g}" for x in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_act(path) -> ActNetwork:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise FormatError(f"{path}: missing '{CHECKPOINT_HEADER}' header")
    expected = "layers=" + ",".join(str(w) for w in LAYER_WIDTHS)
    if len(lines) < 2 or lines[1].strip() != expected:
        raise FormatError(f"{path}: unsupported architecture line, expected {expected!r}")
    net = ActNetwork(seed=0)
    body = lines[2:]
    if len(body) != 2 * len(net.weights):
        raise FormatError(f"{path}: expected {2 * len(net.weights)} parameter lines, got {len(body)}")
    for lineno, (line, p) in enumerate(zip(body, net.params), start=3):
        parts = line.split()
        values = parts[2:]
        if len(values) != p.size:
            raise FormatError(f"{path}: line {lineno} has {len(values)} values, expected {p.size}", line=lineno)
        try:
            arr = np.array([float(x) for x in values])
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}", line=lineno) from None
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: line {lineno}: non-finite parameter", line=lineno)
        p[...] = arr.reshape(p.shape)
    return net
