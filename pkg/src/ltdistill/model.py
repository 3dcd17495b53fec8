"""Softmax-linear / one-hidden-layer MLP with hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import DomainError, NumericError, RngStream, log_softmax, softmax

ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpModel:
    """Layer dims ``(D, H, K)``; ``H == 0`` means a plain linear classifier.

    ``params`` is ``[W, b]`` for the linear case and ``[W1, b1, W2, b2]``
    otherwise, with ``W`` shaped (fan_in, fan_out).
    """

    dims: tuple
    activation: str
    params: list

    @property
    def hidden(self) -> int:
        return self.dims[1]

    @property
    def num_classes(self) -> int:
        return self.dims[2]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def with_flat(self, vec) -> "MlpModel":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = [], 0
        for p in self.params:
            out.append(vec[i : i + p.size].reshape(p.shape).copy())
            i += p.size
        return MlpModel(self.dims, self.activation, out)

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, self.activation, [p.copy() for p in self.params])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    resample: bool = False
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be >= 0")

    def with_rng(self, rng: RngStream) -> "TrainConfig":
        return replace(self, rng=rng)


def init_mlp(dims, activation: str = "relu", rng: RngStream | None = None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise DomainError("dims must be (D, H, K)")
    d, h, k = dims
    if d < 1 or k < 1 or h < 0:
        raise DomainError(f"invalid dims {dims}")
    if activation not in ACTIVATIONS:
        raise DomainError(f"unknown activation {activation!r}")
    g = (rng or RngStream(0)).generator()
    shapes = [(d, k)] if h == 0 else [(d, h), (h, k)]
    params = []
    for fan_in, fan_out in shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(g.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return MlpModel(dims, activation, params)


def _check_input(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dims[0]:
        raise DomainError(f"expected N x {model.dims[0]} input, got {X.shape}")
    return X


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def _forward_cache(model: MlpModel, X: np.ndarray):
    if model.hidden == 0:
        W, b = model.params
        return X @ W + b, X, None
    W1, b1, W2, b2 = model.params
    z = X @ W1 + b1
    a = _act(model.activation, z)
    return a @ W2 + b2, a, z


def forward(model: MlpModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, features)``; features are the penultimate activations."""
    X = _check_input(model, X)
    logits, feats, _ = _forward_cache(model, X)
    return logits, feats


def extract_features(model: MlpModel, X) -> np.ndarray:
    return forward(model, X)[1]


def predict_proba(model: MlpModel, X) -> np.ndarray:
    return softmax(forward(model, X)[0], axis=1)


def backward(model: MlpModel, X, cache, dlogits, dfeatures=None):
    """Backpropagate ``dlogits`` (and optionally a gradient on the features).

    Returns ``(param_grads, input_grad)``.
    """
    _, feats, z = cache
    if model.hidden == 0:
        W, _ = model.params
        grads = [X.T @ dlogits, dlogits.sum(axis=0)]
        dx = dlogits @ W.T
        if dfeatures is not None:
            dx = dx + dfeatures
        return grads, dx
    W1, _, W2, _ = model.params
    gW2 = feats.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    da = dlogits @ W2.T
    if dfeatures is not None:
        da = da + dfeatures
    dz = da * _act_grad(model.activation, z, feats)
    return [X.T @ dz, dz.sum(axis=0), gW2, gb2], dz @ W1.T


def _targets_to_probs(targets, n: int, k: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n or not np.issubdtype(t.dtype, np.integer):
            raise DomainError("hard targets must be an integer vector of length N")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise DomainError("hard targets out of range")
        out = np.zeros((n, k))
        out[np.arange(n), t] = 1.0
        return out
    if t.shape != (n, k):
        raise DomainError(f"soft targets must be {n} x {k}, got {t.shape}")
    return t.astype(np.float64)


def loss_and_grad(model: MlpModel, X, targets, weight_decay: float = 0.0):
    """Mean soft-target cross-entropy plus ``weight_decay/2 * sum ||W||^2``.

    ``targets`` is either an integer label vector or an N x K matrix of
    probability rows. Biases are not decayed.
    """
    X = _check_input(model, X)
    n = X.shape[0]
    probs_t = _targets_to_probs(targets, n, model.num_classes)
    cache = _forward_cache(model, X)
    logits = cache[0]
    if not np.all(np.isfinite(logits)):
        layer = 0 if model.hidden and not np.all(np.isfinite(cache[1])) else len(model.params) // 2 - 1
        raise NumericError(f"non-finite activations at layer {layer}")
    logp = log_softmax(logits, axis=1)
    loss = float(-np.sum(probs_t * logp) / n)
    dlogits = (np.exp(logp) - probs_t) / n
    grads, _ = backward(model, X, cache, dlogits)
    if weight_decay:
        for i in range(0, len(model.params), 2):
            loss += 0.5 * weight_decay * float(np.sum(model.params[i] ** 2))
            grads[i] = grads[i] + weight_decay * model.params[i]
    return loss, grads


def epoch_indices(labels: np.ndarray, num_classes: int, resample: bool,
                  g: np.random.Generator) -> np.ndarray:
    """One epoch's visiting order.

    Without resampling: a permutation. With resampling: N draws with
    replacement, class chosen uniformly, then an item uniformly within it.
    """
    n = labels.shape[0]
    if not resample:
        return g.permutation(n)
    present = [np.flatnonzero(labels == k) for k in range(num_classes)]
    present = [p for p in present if p.size]
    cls = g.integers(0, len(present), size=n)
    out = np.empty(n, dtype=np.int64)
    for c, pool in enumerate(present):
        sel = cls == c
        out[sel] = pool[g.integers(0, pool.size, size=int(sel.sum()))]
    return out


def train(model: MlpModel, X, targets, cfg: TrainConfig, labels=None,
          schedule_k: int | None = None, history: list | None = None) -> MlpModel:
    """Minibatch SGD with momentum; returns a new trained model.

    ``targets`` may be hard labels (N,), soft rows (N x K), or per-epoch
    soft rows (k x N x K) consumed through the EP-k schedule (slice
    ``epoch % k``). ``labels`` (the hard class of each row) drives
    class-balanced resampling and defaults to ``targets`` when those are
    hard. The final incomplete batch is dropped unless the whole set is
    smaller than one batch, in which case every epoch is a single batch.
    """
    from .softlabel import epk_schedule

    X = _check_input(model, X)
    n, k = X.shape[0], model.num_classes
    if n == 0:
        raise DomainError("training data is empty")
    t = np.asarray(targets)
    if t.ndim == 3:
        slices = [_targets_to_probs(s, n, k) for s in t]
    else:
        slices = [_targets_to_probs(t, n, k)]
    if schedule_k is None:
        schedule_k = len(slices)
    if schedule_k > len(slices):
        raise DomainError(f"schedule needs {schedule_k} label slices, only {len(slices)} given")
    if labels is None:
        labels = t if t.ndim == 1 else np.argmax(slices[0], axis=1)
    labels = np.asarray(labels, dtype=np.int64)

    out = model.copy()
    velocity = [np.zeros_like(p) for p in out.params]
    g = cfg.rng.generator()
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(cfg.epochs):
        probs = slices[epk_schedule(schedule_k, epoch)]
        order = epoch_indices(labels, k, cfg.resample, g)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            loss, grads = loss_and_grad(out, X[idx], probs[idx], cfg.weight_decay)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at step {step}")
            if history is not None:
                history.append(loss)
            for p, v, gr in zip(out.params, velocity, grads):
                v *= cfg.momentum
                v += gr
                p -= cfg.learning_rate * v
            step += 1
    for p in out.params:
        if not np.all(np.isfinite(p)):
            raise NumericError(f"non-finite parameters after step {step}")
    return out
