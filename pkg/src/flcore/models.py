"""Model zoo with hand-derived batch gradients over flat parameter vectors.

Three kinds are supported:

* ``linear-regression`` -- squared-error loss 0.5*(yhat - y)^2
* ``softmax``           -- multinomial logistic regression, cross-entropy loss
* ``mlp1``              -- one ReLU hidden layer feeding a softmax output

Parameters live in a single float64 vector with a fixed packing order (the
wire format depends on it): row-major weight matrix first, then biases,
layer by layer.  All arithmetic is 64-bit IEEE-754; given identical inputs,
``loss_and_grad`` returns bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

MODEL_KINDS = ("linear-regression", "softmax", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int = 1
    hidden_dim: int = 0

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if self.kind != "linear-regression" and self.output_dim < 2:
            raise ConfigError(f"classifier needs output_dim >= 2, got {self.output_dim}")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ConfigError(f"mlp1 needs hidden_dim >= 1, got {self.hidden_dim}")

    @property
    def is_classifier(self) -> bool:
        return self.kind in ("softmax", "mlp1")


@dataclass(frozen=True)
class Batch:
    """A mini-batch: inputs of shape (n, input_dim), labels of shape (n,)."""

    inputs: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def param_count(spec: ModelSpec) -> int:
    """Number of flat parameters for a spec (weights plus biases)."""
    spec.validate()
    d, k, h = spec.input_dim, spec.output_dim, spec.hidden_dim
    if spec.kind == "linear-regression":
        return d + 1
    if spec.kind == "softmax":
        return k * (d + 1)
    return h * (d + 1) + k * (h + 1)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Initial parameter vector.

    Linear models start at zero.  The MLP needs symmetry breaking, so its
    weights start uniform in +-1/sqrt(fan_in) (biases zero); the draw is
    deterministic given the stream.
    """
    m = param_count(spec)
    if spec.kind != "mlp1":
        return np.zeros(m)
    d, k, h = spec.input_dim, spec.output_dim, spec.hidden_dim
    params = np.zeros(m)
    w1 = rng.uniform(-1.0, 1.0, size=h * d) / np.sqrt(d)
    w2 = rng.uniform(-1.0, 1.0, size=k * h) / np.sqrt(h)
    params[: h * d] = w1
    params[h * (d + 1) : h * (d + 1) + k * h] = w2
    return params


def _check_shapes(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> None:
    m = param_count(spec)
    if params.ndim != 1 or params.shape[0] != m:
        raise ShapeError(f"expected {m} parameters for {spec.kind}, got shape {params.shape}")
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ShapeError(
            f"expected inputs of shape (n, {spec.input_dim}), got {inputs.shape}"
        )


def _class_labels(spec: ModelSpec, labels: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= spec.output_dim):
        raise ShapeError(f"class labels must lie in [0, {spec.output_dim})")
    return y


def _unpack_linear(spec: ModelSpec, params: np.ndarray):
    d = spec.input_dim
    return params[:d], params[d]


def _unpack_softmax(spec: ModelSpec, params: np.ndarray):
    d, k = spec.input_dim, spec.output_dim
    return params[: k * d].reshape(k, d), params[k * d :]


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    d, k, h = spec.input_dim, spec.output_dim, spec.hidden_dim
    o = 0
    w1 = params[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = params[o : o + h]
    o += h
    w2 = params[o : o + k * h].reshape(k, h)
    o += k * h
    b2 = params[o : o + k]
    return w1, b1, w2, b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Max subtraction keeps exp() in range; values are unchanged mathematically.
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to the flat parameters."""
    x = np.asarray(batch.inputs, dtype=np.float64)
    _check_shapes(spec, params, x)
    n = x.shape[0]
    if n < 1:
        raise ShapeError("batch must contain at least one sample")

    if spec.kind == "linear-regression":
        w, b = _unpack_linear(spec, params)
        y = np.asarray(batch.labels, dtype=np.float64)
        if y.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {y.shape}")
        resid = x @ w + b - y
        loss = 0.5 * float(resid @ resid) / n
        grad = np.empty_like(params)
        grad[: spec.input_dim] = x.T @ resid / n
        grad[spec.input_dim] = resid.sum() / n
    else:
        y = _class_labels(spec, batch.labels, n)
        onehot = np.zeros((n, spec.output_dim))
        onehot[np.arange(n), y] = 1.0
        if spec.kind == "softmax":
            wmat, bias = _unpack_softmax(spec, params)
            logp = _log_softmax(x @ wmat.T + bias)
            loss = -float(logp[np.arange(n), y].sum()) / n
            delta = (np.exp(logp) - onehot) / n
            grad = np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])
        else:
            w1, b1, w2, b2 = _unpack_mlp(spec, params)
            pre = x @ w1.T + b1
            hidden = np.maximum(pre, 0.0)
            logp = _log_softmax(hidden @ w2.T + b2)
            loss = -float(logp[np.arange(n), y].sum()) / n
            delta2 = (np.exp(logp) - onehot) / n
            dhidden = delta2 @ w2
            dpre = dhidden * (pre > 0.0)
            grad = np.concatenate(
                [
                    (dpre.T @ x).ravel(),
                    dpre.sum(axis=0),
                    (delta2.T @ hidden).ravel(),
                    delta2.sum(axis=0),
                ]
            )

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite loss/gradient for {spec.kind} model")
    return loss, grad


def predict(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Regression value, or argmax class index with ties to the smallest index."""
    x = np.asarray(inputs, dtype=np.float64)
    _check_shapes(spec, params, x)
    if spec.kind == "linear-regression":
        w, b = _unpack_linear(spec, params)
        return x @ w + b
    return np.argmax(_logits(spec, params, x), axis=1)


def predict_proba(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities (classifiers only)."""
    if not spec.is_classifier:
        raise ShapeError("probabilities are only defined for classifier models")
    x = np.asarray(inputs, dtype=np.float64)
    _check_shapes(spec, params, x)
    return np.exp(_log_softmax(_logits(spec, params, x)))


def _logits(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "softmax":
        wmat, bias = _unpack_softmax(spec, params)
        return x @ wmat.T + bias
    w1, b1, w2, b2 = _unpack_mlp(spec, params)
    return np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool


def grad_check(
    spec: ModelSpec,
    params: np.ndarray,
    batch: Batch,
    h: float = 1e-6,
    tol: float = 1e-4,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient against central finite differences.

    Uses per-coordinate step h*(1 + |theta_j|) and reports the worst
    relative error, with the denominator floored at 1 so near-zero
    coordinates are judged on absolute error.  ``analytic`` substitutes an
    externally supplied gradient for the model's own (for auditing a
    hand-computed gradient).
    """
    if h <= 0 or tol <= 0:
        raise ConfigError("grad_check requires h > 0 and tol > 0")
    if analytic is None:
        _, analytic = loss_and_grad(spec, params, batch)
    theta = np.array(params, dtype=np.float64)
    fd = np.empty_like(theta)
    for j in range(theta.size):
        step = h * (1.0 + abs(theta[j]))
        saved = theta[j]
        theta[j] = saved + step
        up, _ = loss_and_grad(spec, theta, batch)
        theta[j] = saved - step
        down, _ = loss_and_grad(spec, theta, batch)
        theta[j] = saved
        fd[j] = (up - down) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    max_rel_err = float(np.max(np.abs(analytic - fd) / denom)) if theta.size else 0.0
    return GradCheckReport(max_rel_err=max_rel_err, passed=max_rel_err <= tol)
