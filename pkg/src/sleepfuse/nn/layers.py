"""Parameters and the layer set used by the toy encoders and fusion head."""

from __future__ import annotations

import numpy as np

from sleepfuse.errors import ConfigError, DataError
from sleepfuse.nn.tensor import Tensor

# small enough that unit output variance holds to 1e-6 for unit-scale
# inputs; all math is float64 so this stays numerically safe
LAYERNORM_EPS = 1e-12


class Parameter:
    """A named, optionally trainable tensor.

    ``trainable=False`` detaches the parameter from gradient flow and makes
    it bit-invariant under any optimizer schedule.
    """

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def init_uniform(rng: np.random.Generator, shape: tuple, d_in: int) -> np.ndarray:
    """Dense-style init: uniform in +-1/sqrt(d_in)."""
    limit = 1.0 / np.sqrt(d_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Affine map ``x @ W + b`` with W of shape (d_in, d_out)."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(f"{name}.weight", init_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DataError(
                f"dense layer expects last dim {self.d_in}, got input shape {x.shape}"
            )
        return x @ self.weight.tensor + self.bias.tensor

    def parameters(self) -> list:
        return [self.weight, self.bias]


class LayerNorm:
    """Normalize over the last axis, then scale and shift."""

    def __init__(self, name: str, dim: int):
        self.dim = dim
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * (var + LAYERNORM_EPS) ** -0.5
        return normed * self.gamma.tensor + self.beta.tensor

    def parameters(self) -> list:
        return [self.gamma, self.beta]


class MultiHeadSelfAttention:
    """Bidirectional multi-head self-attention over (..., n_tok, dim)."""

    def __init__(self, name: str, dim: int, head_count: int, rng: np.random.Generator):
        if dim % head_count != 0:
            raise ConfigError(f"dim {dim} not divisible by head count {head_count}")
        self.dim = dim
        self.head_count = head_count
        self.head_dim = dim // head_count
        self.wq = Dense(f"{name}.wq", dim, dim, rng)
        self.wk = Dense(f"{name}.wk", dim, dim, rng)
        self.wv = Dense(f"{name}.wv", dim, dim, rng)
        self.wo = Dense(f"{name}.wo", dim, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        # (..., T, D) -> (..., H, T, dh)
        *lead, t, _ = x.shape
        x = x.reshape(*lead, t, self.head_count, self.head_dim)
        axes = list(range(x.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return x.transpose(axes)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DataError(f"attention expects dim {self.dim}, got shape {x.shape}")
        *lead, t, d = x.shape
        q = self._split_heads(self.wq(x))
        k = self._split_heads(self.wk(x))
        v = self._split_heads(self.wv(x))
        kt_axes = list(range(q.ndim))
        kt_axes[-2], kt_axes[-1] = kt_axes[-1], kt_axes[-2]
        scores = (q @ k.transpose(kt_axes)) * (1.0 / np.sqrt(self.head_dim))
        weights = scores.softmax(axis=-1)
        ctx = weights @ v  # (..., H, T, dh)
        axes = list(range(ctx.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        merged = ctx.transpose(axes).reshape(*lead, t, d)
        return self.wo(merged)

    def attention_weights(self, x: np.ndarray) -> np.ndarray:
        """Forward-only softmax attention weights, for inspection and tests."""
        q = self._split_heads(self.wq(Tensor(x))).data
        k = self._split_heads(self.wk(Tensor(x))).data
        scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(self.head_dim)
        shifted = scores - scores.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=-1, keepdims=True)

    def parameters(self) -> list:
        return self.wq.parameters() + self.wk.parameters() + self.wv.parameters() + self.wo.parameters()


class FeedForward:
    """Two-layer GELU MLP."""

    def __init__(self, name: str, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Dense(f"{name}.up", dim, hidden, rng)
        self.down = Dense(f"{name}.down", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).gelu())

    def parameters(self) -> list:
        return self.up.parameters() + self.down.parameters()


class TransformerBlock:
    """Pre-norm block: LN -> MHSA -> residual, LN -> FF -> residual."""

    def __init__(
        self,
        name: str,
        dim: int,
        head_count: int,
        rng: np.random.Generator,
        ff_mult: int = 4,
    ):
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = MultiHeadSelfAttention(f"{name}.attn", dim, head_count, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.ff = FeedForward(f"{name}.ff", dim, ff_mult * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))

    def parameters(self) -> list:
        return (
            self.ln1.parameters()
            + self.attn.parameters()
            + self.ln2.parameters()
            + self.ff.parameters()
        )


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by max subtraction; labels are integer class codes.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DataError(f"expected (batch, classes) logits, got shape {logits.shape}")
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"labels must lie in [0, {n_classes - 1}], got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss_value = -log_probs[np.arange(n), labels].mean()

    def backward(grad):
        if logits.requires_grad:
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            logits._accumulate(g * (float(grad) / n))

    return Tensor._from_op(np.asarray(loss_value), (logits,), backward)
