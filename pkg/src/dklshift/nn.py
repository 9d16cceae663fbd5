"""Recurrent feature extractor and the pure-neural classification head.

The extractor maps a preprocessed episode (48 hourly steps x 76 features)
through an affine encoder, dropout, a (bi)directional LSTM, and a relu
combine layer, then averages over time to a fixed-width feature vector.
The same extractor feeds either a linear logit head (baseline) or the GP
prediction layer.

The LSTM sequence loop is a single tape op with an analytic
backpropagation-through-time rule; on one core this is what keeps full
experiment presets inside their runtime budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class LinearParams:
    """Affine layer y = W x + b with W: [out, in]."""

    weights: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, out_dim: int, in_dim: int) -> "LinearParams":
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def apply(self, x: Tensor) -> Tensor:
        """x: [n, in] -> [n, out]."""
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"linear layer expects width {self.in_dim}, got {x.shape}")
        return T.add(T.matmul(x, T.transpose(self.weights)), self.bias)


_GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """Per-gate weights (input [H, D], recurrent [H, H]) and biases [H]."""

    w_i: Tensor
    w_f: Tensor
    w_g: Tensor
    w_o: Tensor
    u_i: Tensor
    u_f: Tensor
    u_g: Tensor
    u_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, input_dim: int) -> "LstmParams":
        def w():
            bound = 1.0 / np.sqrt(input_dim)
            return Tensor(rng.uniform(-bound, bound, size=(hidden, input_dim)), requires_grad=True)

        def u():
            bound = 1.0 / np.sqrt(hidden)
            return Tensor(rng.uniform(-bound, bound, size=(hidden, hidden)), requires_grad=True)

        ws = [w() for _ in _GATES]
        us = [u() for _ in _GATES]
        # forget-gate bias starts at 1.0, standard LSTM practice
        bs = [
            Tensor(np.full(hidden, 1.0 if gate == "f" else 0.0), requires_grad=True)
            for gate in _GATES
        ]
        return cls(*ws, *us, *bs)

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[1]

    def tensors(self) -> list[Tensor]:
        return [
            self.w_i, self.w_f, self.w_g, self.w_o,
            self.u_i, self.u_f, self.u_g, self.u_o,
            self.b_i, self.b_f, self.b_g, self.b_o,
        ]


@dataclass
class ExtractorConfig:
    input_dim: int = 76
    encoder_size: int = 16
    hidden_size: int = 16
    bidirectional: bool = True
    dropout_rate: float = 0.3
    feature_dim: int = 16
    n_steps: int = 48

    def __post_init__(self):
        for name in ("input_dim", "encoder_size", "hidden_size", "feature_dim", "n_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "encoder_size": self.encoder_size,
            "hidden_size": self.hidden_size,
            "bidirectional": self.bidirectional,
            "dropout_rate": self.dropout_rate,
            "feature_dim": self.feature_dim,
            "n_steps": self.n_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        return cls(**d)


@dataclass
class ExtractorParams:
    """All extractor weights; ``backward_lstm`` present iff bidirectional."""

    config: ExtractorConfig
    input_linear: LinearParams
    forward_lstm: LstmParams
    backward_lstm: Optional[LstmParams]
    combine_linear: LinearParams

    @classmethod
    def init(cls, config: ExtractorConfig, rng: np.random.Generator) -> "ExtractorParams":
        input_linear = LinearParams.init(rng, config.encoder_size, config.input_dim)
        fwd = LstmParams.init(rng, config.hidden_size, config.encoder_size)
        bwd = LstmParams.init(rng, config.hidden_size, config.encoder_size) if config.bidirectional else None
        combine_in = (2 if config.bidirectional else 1) * config.hidden_size
        combine = LinearParams.init(rng, config.feature_dim, combine_in)
        return cls(config, input_linear, fwd, bwd, combine)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("input_linear.weights", self.input_linear.weights),
            ("input_linear.bias", self.input_linear.bias),
        ]
        for prefix, lstm in (("forward_lstm", self.forward_lstm), ("backward_lstm", self.backward_lstm)):
            if lstm is None:
                continue
            for gate in _GATES:
                out.append((f"{prefix}.w_{gate}", getattr(lstm, f"w_{gate}")))
            for gate in _GATES:
                out.append((f"{prefix}.u_{gate}", getattr(lstm, f"u_{gate}")))
            for gate in _GATES:
                out.append((f"{prefix}.b_{gate}", getattr(lstm, f"b_{gate}")))
        out.append(("combine_linear.weights", self.combine_linear.weights))
        out.append(("combine_linear.bias", self.combine_linear.bias))
        return out


def dropout_mask(rate: float, dim, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: Bernoulli(1-rate) scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    shape = (dim,) if isinstance(dim, int) else tuple(dim)
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return Tensor(keep / (1.0 - rate))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lstm_seq(params: LstmParams, x: Tensor, n_steps: int, batch: int, reverse: bool) -> Tensor:
    """Run the LSTM over a time-major batch as one tape op.

    ``x`` has shape [(T*B), D] with row t*B + b holding step t of episode b;
    the output keeps that layout regardless of direction.  Zero initial
    states; standard sigmoid/tanh gate equations.  The backward rule is the
    classic BPTT recursion, fused so one minibatch adds one tape node.
    """
    h_size = params.hidden_size
    if x.shape != (n_steps * batch, params.input_dim):
        raise DimensionError(
            f"lstm expects [(T*B), {params.input_dim}] = [{n_steps * batch}, "
            f"{params.input_dim}], got {x.shape}"
        )
    w = np.vstack([params.w_i.values, params.w_f.values, params.w_g.values, params.w_o.values])
    u = np.vstack([params.u_i.values, params.u_f.values, params.u_g.values, params.u_o.values])
    b = np.concatenate([params.b_i.values, params.b_f.values, params.b_g.values, params.b_o.values])

    xv = x.values
    xh = xv @ w.T + b
    hs = np.empty((n_steps * batch, h_size))
    h = np.zeros((batch, h_size))
    c = np.zeros((batch, h_size))
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    store = []
    hh = h_size
    for t in order:
        blk = slice(t * batch, (t + 1) * batch)
        z = xh[blk] + h @ u.T
        gi = _sigmoid(z[:, :hh])
        gf = _sigmoid(z[:, hh:2 * hh])
        gg = np.tanh(z[:, 2 * hh:3 * hh])
        go = _sigmoid(z[:, 3 * hh:])
        c_prev = c
        h_prev = h
        c = gf * c_prev + gi * gg
        tc = np.tanh(c)
        h = go * tc
        hs[blk] = h
        store.append((t, gi, gf, gg, go, c_prev, tc, h_prev))

    def bwd(grad_out):
        dxh = np.zeros((n_steps * batch, 4 * hh))
        du = np.zeros_like(u)
        db = np.zeros(4 * hh)
        dh_next = np.zeros((batch, hh))
        dc_next = np.zeros((batch, hh))
        for (t, gi, gf, gg, go, c_prev, tc, h_prev) in reversed(store):
            blk = slice(t * batch, (t + 1) * batch)
            dh = grad_out[blk] + dh_next
            do = dh * tc
            dc = dc_next + dh * go * (1.0 - tc * tc)
            di = dc * gg
            df = dc * c_prev
            dg = dc * gi
            dc_next = dc * gf
            dz = np.concatenate(
                [di * gi * (1.0 - gi), df * gf * (1.0 - gf), dg * (1.0 - gg * gg), do * go * (1.0 - go)],
                axis=1,
            )
            dh_next = dz @ u
            dxh[blk] = dz
            du += dz.T @ h_prev
            db += dz.sum(axis=0)
        dx = dxh @ w
        dw = dxh.T @ xv
        grads = [dx]
        for k in range(4):
            grads.append(dw[k * hh:(k + 1) * hh])
        for k in range(4):
            grads.append(du[k * hh:(k + 1) * hh])
        for k in range(4):
            grads.append(db[k * hh:(k + 1) * hh])
        return grads

    inputs = [x] + params.tensors()
    return T.custom_op("lstm_seq", inputs, hs, bwd)


def lstm_forward(params: LstmParams, seq: Tensor, reverse: bool = False) -> Tensor:
    """Hidden states for one sequence [T, D] -> [T, H], original time order."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.values.ndim != 2:
        raise DimensionError(f"lstm_forward expects [T, D], got {seq.shape}")
    n_steps = seq.shape[0]
    if n_steps < 1:
        raise DimensionError("lstm_forward needs at least one step")
    return _lstm_seq(params, seq, n_steps, 1, reverse)


def stack_time_major(episodes: np.ndarray) -> np.ndarray:
    """[B, T, D] episode stack -> [(T*B), D] with row t*B + b = (episode b, step t)."""
    if episodes.ndim != 3:
        raise DimensionError(f"expected [B, T, D], got {episodes.shape}")
    b, t, d = episodes.shape
    return np.ascontiguousarray(episodes.transpose(1, 0, 2).reshape(t * b, d))


def extract_features_batch(
    params: ExtractorParams,
    x: Tensor,
    batch: int,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Features for a time-major batch: [(T*B), input_dim] -> [B, feature_dim]."""
    cfg = params.config
    rows = x.shape[0]
    if rows % batch != 0:
        raise DimensionError(f"batch of {batch} does not divide {rows} rows")
    n_steps = rows // batch
    if x.shape[1] != cfg.input_dim:
        raise DimensionError(f"expected {cfg.input_dim} input columns, got {x.shape[1]}")
    enc = params.input_linear.apply(x)
    if training and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("training-mode extraction needs an rng for dropout")
        enc = T.mul(enc, dropout_mask(cfg.dropout_rate, enc.shape, rng))
    fwd = _lstm_seq(params.forward_lstm, enc, n_steps, batch, reverse=False)
    if cfg.bidirectional:
        bwd = _lstm_seq(params.backward_lstm, enc, n_steps, batch, reverse=True)
        states = T.concat([fwd, bwd], axis=1)
    else:
        states = fwd
    combined = T.relu(params.combine_linear.apply(states))
    per_step = T.reshape(combined, (n_steps, batch, cfg.feature_dim))
    return T.mean(per_step, axis=0)


def feature_extract(
    params: ExtractorParams,
    episode,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Feature vector [feature_dim] for one episode [n_steps, input_dim]."""
    cfg = params.config
    ep = episode if isinstance(episode, Tensor) else Tensor(episode)
    if ep.shape != (cfg.n_steps, cfg.input_dim):
        raise DimensionError(
            f"episode must be [{cfg.n_steps}, {cfg.input_dim}], got {ep.shape}"
        )
    feats = extract_features_batch(params, ep, 1, training, rng)
    return T.reshape(feats, (cfg.feature_dim,))


def baseline_logit(
    params: ExtractorParams,
    head: LinearParams,
    episode,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Scalar logit of the neural baseline; probability = sigmoid(logit)."""
    feats = feature_extract(params, episode, training, rng)
    row = T.reshape(feats, (1, params.config.feature_dim))
    return T.reshape(head.apply(row), ())


def baseline_logits_batch(
    params: ExtractorParams,
    head: LinearParams,
    x: Tensor,
    batch: int,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Logits [B] for a time-major batch."""
    feats = extract_features_batch(params, x, batch, training, rng)
    return T.reshape(head.apply(feats), (batch,))
