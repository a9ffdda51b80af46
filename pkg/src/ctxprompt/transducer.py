"""RNN-T pieces: LSTM prediction network, joint network, lattice loss, greedy decoding."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, concat, embedding, log_softmax, make_op, no_grad, sigmoid, tanh
from .text import BLANK, glorot


def init_transducer_params(vocab_size: int, d_model: int, rng: np.random.Generator,
                           d_emb: int = 32, d_pred: int = 32, d_joint: int = 32) -> dict:
    params = {
        "pred.embed": Tensor(rng.normal(0, 1.0, (vocab_size, d_emb)), requires_grad=True),
        "pred.lstm.w_x": glorot(rng, d_emb, 4 * d_pred),
        "pred.lstm.w_h": glorot(rng, d_pred, 4 * d_pred),
    }
    b = np.zeros(4 * d_pred)
    b[d_pred:2 * d_pred] = 1.0  # forget gate
    params["pred.lstm.b"] = Tensor(b, requires_grad=True)
    params["joint.w_enc"] = glorot(rng, d_model, d_joint)
    params["joint.w_pred"] = glorot(rng, d_pred, d_joint)
    params["joint.b1"] = Tensor(np.zeros(d_joint), requires_grad=True)
    params["joint.w_out"] = glorot(rng, d_joint, vocab_size)
    params["joint.b_out"] = Tensor(np.zeros(vocab_size), requires_grad=True)
    return params


def lstm_step(x_proj: Tensor, h: Tensor, c: Tensor, params: dict):
    """One LSTM step given the input already multiplied by ``w_x``; gate order i, f, g, o."""
    n = h.shape[-1]
    z = x_proj + h @ params["pred.lstm.w_h"] + params["pred.lstm.b"]
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    g = tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:])
    c = f * c + i * g
    return o * tanh(c), c


def prediction_forward(history: Sequence[int], params: dict) -> Tensor:
    """States ``[(U+1), d_pred]``; row 0 is the zero start state, row ``u`` follows ``history[:u]``."""
    table = params["pred.embed"]
    if any(t < 0 or t >= table.shape[0] or t == BLANK for t in history):
        raise ValueError(f"history contains ids outside the label vocabulary: {list(history)}")
    d = params["pred.lstm.w_h"].shape[0]
    h = Tensor(np.zeros((1, d)))
    c = Tensor(np.zeros((1, d)))
    rows = [h]
    if history:
        xs = embedding(table, history) @ params["pred.lstm.w_x"]
        for u in range(len(history)):
            h, c = lstm_step(xs[u:u + 1], h, c, params)
            rows.append(h)
    return concat(rows, axis=0)


def joint_lattice(enc: Tensor, pred: Tensor, params: dict) -> Tensor:
    """Log-probabilities ``[T, U+1, V]`` for every (frame, history) pair."""
    T, U1 = enc.shape[0], pred.shape[0]
    e = (enc @ params["joint.w_enc"]).reshape(T, 1, -1)
    p = (pred @ params["joint.w_pred"] + params["joint.b1"]).reshape(1, U1, -1)
    z = tanh(e + p)
    return log_softmax(z @ params["joint.w_out"] + params["joint.b_out"])


def joint(enc_row: Tensor, pred_row: Tensor, params: dict) -> Tensor:
    """Log-probabilities over labels+blank for one encoder row and one prediction row."""
    e = enc_row.reshape(1, -1)
    p = pred_row.reshape(1, -1)
    z = tanh(e @ params["joint.w_enc"] + p @ params["joint.w_pred"] + params["joint.b1"])
    return log_softmax(z @ params["joint.w_out"] + params["joint.b_out"]).reshape(-1)


def rnnt_alpha_beta(log_probs: np.ndarray, targets: Sequence[int]):
    """Forward and backward variables of the transducer lattice.

    Returns ``(alpha, beta, loglik)`` where ``loglik`` is read from ``beta[0, 0]``.
    """
    T, U1, _ = log_probs.shape
    U = U1 - 1
    if len(targets) != U:
        raise ValueError(f"lattice has U={U} but {len(targets)} targets were given")
    if T == 0:
        raise ValueError("empty encoder output")
    y = np.asarray(targets, dtype=np.int64)
    blank = log_probs[:, :, BLANK]
    emit = log_probs[:, np.arange(U), y] if U else np.zeros((T, 0))
    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for u in range(1, U1):
        alpha[0, u] = alpha[0, u - 1] + emit[0, u - 1]
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + blank[t - 1, 0]
        for u in range(1, U1):
            alpha[t, u] = np.logaddexp(alpha[t - 1, u] + blank[t - 1, u],
                                       alpha[t, u - 1] + emit[t, u - 1])
    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U] = blank[T - 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + emit[T - 1, u]
    for t in range(T - 2, -1, -1):
        beta[t, U] = beta[t + 1, U] + blank[t, U]
        for u in range(U - 1, -1, -1):
            beta[t, u] = np.logaddexp(beta[t + 1, u] + blank[t, u],
                                      beta[t, u + 1] + emit[t, u])
    return alpha, beta, beta[0, 0]


def rnnt_loss(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Negative log-likelihood of ``targets`` summed over all monotone alignments.

    ``log_probs`` is the ``[T, U+1, V]`` output of :func:`joint_lattice`. The
    gradient is the usual alignment posterior computed from alpha and beta.
    """
    lp = log_probs.data
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha, beta, loglik = rnnt_alpha_beta(lp, targets)
    loss = -(alpha[T - 1, U] + lp[T - 1, U, BLANK])

    def backward(g):
        grad = np.zeros_like(lp)
        # blank transitions (t,u) -> (t+1,u); the last frame's blank at U ends the path
        nxt = np.full((T, U1), -np.inf)
        nxt[:-1] = beta[1:]
        nxt[T - 1, U] = 0.0
        grad[:, :, BLANK] = -np.exp(alpha + lp[:, :, BLANK] + nxt - loglik)
        if U:
            y = np.asarray(targets, dtype=np.int64)
            u = np.arange(U)
            grad[:, u, y] = -np.exp(alpha[:, :U] + lp[:, u, y] + beta[:, 1:] - loglik)
        return (g * grad,)

    return make_op(np.asarray(loss), (log_probs,), backward, "rnnt_loss")


def transducer_loss(enc: Tensor, targets: Sequence[int], params: dict) -> Tensor:
    if enc.shape[0] == 0 and len(targets) > 0:
        raise ValueError("cannot emit labels from zero encoder frames")
    pred = prediction_forward(targets, params)
    return rnnt_loss(joint_lattice(enc, pred, params), targets)


def greedy_decode(enc: Tensor, params: dict, max_symbols_per_frame: int = 4) -> list:
    """Frame-synchronous argmax decoding; ties go to the lowest id."""
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    out = []
    d = params["pred.lstm.w_h"].shape[0]
    with no_grad():
        e = enc @ params["joint.w_enc"]
        h = Tensor(np.zeros((1, d)))
        c = Tensor(np.zeros((1, d)))
        p = h @ params["joint.w_pred"] + params["joint.b1"]
        for t in range(enc.shape[0]):
            for _ in range(max_symbols_per_frame):
                z = tanh(e[t:t + 1] + p) @ params["joint.w_out"] + params["joint.b_out"]
                k = int(np.argmax(z.data[0]))
                if k == BLANK:
                    break
                out.append(k)
                x = params["pred.embed"][k:k + 1] @ params["pred.lstm.w_x"]
                h, c = lstm_step(x, h, c, params)
                p = h @ params["joint.w_pred"] + params["joint.b1"]
    return out
