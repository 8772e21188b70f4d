"""GRU encoder-decoder with additive attention, forward and backward passes.

Everything is plain numpy in float64. Gate blocks are stacked in the order
(update z, reset r, candidate n)::

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    n = tanh(W_n x + U_n (r * h) + b_n)
    h' = (1 - z) * h + z * n

Attention scores every encoder output against the previous decoder state,
``score_t = v . tanh(W_a s + U_a h_t)``; the decoder input at each step is the
embedded previous token concatenated with the context vector, its initial
state is the last encoder state, and the output distribution is
``softmax(W_out s + b_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .ingest import EOS, RESERVED, SOS, Vocabulary

PROB_FLOOR = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    embedding: np.ndarray  # (V, H)
    enc_W: np.ndarray  # (3H, H)
    enc_U: np.ndarray  # (3H, H)
    enc_b: np.ndarray  # (3H,)
    att_W: np.ndarray  # (H, H), applied to the decoder state
    att_U: np.ndarray  # (H, H), applied to encoder outputs
    att_v: np.ndarray  # (H,)
    dec_W: np.ndarray  # (3H, 2H), input is [embedding; context]
    dec_U: np.ndarray  # (3H, H)
    dec_b: np.ndarray  # (3H,)
    out_W: np.ndarray  # (V, H)
    out_b: np.ndarray  # (V,)

    @property
    def hidden_size(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @staticmethod
    def names() -> tuple[str, ...]:
        return tuple(f.name for f in fields(ModelParams))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.tensors().items()})

    @classmethod
    def shapes(cls, vocab_size: int, hidden: int) -> dict[str, tuple[int, ...]]:
        V, H = vocab_size, hidden
        return {
            "embedding": (V, H),
            "enc_W": (3 * H, H), "enc_U": (3 * H, H), "enc_b": (3 * H,),
            "att_W": (H, H), "att_U": (H, H), "att_v": (H,),
            "dec_W": (3 * H, 2 * H), "dec_U": (3 * H, H), "dec_b": (3 * H,),
            "out_W": (V, H), "out_b": (V,),
        }

    @classmethod
    def init(cls, vocab_size: int, hidden: int, rng: np.random.Generator) -> "ModelParams":
        """Embedding ~ N(0, 1); every other tensor uniform in [-1/sqrt(H), 1/sqrt(H)].

        Tensors are drawn one by one in field order.
        """
        if vocab_size < 1 or hidden < 1:
            raise ModelError("vocabulary and hidden sizes must be positive")
        bound = 1.0 / np.sqrt(hidden)
        return cls(**{
            name: rng.standard_normal(shape) if name == "embedding"
            else rng.uniform(-bound, bound, size=shape)
            for name, shape in cls.shapes(vocab_size, hidden).items()
        })

    def validate(self) -> None:
        expected = self.shapes(self.vocab_size, self.hidden_size)
        for name, arr in self.tensors().items():
            if arr.shape != expected[name]:
                raise ModelError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} has non-finite entries")

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.tensors().values())))


@dataclass
class Seq2Seq:
    params: ModelParams
    vocab: Vocabulary

    def __post_init__(self):
        if len(self.vocab) != self.params.vocab_size:
            raise ModelError(
                f"vocabulary has {len(self.vocab)} tokens, parameters expect {self.params.vocab_size}")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, W: np.ndarray, U: np.ndarray,
             b: np.ndarray) -> np.ndarray:
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev))):
        raise ModelError("non-finite GRU input")
    H = h_prev.shape[0]
    a = W @ x_t + b
    zr = sigmoid(a[:2 * H] + U[:2 * H] @ h_prev)
    z, r = zr[:H], zr[H:]
    n = np.tanh(a[2 * H:] + U[2 * H:] @ (r * h_prev))
    return (1.0 - z) * h_prev + z * n


def encode(tokens: Sequence[int], params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Encoder outputs, one row per input token, and the final hidden state."""
    outputs, _ = _encode(np.asarray(tokens, dtype=np.int64), params)
    return outputs, outputs[-1].copy()


def _encode(x: np.ndarray, p: ModelParams):
    if len(x) == 0:
        raise ModelError("cannot encode an empty sequence")
    if x.min() < 0 or x.max() >= p.vocab_size:
        raise ModelError("token index outside vocabulary")
    H = p.hidden_size
    T = len(x)
    Xe = p.embedding[x]
    A = Xe @ p.enc_W.T + p.enc_b
    Uzr, Un = p.enc_U[:2 * H], p.enc_U[2 * H:]
    Hs = np.empty((T, H))
    Hprev = np.empty((T, H))
    Z = np.empty((T, H))
    R = np.empty((T, H))
    N = np.empty((T, H))
    RH = np.empty((T, H))
    h = np.zeros(H)
    for t in range(T):
        a = A[t]
        zr = sigmoid(a[:2 * H] + Uzr @ h)
        z, r = zr[:H], zr[H:]
        rh = r * h
        n = np.tanh(a[2 * H:] + Un @ rh)
        Hprev[t] = h
        h = (1.0 - z) * h + z * n
        Hs[t], Z[t], R[t], N[t], RH[t] = h, z, r, n, rh
    return Hs, (x, Xe, Hprev, Z, R, N, RH)


def attention(s_prev: np.ndarray, encoder_outputs: np.ndarray, params: ModelParams,
              keys: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Alignment weights over the encoder outputs and the resulting context vector."""
    if len(encoder_outputs) == 0:
        raise ModelError("attention over an empty sequence")
    if keys is None:
        keys = encoder_outputs @ params.att_U.T
    M = np.tanh(keys + params.att_W @ s_prev)
    alphas = softmax(M @ params.att_v)
    return alphas, alphas @ encoder_outputs


def decode_step(y_prev: int, s_prev: np.ndarray, encoder_outputs: np.ndarray,
                params: ModelParams, keys: np.ndarray | None = None):
    """One decoder step: new state and the distribution over the vocabulary."""
    if not 0 <= y_prev < params.vocab_size:
        raise ModelError(f"token index {y_prev} outside vocabulary")
    _, c = attention(s_prev, encoder_outputs, params, keys)
    xin = np.concatenate([params.embedding[y_prev], c])
    s = gru_cell(xin, s_prev, params.dec_W, params.dec_U, params.dec_b)
    return s, softmax(params.out_W @ s + params.out_b)


def nll_loss(P: np.ndarray, target: int) -> float:
    """``-log P[target]`` with the probability floored at 1e-12."""
    return float(-np.log(max(P[target], PROB_FLOOR)))


def forward_backward(params: ModelParams, src: Sequence[int], tgt: Sequence[int],
                     teacher_forcing: bool = True, reduction: str = "sum"):
    """Loss and gradients for one (input, target) pair.

    The decoder starts from SOS and is scored against ``tgt`` followed by EOS.
    With teacher forcing the ground-truth token is fed back at every step;
    otherwise the argmax prediction is fed back and decoding stops once EOS is
    predicted. The gradient is taken of the summed per-step NLL
    (``reduction="sum"``) or of its mean. Returns ``(mean_nll, grads, steps)``
    where ``steps`` counts the decoder steps that were scored.
    """
    p = params
    H = p.hidden_size
    x = np.asarray(src, dtype=np.int64)
    targets = np.append(np.asarray(tgt, dtype=np.int64), EOS)
    if targets.min() < 0 or targets.max() >= p.vocab_size:
        raise ModelError("target token index outside vocabulary")
    Hs, enc_cache = _encode(x, p)
    K = Hs @ p.att_U.T

    Uzr, Un = p.dec_U[:2 * H], p.dec_U[2 * H:]
    s = Hs[-1]
    y_prev = SOS
    steps = []
    total = 0.0
    for step, y_true in enumerate(targets):
        M = np.tanh(K + p.att_W @ s)
        alpha = softmax(M @ p.att_v)
        c = alpha @ Hs
        xin = np.concatenate([p.embedding[y_prev], c])
        a = p.dec_W @ xin + p.dec_b
        zr = sigmoid(a[:2 * H] + Uzr @ s)
        z, r = zr[:H], zr[H:]
        rh = r * s
        n = np.tanh(a[2 * H:] + Un @ rh)
        s_new = (1.0 - z) * s + z * n
        P = softmax(p.out_W @ s_new + p.out_b)
        total += -np.log(max(P[y_true], PROB_FLOOR))
        steps.append((s, M, alpha, xin, y_prev, z, r, rh, n, s_new, P, y_true))
        s = s_new
        if teacher_forcing:
            y_prev = int(y_true)
        else:
            y_prev = int(np.argmax(P))
            if y_prev == EOS:
                break
    L = len(steps)
    weight = 1.0 if reduction == "sum" else 1.0 / L

    g = p.zeros_like()
    D = np.stack([st[10] for st in steps])
    D[np.arange(L), [st[11] for st in steps]] -= 1.0
    D *= weight
    S_new = np.stack([st[9] for st in steps])
    g.out_W = D.T @ S_new
    g.out_b = D.sum(axis=0)
    dS = D @ p.out_W

    DA = np.empty((L, 3 * H))
    SPREV = np.empty((L, H))
    RHD = np.empty((L, H))
    XIN = np.empty((L, 2 * H))
    DQ = np.empty((L, H))
    dHs = np.zeros_like(Hs)
    dK = np.zeros_like(K)
    dv = np.zeros(H)
    Wc = p.dec_W[:, H:]
    ds_carry = np.zeros(H)
    for k in range(L - 1, -1, -1):
        s_prev, M, alpha, xin, _, z, r, rh, n, _, _, _ = steps[k]
        ds = dS[k] + ds_carry
        dn = ds * z
        dz = ds * (n - s_prev)
        ds_prev = ds * (1.0 - z)
        dan = dn * (1.0 - n * n)
        drh = Un.T @ dan
        ds_prev += drh * r
        dzr = np.concatenate([dz * z * (1.0 - z), drh * s_prev * r * (1.0 - r)])
        ds_prev += Uzr.T @ dzr
        dA = np.concatenate([dzr, dan])
        DA[k], SPREV[k], RHD[k], XIN[k] = dA, s_prev, rh, xin
        dc = Wc.T @ dA
        dalpha = Hs @ dc
        dHs += np.outer(alpha, dc)
        de = alpha * (dalpha - alpha @ dalpha)
        dv += M.T @ de
        dpre = np.outer(de, p.att_v) * (1.0 - M * M)
        dK += dpre
        dq = dpre.sum(axis=0)
        DQ[k] = dq
        ds_prev += p.att_W.T @ dq
        ds_carry = ds_prev
    g.dec_W = DA.T @ XIN
    g.dec_b = DA.sum(axis=0)
    g.dec_U[:2 * H] = DA[:, :2 * H].T @ SPREV
    g.dec_U[2 * H:] = DA[:, 2 * H:].T @ RHD
    g.att_W = DQ.T @ SPREV
    g.att_v = dv
    g.att_U = dK.T @ Hs
    dHs += dK @ p.att_U
    dHs[-1] += ds_carry
    np.add.at(g.embedding, np.array([st[4] for st in steps]), DA @ p.dec_W[:, :H])

    x, Xe, Hprev, Z, R, N, RH = enc_cache
    T = len(x)
    Ezr, En = p.enc_U[:2 * H], p.enc_U[2 * H:]
    DE = np.empty((T, 3 * H))
    dh_carry = np.zeros(H)
    for t in range(T - 1, -1, -1):
        h_prev, z, r, n = Hprev[t], Z[t], R[t], N[t]
        dh = dHs[t] + dh_carry
        dn = dh * z
        dz = dh * (n - h_prev)
        dh_prev = dh * (1.0 - z)
        dan = dn * (1.0 - n * n)
        drh = En.T @ dan
        dh_prev += drh * r
        dzr = np.concatenate([dz * z * (1.0 - z), drh * h_prev * r * (1.0 - r)])
        dh_prev += Ezr.T @ dzr
        DE[t, :2 * H] = dzr
        DE[t, 2 * H:] = dan
        dh_carry = dh_prev
    g.enc_W = DE.T @ Xe
    g.enc_b = DE.sum(axis=0)
    g.enc_U[:2 * H] = DE[:, :2 * H].T @ Hprev
    g.enc_U[2 * H:] = DE[:, 2 * H:].T @ RH
    np.add.at(g.embedding, x, DE @ p.enc_W)
    return float(total / L), g, L


def sequence_loss(params: ModelParams, src: Sequence[int], tgt: Sequence[int],
                  reduction: str = "sum"):
    """Teacher-forced loss of one pair, forward pass only."""
    Hs, _ = _encode(np.asarray(src, dtype=np.int64), params)
    K = Hs @ params.att_U.T
    s = Hs[-1]
    y_prev = SOS
    losses = []
    for y in list(tgt) + [EOS]:
        s, P = decode_step(y_prev, s, Hs, params, K)
        # stays in the parameters' dtype so extended precision survives
        losses.append(-np.log(max(P[y], PROB_FLOOR)))
        y_prev = y
    return np.sum(losses) if reduction == "sum" else np.mean(losses)


def predict(model: Seq2Seq, tokens: Sequence[int], max_len: int = 100):
    """Greedy decoding from SOS until EOS or ``max_len`` tokens.

    Returns the predicted token indices (EOS excluded) and the full
    distribution of every decoding step, shape ``(steps, V)``.
    """
    p = model.params
    if len(model.vocab) <= len(RESERVED):
        raise ModelError("model vocabulary is empty")
    Hs, _ = _encode(np.asarray(tokens, dtype=np.int64), p)
    K = Hs @ p.att_U.T
    s = Hs[-1]
    y_prev = SOS
    out, dists = [], []
    for _ in range(max_len):
        s, P = decode_step(y_prev, s, Hs, p, K)
        dists.append(P)
        y_prev = int(np.argmax(P))
        if y_prev == EOS:
            break
        out.append(y_prev)
    return out, np.array(dists)


def score_target(model: Seq2Seq, tokens: Sequence[int], target: Sequence[int]) -> np.ndarray:
    """Next-token distributions along a known target (teacher forcing).

    Row ``p`` is the distribution for target position ``p`` given the true
    prefix ``target[:p]``; shape ``(len(target), V)``.
    """
    p = model.params
    Hs, _ = _encode(np.asarray(tokens, dtype=np.int64), p)
    K = Hs @ p.att_U.T
    s = Hs[-1]
    y_prev = SOS
    dists = []
    for y in target:
        s, P = decode_step(y_prev, s, Hs, p, K)
        dists.append(P)
        y_prev = int(y)
    return np.array(dists).reshape(len(dists), p.vocab_size)
