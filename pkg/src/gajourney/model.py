"""Two-level LSTM over a user's sessions, with hand-written backprop.

Per session ``i`` a hit-level LSTM reads the session's hit vectors from a
zero state; its final hidden state ``H_i`` is concatenated with the previous
session's features ``S_{i-1}`` (zeros for the first session) and fed to a
session-level LSTM. Each session-LSTM output, joined with the user vector,
goes through ``Dense -> ReLU -> Dense -> sigmoid`` to give six probabilities.

Everything is float64. Journeys are processed as padded batches: hit
sequences are right-padded and ``H_i`` is read at each sequence's true last
step, so padding never reaches a real output.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyHitSequence, ShapeMismatch, StaleTrace

OUT_DIM = 6
FORMAT_VERSION = 1
_MAGIC = b"GAJN"

PARAM_NAMES = (
    "lstm_hits.W",
    "lstm_hits.b",
    "lstm_sessions.W",
    "lstm_sessions.b",
    "fc1.W",
    "fc1.b",
    "fc2.W",
    "fc2.b",
)


@dataclass(frozen=True)
class ModelConfig:
    hit_dim: int = 3
    session_dim: int = 11
    user_dim: int = 5
    hidden: int = 30
    fc_hidden: int = 60
    out_dim: int = OUT_DIM

    def __post_init__(self):
        dims = (self.hit_dim, self.session_dim, self.user_dim, self.hidden, self.fc_hidden)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"all model dimensions must be positive integers, got {dims}")
        if self.out_dim != OUT_DIM:
            raise ValueError("out_dim is fixed at 6")

    def shapes(self) -> dict:
        h = self.hidden
        return {
            "lstm_hits.W": (self.hit_dim + h, 4 * h),
            "lstm_hits.b": (4 * h,),
            "lstm_sessions.W": (h + self.session_dim + h, 4 * h),
            "lstm_sessions.b": (4 * h,),
            "fc1.W": (h + self.user_dim, self.fc_hidden),
            "fc1.b": (self.fc_hidden,),
            "fc2.W": (self.fc_hidden, self.out_dim),
            "fc2.b": (self.out_dim,),
        }


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count for single-bias LSTMs and two dense layers."""
    h, fc = config.hidden, config.fc_hidden
    hits = 4 * (h * (config.hit_dim + h) + h)
    sessions = 4 * (h * (h + config.session_dim + h) + h)
    head = (h + config.user_dim) * fc + fc + fc * config.out_dim + config.out_dim
    return hits + sessions + head


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    @classmethod
    def from_flat(cls, config: ModelConfig, vector) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        arrays, offset = {}, 0
        for name, shape in config.shapes().items():
            n = int(np.prod(shape))
            arrays[name] = vector[offset : offset + n].reshape(shape).copy()
            offset += n
        if offset != vector.size:
            raise ValueError(f"expected {offset} values, got {vector.size}")
        return cls(config, arrays)

    def fingerprint(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        for name in PARAM_NAMES:
            digest.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return digest.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias 1, other biases 0.

    ``fan_in`` is the number of rows of a weight matrix (input plus
    recurrent width for the LSTMs).
    """
    rng = np.random.default_rng(seed)
    h = config.hidden
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    for lstm in ("lstm_hits", "lstm_sessions"):
        arrays[f"{lstm}.b"][h : 2 * h] = 1.0
    return ModelParams(config, arrays)


# --- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Padded tensors for a group of journeys.

    ``hits`` is ``(T_hits, M, hit_dim)`` over all ``M`` sessions in the batch;
    ``sess_b``/``sess_t`` locate each of those sessions in the
    ``(T_sessions, B)`` grid used by the session LSTM.
    """

    hits: np.ndarray
    hit_len: np.ndarray
    sess_b: np.ndarray
    sess_t: np.ndarray
    prev_sessions: np.ndarray  # (T_s, B, session_dim), S_{i-1}
    users: np.ndarray  # (B, user_dim)
    mask: np.ndarray  # (T_s, B) bool
    lengths: np.ndarray  # sessions per journey
    labels: np.ndarray | None = None  # (T_s, B, 6)


def pack(journeys: Sequence, labels: Sequence | None = None) -> Batch:
    if not journeys:
        raise ValueError("cannot pack an empty batch")
    lengths = np.array([len(j.class_ids) for j in journeys])
    B, T_s = len(journeys), int(lengths.max())
    session_dim = journeys[0].session_vecs.shape[1]
    hit_dim = journeys[0].hit_vecs[0].shape[1] if journeys[0].hit_vecs else 0

    sess_b, sess_t, hit_seqs = [], [], []
    for b, j in enumerate(journeys):
        if len(j.hit_vecs) != len(j.class_ids) or len(j.session_vecs) != len(j.class_ids):
            raise ShapeMismatch(f"journey {b}: session/hit/class counts disagree")
        for t, seq in enumerate(j.hit_vecs):
            if len(seq) == 0:
                raise EmptyHitSequence(f"journey {b}, session {t} has no hits")
            sess_b.append(b)
            sess_t.append(t)
            hit_seqs.append(seq)
    hit_len = np.array([len(s) for s in hit_seqs])
    hits = np.zeros((int(hit_len.max()), len(hit_seqs), hit_dim))
    for m, seq in enumerate(hit_seqs):
        hits[: len(seq), m] = seq

    prev = np.zeros((T_s, B, session_dim))
    users = np.stack([np.asarray(j.user_vec, dtype=np.float64) for j in journeys])
    mask = np.zeros((T_s, B), dtype=bool)
    for b, j in enumerate(journeys):
        n = lengths[b]
        prev[1:n, b] = j.session_vecs[: n - 1]
        mask[:n, b] = True

    packed_labels = None
    if labels is not None:
        packed_labels = np.zeros((T_s, B, OUT_DIM))
        for b, lab in enumerate(labels):
            lab = np.asarray(lab, dtype=np.float64)
            if lab.shape != (lengths[b], OUT_DIM):
                raise ShapeMismatch(f"labels for journey {b} have shape {lab.shape}")
            packed_labels[: lengths[b], b] = lab
    return Batch(hits, hit_len, np.array(sess_b), np.array(sess_t), prev, users, mask, lengths, packed_labels)


# --- primitives -------------------------------------------------------------------


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward(xs: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Run an LSTM over ``xs`` of shape ``(T, n, in)`` from a zero state."""
    T, n, _ = xs.shape
    h_dim = W.shape[1] // 4
    h = np.zeros((n, h_dim))
    c = np.zeros((n, h_dim))
    cache = {k: [] for k in ("xh", "i", "f", "o", "g", "c_prev", "tc")}
    hs = np.empty((T, n, h_dim))
    for t in range(T):
        xh = np.concatenate([xs[t], h], axis=1)
        z = xh @ W + b
        i = sigmoid(z[:, :h_dim])
        f = sigmoid(z[:, h_dim : 2 * h_dim])
        o = sigmoid(z[:, 2 * h_dim : 3 * h_dim])
        g = np.tanh(z[:, 3 * h_dim :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        for key, val in (("xh", xh), ("i", i), ("f", f), ("o", o), ("g", g), ("c_prev", c_prev), ("tc", tc)):
            cache[key].append(val)
    return hs, cache


def _lstm_backward(dhs: np.ndarray, cache: dict, W: np.ndarray, in_dim: int):
    """Backprop through time. ``dhs[t]`` is the loss gradient w.r.t. the hidden state at step ``t``."""
    T, n, h_dim = dhs.shape
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dxs = np.empty((T, n, in_dim))
    dh_next = np.zeros((n, h_dim))
    dc_next = np.zeros((n, h_dim))
    for t in range(T - 1, -1, -1):
        i, f, o, g = cache["i"][t], cache["f"][t], cache["o"][t], cache["g"][t]
        tc = cache["tc"][t]
        dh = dhs[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cache["c_prev"][t] * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        dc_next = dc * f
        dW += cache["xh"][t].T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ W.T
        dxs[t] = dxh[:, :in_dim]
        dh_next = dxh[:, in_dim:]
    return dxs, dW, db


# --- forward / loss / backward -------------------------------------------------------


@dataclass
class ForwardTrace:
    fingerprint: str
    batch: Batch
    hit_cache: dict
    sess_cache: dict
    head_in: np.ndarray  # (T_s, B, h + user_dim)
    z1: np.ndarray
    r: np.ndarray
    y: np.ndarray
    single: bool = False


def forward_batch(params: ModelParams, batch: Batch, keep_trace: bool = True):
    """Predictions of shape ``(T_s, B, 6)``; rows outside ``batch.mask`` are padding."""
    cfg = params.config
    hs_hits, hit_cache = _lstm_forward(batch.hits, params["lstm_hits.W"], params["lstm_hits.b"])
    H = hs_hits[batch.hit_len - 1, np.arange(len(batch.hit_len))]

    T_s, B = batch.mask.shape
    H_grid = np.zeros((T_s, B, cfg.hidden))
    H_grid[batch.sess_t, batch.sess_b] = H
    sess_in = np.concatenate([H_grid, batch.prev_sessions], axis=2)
    hs_sess, sess_cache = _lstm_forward(sess_in, params["lstm_sessions.W"], params["lstm_sessions.b"])

    users = np.broadcast_to(batch.users[None], (T_s, B, cfg.user_dim))
    head_in = np.concatenate([hs_sess, users], axis=2)
    z1 = head_in @ params["fc1.W"] + params["fc1.b"]
    r = np.maximum(z1, 0.0)
    y = sigmoid(r @ params["fc2.W"] + params["fc2.b"])
    if not keep_trace:
        return y, None
    return y, ForwardTrace(params.fingerprint(), batch, hit_cache, sess_cache, head_in, z1, r, y)


def forward(params: ModelParams, journey):
    """Single-journey forward pass: ``(predictions (N, 6), trace)``."""
    batch = pack([journey])
    y, trace = forward_batch(params, batch)
    trace.single = True
    return y[:, 0, :], trace


def predict(params: ModelParams, journeys: Sequence, batch_size: int = 256) -> list:
    """Per-journey ``(N_j, 6)`` predictions, batched for speed."""
    out = []
    for start in range(0, len(journeys), batch_size):
        chunk = journeys[start : start + batch_size]
        batch = pack(chunk)
        y, _ = forward_batch(params, batch, keep_trace=False)
        out.extend(y[: batch.lengths[b], b].copy() for b in range(len(chunk)))
    return out


def mse_loss(predictions, labels, mask=None) -> float:
    """Mean of ``(pred - label)^2`` over valid (session, class) cells."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"predictions {p.shape} vs labels {t.shape}")
    sq = (p - t) ** 2
    if mask is None:
        return float(sq.mean())
    m = np.asarray(mask, dtype=bool)
    if m.shape != p.shape[: m.ndim]:
        raise ShapeMismatch(f"mask {m.shape} does not index predictions {p.shape}")
    m = m.reshape(m.shape + (1,) * (p.ndim - m.ndim))
    n_cells = m.sum() * (p.size // m.size)
    if n_cells == 0:
        raise ShapeMismatch("mask selects no cells")
    return float((sq * m).sum() / n_cells)


def batch_loss(trace: ForwardTrace, labels=None) -> float:
    lab = trace.batch.labels if labels is None else labels
    return mse_loss(trace.y, lab, trace.batch.mask)


def backward(params: ModelParams, trace: ForwardTrace, labels=None) -> ModelParams:
    """Exact gradient of the masked MSE w.r.t. every parameter.

    ``labels`` is ``(N, 6)`` for a single-journey trace, ``(T_s, B, 6)`` for
    a batch trace, or omitted when the batch was packed with labels.
    """
    if trace.fingerprint != params.fingerprint():
        raise StaleTrace("trace was produced with different parameter values")
    cfg = params.config
    batch = trace.batch
    if labels is None:
        if batch.labels is None:
            raise ValueError("no labels supplied")
        lab = batch.labels
    else:
        lab = np.asarray(labels, dtype=np.float64)
        if trace.single and lab.ndim == 2:
            lab = lab[:, None, :]
    if lab.shape != trace.y.shape:
        raise ShapeMismatch(f"labels {lab.shape} vs predictions {trace.y.shape}")

    mask = batch.mask[..., None]
    n_cells = batch.mask.sum() * OUT_DIM
    grads = params.zeros_like().arrays

    dy = 2.0 * (trace.y - lab) * mask / n_cells
    dz2 = dy * trace.y * (1.0 - trace.y)
    flat_r = trace.r.reshape(-1, cfg.fc_hidden)
    flat_dz2 = dz2.reshape(-1, OUT_DIM)
    grads["fc2.W"] = flat_r.T @ flat_dz2
    grads["fc2.b"] = flat_dz2.sum(axis=0)

    dz1 = (dz2 @ params["fc2.W"].T) * (trace.z1 > 0)
    flat_dz1 = dz1.reshape(-1, cfg.fc_hidden)
    grads["fc1.W"] = trace.head_in.reshape(-1, trace.head_in.shape[-1]).T @ flat_dz1
    grads["fc1.b"] = flat_dz1.sum(axis=0)
    d_head = dz1 @ params["fc1.W"].T
    d_hs_sess = d_head[..., : cfg.hidden]

    d_sess_in, grads["lstm_sessions.W"], grads["lstm_sessions.b"] = _lstm_backward(
        d_hs_sess, trace.sess_cache, params["lstm_sessions.W"], cfg.hidden + cfg.session_dim
    )
    dH = d_sess_in[batch.sess_t, batch.sess_b, : cfg.hidden]

    d_hs_hits = np.zeros((batch.hits.shape[0], len(batch.hit_len), cfg.hidden))
    d_hs_hits[batch.hit_len - 1, np.arange(len(batch.hit_len))] = dH
    _, grads["lstm_hits.W"], grads["lstm_hits.b"] = _lstm_backward(
        d_hs_hits, trace.hit_cache, params["lstm_hits.W"], cfg.hit_dim
    )
    return ModelParams(cfg, grads)


# --- serialization -------------------------------------------------------------------


def _config_tuple(cfg: ModelConfig):
    return (cfg.hit_dim, cfg.session_dim, cfg.user_dim, cfg.hidden, cfg.fc_hidden, cfg.out_dim)


def params_to_bytes(params: ModelParams) -> bytes:
    header = _MAGIC + struct.pack("<7I", FORMAT_VERSION, *_config_tuple(params.config))
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
    return header + body


def params_from_bytes(data: bytes) -> ModelParams:
    if data[:4] != _MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    version, *dims = struct.unpack_from("<7I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    cfg = ModelConfig(*dims)
    vector = np.frombuffer(data, dtype="<f8", offset=4 + 28)
    return ModelParams.from_flat(cfg, vector.astype(np.float64))


def save_params(params: ModelParams, path) -> Path:
    """Write ``path`` (binary) and ``path.manifest.txt`` (names, shapes, sha256)."""
    path = Path(path)
    data = params_to_bytes(params)
    path.write_bytes(data)
    lines = [
        f"format_version {FORMAT_VERSION}",
        "config " + " ".join(f"{k}={v}" for k, v in zip(
            ("hit_dim", "session_dim", "user_dim", "hidden", "fc_hidden", "out_dim"), _config_tuple(params.config))),
        f"parameters {params.size()}",
    ]
    for name in PARAM_NAMES:
        lines.append(f"layer {name} {'x'.join(str(d) for d in params[name].shape)}")
    lines.append(f"sha256 {hashlib.sha256(data).hexdigest()}")
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_params(path, verify: bool = True) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    manifest = Path(str(path) + ".manifest.txt")
    if verify and manifest.exists():
        expected = next(
            (line.split()[1] for line in manifest.read_text().splitlines() if line.startswith("sha256 ")), None
        )
        if expected and expected != hashlib.sha256(data).hexdigest():
            raise ValueError(f"checksum mismatch for {path}")
    return params_from_bytes(data)
