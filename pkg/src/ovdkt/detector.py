"""One-layer query decoder with hand-written reverse-mode gradients.

Forward pass for N queries over a G*G context grid ``z`` (rows are cells)::

    u   = q + t P                       language queries (prior added to queries)
    c   = z W_in + b_in + pos           keys/values input, pos is a fixed 2-D sinusoid
    A   = softmax((u Wq)(c Wk)^T / sqrt(Dq))
    h   = u + A (c Wv)
    h2  = h + silu(h W1 + b1) W2 + b2
    e   = h2 We + be                    region embeddings (N, D)
    box = sigmoid(h2 Wb + bb)           (cx, cy, w, h) in (0, 1)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import _rng

PARAM_NAMES = ("q", "P", "W_in", "b_in", "Wq", "Wk", "Wv", "W1", "b1", "W2", "b2", "We", "be", "Wb", "bb")
CHECKPOINT_FORMAT = "ovdkt-detector"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


class StaleTraceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def param_shapes(N: int, D: int, Dq: int, H: int) -> dict[str, tuple[int, ...]]:
    return {
        "q": (N, Dq), "P": (D, Dq),
        "W_in": (D, Dq), "b_in": (Dq,),
        "Wq": (Dq, Dq), "Wk": (Dq, Dq), "Wv": (Dq, Dq),
        "W1": (Dq, H), "b1": (H,), "W2": (H, Dq), "b2": (Dq,),
        "We": (Dq, D), "be": (D,),
        "Wb": (Dq, 4), "bb": (4,),
    }


@dataclass
class DetectorState:
    params: dict[str, np.ndarray]
    N: int
    D: int
    Dq: int
    H: int
    version: int = 0

    def copy(self) -> "DetectorState":
        return DetectorState({k: v.copy() for k, v in self.params.items()}, self.N, self.D, self.Dq, self.H)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def bump(self) -> None:
        self.version += 1

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def init_state(N: int, D: int, Dq: int = 32, H: int = 64, seed=0) -> DetectorState:
    if min(N, D, Dq, H) < 1:
        raise ValueError("sizes must be positive")
    rng = _rng(seed)
    shapes = param_shapes(N, D, Dq, H)
    params = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if name == "q":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return DetectorState(params, N, D, Dq, H)


def positional_encoding(G: int, Dq: int) -> np.ndarray:
    """Fixed (G*G, Dq) 2-D sinusoidal code of cell centres, row-major."""
    c = (np.arange(G) + 0.5) / G
    ys, xs = np.meshgrid(c, c, indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    pe = np.zeros((G * G, Dq))
    n_freq = max(Dq // 4, 1)
    for k in range(n_freq):
        f = math.pi * (k + 1)
        cols = [xs, ys, xs, ys]
        fns = [np.sin, np.sin, np.cos, np.cos]
        for j in range(4):
            idx = 4 * k + j
            if idx < Dq:
                pe[:, idx] = fns[j](f * cols[j])
    return pe


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pe(G, Dq):
    key = (G, Dq)
    if key not in _PE_CACHE:
        pe = positional_encoding(G, Dq)
        pe.setflags(write=False)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def assign_priors_to_queries(priors, bank, N: int) -> np.ndarray:
    """Tile ``L`` prior text embeddings over ``N`` queries in contiguous groups.

    Group sizes are ``N // L`` with the remainder going to the first groups.
    Returns the raw (N, D) text rows; the learned projection is applied in
    :func:`forward`.
    """
    L = len(priors)
    if L < 1:
        raise ValueError("need at least one prior")
    if L > N:
        raise ValueError(f"{L} priors cannot be spread over {N} queries")
    vectors = bank.vectors if hasattr(bank, "vectors") else np.asarray(bank)
    return vectors[query_prior_index(priors, N)]


def query_prior_index(priors, N: int) -> np.ndarray:
    """Category id carried by each query under the group tiling."""
    L = len(priors)
    base, extra = divmod(N, L)
    sizes = [base + (1 if g < extra else 0) for g in range(L)]
    return np.repeat(np.asarray(priors, dtype=int), sizes)


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    return x * s, s


@dataclass
class ForwardTrace:
    state_id: int
    version: int
    z: np.ndarray
    t: np.ndarray
    u: np.ndarray
    c: np.ndarray
    Qm: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A: np.ndarray
    h: np.ndarray
    a1: np.ndarray
    s1: np.ndarray
    sig1: np.ndarray
    h2: np.ndarray
    boxes: np.ndarray
    scale: float = field(default=1.0)


def _check(name, x):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation in {name}")


def forward(state: DetectorState, z, t_assigned):
    """Returns ``(e, boxes, trace)``."""
    p = state.params
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t_assigned, dtype=np.float64)
    G = int(round(math.sqrt(z.shape[0])))
    if G * G != z.shape[0] or z.shape[1] != state.D:
        raise ValueError(f"context shape {z.shape} incompatible with D={state.D}")
    if t.shape != (state.N, state.D):
        raise ValueError(f"t_assigned shape {t.shape} != {(state.N, state.D)}")
    u = p["q"] + t @ p["P"]
    c = z @ p["W_in"] + p["b_in"] + _pe(G, state.Dq)
    Qm = u @ p["Wq"]
    K = c @ p["Wk"]
    V = c @ p["Wv"]
    scale = 1.0 / math.sqrt(state.Dq)
    S = (Qm @ K.T) * scale
    S -= S.max(axis=1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=1, keepdims=True)
    h = u + A @ V
    _check("attention", h)
    a1 = h @ p["W1"] + p["b1"]
    s1, sig1 = _silu(a1)
    h2 = h + s1 @ p["W2"] + p["b2"]
    _check("feedforward", h2)
    e = h2 @ p["We"] + p["be"]
    braw = h2 @ p["Wb"] + p["bb"]
    boxes = 1.0 / (1.0 + np.exp(-np.clip(braw, -500, 500)))
    _check("projection head", e)
    _check("box head", boxes)
    trace = ForwardTrace(id(state), state.version, z, t, u, c, Qm, K, V, A, h, a1, s1, sig1, h2, boxes, scale)
    return e, boxes, trace


def backward(state: DetectorState, trace: ForwardTrace, d_e=None, d_boxes=None) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss wrt every parameter, given dL/de and dL/dboxes."""
    if trace.state_id != id(state) or trace.version != state.version:
        raise StaleTraceError("trace was produced by a different or since-updated state")
    p = state.params
    N = state.N
    d_e = np.zeros((N, state.D)) if d_e is None else np.asarray(d_e, dtype=np.float64)
    d_boxes = np.zeros((N, 4)) if d_boxes is None else np.asarray(d_boxes, dtype=np.float64)
    g = {}
    b = trace.boxes
    dbraw = d_boxes * b * (1.0 - b)
    g["Wb"] = trace.h2.T @ dbraw
    g["bb"] = dbraw.sum(axis=0)
    g["We"] = trace.h2.T @ d_e
    g["be"] = d_e.sum(axis=0)
    dh2 = dbraw @ p["Wb"].T + d_e @ p["We"].T

    g["W2"] = trace.s1.T @ dh2
    g["b2"] = dh2.sum(axis=0)
    ds1 = dh2 @ p["W2"].T
    sig = trace.sig1
    da1 = ds1 * sig * (1.0 + trace.a1 * (1.0 - sig))
    g["W1"] = trace.h.T @ da1
    g["b1"] = da1.sum(axis=0)
    dh = dh2 + da1 @ p["W1"].T

    A = trace.A
    dA = dh @ trace.V.T
    dV = A.T @ dh
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True)) * trace.scale
    dQm = dS @ trace.K
    dK = dS.T @ trace.Qm
    g["Wq"] = trace.u.T @ dQm
    g["Wk"] = trace.c.T @ dK
    g["Wv"] = trace.c.T @ dV
    dc = dK @ p["Wk"].T + dV @ p["Wv"].T
    g["W_in"] = trace.z.T @ dc
    g["b_in"] = dc.sum(axis=0)
    du = dh + dQm @ p["Wq"].T
    g["q"] = du
    g["P"] = trace.t.T @ du
    return g


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: DetectorState, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": {"N": state.N, "D": state.D, "Dq": state.Dq, "H": state.H},
        "params": {k: {"shape": list(state.params[k].shape), "values": state.params[k].ravel().tolist()}
                   for k in PARAM_NAMES},
    }
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[DetectorState, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint format or version")
    s = doc["sizes"]
    shapes = param_shapes(s["N"], s["D"], s["Dq"], s["H"])
    params = {}
    for k in PARAM_NAMES:
        entry = doc["params"][k]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != shapes[k]:
            raise CheckpointError(f"parameter {k} has shape {arr.shape}, expected {shapes[k]}")
        params[k] = arr
    return DetectorState(params, s["N"], s["D"], s["Dq"], s["H"]), doc.get("meta", {})
