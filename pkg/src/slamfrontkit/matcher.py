"""Descriptor matching by attention refinement and double-softmax assignment.

States start as raw descriptors and are optionally refined by a fixed
stack of self/cross attention units (no learning happens here; weights
come from a file or the identity constructor). The pairwise score is

    S_ij = (A a_i + b_a) . (B b_j + b_b)

and the soft assignment gates a column softmax and a row softmax with
per-point matchability sigmoids:

    P_ij = sigma_a_i * sigma_b_j * softmax_col(S)_ij * softmax_row(S)_ij

so every row/column sum of P is at most 1.

Weight files (.lsmw) are little-endian: magic "LSMW", u32 version (=1),
u32 dim, u32 unit count, then the similarity/matchability arrays and one
(kind byte, q, k, v, mlp_w, mlp_b) block per unit, all float64 row-major.
"""
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

WEIGHTS_MAGIC = b"LSMW"
WEIGHTS_VERSION = 1

_SELF, _CROSS = 0, 1
_KIND_CODE = {"self": _SELF, "cross": _CROSS}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


def _check(arr, shape, name):
    a = np.asarray(arr, dtype=np.float64)
    if a.shape != shape:
        raise DimensionMismatchError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class AttentionUnitWeights:
    """One message-passing unit: q/k/v projections plus the update MLP."""

    kind: str
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    mlp_weight: np.ndarray
    mlp_bias: np.ndarray

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unit kind must be 'self' or 'cross', got {self.kind!r}")
        d = np.asarray(self.query).shape[0]
        object.__setattr__(self, "query", _check(self.query, (d, d), "query"))
        object.__setattr__(self, "key", _check(self.key, (d, d), "key"))
        object.__setattr__(self, "value", _check(self.value, (d, d), "value"))
        object.__setattr__(self, "mlp_weight", _check(self.mlp_weight, (d, 2 * d), "mlp_weight"))
        object.__setattr__(self, "mlp_bias", _check(self.mlp_bias, (d,), "mlp_bias"))

    @property
    def dim(self):
        return self.query.shape[0]


@dataclass(frozen=True)
class MatcherWeights:
    """Similarity projections, matchability head, and attention stack."""

    sim_a_weight: np.ndarray
    sim_a_bias: np.ndarray
    sim_b_weight: np.ndarray
    sim_b_bias: np.ndarray
    match_weight: np.ndarray
    match_bias: float
    units: tuple = ()

    def __post_init__(self):
        d = np.asarray(self.sim_a_weight).shape[0]
        object.__setattr__(self, "sim_a_weight", _check(self.sim_a_weight, (d, d), "sim_a_weight"))
        object.__setattr__(self, "sim_a_bias", _check(self.sim_a_bias, (d,), "sim_a_bias"))
        object.__setattr__(self, "sim_b_weight", _check(self.sim_b_weight, (d, d), "sim_b_weight"))
        object.__setattr__(self, "sim_b_bias", _check(self.sim_b_bias, (d,), "sim_b_bias"))
        object.__setattr__(self, "match_weight", _check(self.match_weight, (d,), "match_weight"))
        object.__setattr__(self, "match_bias", float(self.match_bias))
        units = tuple(self.units)
        for u in units:
            if u.dim != d:
                raise DimensionMismatchError(f"unit dim {u.dim} != weights dim {d}")
        object.__setattr__(self, "units", units)

    @property
    def dim(self):
        return self.sim_a_weight.shape[0]

    @staticmethod
    def identity(dim):
        """Weights that match on raw descriptor dot products.

        Similarity projections are the identity, the attention stack is
        empty, and the matchability head is a zero projection with bias
        +40, which saturates the sigmoid to exactly 1.0 in float64 so the
        gate drops out of the product.
        """
        return MatcherWeights(
            sim_a_weight=np.eye(dim),
            sim_a_bias=np.zeros(dim),
            sim_b_weight=np.eye(dim),
            sim_b_bias=np.zeros(dim),
            match_weight=np.zeros(dim),
            match_bias=40.0,
            units=(),
        )


@dataclass(frozen=True)
class AssignmentResult:
    """Soft assignment P plus the hard matches extracted from it."""

    probabilities: np.ndarray
    sigma_a: np.ndarray
    sigma_b: np.ndarray
    matches: tuple


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(logits, axis):
    """Max-subtracted softmax; all -inf rows/columns collapse to zero."""
    m = np.max(logits, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    denom = np.sum(e, axis=axis, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def apply_attention_unit(states_a, states_b, unit):
    """One synchronous message-passing update of both state sets.

    For each target set, queries come from the targets and keys/values
    from the source set (itself for 'self' units, the other set for
    'cross'). Messages are attention-weighted value sums with 1/sqrt(D)
    logit scaling; the update is x + MLP([x | message]), computed from the
    pre-update states on both sides.
    """
    a = np.asarray(states_a, dtype=np.float64)
    b = np.asarray(states_b, dtype=np.float64)
    d = unit.dim
    if a.shape[1] != d or b.shape[1] != d:
        raise DimensionMismatchError(
            f"states have dims {a.shape[1]}/{b.shape[1]}, unit expects {d}"
        )

    def message(targets, source):
        if targets.shape[0] == 0:
            return np.zeros((0, d))
        if source.shape[0] == 0:
            return np.zeros((targets.shape[0], d))
        q = targets @ unit.query.T
        k = source @ unit.key.T
        v = source @ unit.value.T
        att = _softmax(q @ k.T / np.sqrt(d), axis=1)
        return att @ v

    src_a, src_b = (a, b) if unit.kind == "self" else (b, a)
    msg_a = message(a, src_a)
    msg_b = message(b, src_b)
    new_a = a + np.concatenate([a, msg_a], axis=1) @ unit.mlp_weight.T + unit.mlp_bias
    new_b = b + np.concatenate([b, msg_b], axis=1) @ unit.mlp_weight.T + unit.mlp_bias
    return new_a, new_b


def similarity_matrix(states_a, states_b, weights):
    """S_ij = (A a_i + b_a) . (B b_j + b_b), shape (M, N)."""
    a = np.asarray(states_a, dtype=np.float64)
    b = np.asarray(states_b, dtype=np.float64)
    pa = a @ weights.sim_a_weight.T + weights.sim_a_bias
    pb = b @ weights.sim_b_weight.T + weights.sim_b_bias
    return pa @ pb.T


def matchability(states, weights):
    """Per-point sigmoid gate in (0, 1)."""
    s = np.asarray(states, dtype=np.float64)
    return _sigmoid(s @ weights.match_weight + weights.match_bias)


def assignment_matrix(similarity, sigma_a, sigma_b, mask=None):
    """Double-softmax soft assignment gated by matchability.

    P_ij = sigma_a_i * sigma_b_j * softmax over column j's entries at row
    i * softmax over row i's entries at column j. An optional boolean mask
    forbids pairs by forcing their logits to -inf before both softmaxes.
    """
    s = np.asarray(similarity, dtype=np.float64)
    sa = np.asarray(sigma_a, dtype=np.float64).reshape(-1)
    sb = np.asarray(sigma_b, dtype=np.float64).reshape(-1)
    if s.shape != (sa.size, sb.size):
        raise DimensionMismatchError(
            f"similarity {s.shape} inconsistent with sigmas ({sa.size}, {sb.size})"
        )
    if s.size == 0:
        return np.zeros(s.shape)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    col = _softmax(s, axis=0)
    row = _softmax(s, axis=1)
    return sa[:, None] * sb[None, :] * col * row


def extract_matches(probabilities, threshold):
    """Mutual-argmax pairs with P >= threshold, as (i, j, score) tuples.

    argmax ties resolve to the first index, so the result is deterministic
    and one-to-one by construction.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        return []
    best_j = np.argmax(p, axis=1)
    best_i = np.argmax(p, axis=0)
    out = []
    for i in range(p.shape[0]):
        j = best_j[i]
        score = p[i, j]
        if best_i[j] == i and score >= threshold:
            out.append((int(i), int(j), float(score)))
    return out


def match_descriptors(desc_a, desc_b, weights, threshold=0.2, mask=None):
    """Full pipeline on raw descriptor matrices: attention stack,
    similarity, gating, extraction."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.shape[1] != weights.dim or b.shape[1] != weights.dim:
        raise DimensionMismatchError(
            f"descriptor dims {a.shape[1]}/{b.shape[1]} "
            f"do not match weights dim {weights.dim}"
        )
    for unit in weights.units:
        a, b = apply_attention_unit(a, b, unit)
    s = similarity_matrix(a, b, weights)
    sigma_a = matchability(a, weights)
    sigma_b = matchability(b, weights)
    p = assignment_matrix(s, sigma_a, sigma_b, mask=mask)
    matches = tuple(extract_matches(p, threshold))
    return AssignmentResult(probabilities=p, sigma_a=sigma_a, sigma_b=sigma_b, matches=matches)


def match_feature_sets(set_a, set_b, weights, threshold=0.2, mask=None):
    """match_descriptors applied to two FeatureSets."""
    if set_a.descriptor_dim != weights.dim or set_b.descriptor_dim != weights.dim:
        raise DimensionMismatchError(
            f"descriptor dims {set_a.descriptor_dim}/{set_b.descriptor_dim} "
            f"do not match weights dim {weights.dim}"
        )
    return match_descriptors(set_a.descriptors, set_b.descriptors, weights,
                             threshold=threshold, mask=mask)


def _pack_array(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_matcher_weights(path, weights):
    d = weights.dim
    chunks = [WEIGHTS_MAGIC, struct.pack("<III", WEIGHTS_VERSION, d, len(weights.units))]
    for arr in (weights.sim_a_weight, weights.sim_a_bias, weights.sim_b_weight,
                weights.sim_b_bias, weights.match_weight):
        chunks.append(_pack_array(arr))
    chunks.append(struct.pack("<d", weights.match_bias))
    for u in weights.units:
        chunks.append(struct.pack("<B", _KIND_CODE[u.kind]))
        for arr in (u.query, u.key, u.value, u.mlp_weight, u.mlp_bias):
            chunks.append(_pack_array(arr))
    payload = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            self.buf = f.read()
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def array(self, shape, what):
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def load_matcher_weights(path):
    r = _Reader(path)
    if r.take(4, "magic") != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: expected magic {WEIGHTS_MAGIC!r}")
    version, d, n_units = struct.unpack("<III", r.take(12, "header"))
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(
            f"{path}: version {version}, this reader supports {WEIGHTS_VERSION}"
        )
    saw = r.array((d, d), "sim_a_weight")
    sab = r.array((d,), "sim_a_bias")
    sbw = r.array((d, d), "sim_b_weight")
    sbb = r.array((d,), "sim_b_bias")
    mw = r.array((d,), "match_weight")
    mb = struct.unpack("<d", r.take(8, "match_bias"))[0]
    units = []
    for i in range(n_units):
        code = struct.unpack("<B", r.take(1, f"unit {i} kind"))[0]
        if code not in _KIND_NAME:
            raise TruncatedFileError(f"{path}: unit {i} has unknown kind byte {code}")
        units.append(AttentionUnitWeights(
            kind=_KIND_NAME[code],
            query=r.array((d, d), f"unit {i} query"),
            key=r.array((d, d), f"unit {i} key"),
            value=r.array((d, d), f"unit {i} value"),
            mlp_weight=r.array((d, 2 * d), f"unit {i} mlp_weight"),
            mlp_bias=r.array((d,), f"unit {i} mlp_bias"),
        ))
    return MatcherWeights(saw, sab, sbw, sbb, mw, mb, tuple(units))
