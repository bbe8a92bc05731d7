"""Q-model: points encoder, tree encoder, fusion layer and Q-head in numpy.

Forward and backward passes are written out by hand.  ``backward`` takes a
loss callback ``loss_fn(q, zp) -> (loss, dq, dzp)`` so the same engine
serves the offline objective, the contrastive term and online updates.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import ndtr

from . import expr
from .errors import CorruptCheckpoint, NonFiniteInput, NonFiniteLoss, VersionMismatch

N_ACTIONS = expr.N_ACTIONS
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

MAGIC = b"SYMQCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    k_p: int = 64
    k_t: int = 64
    hidden: int = 128  # encoder width
    fusion: int = 128  # fusion layer and Q-head width
    layers: int = 2  # hidden layers in the Q-head
    max_len: int = expr.DEFAULT_MAX_LEN


TINY = Dims(k_p=16, k_t=16, hidden=32, fusion=32, layers=2)
DESK = Dims()
# Widths of the published configuration; far too large for CPU training here.
FULL_SCALE = Dims(k_p=512, k_t=512, hidden=512, fusion=4096, layers=4)
PRESETS = {"tiny": TINY, "desk": DESK, "full": FULL_SCALE}


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def preprocess_points(points) -> np.ndarray:
    """Signed log squashing of (x1, x2, y) columns."""
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3:
        raise NonFiniteInput(f"points must have shape (n, 3), got {p.shape}")
    if p.shape[0] < 1 or not np.all(np.isfinite(p)):
        raise NonFiniteInput("points must be a non-empty set of finite values")
    return np.sign(p) * np.log1p(np.abs(p))


def param_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    shapes = {
        "pe.w1": (3, d.hidden),
        "pe.b1": (d.hidden,),
        "pe.w2": (d.hidden, d.hidden),
        "pe.b2": (d.hidden,),
        "pe.wo": (d.hidden, d.k_p),
        "pe.bo": (d.k_p,),
        "te.w1": (d.max_len * N_ACTIONS, d.hidden),
        "te.b1": (d.hidden,),
        "te.wo": (d.hidden, d.k_t),
        "te.bo": (d.k_t,),
        "fu.w": (d.k_p + d.k_t, d.fusion),
        "fu.b": (d.fusion,),
    }
    for i in range(d.layers):
        shapes[f"qh.w{i}"] = (d.fusion, d.fusion)
        shapes[f"qh.b{i}"] = (d.fusion,)
    shapes["qh.wo"] = (d.fusion, N_ACTIONS)
    shapes["qh.bo"] = (N_ACTIONS,)
    return shapes


@dataclass
class DecisionBatch:
    """Decision rows over a set of point clouds.

    ``rec[r]`` indexes the point cloud of row ``r``; ``prefixes[r]`` is the
    action prefix that defines the tree state.  ``targets`` and ``weights``
    are only read by loss callbacks.
    """

    point_sets: list[np.ndarray]
    rec: np.ndarray
    prefixes: list[Sequence[int]]
    targets: np.ndarray | None = None
    weights: np.ndarray | None = None
    labels: list[str] | None = None  # per point set, for the contrastive term
    _x: sparse.csr_matrix | None = field(default=None, repr=False)

    def tree_input(self, max_len: int) -> sparse.csr_matrix:
        if self._x is None:
            self._x = prefix_matrix(self.prefixes, max_len)
        return self._x


def prefix_matrix(prefixes: Sequence[Sequence[int]], max_len: int) -> sparse.csr_matrix:
    """Flattened one-hot tree matrices, one row per prefix, as CSR."""
    lengths = np.fromiter((len(p) for p in prefixes), dtype=np.int64, count=len(prefixes))
    if lengths.size and lengths.max() > max_len:
        raise expr.TooLong(f"prefix of {lengths.max()} actions exceeds max_len={max_len}")
    rows = np.repeat(np.arange(len(prefixes)), lengths)
    if rows.size:
        acts = np.concatenate([np.asarray(p, dtype=np.int64) for p in prefixes if len(p)])
        pos = np.concatenate([np.arange(n) for n in lengths if n])
        cols = pos * N_ACTIONS + acts
    else:
        cols = np.zeros(0, dtype=np.int64)
    data = np.ones(rows.size)
    return sparse.csr_matrix((data, (rows, cols)), shape=(len(prefixes), max_len * N_ACTIONS))


class QModel:
    def __init__(self, dims: Dims = DESK, seed: int = 0, params: dict | None = None):
        self.dims = dims
        self.shapes = param_shapes(dims)
        if params is None:
            params = self._init(np.random.default_rng(seed))
        self.params = params
        self.step = 0  # optimisation steps taken; persisted in checkpoints

    def _init(self, rng):
        out = {}
        for name, shape in self.shapes.items():
            if len(shape) == 2:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                out[name] = rng.uniform(-lim, lim, size=shape)
            else:
                out[name] = np.zeros(shape)
        return out

    def copy(self) -> "QModel":
        m = QModel(self.dims, params={k: v.copy() for k, v in self.params.items()})
        m.step = self.step
        return m

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- points encoder ----------------------------------------------------

    def _points_forward(self, group: np.ndarray):
        """group: (B, n, 3) preprocessed points -> zp (B, k_p), cache."""
        p = self.params
        a1 = group @ p["pe.w1"] + p["pe.b1"]
        h1 = gelu(a1)
        a2 = h1 @ p["pe.w2"] + p["pe.b2"]
        h2 = gelu(a2)
        # sorting before the mean makes the pooled value bit-identical under
        # any permutation of the points; it does not change the gradient
        pooled = np.sort(h2, axis=1).mean(axis=1)
        zp = pooled @ p["pe.wo"] + p["pe.bo"]
        return zp, (group, a1, h1, a2, pooled)

    def _points_backward(self, cache, dzp, grads):
        group, a1, h1, a2, pooled = cache
        p = self.params
        n = group.shape[1]
        grads["pe.wo"] += pooled.T @ dzp
        grads["pe.bo"] += dzp.sum(axis=0)
        dpooled = dzp @ p["pe.wo"].T
        da2 = (dpooled / n)[:, None, :] * gelu_grad(a2)
        grads["pe.w2"] += np.einsum("bnh,bnk->hk", h1, da2)
        grads["pe.b2"] += da2.sum(axis=(0, 1))
        da1 = (da2 @ p["pe.w2"].T) * gelu_grad(a1)
        grads["pe.w1"] += np.einsum("bni,bnh->ih", group, da1)
        grads["pe.b1"] += da1.sum(axis=(0, 1))

    def _encode_sets(self, point_sets: Sequence[np.ndarray]):
        """Encode point clouds, grouping equal sizes into one stacked pass."""
        pre = [preprocess_points(ps) for ps in point_sets]
        zp = np.empty((len(pre), self.dims.k_p))
        caches = []
        by_size: dict[int, list[int]] = {}
        for i, arr in enumerate(pre):
            by_size.setdefault(arr.shape[0], []).append(i)
        for idx in by_size.values():
            z, cache = self._points_forward(np.stack([pre[i] for i in idx]))
            zp[idx] = z
            caches.append((idx, cache))
        return zp, caches

    def encode_points(self, points) -> np.ndarray:
        return self._encode_sets([points])[0][0]

    # -- tree encoder ------------------------------------------------------

    def _tree_forward(self, x: sparse.csr_matrix):
        p = self.params
        a = np.asarray(x @ p["te.w1"]) + p["te.b1"]
        h = gelu(a)
        return h @ p["te.wo"] + p["te.bo"], (x, a, h)

    def _tree_backward(self, cache, dzt, grads):
        x, a, h = cache
        p = self.params
        grads["te.wo"] += h.T @ dzt
        grads["te.bo"] += dzt.sum(axis=0)
        da = (dzt @ p["te.wo"].T) * gelu_grad(a)
        grads["te.w1"] += np.asarray(x.T @ da)
        grads["te.b1"] += da.sum(axis=0)

    def encode_tree(self, matrix) -> np.ndarray:
        """Encode one tree matrix (a :class:`expr.TreeMatrix` or 2-D array)."""
        rows = matrix.rows if isinstance(matrix, expr.TreeMatrix) else np.asarray(matrix)
        x = sparse.csr_matrix(rows.reshape(1, -1))
        return self._tree_forward(x)[0][0]

    # -- fusion and head ---------------------------------------------------

    def _head_forward(self, zp_rows, zt):
        p = self.params
        h0 = np.concatenate([zp_rows, zt], axis=1)
        pre = [h0 @ p["fu.w"] + p["fu.b"]]
        hs = [h0, gelu(pre[0])]
        for i in range(self.dims.layers):
            pre.append(hs[-1] @ p[f"qh.w{i}"] + p[f"qh.b{i}"])
            hs.append(gelu(pre[-1]))
        q = hs[-1] @ p["qh.wo"] + p["qh.bo"]
        return q, (pre, hs)

    def _head_backward(self, cache, dq, grads):
        pre, hs = cache
        p = self.params
        grads["qh.wo"] += hs[-1].T @ dq
        grads["qh.bo"] += dq.sum(axis=0)
        dh = dq @ p["qh.wo"].T
        for i in reversed(range(self.dims.layers)):
            da = dh * gelu_grad(pre[i + 1])
            grads[f"qh.w{i}"] += hs[i + 1].T @ da
            grads[f"qh.b{i}"] += da.sum(axis=0)
            dh = da @ p[f"qh.w{i}"].T
        da = dh * gelu_grad(pre[0])
        grads["fu.w"] += hs[0].T @ da
        grads["fu.b"] += da.sum(axis=0)
        dh0 = da @ p["fu.w"].T
        k = self.dims.k_p
        return dh0[:, :k], dh0[:, k:]

    def q_values(self, zp, zt) -> np.ndarray:
        zp = np.atleast_2d(zp)
        zt = np.atleast_2d(zt)
        if zp.shape[0] == 1 and zt.shape[0] > 1:
            zp = np.repeat(zp, zt.shape[0], axis=0)
        q, _ = self._head_forward(zp, zt)
        return q[0] if q.shape[0] == 1 else q

    # -- whole model -------------------------------------------------------

    def forward(self, batch: DecisionBatch, keep_cache: bool = False):
        zp, pcaches = self._encode_sets(batch.point_sets)
        zt, tcache = self._tree_forward(batch.tree_input(self.dims.max_len))
        rec = np.asarray(batch.rec, dtype=np.int64)
        q, hcache = self._head_forward(zp[rec], zt)
        if keep_cache:
            return q, zp, (pcaches, tcache, hcache, rec)
        return q, zp

    def q_for_prefixes(self, zp: np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Q-values for many tree prefixes over one encoded point cloud."""
        zt, _ = self._tree_forward(prefix_matrix(prefixes, self.dims.max_len))
        zp_rows = np.broadcast_to(zp, (len(prefixes), zp.shape[-1]))
        return self._head_forward(zp_rows, zt)[0]

    def backward(self, batch: DecisionBatch, loss_fn: Callable):
        """Loss and gradients of every parameter.

        ``loss_fn(q, zp)`` returns ``(loss, dq, dzp)``; ``dzp`` may be None.
        """
        q, zp, (pcaches, tcache, hcache, rec) = self.forward(batch, keep_cache=True)
        loss, dq, dzp_ext = loss_fn(q, zp)
        if not np.isfinite(loss):
            bad = None
            rows = np.flatnonzero(~np.isfinite(q).all(axis=1))
            if rows.size:
                bad = int(rec[rows[0]])
            raise NonFiniteLoss("loss is not finite", record=bad)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dzp_rows, dzt = self._head_backward(hcache, dq, grads)
        self._tree_backward(tcache, dzt, grads)
        dzp = np.zeros_like(zp)
        np.add.at(dzp, rec, dzp_rows)
        if dzp_ext is not None:
            dzp += dzp_ext
        for idx, cache in pcaches:
            self._points_backward(cache, dzp[idx], grads)
        return float(loss), grads

    # -- persistence -------------------------------------------------------

    def save(self, path, extra_arrays: dict | None = None) -> None:
        save(self, path, extra_arrays)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoints
#
# layout: MAGIC | u32 version | u32 header_len | header JSON (dims, step)
#         | per array: u16 name_len, name, u8 ndim, u32 * ndim shape, f8 data
#         | u32 CRC-32 of everything before it.  All integers little-endian.


def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save(model: QModel, path, extra_arrays: dict | None = None, version: int = FORMAT_VERSION) -> None:
    extra_arrays = extra_arrays or {}
    header = json.dumps({"dims": asdict(model.dims), "step": model.step, "extra": sorted(extra_arrays)})
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", version, len(header)))
    buf.write(header.encode("utf-8"))
    for name in model.names:
        _write_array(buf, name, model.params[name])
    for name in sorted(extra_arrays):
        _write_array(buf, name, np.asarray(extra_arrays[name], dtype=float))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load(path, with_extra: bool = False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or not blob.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    off += 8
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(body[off : off + hlen].decode("utf-8"))
        off += hlen
        dims = Dims(**header["dims"])
        arrays = {}
        while off < len(body):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(body, dtype="<f8", count=count, offset=off)
            off += 8 * count
            arrays[name] = data.reshape(shape).astype(float)
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    shapes = param_shapes(dims)
    params = {}
    for name, shape in shapes.items():
        if name not in arrays or arrays[name].shape != shape:
            raise CorruptCheckpoint(f"{path}: parameter {name} missing or misshapen")
        params[name] = arrays.pop(name)
    model = QModel(dims, params=params)
    model.step = int(header.get("step", 0))
    if with_extra:
        return model, arrays
    return model
