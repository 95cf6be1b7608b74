"""Hierarchical point-set encoder built from scratch on numpy.

Furthest point sampling, radius grouping, shared per-point networks with
channelwise max pooling, and a fully connected head.  Every layer carries an
analytic backward pass; there is no autodiff and the graph is fixed.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBall, VersionMismatch

LEAKY_SLOPE = 0.01
GN_EPS = 1e-5
CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


@dataclass
class CloudTensor:
    """Segmented point cloud: positions plus per-point feature channels.

    The first three feature channels are the one-hot class labels
    (obstacle / robot / target); the next three repeat the absolute xyz.
    """

    points: np.ndarray     # (N, 3)
    features: np.ndarray   # (N, C)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        assert self.points.shape[0] >= 1
        assert self.points.shape[1] == 3
        assert self.features.shape[0] == self.points.shape[0]
        assert self.features.shape[1] >= 4
        assert np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.features))

    def __len__(self):
        return len(self.points)


def cloud_from_labels(points, labels, n_classes=3):
    """One-hot class features followed by the absolute coordinates."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros((len(points), n_classes))
    onehot[np.arange(len(points)), labels] = 1.0
    return CloudTensor(points, np.hstack([onehot, points]))


# ---------------------------------------------------------------------------
# layers


class Linear:
    """Affine layer with accumulated weight/bias gradients."""

    def __init__(self, n_in, n_out, rng):
        self.W = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, g):
        self.gW += g.T @ self._x
        self.gb += g.sum(axis=0)
        return g @ self.W

    def zero_grad(self):
        self.gW[:] = 0.0
        self.gb[:] = 0.0

    def tensors(self):
        return [("W", self.W, self.gW), ("b", self.b, self.gb)]


def _gn_groups(channels):
    """Largest divisor of the channel count <= 8 with group size >= 2."""
    g = min(8, channels)
    while g > 1 and (channels % g != 0 or channels // g < 2):
        g -= 1
    return g


class GroupNorm:
    """Per-row normalization over channel groups with learned scale/shift."""

    def __init__(self, channels, groups=None):
        self.channels = channels
        self.groups = _gn_groups(channels) if groups is None else groups
        assert channels % self.groups == 0
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x):
        r, c = x.shape
        xg = x.reshape(r, self.groups, c // self.groups)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + GN_EPS)
        xhat = ((xg - mu) * inv).reshape(r, c)
        self._cache = (xhat, inv)
        return xhat * self.gamma + self.beta

    def backward(self, g):
        xhat, inv = self._cache
        r, c = g.shape
        s = c // self.groups
        self.ggamma += (g * xhat).sum(axis=0)
        self.gbeta += g.sum(axis=0)
        dxhat = (g * self.gamma).reshape(r, self.groups, s)
        xh = xhat.reshape(r, self.groups, s)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xh * m2)
        return dx.reshape(r, c)

    def zero_grad(self):
        self.ggamma[:] = 0.0
        self.gbeta[:] = 0.0

    def tensors(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]


class LeakyReLU:
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x >= 0.0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, g):
        return np.where(self._mask, g, self.slope * g)

    def zero_grad(self):
        pass

    def tensors(self):
        return []


def max_pool_groups(x):
    """Channelwise max over axis 1 of (M, K, C); ties go to the lowest index.

    Returns (pooled, argmax) where argmax feeds max_pool_backward.
    """
    arg = np.argmax(x, axis=1)
    m, _, c = x.shape
    pooled = x[np.arange(m)[:, None], arg, np.arange(c)[None, :]]
    return pooled, arg


def max_pool_backward(g, argmax, k):
    """Scatter pooled gradients back to the argmax rows of (M, K, C)."""
    m, c = g.shape
    out = np.zeros((m, k, c))
    out[np.arange(m)[:, None], argmax, np.arange(c)[None, :]] = g
    return out


# ---------------------------------------------------------------------------
# sampling and grouping


def _fps_from(points, k, first):
    chosen = np.empty(k, dtype=int)
    chosen[0] = first
    dist = np.linalg.norm(points - points[first], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def furthest_point_sampling(points, k, rng):
    """Greedy max-min selection of k indices; the first is drawn from rng."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    assert 1 <= k <= n
    return _fps_from(points, k, int(rng.integers(n)))


def _geometric_start(points):
    """Order-invariant sampling start: farthest from the centroid.

    Exact distance ties resolve to the lexicographically smallest
    coordinates, so permuted or duplicated clouds start at the same point.
    """
    d = np.linalg.norm(points - points.mean(axis=0), axis=1)
    best = np.flatnonzero(d >= d.max() - 1e-12)
    rows = points[best]
    order = np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))
    return int(best[order[0]])


def stratified_fps(points, onehot, k):
    """Per-class furthest point sampling with equal quotas.

    Plain max-min sampling allocates centers by spatial extent, so a small
    but task-critical segment (the target marker) can end up with a single
    center; quotas guarantee every present class keeps its share.  Fully
    deterministic and invariant to point order and duplication.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    classes = np.argmax(onehot, axis=1)
    present = sorted(set(classes.tolist()))
    counts = {c: int(np.sum(classes == c)) for c in present}
    quota = {c: min(k // len(present), counts[c]) for c in present}
    assigned = sum(quota.values())
    while assigned < k:
        progressed = False
        for c in present:
            if assigned == k:
                break
            if quota[c] < counts[c]:
                quota[c] += 1
                assigned += 1
                progressed = True
        if not progressed:
            break
    sel = []
    for c in present:
        idx = np.flatnonzero(classes == c)
        sub = points[idx]
        sel.append(idx[_fps_from(sub, quota[c], _geometric_start(sub))])
    return np.concatenate(sel)


def ball_query(points, centers, radius, max_k):
    """Per-center neighbor groups within radius, at most max_k indices each.

    Neighbors are ordered by distance (stable), duplicate positions are kept
    once, and short groups are padded by repeating the first member.  Raises
    EmptyBall when a center has no neighbor at all.
    """
    assert radius > 0 and max_k >= 1
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    d = np.linalg.norm(points[None, :, :] - centers[:, None, :], axis=2)
    groups = np.empty((len(centers), max_k), dtype=int)
    for i in range(len(centers)):
        idx = np.flatnonzero(d[i] <= radius)
        if len(idx) == 0:
            raise EmptyBall(f"center {i} has no neighbor within {radius}")
        idx = idx[np.argsort(d[i, idx], kind="stable")]
        seen = set()
        kept = []
        for j in idx:
            key = points[j].tobytes()
            if key not in seen:
                seen.add(key)
                kept.append(j)
            if len(kept) == max_k:
                break
        row = np.asarray(kept, dtype=int)
        if len(row) < max_k:
            row = np.concatenate([row, np.full(max_k - len(row), row[0], dtype=int)])
        groups[i] = row
    return groups


# ---------------------------------------------------------------------------
# set abstraction


@dataclass
class SetAbstraction:
    """One encoder stage: sample centers, group, shared MLP, max-pool.

    n_samples None means the global stage: a single group of all points
    centered at the origin (relative coordinates are then absolute).
    """

    n_samples: int
    radius: float
    max_k: int
    layers: list
    stratify: int = 0          # leading one-hot channels used for quotas
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, c_in, widths, rng, n_samples=None, radius=None, max_k=None,
              stratify=0):
        layers = []
        prev = 3 + c_in        # center-relative xyz concatenated to features
        for w in widths:
            layers.extend([Linear(prev, w, rng), GroupNorm(w), LeakyReLU()])
            prev = w
        return cls(n_samples, radius, max_k, layers, stratify)

    @property
    def c_out(self):
        return self.layers[-3].W.shape[0]

    def forward(self, cloud, rng):
        pts, feats = cloud.points, cloud.features
        if self.n_samples is None:
            centers = np.zeros((1, 3))
            groups = np.arange(len(pts))[None, :]
        else:
            k = min(self.n_samples, len(pts))
            if self.stratify and feats.shape[1] >= self.stratify:
                sel = stratified_fps(pts, feats[:, :self.stratify], k)
            else:
                sel = furthest_point_sampling(pts, k, rng)
            centers = pts[sel]
            groups = ball_query(pts, centers, self.radius, self.max_k)
        m, k = groups.shape
        rel = pts[groups] - centers[:, None, :]
        g = np.concatenate([rel, feats[groups]], axis=2)
        x = g.reshape(m * k, -1)
        for layer in self.layers:
            x = layer.forward(x)
        x = x.reshape(m, k, -1)
        pooled, arg = max_pool_groups(x)
        self._cache = {"groups": groups, "argmax": arg, "k": k,
                       "n_in": len(pts), "c_in": feats.shape[1]}
        return CloudTensor(centers, pooled)

    def backward(self, g_out):
        c = self._cache
        g = max_pool_backward(g_out, c["argmax"], c["k"])
        x = g.reshape(-1, g.shape[2])
        for layer in reversed(self.layers):
            x = layer.backward(x)
        x = x.reshape(g_out.shape[0], c["k"], -1)
        g_feats = np.zeros((c["n_in"], c["c_in"]))
        np.add.at(g_feats, c["groups"], x[:, :, 3:])
        return g_feats

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


@dataclass
class EncoderParams:
    """Three set-abstraction stages plus the fully connected head."""

    blocks: list
    head: list
    profile: str = "desk"

    def __post_init__(self):
        for name, t, g in self.named_tensors():
            assert t.shape == g.shape, name
            assert all(s > 0 for s in t.shape), name

    @property
    def embedding_dim(self):
        linears = [l for l in self.head if isinstance(l, Linear)]
        return linears[-1].W.shape[0]

    def named_tensors(self):
        out = []
        for bi, block in enumerate(self.blocks):
            for li, layer in enumerate(block.layers):
                for name, t, g in layer.tensors():
                    out.append((f"block{bi}.layer{li}.{name}", t, g))
        for li, layer in enumerate(self.head):
            for name, t, g in layer.tensors():
                out.append((f"head.layer{li}.{name}", t, g))
        return out

    def zero_grad(self):
        for block in self.blocks:
            block.zero_grad()
        for layer in self.head:
            layer.zero_grad()


_PROFILES = {
    # (n_samples, radius m, max group size, mlp widths)
    "desk": {"blocks": [(96, 0.10, 16, (16, 16, 16)),
                        (24, 0.30, 16, (32, 32, 32)),
                        (None, None, None, (64, 64, 128))],
             "head": (512, 512, 256)},
    "paper-shapes": {"blocks": [(512, 0.05, 128, (64, 64, 64)),
                                (128, 0.30, 128, (128, 128, 256)),
                                (None, None, None, (512, 512, 1024))],
                     "head": (4096, 4096, 2048)},
}


def build_encoder(profile="desk", c_in=6, rng=None, n_classes=3):
    assert profile in _PROFILES
    rng = np.random.default_rng(0) if rng is None else rng
    cfg = _PROFILES[profile]
    blocks = []
    prev = c_in
    for bi, (n, radius, max_k, widths) in enumerate(cfg["blocks"]):
        blocks.append(SetAbstraction.build(prev, widths, rng, n_samples=n,
                                           radius=radius, max_k=max_k,
                                           stratify=n_classes if bi == 0 else 0))
        prev = widths[-1]
    head = []
    for i, w in enumerate(cfg["head"]):
        head.append(Linear(prev, w, rng))
        if i < len(cfg["head"]) - 1:
            head.extend([GroupNorm(w), LeakyReLU()])
        prev = w
    return EncoderParams(blocks, head, profile)


def encode_cloud(cloud, params, rng):
    """Embedding of a segmented cloud; intermediates cached for backward."""
    x = cloud
    for block in params.blocks:
        x = block.forward(x, rng)
    v = x.features          # (1, C)
    for layer in params.head:
        v = layer.forward(v)
    return v[0]


def encode_backward(params, g_embedding):
    """Accumulate parameter gradients from an embedding gradient."""
    g = np.atleast_2d(np.asarray(g_embedding, dtype=float))
    for layer in reversed(params.head):
        g = layer.backward(g)
    for block in reversed(params.blocks):
        g = block.backward(g)
    return g


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named_tensors, profile, extra=None):
    """Flat little-endian float32 blob with a structured JSON header."""
    header = {"format_version": CHECKPOINT_VERSION, "profile": profile,
              "tensors": [[name, list(t.shape)] for name, t, _ in named_tensors]}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t, _ in named_tensors:
            f.write(np.asarray(t, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (header dict, {name: float64 array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise VersionMismatch(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {header.get('format_version')}")
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise VersionMismatch(f"truncated checkpoint at tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(float).reshape(shape)
    return header, tensors


def restore_tensors(named_tensors, loaded):
    """Copy loaded arrays into live parameter tensors by name."""
    for name, t, _ in named_tensors:
        if name not in loaded:
            raise VersionMismatch(f"missing tensor {name}")
        if tuple(loaded[name].shape) != t.shape:
            raise VersionMismatch(f"shape mismatch for {name}")
        t[:] = loaded[name]
