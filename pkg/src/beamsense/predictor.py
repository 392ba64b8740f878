"""Beam-pair predictor trained with plain SGD.

Per frame, three encoders map the user location, the pooled dynamic map
and the voxelized static environment to one fused feature vector.  A
two-layer GRU runs over the observation window and its last hidden state
feeds a linear head with one softmax column per base station.

Parameters are grouped (``user_encoder.0``, ``recurrent.1``, ...); a
group can be frozen so that neither gradients nor updates touch it.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NumericError, ParameterError, TrainingError
from .rng import substream

LOG_CLAMP = 1e-12

GROUPS = (
    "user_encoder.0", "user_encoder.1",
    "dyn_encoder.0", "dyn_encoder.1",
    "static_encoder.0", "static_encoder.1",
    "recurrent.0", "recurrent.1",
    "output_head",
)
DEFAULT_FREEZE = ("user_encoder.0", "dyn_encoder.0", "static_encoder.0",
                  "recurrent.0", "recurrent.1")


@dataclass(frozen=True)
class PredictorConfig:
    n_t: int = 32
    n_r: int = 8
    n_bs: int = 2
    window: int = 16
    horizon: int = 8
    pool: tuple = (18, 27)
    voxel_dims: tuple = (31, 21, 11)
    extent: tuple = (60.0, 40.0, 20.0)
    loc_center: tuple | None = None      # fitted location statistics (meters)
    loc_scale: tuple | None = None
    user_hidden: int = 32
    n_user: int = 12
    dyn_hidden: int = 128
    n_dyn: int = 128
    static_hidden: int = 128
    n_static: int = 116
    hidden: int = 128

    @property
    def n_beams(self):
        return self.n_t * self.n_r

    @property
    def dyn_in(self):
        return self.pool[0] * self.pool[1]

    @property
    def static_in(self):
        a, b, c = self.voxel_dims
        return 4 * a * b * c

    @property
    def fused(self):
        return self.n_user + self.n_dyn + self.n_static

    def shapes(self):
        H = self.hidden
        return {
            "user_encoder.0": {"W": (3, self.user_hidden), "b": (self.user_hidden,)},
            "user_encoder.1": {"W": (self.user_hidden, self.n_user), "b": (self.n_user,)},
            "dyn_encoder.0": {"W": (self.dyn_in, self.dyn_hidden), "b": (self.dyn_hidden,)},
            "dyn_encoder.1": {"W": (self.dyn_hidden, self.n_dyn), "b": (self.n_dyn,)},
            "static_encoder.0": {"W": (self.static_in, self.static_hidden),
                                 "b": (self.static_hidden,)},
            "static_encoder.1": {"W": (self.static_hidden, self.n_static), "b": (self.n_static,)},
            "recurrent.0": {"W": (self.fused, 3 * H), "U": (H, 3 * H),
                            "b": (3 * H,), "bh": (3 * H,)},
            "recurrent.1": {"W": (H, 3 * H), "U": (H, 3 * H), "b": (3 * H,), "bh": (3 * H,)},
            "output_head": {"W": (H, self.n_beams * self.n_bs), "b": (self.n_beams * self.n_bs,)},
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("pool", "voxel_dims", "extent", "loc_center", "loc_scale"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ModelParams:
    """Named tensor groups plus the set of frozen group names."""
    config: PredictorConfig
    groups: dict
    frozen: set = field(default_factory=set)
    seed: int = 0

    def copy(self):
        return ModelParams(self.config, {g: {k: v.copy() for k, v in t.items()}
                                         for g, t in self.groups.items()},
                           set(self.frozen), self.seed)

    def tensors(self):
        """``(group, name, array)`` in manifest order."""
        for g in GROUPS:
            for k, v in self.groups[g].items():
                yield g, k, v

    @property
    def n_params(self):
        return sum(v.size for _, _, v in self.tensors())

    def checksum(self, groups=None):
        crc = 0
        for g, k, v in self.tensors():
            if groups is None or g in groups:
                crc = zlib.crc32(np.ascontiguousarray(v, dtype="<f8").tobytes(), crc)
        return crc

    def with_frozen(self, names):
        names = set(names)
        unknown = names - set(GROUPS)
        if unknown:
            raise ParameterError(f"unknown parameter groups {sorted(unknown)}")
        p = self.copy()
        p.frozen = names
        return p


def init_params(cfg=None, seed=0, scale=1.0):
    """Glorot-uniform weights and zero biases."""
    cfg = cfg or PredictorConfig()
    groups = {}
    for g, shapes in cfg.shapes().items():
        rng = substream(seed, "init", g)
        t = {}
        for k, shp in shapes.items():
            if len(shp) == 2:
                lim = scale * np.sqrt(6.0 / (shp[0] + shp[1]))
                t[k] = rng.uniform(-lim, lim, size=shp)
            else:
                t[k] = np.zeros(shp)
        groups[g] = t
    return ModelParams(cfg, groups, set(), seed)


def zero_params(cfg=None):
    cfg = cfg or PredictorConfig()
    return ModelParams(cfg, {g: {k: np.zeros(s) for k, s in sh.items()}
                             for g, sh in cfg.shapes().items()})


# --------------------------------------------------------------------------
# inputs

def normalize_location(loc, cfg):
    """Location in meters to encoder input.

    Uses the fitted center and scale of ``cfg`` when present, otherwise
    maps the factory extent to ``[-1, 1]``.  ``cfg`` may also be a bare
    extent tuple.
    """
    loc = np.asarray(loc, float)
    if not isinstance(cfg, PredictorConfig):
        return 2.0 * loc / np.asarray(cfg, float) - 1.0
    if cfg.loc_center is None:
        return 2.0 * loc / np.asarray(cfg.extent, float) - 1.0
    return (loc - np.asarray(cfg.loc_center)) / np.asarray(cfg.loc_scale)


def fit_location(cfg, locations, floor=1.0):
    """Config whose location normalization standardizes ``locations``.

    Per-axis standard deviations below ``floor`` meters are raised to it,
    so a coordinate that barely moves is not blown up into noise.
    """
    x = np.asarray(locations, float).reshape(-1, 3)
    if len(x) == 0:
        raise ParameterError("no locations to fit")
    center = tuple(float(v) for v in x.mean(axis=0))
    scale = tuple(float(v) for v in np.maximum(x.std(axis=0), floor))
    return replace(cfg, loc_center=center, loc_scale=scale)


def pool_map(grid, pool):
    """Average-pool the occupied pixels of a dynamic map to ``pool`` cells."""
    g = np.asarray(grid)
    H, W = g.shape[-2:]
    ph, pw = pool
    if H % ph or W % pw:
        raise ParameterError(f"map {H}x{W} does not pool evenly to {ph}x{pw}")
    occ = (g != 0).astype(float)
    occ = occ.reshape(*g.shape[:-2], ph, H // ph, pw, W // pw)
    return occ.mean(axis=(-3, -1)).reshape(*g.shape[:-2], ph * pw)


def static_input(pimg):
    """Flattened offsets and occupancy of a pseudo image, scaled to unit norm.

    The raw vector has thousands of nonzero entries; without the scaling
    its first layer swamps the other encoders under plain SGD.
    """
    x = np.concatenate([np.asarray(pimg.grid, float).ravel(),
                        np.asarray(pimg.occupancy, float).ravel()])
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


@dataclass
class Sample:
    """One observation window.

    ``user`` is ``(l, 3)`` in meters, ``dynamic`` is ``(l, H, W)`` maps or
    ``(l, P)`` pooled cells, ``static`` is a pseudo image or its flattened
    input and ``label`` holds one beam class per base station.
    """
    user: np.ndarray
    dynamic: np.ndarray
    static: object
    label: np.ndarray
    horizon: int = 8


@dataclass
class BeamDataset:
    """Frame-level inputs plus window index arrays.

    Sample ``i`` observes frames ``start[i] .. start[i] + l - 1`` of the
    frame arrays and uses static input ``env[i]``.
    """
    frame_user: np.ndarray      # (F, 3) meters
    frame_dyn: np.ndarray       # (F, P)
    static: np.ndarray          # (E, S)
    start: np.ndarray           # (n,)
    env: np.ndarray             # (n,)
    labels: np.ndarray          # (n, B) beam classes
    window: int = 16
    sample_id: np.ndarray | None = None

    def __post_init__(self):
        if self.sample_id is None:
            self.sample_id = np.arange(len(self.start))

    def __len__(self):
        return len(self.start)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return BeamDataset(self.frame_user, self.frame_dyn, self.static, self.start[idx],
                           self.env[idx], self.labels[idx], self.window, self.sample_id[idx])

    def batch(self, idx):
        frames = self.start[idx, None] + np.arange(self.window)
        return self.frame_user[frames], self.frame_dyn[frames], self.env[idx]

    @classmethod
    def from_samples(cls, samples, cfg):
        users, dyns, statics, labels = [], [], [], []
        for s in samples:
            if len(s.user) != cfg.window:
                raise ParameterError(f"sample has {len(s.user)} frames, expected {cfg.window}")
            users.append(np.asarray(s.user, float))
            d = np.asarray(s.dynamic, float)
            dyns.append(pool_map(d, cfg.pool) if d.ndim == 3 else d)
            st = static_input(s.static) if hasattr(s.static, "occupancy") else np.asarray(s.static, float)
            statics.append(st)
            labels.append(np.asarray(s.label, dtype=np.int64))
        n, l = len(samples), cfg.window
        return cls(np.concatenate(users), np.concatenate(dyns), np.stack(statics),
                   np.arange(n) * l, np.arange(n), np.stack(labels), l)


# --------------------------------------------------------------------------
# forward / backward

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _encoders(p, U, D, S):
    g = p.groups
    a1 = U @ g["user_encoder.0"]["W"] + g["user_encoder.0"]["b"]
    u1 = np.tanh(a1)
    u = np.tanh(u1 @ g["user_encoder.1"]["W"] + g["user_encoder.1"]["b"])
    c1 = D @ g["dyn_encoder.0"]["W"] + g["dyn_encoder.0"]["b"]
    d1 = np.maximum(c1, 0.0)
    d = d1 @ g["dyn_encoder.1"]["W"] + g["dyn_encoder.1"]["b"]
    e1 = S @ g["static_encoder.0"]["W"] + g["static_encoder.0"]["b"]
    s1 = np.maximum(e1, 0.0)
    s = s1 @ g["static_encoder.1"]["W"] + g["static_encoder.1"]["b"]
    return (u1, u, d1, d, s1, s)


def extract_user_features(params, location):
    """12-dim user feature of one location (meters)."""
    x = normalize_location(location, params.config)
    g = params.groups
    u1 = np.tanh(x @ g["user_encoder.0"]["W"] + g["user_encoder.0"]["b"])
    return np.tanh(u1 @ g["user_encoder.1"]["W"] + g["user_encoder.1"]["b"])


def extract_dynamic_features(params, grid):
    """128-dim feature of one dynamic map (full grid or pooled cells)."""
    cfg = params.config
    x = np.asarray(grid, float)
    x = pool_map(x, cfg.pool) if x.ndim == 2 else x
    if x.shape != (cfg.dyn_in,):
        raise ParameterError(f"pooled map has {x.size} cells, expected {cfg.dyn_in}")
    g = params.groups
    h = np.maximum(x @ g["dyn_encoder.0"]["W"] + g["dyn_encoder.0"]["b"], 0.0)
    return h @ g["dyn_encoder.1"]["W"] + g["dyn_encoder.1"]["b"]


def extract_static_features(params, pimg):
    """116-dim feature of a pseudo image."""
    cfg = params.config
    if hasattr(pimg, "occupancy"):
        if tuple(pimg.dims) != tuple(cfg.voxel_dims):
            raise ParameterError(f"pseudo image dims {pimg.dims} != {cfg.voxel_dims}")
        x = static_input(pimg)
    else:
        x = np.asarray(pimg, float)
    if x.shape != (cfg.static_in,):
        raise ParameterError(f"static input has {x.size} values, expected {cfg.static_in}")
    g = params.groups
    h = np.maximum(x @ g["static_encoder.0"]["W"] + g["static_encoder.0"]["b"], 0.0)
    return h @ g["static_encoder.1"]["W"] + g["static_encoder.1"]["b"]


def _gru_forward(layer, X):
    """Run one GRU layer over ``X`` of shape ``(n, l, in)``."""
    W, Uh, b, bh = layer["W"], layer["U"], layer["b"], layer["bh"]
    n, l, _ = X.shape
    H = Uh.shape[0]
    GX = X @ W + b
    h = np.zeros((n, H))
    hs = np.zeros((n, l + 1, H))
    cache = []
    for t in range(l):
        gh = h @ Uh + bh
        gx = GX[:, t]
        z = _sigmoid(gx[:, :H] + gh[:, :H])
        r = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        nn = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * nn + z * h
        hs[:, t + 1] = h
        cache.append((z, r, nn, gh[:, 2 * H:]))
    return hs, cache


def _gru_backward(layer, X, hs, cache, dH):
    """Gradients of one GRU layer; ``dH`` is the loss gradient per output step."""
    W, Uh = layer["W"], layer["U"]
    n, l, _ = X.shape
    H = Uh.shape[0]
    dGX = np.zeros((n, l, 3 * H))
    dU = np.zeros_like(Uh)
    dbh = np.zeros(3 * H)
    dh = np.zeros((n, H))
    for t in range(l - 1, -1, -1):
        z, r, nn, ghn = cache[t]
        hp = hs[:, t]
        dh = dh + dH[:, t]
        dnn = dh * (1.0 - z)
        dz = dh * (hp - nn)
        dh_prev = dh * z
        dan = dnn * (1.0 - nn * nn)
        dr = dan * ghn
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dgx = np.concatenate([daz, dar, dan], axis=1)
        dgh = np.concatenate([daz, dar, dan * r], axis=1)
        dGX[:, t] = dgx
        dU += hp.T @ dgh
        dbh += dgh.sum(0)
        dh = dh_prev + dgh @ Uh.T
    flat = dGX.reshape(n * l, 3 * H)
    grads = {"W": X.reshape(n * l, -1).T @ flat, "U": dU, "b": flat.sum(0), "bh": dbh}
    dX = (flat @ W.T).reshape(n, l, -1)
    return grads, dX


def _forward(p, U, D, env, S):
    """Batch forward; returns probabilities ``(n, B, NB)`` and a cache."""
    cfg = p.config
    n, l, _ = U.shape
    U = normalize_location(U, cfg)
    uniq, inv = np.unique(env, return_inverse=True)
    u1, u, d1, d, s1, s = _encoders(p, U, D, S[uniq])
    X = np.concatenate([u, d, np.broadcast_to(s[inv][:, None, :], (n, l, cfg.n_static))], axis=2)
    hs1, c1 = _gru_forward(p.groups["recurrent.0"], X)
    H1 = hs1[:, 1:]
    hs2, c2 = _gru_forward(p.groups["recurrent.1"], H1)
    hl = hs2[:, -1]
    logits = hl @ p.groups["output_head"]["W"] + p.groups["output_head"]["b"]
    probs = _softmax(logits.reshape(n, cfg.n_bs, cfg.n_beams))
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite activations in forward pass")
    cache = (U, D, S[uniq], inv, u1, u, d1, d, s1, s, X, hs1, c1, H1, hs2, c2, hl)
    return probs, cache


def _backward(p, probs, labels, cache):
    cfg = p.config
    U, D, Su, inv, u1, u, d1, d, s1, s, X, hs1, c1, H1, hs2, c2, hl = cache
    n, l, _ = U.shape
    g = p.groups
    dlog = probs.copy()
    dlog[np.arange(n)[:, None], np.arange(cfg.n_bs)[None, :], labels] -= 1.0
    dlog = dlog.reshape(n, -1) / n
    grads = {"output_head": {"W": hl.T @ dlog, "b": dlog.sum(0)}}
    dH2 = np.zeros((n, l, cfg.hidden))
    dH2[:, -1] = dlog @ g["output_head"]["W"].T
    grads["recurrent.1"], dH1 = _gru_backward(g["recurrent.1"], H1, hs2, c2, dH2)
    grads["recurrent.0"], dX = _gru_backward(g["recurrent.0"], X, hs1, c1, dH1)
    nu, nd = cfg.n_user, cfg.n_dyn
    du = dX[:, :, :nu]
    dd = dX[:, :, nu:nu + nd]
    ds = np.zeros((len(Su), cfg.n_static))
    np.add.at(ds, inv, dX[:, :, nu + nd:].sum(axis=1))

    def dense(x, dy, name):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads[name] = {"W": x2.T @ dy2, "b": dy2.sum(0)}
        return dy @ g[name]["W"].T

    du_pre = du * (1.0 - u * u)
    du1 = dense(u1, du_pre, "user_encoder.1") * (1.0 - u1 * u1)
    dense(U, du1, "user_encoder.0")
    dd1 = dense(d1, dd, "dyn_encoder.1") * (d1 > 0)
    dense(D, dd1, "dyn_encoder.0")
    ds1 = dense(s1, ds, "static_encoder.1") * (s1 > 0)
    dense(Su, ds1, "static_encoder.0")
    return grads


def _loss(probs, labels):
    n = len(probs)
    picked = probs[np.arange(n)[:, None], np.arange(probs.shape[1])[None, :], labels]
    return -np.log(np.maximum(picked, LOG_CLAMP)).sum(axis=1)


def forward(params, sample):
    """Prediction matrix ``(N_t N_r, B)`` of one sample; columns sum to one."""
    ds = sample if isinstance(sample, BeamDataset) else BeamDataset.from_samples([sample], params.config)
    probs, _ = _forward(params, *ds.batch(np.arange(len(ds))), ds.static)
    out = probs.transpose(0, 2, 1)
    return out[0] if not isinstance(sample, BeamDataset) else out


def predict(params, dataset, batch=256):
    """Probabilities ``(n, B, NB)`` for every sample of a dataset."""
    out = []
    for i in range(0, len(dataset), batch):
        idx = np.arange(i, min(i + batch, len(dataset)))
        probs, _ = _forward(params, *dataset.batch(idx), dataset.static)
        out.append(probs)
    if not out:
        return np.zeros((0, params.config.n_bs, params.config.n_beams))
    return np.concatenate(out)


def cross_entropy(pred, label):
    """Summed column cross-entropy of prediction ``(NB, B)`` against a label.

    ``label`` is a one-hot ``(NB, B)`` matrix or one class index per column.
    """
    pred = np.asarray(pred, float)
    label = np.asarray(label)
    if label.ndim == 1:
        onehot = np.zeros_like(pred)
        onehot[label, np.arange(pred.shape[1])] = 1.0
        label = onehot
    if label.shape != pred.shape:
        raise ParameterError("prediction and label shapes differ")
    return float(-np.sum(label * np.log(np.maximum(pred, LOG_CLAMP))))


def gradient(params, batch):
    """Mean loss gradient over a batch; frozen groups get exact zeros.

    ``batch`` is a :class:`BeamDataset` or a list of :class:`Sample`.
    Returns ``(grads, mean_loss)``.
    """
    ds = batch if isinstance(batch, BeamDataset) else BeamDataset.from_samples(batch, params.config)
    if len(ds) == 0:
        raise ParameterError("empty batch")
    idx = np.arange(len(ds))
    probs, cache = _forward(params, *ds.batch(idx), ds.static)
    grads = _backward(params, probs, ds.labels, cache)
    for gname in params.frozen:
        grads[gname] = {k: np.zeros_like(v) for k, v in params.groups[gname].items()}
    for gname, t in grads.items():
        for v in t.values():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite gradient in {gname}")
    return grads, float(_loss(probs, ds.labels).mean())


# --------------------------------------------------------------------------
# evaluation

def top_k_hits(probs, labels, k):
    """Per (sample, BS) hit flags; ties rank the lower index first."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    nb = probs.shape[-1]
    if not 1 <= k <= nb:
        raise ParameterError(f"k={k} outside [1, {nb}]")
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)
    higher = (probs > p_true).sum(-1)
    tied_before = ((probs == p_true) & (np.arange(nb) < labels[..., None])).sum(-1)
    return higher + tied_before < k


def top_k_accuracy(preds, labels, k):
    """Fraction of (sample, BS) pairs whose true beam is in the top ``k``.

    ``preds`` is a list of ``(NB, B)`` matrices and ``labels`` one-hot
    matrices or class indices of shape ``(B,)``.
    """
    P = np.stack([np.asarray(p) for p in preds]).transpose(0, 2, 1)
    L = np.stack([np.asarray(l) for l in labels])
    if L.ndim == 3:
        L = L.argmax(axis=1)
    return float(top_k_hits(P, L, k).mean())


def evaluate(params, dataset, ks=(1, 5, 10)):
    """Mean loss and Top-k accuracies on a dataset.

    ``k`` larger than the codebook size counts every beam (accuracy 1).
    """
    if len(dataset) == 0:
        return {"loss": float("nan"), **{f"top{k}": float("nan") for k in ks}}
    probs = predict(params, dataset)
    out = {"loss": float(_loss(probs, dataset.labels).mean())}
    for k in ks:
        out[f"top{k}"] = float(top_k_hits(probs, dataset.labels, min(k, probs.shape[-1])).mean())
    return out


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 20
    batch: int = 32
    seed: int = 0


@dataclass
class History:
    rows: list = field(default_factory=list)        # dicts: epoch, split, loss, top1, top5, top10
    best_epoch: int = 0
    best_top1: float = -1.0
    best_params: ModelParams | None = None

    def series(self, split, key="top1"):
        return [r[key] for r in self.rows if r["split"] == split]


def _sgd_epoch(params, data, cfg, epoch):
    order = substream(cfg.seed, "shuffle", epoch).permutation(len(data))
    losses = []
    for i in range(0, len(order), cfg.batch):
        grads, loss = gradient(params, data.subset(order[i:i + cfg.batch]))
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        losses.append(loss * len(order[i:i + cfg.batch]))
        if cfg.lr == 0.0:
            continue
        for gname in GROUPS:
            if gname in params.frozen:
                continue
            for k, v in params.groups[gname].items():
                v -= cfg.lr * grads[gname][k]
    return float(np.sum(losses) / len(data))


def train(params, dataset, cfg=None, val=None, eval_train=True):
    """Mini-batch SGD on the non-frozen groups.

    Records train (and validation) loss and Top-1/5/10 after every epoch
    and keeps a copy of the parameters with the best validation Top-1
    (training Top-1 without validation data).
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ParameterError("empty training set")
    p = params.copy()
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        train_loss = _sgd_epoch(p, dataset, cfg, epoch)
        row = {"epoch": epoch, "split": "train", "loss": train_loss,
               "top1": np.nan, "top5": np.nan, "top10": np.nan}
        if eval_train:
            m = evaluate(p, dataset)
            row.update({k: m[k] for k in ("top1", "top5", "top10")})
        hist.rows.append(row)
        score = row["top1"]
        if val is not None and len(val):
            m = evaluate(p, val)
            hist.rows.append({"epoch": epoch, "split": "val", **m})
            score = m["top1"]
        if score > hist.best_top1:
            hist.best_top1, hist.best_epoch = score, epoch
            hist.best_params = p.copy()
    if hist.best_params is None:
        hist.best_params = p.copy()
    return p, hist


def fine_tune(pretrained, target, freeze_spec=DEFAULT_FREEZE, cfg=None, val=None):
    """Continue training with the groups in ``freeze_spec`` held fixed."""
    p = pretrained.with_frozen(freeze_spec)
    out, hist = train(p, target, cfg, val)
    return out, hist


# --------------------------------------------------------------------------
# model files

def save_model(params, directory):
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = [{"name": f"{g}.{k}", "group": g, "tensor": k, "shape": list(v.shape),
               "frozen": g in params.frozen} for g, k, v in params.tensors()]
    manifest = {"format": "beamsense-model/1", "seed": int(params.seed),
                "config": asdict(params.config), "layers": layers,
                "n_params": int(params.n_params)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(d / "params.bin", "wb") as fh:
        for _, _, v in params.tensors():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = PredictorConfig.from_dict(manifest["config"])
    raw = np.fromfile(d / "params.bin", dtype="<f8")
    expected = sum(int(np.prod(layer["shape"])) for layer in manifest["layers"])
    if expected != raw.size:
        raise ParameterError(f"params.bin holds {raw.size} values, manifest expects {expected}")
    groups = {g: {} for g in GROUPS}
    frozen = set()
    pos = 0
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"]))
        groups[layer["group"]][layer["tensor"]] = raw[pos:pos + n].reshape(layer["shape"]).astype(float)
        pos += n
        if layer["frozen"]:
            frozen.add(layer["group"])
    return ModelParams(cfg, groups, frozen, manifest["seed"])
