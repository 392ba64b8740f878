"""Environment sensing from segmentation maps and static point clouds.

The dynamic-scatterer detector labels every class mask into 4-connected
instances, drops speck-sized instances, tracks instances through a window
of frames by maximal overlap and classifies each track with a Ljung-Box
white-noise test on its pixel-difference sequence.  A static point cloud
is summarised as a voxel grid of mean local offsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
from scipy.special import gammainc

from .errors import ParameterError


# --------------------------------------------------------------------------
# masks and metrics

def _grid(frame):
    return frame.class_grid if hasattr(frame, "class_grid") else np.asarray(frame)


def class_mask(frame, q):
    """Boolean mask of pixels labelled ``q``."""
    return _grid(frame) == q


def seg_metrics(pred, truth, n_classes=None):
    """Pixel precision and mean IoU of ``pred`` against ``truth``.

    Classes absent from both grids do not enter the mean.
    """
    p = _grid(pred).ravel().astype(np.int64)
    t = _grid(truth).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ParameterError("prediction and truth grids differ in size")
    precision = float(np.mean(p == t))
    n = int(max(p.max(initial=0), t.max(initial=0)) + 1) if n_classes is None else n_classes
    conf = np.bincount(t * n + p, minlength=n * n).reshape(n, n)
    inter = np.diag(conf).astype(float)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    miou = float(np.mean(inter[present] / union[present])) if present.any() else 1.0
    return precision, miou


# --------------------------------------------------------------------------
# connected components

@dataclass
class InstanceMap:
    """One connected instance, stored as flat pixel indices."""
    pixels: np.ndarray
    shape: tuple
    class_id: int
    instance_key: int

    @property
    def mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m.flat[self.pixels] = True
        return m

    @property
    def size(self):
        return len(self.pixels)


@numba.njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True)
def _two_pass(grid):
    """Label 4-connected regions of equal nonzero value.

    First pass: provisional labels from the up and left neighbours, with
    equivalences recorded in a union-find forest.  Second pass: replace
    every label by its root, renumbered 1.. in raster order.
    """
    rows, cols = grid.shape
    labels = np.zeros((rows, cols), dtype=np.int32)
    parent = np.zeros(rows * cols // 2 + 2, dtype=np.int32)
    nxt = 1
    for i in range(rows):
        for j in range(cols):
            v = grid[i, j]
            if v == 0:
                continue
            up = labels[i - 1, j] if i > 0 and grid[i - 1, j] == v else 0
            left = labels[i, j - 1] if j > 0 and grid[i, j - 1] == v else 0
            if up == 0 and left == 0:
                if nxt >= parent.shape[0]:
                    grown = np.zeros(parent.shape[0] * 2, dtype=np.int32)
                    grown[:parent.shape[0]] = parent
                    parent = grown
                parent[nxt] = nxt
                labels[i, j] = nxt
                nxt += 1
            elif up == 0 or left == 0 or up == left:
                labels[i, j] = up if up else left
            else:
                ru = _find(parent, up)
                rl = _find(parent, left)
                if ru < rl:
                    parent[rl] = ru
                    labels[i, j] = ru
                else:
                    parent[ru] = rl
                    labels[i, j] = rl
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for i in range(rows):
        for j in range(cols):
            lab = labels[i, j]
            if lab == 0:
                continue
            r = _find(parent, lab)
            if remap[r] == 0:
                count += 1
                remap[r] = count
            labels[i, j] = remap[r]
    return labels, count


def label_grid(grid):
    """Instance ids of every nonzero region (equal values, 4-connected).

    Returns ``(labels, n)``; ids are numbered 1..n in raster order of the
    first pixel of each region.
    """
    g = np.ascontiguousarray(grid)
    if g.dtype == np.bool_:
        g = g.view(np.uint8)
    return _two_pass(g)


def two_pass_label(mask, q=1):
    """4-connected components of a binary mask as :class:`InstanceMap`."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = label_grid(mask)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 2))
    return [InstanceMap(order[bounds[k]:bounds[k + 1]], mask.shape, q, k)
            for k in range(1, n + 1)]


def refine_keep(sizes, mu):
    """Keep-flags after repeatedly dropping the smallest undersized instance.

    The smallest instance is removed while its size is below ``mu`` times
    the mean size of the other remaining instances; the loop stops at the
    first instance that survives.  Ties go to the lower index.
    """
    sizes = np.asarray(sizes, dtype=float)
    n = len(sizes)
    keep = np.ones(n, dtype=bool)
    if n <= 1:
        return keep
    order = np.argsort(sizes, kind="stable")
    s = sizes[order]
    rest = np.cumsum(s[::-1])[::-1]          # sum of s[i:]
    for i in range(n - 1):
        mean_others = (rest[i] - s[i]) / (n - i - 1)
        if s[i] < mu * mean_others:
            keep[order[i]] = False
        else:
            break
    return keep


def refine_instances(maps, mu=0.1):
    """Drop speck-sized instances of one class (see :func:`refine_keep`)."""
    if not 0.0 < mu < 1.0:
        raise ParameterError("mu must lie in (0, 1)")
    keep = refine_keep([m.size for m in maps], mu)
    return [m for m, k in zip(maps, keep) if k]


# --------------------------------------------------------------------------
# difference sequences and the Ljung-Box test

@dataclass
class DiffSequence:
    values: np.ndarray
    source: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values)

    def __len__(self):
        return len(self.values)


def diff_sequence(frames, source=()):
    """Pixels differing from the first mask, for each later mask."""
    masks = [f.mask if isinstance(f, InstanceMap) else np.asarray(f, dtype=bool) for f in frames]
    if len(masks) < 2:
        raise ParameterError("need at least two frames")
    first = masks[0]
    if any(m.shape != first.shape for m in masks):
        raise ParameterError("masks differ in size")
    vals = np.array([np.count_nonzero(m != first) for m in masks[1:]], dtype=np.int64)
    return DiffSequence(vals, source)


def _values(seq):
    return np.asarray(seq.values if isinstance(seq, DiffSequence) else seq, dtype=float)


def sample_autocorrelation(seq, r):
    """Lag-``r`` sample autocorrelation; 0 for a constant sequence."""
    s = _values(seq)
    T = len(s)
    if not 0 < r < T - 1:
        raise ParameterError(f"lag {r} outside (0, {T - 1})")
    c = s - s.mean()
    den = np.dot(c, c)
    if den == 0.0:
        return 0.0
    return float(np.dot(c[r:], c[:-r]) / den)


def autocorrelations(S, m):
    """Lags ``1..m`` of every row of ``S``; shape ``(n, m)``."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    c = S - S.mean(axis=1, keepdims=True)
    den = np.einsum("ij,ij->i", c, c)
    T = S.shape[1]
    rho = np.stack([np.einsum("ij,ij->i", c[:, r:], c[:, :T - r]) for r in range(1, m + 1)], 1)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den[:, None] > 0, rho / safe[:, None], 0.0)


def ljung_box_q(seq, m=4):
    """Ljung-Box statistic ``T (T + 2) sum_j rho_j^2 / (T - j)``."""
    s = _values(seq)
    T = len(s)
    if not 0 < m < T - 1:
        raise ParameterError(f"lag order {m} outside (0, {T - 1})")
    rho = np.array([sample_autocorrelation(s, j) for j in range(1, m + 1)])
    return float(T * (T + 2) * np.sum(rho ** 2 / (T - np.arange(1, m + 1))))


def ljung_box_batch(S, m=4):
    """:func:`ljung_box_q` of every row of ``S``."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T = S.shape[1]
    if not 0 < m < T - 1:
        raise ParameterError(f"lag order {m} outside (0, {T - 1})")
    rho = autocorrelations(S, m)
    return T * (T + 2) * np.sum(rho ** 2 / (T - np.arange(1, m + 1)), axis=1)


@lru_cache(maxsize=None)
def chi_square_quantile(p, dof):
    """Inverse chi-square CDF by bisection on the regularized gamma function."""
    if not 0.0 < p < 1.0:
        raise ParameterError("p must lie in (0, 1)")
    if dof < 1:
        raise ParameterError("dof must be at least 1")
    k = dof / 2.0
    lo, hi = 0.0, float(max(dof, 1))
    while gammainc(k, hi / 2.0) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gammainc(k, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass
class LjungBoxResult:
    q_stat: float
    threshold: float
    lags: int
    alpha: float
    is_dynamic: bool


def classify_dynamic(seq, m=4, alpha=0.15):
    """Reject white noise (verdict dynamic) when Q exceeds the ``1 - alpha`` quantile."""
    q = ljung_box_q(seq, m)
    thr = chi_square_quantile(1.0 - alpha, m)
    return LjungBoxResult(q, thr, m, alpha, bool(q > thr))


# --------------------------------------------------------------------------
# dynamic-scatterer detection

@dataclass
class TrackRecord:
    class_id: int
    instance_key: int
    q_stat: float
    threshold: float
    is_dynamic: bool
    start_frame: int
    size: int
    truth_instance: int = 0
    truth_dynamic: bool | None = None


@dataclass
class DetectionResult:
    """Dynamic maps of one window plus one table row per track.

    Track ``k`` (1-based ``instance_key``) is row ``k - 1`` of each array.
    """
    maps: np.ndarray               # (l, H, W) class grids with static pixels zeroed
    class_id: np.ndarray
    q_stat: np.ndarray
    is_dynamic: np.ndarray
    start_frame: np.ndarray
    size: np.ndarray
    threshold: float
    truth_instance: np.ndarray | None = None
    truth_dynamic: np.ndarray | None = None

    def __len__(self):
        return len(self.class_id)

    def records(self, min_size=1):
        """Tracks whose first mask has at least ``min_size`` pixels."""
        out = []
        for i in np.flatnonzero(self.size >= min_size):
            td = None if self.truth_dynamic is None else bool(self.truth_dynamic[i])
            ti = 0 if self.truth_instance is None else int(self.truth_instance[i])
            out.append(TrackRecord(int(self.class_id[i]), int(i + 1), float(self.q_stat[i]),
                                   self.threshold, bool(self.is_dynamic[i]),
                                   int(self.start_frame[i]), int(self.size[i]), ti, td))
        return out


@numba.njit(cache=True)
def _greedy_match(order, ia, ib, prev_tracks, n_cur, n_prev):
    """One-to-one assignment by descending overlap (``order`` pre-sorted)."""
    mapping = np.zeros(n_cur, dtype=np.int64)
    used = np.zeros(n_prev, dtype=np.bool_)
    for k in order:
        a = ia[k]
        b = ib[k]
        if used[a] or mapping[b] != 0:
            continue
        used[a] = True
        mapping[b] = prev_tracks[a]
    return mapping


def instance_image(grid, mu=0.1, classes=None):
    """Refined instance ids of every class of one frame.

    Returns ``(ids, cls)`` where ``ids`` holds a frame-unique positive id
    per surviving instance and ``cls[id]`` its class.
    """
    grid = np.asarray(grid)
    if classes is not None:
        grid = np.where(np.isin(grid, list(classes)), grid, 0)
    labels, n = label_grid(grid)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    cls = np.zeros(n + 1, dtype=np.int64)
    nz = np.flatnonzero(flat)
    cls[flat[nz]] = grid.ravel()[nz]
    keep = np.zeros(n + 1, dtype=bool)
    for q in np.unique(cls[1:]):
        ids = np.flatnonzero(cls == q)
        ids = ids[ids > 0]
        keep[ids] = refine_keep(sizes[ids], mu)
    # renumber kept ids 1..n'
    new = np.zeros(n + 1, dtype=np.int64)
    kept = np.flatnonzero(keep)
    new[kept] = np.arange(1, len(kept) + 1)
    return new[labels], np.concatenate([[0], cls[kept]])


def _pair_counts(a, b):
    """Overlap counts of nonzero ids ``a[p], b[p]`` as sorted (ia, ib, count)."""
    sel = (a != 0) & (b != 0)
    if not sel.any():
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    av = a[sel].astype(np.int64)
    bv = b[sel].astype(np.int64)
    key = av * (int(bv.max()) + 1) + bv
    uniq, cnt = np.unique(key, return_counts=True)
    return uniq // (int(bv.max()) + 1), uniq % (int(bv.max()) + 1), cnt


def detect_dynamic_scatterers(frames, mu=0.1, m=4, alpha=0.15, *, truth=None,
                              dynamic_ids=None, classes=None):
    """Keep only the pixels of instances classified dynamic.

    Parameters
    ----------
    frames : sequence of SegMapFrame or array, shape (l, H, W)
        One window of class grids.
    mu, m, alpha : float, int, float
        Refinement ratio, Ljung-Box lag order and test size.
    truth : array, shape (l, H, W), optional
        Ground-truth instance ids; with ``dynamic_ids`` each record gets
        the majority truth instance of its first mask and its true verdict.
    classes : iterable of int, optional
        Classes analysed; default every nonzero class.

    Returns
    -------
    DetectionResult
    """
    grids = np.stack([_grid(f) for f in frames])
    l = len(grids)
    if l < m + 2:
        raise ParameterError(f"need at least m + 2 = {m + 2} frames, got {l}")
    shape = grids.shape[1:]
    thr = chi_square_quantile(1.0 - alpha, m)

    # refined instance ids per frame
    ids, cls = [], []
    for g in grids:
        a, c = instance_image(g, mu, classes)
        ids.append(a.ravel())
        cls.append(c)

    # greedy maximal-overlap tracking; tracks are numbered globally
    track_of = [np.arange(len(cls[0]))]          # instance id -> track id, frame 0
    start = [np.zeros(len(cls[0]) - 1, dtype=np.int64)]
    tclass = [cls[0][1:]]
    n_tracks = len(cls[0]) - 1
    for t in range(1, l):
        prev, cur = ids[t - 1], ids[t]
        ia, ib, cnt = _pair_counts(prev, cur)
        order = np.lexsort((ib, ia, -cnt))
        mapping = _greedy_match(order, ia, ib, track_of[t - 1], len(cls[t]), len(cls[t - 1]))
        born = np.flatnonzero(mapping[1:] == 0) + 1
        mapping[born] = n_tracks + 1 + np.arange(len(born))
        n_tracks += len(born)
        start.append(np.full(len(born), t, dtype=np.int64))
        tclass.append(cls[t][born])
        track_of.append(mapping)
    start = np.concatenate(start)
    tclass = np.concatenate(tclass).astype(np.int64)

    # per-frame track images; difference counts against each track's first mask
    T_img = np.stack([track_of[t][ids[t]] for t in range(l)])      # (l, HW)
    n_tr = n_tracks + 1
    first_size = np.zeros(n_tr, dtype=np.int64)
    for s in np.unique(start):
        sizes_s = np.bincount(T_img[s], minlength=n_tr)
        born = np.flatnonzero(start == s) + 1
        first_size[born] = sizes_s[born]
    diffs = np.zeros((n_tr, l - 1), dtype=np.int64)
    for t in range(1, l):
        row = T_img[t]
        nz = np.flatnonzero(row)
        k = row[nz]
        size_t = np.bincount(k, minlength=n_tr)
        s_of = start[k - 1]
        same = T_img[s_of, nz] == k
        inter = np.bincount(k[same], minlength=n_tr)
        diffs[:, t - 1] = size_t + first_size - 2 * inter
    # a track only has values after its start frame
    is_dyn = np.zeros(n_tr, dtype=bool)
    qstat = np.zeros(n_tr)
    for s in np.unique(start):
        members = np.flatnonzero(start == s) + 1
        T = l - 1 - s
        if T < m + 2:
            continue
        seqs = diffs[members, s:]
        q = ljung_box_batch(seqs, m)
        qstat[members] = q
        is_dyn[members] = q > thr

    maps = np.where(is_dyn[T_img], grids.reshape(l, -1), 0).reshape(l, *shape)

    truth_inst = truth_dyn = None
    if truth is not None:
        truth_inst = np.zeros(n_tr, dtype=np.int64)
        tr = np.stack([np.asarray(x) for x in truth]).reshape(l, -1)
        for s in np.unique(start):
            members = np.flatnonzero(start == s) + 1
            row = T_img[s]
            nz = np.flatnonzero(row)
            ka, kb, cnt = _pair_counts(row[nz], tr[s, nz].astype(np.int64) + 1)
            # per track keep the truth id of largest overlap (lowest id on ties)
            order = np.lexsort((kb, -cnt, ka))
            ka, kb = ka[order], kb[order]
            first = np.r_[True, ka[1:] != ka[:-1]]
            best = np.zeros(n_tr, dtype=np.int64)
            best[ka[first]] = kb[first] - 1
            truth_inst[members] = best[members]
        truth_inst = truth_inst[1:]
        if dynamic_ids is not None:
            truth_dyn = np.isin(truth_inst, np.asarray(list(dynamic_ids), dtype=np.int64))

    return DetectionResult(maps, tclass, qstat[1:], is_dyn[1:], start, first_size[1:], thr,
                           truth_inst, truth_dyn)


def object_verdicts(result):
    """Verdict of each ground-truth object in one detection window.

    Every object is judged by its largest track (ties to the earlier
    track).  Requires a result computed with ``truth`` and ``dynamic_ids``.

    Returns
    -------
    dict
        ``truth_id -> (predicted_dynamic, truly_dynamic)``; background
        (id 0) is skipped.
    """
    if result.truth_instance is None or result.truth_dynamic is None:
        raise ParameterError("detection result carries no ground truth")
    order = np.lexsort((np.arange(len(result)), -result.size))
    out = {}
    for i in order:
        tid = int(result.truth_instance[i])
        if tid == 0 or tid in out:
            continue
        out[tid] = (bool(result.is_dynamic[i]), bool(result.truth_dynamic[i]))
    return out


def window_starts(n_frames, l):
    """Start frames of consecutive windows covering ``n_frames`` frames.

    Windows are disjoint except the last, which is moved back to end at
    the final frame.
    """
    if n_frames < l:
        raise ParameterError(f"path of {n_frames} frames is shorter than window {l}")
    starts = list(range(0, n_frames - l + 1, l))
    if starts[-1] + l < n_frames:
        starts.append(n_frames - l)
    return starts


def detect_path(frames, l=16, mu=0.1, m=4, alpha=0.15, *, truth=None, dynamic_ids=None,
                min_size=1):
    """Run :func:`detect_dynamic_scatterers` on every window of a path.

    Returns the per-frame dynamic maps and ``(window_start, record)`` pairs
    for tracks of at least ``min_size`` pixels.  Frames covered by two
    windows keep the result of the first.
    """
    n = len(frames)
    out = None
    records = []
    done = 0
    for s in window_starts(n, l):
        win = [frames[i] for i in range(s, s + l)]
        tw = None if truth is None else [truth[i] for i in range(s, s + l)]
        res = detect_dynamic_scatterers(win, mu, m, alpha, truth=tw, dynamic_ids=dynamic_ids)
        if out is None:
            out = np.zeros((n, *res.maps.shape[1:]), dtype=res.maps.dtype)
        out[done:s + l] = res.maps[done - s:]
        done = s + l
        records.extend((s, r) for r in res.records(min_size))
    return out, records


# --------------------------------------------------------------------------
# voxelization

@dataclass
class PseudoImage:
    grid: np.ndarray          # (a, b, c, 3) mean offset from voxel center
    cube: tuple               # (lo, hi) corners
    dims: tuple
    occupancy: np.ndarray     # (a, b, c) bool


def voxel_indices(points, cube, dims):
    """Voxel index per point; points on a shared face go to the lower voxel."""
    lo = np.asarray(cube[0], float)
    hi = np.asarray(cube[1], float)
    dims_a = np.asarray(dims)
    size = (hi - lo) / dims_a
    idx = np.ceil((points - lo) / size).astype(np.int64) - 1
    return np.clip(idx, 0, dims_a - 1)


def voxelize(cloud, cube, dims=(31, 21, 11)):
    """Mean local offset of the points in each voxel of ``cube``."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float).reshape(-1, 3)
    lo = np.asarray(cube[0], float)
    hi = np.asarray(cube[1], float)
    dims = tuple(int(d) for d in dims)
    if min(dims) < 1:
        raise ParameterError("voxel dims must be positive")
    if np.any(pts < lo) or np.any(pts > hi):
        raise ParameterError("point outside voxelization cube")
    a, b, c = dims
    idx = voxel_indices(pts, (lo, hi), dims)
    size = (hi - lo) / np.asarray(dims)
    offset = pts - (lo + (idx + 0.5) * size)
    flat = np.ravel_multi_index(idx.T, dims) if len(pts) else np.zeros(0, dtype=np.int64)
    n = a * b * c
    count = np.bincount(flat, minlength=n)
    grid = np.zeros((n, 3))
    for d in range(3):
        grid[:, d] = np.bincount(flat, weights=offset[:, d], minlength=n)
    occ = count > 0
    grid[occ] /= count[occ, None]
    return PseudoImage(grid.reshape(a, b, c, 3), (tuple(lo), tuple(hi)), dims,
                       occ.reshape(a, b, c))
