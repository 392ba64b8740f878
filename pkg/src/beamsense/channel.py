"""Propagation paths, OFDM channel matrices and exhaustive beam sweeps.

Paths come from an image-method tracer over the room shell and the
axis-aligned object boxes of a layout.  Angles follow the array
convention of :func:`steering_vector`: both arrays lie in a horizontal
plane, azimuth is measured in that plane from the ``x`` axis and
elevation is the polar angle from the array normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError

C_LIGHT = 299_792_458.0
METAL_LOSS_DB = 6.0
CONCRETE_LOSS_DB = 10.0


# --------------------------------------------------------------------------
# arrays and codebooks

@dataclass(frozen=True)
class UPAConfig:
    nx: int
    ny: int
    spacing: float = 0.5     # element spacing in wavelengths

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ParameterError("UPA needs at least one element per axis")

    @property
    def size(self):
        return self.nx * self.ny


def steering_vector(upa, az_deg, el_deg):
    """Array response ``a_y kron a_x`` of a planar array.

    Entry ``ky * nx + kx`` is ``exp(j 2 pi d (kx u + ky v))`` with
    ``u = sin(el) cos(az)`` and ``v = sin(el) sin(az)``.

    >>> steering_vector(UPAConfig(2, 2), 0.0, 90.0).real.round(12)
    array([ 1., -1.,  1., -1.])
    """
    if not (np.isfinite(az_deg) and np.isfinite(el_deg)):
        raise ParameterError("angles must be finite")
    az = math.radians(az_deg)
    el = math.radians(el_deg)
    k = 2.0 * math.pi * upa.spacing
    ax = np.exp(1j * k * np.arange(upa.nx) * math.sin(el) * math.cos(az))
    ay = np.exp(1j * k * np.arange(upa.ny) * math.sin(el) * math.sin(az))
    return np.kron(ay, ax)


def steering_matrix(upa, az_deg, el_deg):
    """Steering vectors for arrays of angles, one per row."""
    az = np.radians(np.asarray(az_deg, float))
    el = np.radians(np.asarray(el_deg, float))
    k = 2.0 * math.pi * upa.spacing
    u = np.sin(el) * np.cos(az)
    v = np.sin(el) * np.sin(az)
    ax = np.exp(1j * k * u[:, None] * np.arange(upa.nx))
    ay = np.exp(1j * k * v[:, None] * np.arange(upa.ny))
    return (ay[:, :, None] * ax[:, None, :]).reshape(len(u), -1)


@dataclass
class Codebook:
    vectors: np.ndarray      # (n_codewords, N) complex, one codeword per row

    def __len__(self):
        return len(self.vectors)


def build_dft_codebook(upa):
    """Orthonormal 2D DFT codebook; codeword ``ky * nx + kx``."""
    fx = np.exp(2j * np.pi * np.outer(np.arange(upa.nx), np.arange(upa.nx)) / upa.nx)
    fy = np.exp(2j * np.pi * np.outer(np.arange(upa.ny), np.arange(upa.ny)) / upa.ny)
    # column (ky, kx) of kron(fy, fx) is kron(fy[:, ky], fx[:, kx])
    w = np.kron(fy, fx) / math.sqrt(upa.size)
    return Codebook(np.ascontiguousarray(w.T))


# --------------------------------------------------------------------------
# paths

@dataclass(frozen=True)
class PathParams:
    power_dbm: float
    phase_deg: float
    delay_s: float
    aoa_az_deg: float
    aoa_el_deg: float
    aod_az_deg: float
    aod_el_deg: float
    bounce_count: int


_PATH_FIELDS = ("power_dbm", "phase_deg", "delay_s", "aoa_az_deg", "aoa_el_deg",
                "aod_az_deg", "aod_el_deg", "bounce_count")


@dataclass
class PathSet:
    """Propagation paths of one link, strongest first, stored column-wise."""
    power_dbm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phase_deg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delay_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aoa_az_deg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aoa_el_deg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aod_az_deg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aod_el_deg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bounce_count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    length_m: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in _PATH_FIELDS + ("length_m",):
            dtype = np.int64 if name == "bounce_count" else float
            setattr(self, name, np.asarray(getattr(self, name), dtype=dtype))
        if not np.all(np.isfinite(self.power_dbm)):
            raise ParameterError("path powers must be finite")

    def __len__(self):
        return len(self.power_dbm)

    @property
    def paths(self):
        return [PathParams(*(getattr(self, f)[i].item() for f in _PATH_FIELDS))
                for i in range(len(self))]

    @classmethod
    def from_paths(cls, paths, length_m=None):
        cols = {f: [getattr(p, f) for p in paths] for f in _PATH_FIELDS}
        if length_m is None:
            length_m = [p.delay_s * C_LIGHT for p in paths]
        return cls(**cols, length_m=length_m)

    def subset(self, idx):
        return PathSet(**{f: getattr(self, f)[idx] for f in _PATH_FIELDS + ("length_m",)})

    @property
    def power_w(self):
        return 10.0 ** ((self.power_dbm - 30.0) / 10.0)


def fspl_db(distance_m, carrier_hz=28e9):
    """Free-space path loss in dB."""
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(distance_m) * carrier_hz / C_LIGHT)


# --------------------------------------------------------------------------
# image-method tracer

@dataclass
class Geometry:
    """Reflecting planes and occluding boxes of one scene snapshot.

    Plane arrays have one row per face: ``axis``, ``coord``, ``side`` (the
    sign of the half-space a wave must arrive from), the face bounds in the
    two remaining axes, the reflection loss in dB and the owning box index
    (``-1`` for the room shell).
    """
    box_lo: np.ndarray
    box_hi: np.ndarray
    axis: np.ndarray
    coord: np.ndarray
    side: np.ndarray
    face_lo: np.ndarray
    face_hi: np.ndarray
    loss_db: np.ndarray
    owner: np.ndarray
    extent: tuple

    @classmethod
    def build(cls, boxes, extent, shell=True):
        L, W, H = extent
        rows = []
        if shell:
            dims = (L, W, H)
            for axis in range(3):
                others = [a for a in range(3) if a != axis]
                lo2 = (0.0, 0.0)
                hi2 = (dims[others[0]], dims[others[1]])
                rows.append((axis, 0.0, 1.0, lo2, hi2, CONCRETE_LOSS_DB, -1))
                rows.append((axis, dims[axis], -1.0, lo2, hi2, CONCRETE_LOSS_DB, -1))
        for b_idx, box in enumerate(boxes):
            loss = METAL_LOSS_DB if box.metal else CONCRETE_LOSS_DB
            for axis, coord, sign, lo2, hi2 in box.faces():
                rows.append((axis, coord, sign, lo2, hi2, loss, b_idx))
        lo = np.array([b.lo for b in boxes], float).reshape(-1, 3)
        hi = np.array([b.hi for b in boxes], float).reshape(-1, 3)
        return cls(
            lo, hi,
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows], float),
            np.array([r[2] for r in rows], float),
            np.array([r[3] for r in rows], float).reshape(-1, 2),
            np.array([r[4] for r in rows], float).reshape(-1, 2),
            np.array([r[5] for r in rows], float),
            np.array([r[6] for r in rows], dtype=np.int64),
            (L, W, H),
        )


def layout_geometry(layout, states=None, exclude=()):
    """Geometry of ``layout`` with dynamic objects posed at ``states``.

    Dynamic objects missing from ``states`` and instance ids in ``exclude``
    are left out.
    """
    from .scene import footprint_at

    boxes = layout.static_boxes()
    states = states or {}
    for obj in layout.dynamic_objects:
        st = states.get(obj.instance_id)
        if st is None or obj.instance_id in exclude:
            continue
        boxes.append(obj.box(footprint_at(obj, st)))
    return Geometry.build(boxes, (layout.length_m, layout.width_m, layout.height_m))


_OTHER_AXES = np.array([[1, 2], [0, 2], [0, 1]])


def _occluded(a, b, geom, eps=1e-7):
    """Which segments ``a[i] -> b[i]`` pass through the interior of a box."""
    if len(geom.box_lo) == 0 or len(a) == 0:
        return np.zeros(len(a), dtype=bool)
    d = (b - a)[:, None, :]
    a3 = a[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (geom.box_lo[None] - a3) / d
        t2 = (geom.box_hi[None] - a3) / d
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    # axis-parallel segments: inside the slab means unconstrained
    flat = d == 0.0
    inside = (a3 > geom.box_lo[None]) & (a3 < geom.box_hi[None])
    tlo = np.where(flat, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(flat, np.where(inside, np.inf, -np.inf), thi)
    enter = np.maximum(tlo.max(axis=2), eps)
    leave = np.minimum(thi.min(axis=2), 1.0 - eps)
    return np.any(leave - enter > eps, axis=1)


def _mirror(points, axis, coord):
    out = points.copy()
    idx = np.arange(len(points))
    out[idx, axis] = 2.0 * coord - points[idx, axis]
    return out


def _plane_hits(src, dst, axis, coord, face_lo, face_hi):
    """Intersection of segments ``src -> dst`` with planes; NaN when missed."""
    idx = np.arange(len(axis))
    sa = src[idx, axis]
    da = dst[idx, axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (coord - sa) / (da - sa)
    hit = src + t[:, None] * (dst - src)
    oth = _OTHER_AXES[axis]
    u = hit[idx, oth[:, 0]]
    v = hit[idx, oth[:, 1]]
    tol = 1e-9
    ok = ((t > 0) & (t < 1) & (u >= face_lo[:, 0] - tol) & (u <= face_hi[:, 0] + tol)
          & (v >= face_lo[:, 1] - tol) & (v <= face_hi[:, 1] + tol))
    return hit, ok


def _angles(vec):
    vec = np.atleast_2d(vec)
    az = np.degrees(np.arctan2(vec[:, 1], vec[:, 0]))
    r = np.linalg.norm(vec, axis=1)
    el = np.degrees(np.arccos(np.clip(np.abs(vec[:, 2]) / r, 0.0, 1.0)))
    return az, el


def trace_paths(scene, tx, rx, max_bounce=1, r_max=25, *, states=None, exclude=(),
                carrier_hz=28e9, tx_power_dbm=0.0):
    """Specular paths from ``tx`` to ``rx`` up to ``max_bounce`` reflections.

    Parameters
    ----------
    scene : FactoryLayout or Geometry
        A layout is converted with :func:`layout_geometry` using
        ``states`` and ``exclude``.
    tx, rx : array_like
        3D points in meters.
    max_bounce : int
        0, 1 or 2.
    r_max : int
        Number of strongest paths kept.

    Returns
    -------
    PathSet
    """
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    if np.allclose(tx, rx):
        raise ParameterError("transmitter and receiver coincide")
    if not 0 <= max_bounce <= 2:
        raise ParameterError("max_bounce must be 0, 1 or 2")
    geom = scene if isinstance(scene, Geometry) else layout_geometry(scene, states, exclude)
    lam = C_LIGHT / carrier_hz

    chains = []   # (length, start_dir, end_dir, loss, bounces)

    if not _occluded(tx[None], rx[None], geom)[0]:
        d = rx - tx
        chains.append((np.linalg.norm(d)[None], d[None], -d[None], np.zeros(1), np.zeros(1, int)))

    P = len(geom.axis)
    tx_side = (tx[geom.axis] - geom.coord) * geom.side > 0
    rx_side = (rx[geom.axis] - geom.coord) * geom.side > 0

    if max_bounce >= 1 and P:
        sel = np.flatnonzero(tx_side & rx_side)
        ax, co = geom.axis[sel], geom.coord[sel]
        img = _mirror(np.repeat(tx[None], len(sel), 0), ax, co)
        src = np.repeat(rx[None], len(sel), 0)
        hit, ok = _plane_hits(src, img, ax, co, geom.face_lo[sel], geom.face_hi[sel])
        sel, hit, img = sel[ok], hit[ok], img[ok]
        txs = np.repeat(tx[None], len(sel), 0)
        rxs = np.repeat(rx[None], len(sel), 0)
        blocked = _occluded(txs, hit, geom) | _occluded(hit, rxs, geom)
        sel, hit, img = sel[~blocked], hit[~blocked], img[~blocked]
        if len(sel):
            chains.append((np.linalg.norm(rx - img, axis=1), hit - tx, hit - rx,
                           geom.loss_db[sel], np.ones(len(sel), int)))

    if max_bounce >= 2 and P:
        p1, p2 = np.meshgrid(np.arange(P), np.arange(P), indexing="ij")
        p1, p2 = p1.ravel(), p2.ravel()
        keep = (p1 != p2) & tx_side[p1] & rx_side[p2]
        p1, p2 = p1[keep], p2[keep]
        n = len(p1)
        i1 = _mirror(np.repeat(tx[None], n, 0), geom.axis[p1], geom.coord[p1])
        i2 = _mirror(i1, geom.axis[p2], geom.coord[p2])
        # the wave must reach plane 2 from its active side
        ok = (i1[np.arange(n), geom.axis[p2]] - geom.coord[p2]) * geom.side[p2] > 0
        h2, ok2 = _plane_hits(np.repeat(rx[None], n, 0), i2, geom.axis[p2], geom.coord[p2],
                              geom.face_lo[p2], geom.face_hi[p2])
        h1, ok1 = _plane_hits(h2, i1, geom.axis[p1], geom.coord[p1],
                              geom.face_lo[p1], geom.face_hi[p1])
        ok &= ok1 & ok2
        p1, p2, h1, h2, i2 = p1[ok], p2[ok], h1[ok], h2[ok], i2[ok]
        n = len(p1)
        if n:
            txs = np.repeat(tx[None], n, 0)
            rxs = np.repeat(rx[None], n, 0)
            blocked = (_occluded(txs, h1, geom) | _occluded(h1, h2, geom)
                       | _occluded(h2, rxs, geom))
            p1, p2, h1, h2, i2 = (x[~blocked] for x in (p1, p2, h1, h2, i2))
            if len(p1):
                chains.append((np.linalg.norm(rx - i2, axis=1), h1 - tx, h2 - rx,
                               geom.loss_db[p1] + geom.loss_db[p2], np.full(len(p1), 2)))

    if not chains:
        return PathSet()
    length = np.concatenate([c[0] for c in chains])
    start = np.concatenate([c[1] for c in chains])
    end = np.concatenate([c[2] for c in chains])
    loss = np.concatenate([c[3] for c in chains])
    bounces = np.concatenate([c[4] for c in chains])

    power = tx_power_dbm - fspl_db(length, carrier_hz) - loss
    phase = -360.0 * np.mod(length, lam) / lam
    delay = length / C_LIGHT
    aod_az, aod_el = _angles(start)
    aoa_az, aoa_el = _angles(end)
    order = np.lexsort((delay, -power))[:r_max]
    return PathSet(power[order], phase[order], delay[order], aoa_az[order], aoa_el[order],
                   aod_az[order], aod_el[order], bounces[order], length[order])


# --------------------------------------------------------------------------
# OFDM channel

def _los_noise_var(snr_db=20.0, distance_m=30.0, carrier_hz=28e9, tx_power_dbm=0.0):
    p_rx_dbm = tx_power_dbm - fspl_db(distance_m, carrier_hz)
    return float(10.0 ** ((p_rx_dbm - 30.0) / 10.0) / 10.0 ** (snr_db / 10.0))


@dataclass(frozen=True)
class OFDMConfig:
    """Wideband parameters.

    Path powers already include the transmit power, so
    ``tx_power_per_subcarrier`` is a unit scale and ``noise_var`` is set
    for a 20 dB single-antenna SNR on a 30 m line-of-sight link.
    """
    carrier_hz: float = 28e9
    K: int = 64
    N: int = 16
    Ts: float = 10e-9
    rolloff: float = 0.1
    tx_power_per_subcarrier: float = 1.0
    noise_var: float = _los_noise_var()

    @property
    def snr(self):
        return self.tx_power_per_subcarrier / self.noise_var


def raised_cosine(t, rolloff, Ts):
    """Raised-cosine pulse, with the analytic limit at ``|t| = Ts / (2 rolloff)``."""
    if not 0.0 < rolloff <= 1.0:
        raise ParameterError("rolloff must lie in (0, 1]")
    t = np.asarray(t, dtype=float)
    x = t / Ts
    denom = 1.0 - (2.0 * rolloff * x) ** 2
    singular = np.abs(denom) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.sinc(x) * np.cos(np.pi * rolloff * x) / denom
    g = np.where(singular, np.pi / 4.0 * np.sinc(1.0 / (2.0 * rolloff)), g)
    return g if g.ndim else float(g)


def align_to_first_arrival(paths, ofdm):
    """Shift delays so the first arrival is at zero.

    Paths whose excess delay reaches the cyclic prefix ``N * Ts`` are
    dropped; they would alias in the tapped delay line.
    """
    if len(paths) == 0:
        return paths
    rel = paths.delay_s - paths.delay_s.min()
    keep = np.flatnonzero(rel < ofdm.N * ofdm.Ts)
    out = paths.subset(keep)
    out.delay_s = rel[keep]
    return out


@dataclass
class ChannelTensor:
    entries: np.ndarray      # (K, N_r, N_t) complex

    @property
    def shape(self):
        return self.entries.shape


def assemble_channel(paths, upa_t, upa_r, ofdm):
    """Tapped-delay-line channel of every subcarrier.

    ``H[k] = sum_n sum_r alpha_r exp(-j 2 pi k n / K) g(n Ts - tau_r) a_r a_t^H``
    with ``alpha_r = sqrt(P_r) exp(j Phi_r)`` and ``P_r`` in watts.
    """
    K = ofdm.K
    H = np.zeros((K, upa_r.size, upa_t.size), dtype=complex)
    if len(paths) == 0:
        return ChannelTensor(H)
    if paths.delay_s.max() >= ofdm.N * ofdm.Ts:
        raise ConfigurationError(
            f"path delay {paths.delay_s.max():.3e} s exceeds cyclic prefix "
            f"{ofdm.N * ofdm.Ts:.3e} s; align delays first")
    alpha = np.sqrt(paths.power_w) * np.exp(1j * np.radians(paths.phase_deg))
    n = np.arange(ofdm.N)
    taps = raised_cosine(n[None, :] * ofdm.Ts - paths.delay_s[:, None], ofdm.rolloff, ofdm.Ts)
    dft = np.exp(-2j * np.pi * np.outer(np.arange(K), n) / K)
    gain = (dft @ taps.T) * alpha[None, :]                  # (K, R)
    ar = steering_matrix(upa_r, paths.aoa_az_deg, paths.aoa_el_deg)
    at = steering_matrix(upa_t, paths.aod_az_deg, paths.aod_el_deg)
    H = np.einsum("kr,ri,rj->kij", gain, ar, at.conj(), optimize=True)
    return ChannelTensor(H)


# --------------------------------------------------------------------------
# rates

def spectral_efficiency(ch, w_r, w_t, ofdm):
    """Mean rate ``(1/K) sum_k log2(1 + snr |w_r^H H_k w_t|^2)`` in bit/s/Hz."""
    H = ch.entries if isinstance(ch, ChannelTensor) else np.asarray(ch)
    w_r = np.asarray(w_r)
    w_t = np.asarray(w_t)
    if w_r.shape != (H.shape[1],) or w_t.shape != (H.shape[2],):
        raise ParameterError(f"beam lengths {w_r.shape}, {w_t.shape} do not match "
                             f"channel {H.shape[1:]}")
    y = np.einsum("i,kij,j->k", w_r.conj(), H, w_t)
    return float(np.mean(np.log2(1.0 + ofdm.snr * np.abs(y) ** 2)))


def rate_matrix(ch, cb_r, cb_t, ofdm):
    """Rates of every codeword pair, shape ``(len(cb_r), len(cb_t))``."""
    H = ch.entries if isinstance(ch, ChannelTensor) else np.asarray(ch)
    Wr = cb_r.vectors.conj()
    Wt = cb_t.vectors
    if Wr.shape[1] != H.shape[1] or Wt.shape[1] != H.shape[2]:
        raise ParameterError("codebook lengths do not match channel dims")
    y = np.matmul(np.matmul(Wr[None], H), Wt.T[None])       # (K, Nr_cb, Nt_cb)
    return np.mean(np.log2(1.0 + ofdm.snr * (y.real ** 2 + y.imag ** 2)), axis=0)


def optimal_beam_pair(ch, cb_r, cb_t, ofdm):
    """Exhaustive sweep for the rate-maximizing pair.

    Returns ``(r_idx, t_idx, rate)``; ties go to the smallest
    ``(t_idx, r_idx)``.
    """
    if len(cb_r) == 0 or len(cb_t) == 0:
        raise ParameterError("empty codebook")
    rate = rate_matrix(ch, cb_r, cb_t, ofdm)
    # row-major argmax over rate.T scans t first, then r
    flat = int(np.argmax(rate.T))
    t_idx, r_idx = divmod(flat, rate.shape[0])
    return r_idx, t_idx, float(rate[r_idx, t_idx])


def beam_class(r_idx, t_idx, n_r):
    """Flat beam-pair class index used by the predictor."""
    return t_idx * n_r + r_idx
