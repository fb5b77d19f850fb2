"""Checkerboard data, diffusion / flow-matching teachers and their ODE samplers."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrationError, TrainingError
from .ndmath import (
    EMBED_DIM,
    AdamState,
    Mlp,
    adam_step,
    make_rng,
    mlp_backward,
    mlp_forward,
    sinusoidal_embedding,
)
from .pairs import PairMeta, PairSet

log = logging.getLogger(__name__)

OUTSIDE = -1


@dataclass(frozen=True)
class CheckerboardSpec:
    """Square of ``grid`` x ``grid`` cells on [-extent, extent]^2.

    Cell (col i, row j) is occupied when i + j is odd; occupied cells are
    numbered in row-major order (row j = 0 is the bottom row).
    """

    grid: int = 4
    extent: float = 4.0

    def __post_init__(self):
        if self.grid < 2 or self.grid % 2:
            raise ConfigError(f"grid must be even and >= 2, got {self.grid}")
        if not self.extent > 0:
            raise ConfigError(f"extent must be positive, got {self.extent}")

    @property
    def cell_side(self) -> float:
        return 2.0 * self.extent / self.grid

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid // 2

    def occupied_cells(self) -> list[tuple[int, int]]:
        """(col, row) of each occupied cell, in label order."""
        return [(i, j) for j in range(self.grid) for i in range(self.grid) if (i + j) % 2 == 1]

    def cell_center(self, label: int) -> np.ndarray:
        i, j = self.occupied_cells()[label]
        s = self.cell_side
        return np.array([-self.extent + (i + 0.5) * s, -self.extent + (j + 0.5) * s])

    def interface_segments(self) -> np.ndarray:
        """Edges with an occupied cell on exactly one side, as rows (x1, y1, x2, y2).

        Everything beyond the extent counts as unoccupied.
        """
        g, s, e = self.grid, self.cell_side, self.extent

        def occ(i, j):
            return 0 <= i < g and 0 <= j < g and (i + j) % 2 == 1

        segs = []
        for k in range(g + 1):
            for m in range(g):
                if occ(k - 1, m) != occ(k, m):  # vertical edge x = x_k, row m
                    segs.append((-e + k * s, -e + m * s, -e + k * s, -e + (m + 1) * s))
                if occ(m, k - 1) != occ(m, k):  # horizontal edge y = y_k, column m
                    segs.append((-e + m * s, -e + k * s, -e + (m + 1) * s, -e + k * s))
        return np.array(segs)


def sample_checkerboard(spec: CheckerboardSpec, n: int, rng: np.random.Generator):
    """``n`` uniform points on the occupied cells; returns (points, labels)."""
    if n < 0:
        raise ConfigError("n must be non-negative")
    labels = rng.integers(0, spec.n_cells, size=n)
    corners = np.array([[-spec.extent + i * spec.cell_side, -spec.extent + j * spec.cell_side]
                        for i, j in spec.occupied_cells()])
    pts = corners[labels] + rng.uniform(0.0, spec.cell_side, size=(n, 2))
    return pts, labels


def cell_of(spec: CheckerboardSpec, points) -> np.ndarray | int:
    """Occupied-cell label of each point, or OUTSIDE (-1).

    Points on a cell edge and points in unoccupied cells are outside.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    u = (p + spec.extent) / spec.cell_side
    idx = np.floor(u)
    on_edge = np.any(u == idx, axis=1)
    i, j = idx[:, 0], idx[:, 1]
    inside = (i >= 0) & (i < spec.grid) & (j >= 0) & (j < spec.grid) & ~on_edge
    ii = np.where(inside, i, 0).astype(np.int64)
    jj = np.where(inside, j, 0).astype(np.int64)
    occupied = inside & ((ii + jj) % 2 == 1)
    # row-major position among occupied cells: grid/2 per row
    label = jj * (spec.grid // 2) + ii // 2
    out = np.where(occupied, label, OUTSIDE)
    return int(out[0]) if single else out


def boundary_distance(spec: CheckerboardSpec, points) -> np.ndarray | float:
    """Euclidean distance to the nearest occupied/unoccupied interface."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    segs = spec.interface_segments()
    a, b = segs[:, :2], segs[:, 2:]
    ab = b - a
    best = np.full(len(p), np.inf)
    for k in range(len(segs)):
        ap = p - a[k]
        t = np.clip(ap @ ab[k] / (ab[k] @ ab[k]), 0.0, 1.0)
        d = np.hypot(*(ap - t[:, None] * ab[k]).T)
        np.minimum(best, d, out=best)
    return float(best[0]) if single else best


@dataclass
class SigmaSchedule:
    sigmas: np.ndarray  # strictly decreasing, terminal 0 appended
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1


def karras_grid(n_steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> SigmaSchedule:
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if not 0 < sigma_min < sigma_max:
        raise ConfigError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    if n_steps == 1:
        sig = np.array([float(sigma_max)])
    else:
        ramp = np.arange(n_steps) / (n_steps - 1)
        lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
        sig = (hi + ramp * (lo - hi)) ** rho
        sig[0], sig[-1] = sigma_max, sigma_min
    return SigmaSchedule(np.append(sig, 0.0), float(sigma_min), float(sigma_max), float(rho))


@dataclass
class TeacherConfig:
    kind: str = "edm"
    iterations: int = 50_000
    batch: int = 512
    lr: float = 2e-3
    hidden: tuple[int, ...] = (128, 128, 128)
    sigma_min: float = 0.002
    sigma_max: float = 10.0
    rho: float = 7.0
    conditional: bool = False
    precondition: bool = True
    sigma_sampling: str = "lognormal"  # or "loguniform" on [sigma_min, sigma_max]
    p_mean: float = -0.4
    p_std: float = 1.4
    ema: float = 0.999  # 0 disables the weight average
    lr_decay: bool = True  # cosine decay to zero
    fourier: int = 4
    seed: int = 0
    log_every: int = 1000


@dataclass
class Teacher:
    kind: str  # "edm" denoiser or "fm" velocity field
    net: Mlp
    data_spec: CheckerboardSpec
    sigma_min: float = 0.002
    sigma_max: float = 10.0
    rho: float = 7.0
    n_classes: int = 0  # > 0 for a label-conditional teacher
    sigma_data: float = 0.0  # > 0 switches on the EDM input/output scaling
    fourier: int = 0  # octaves of sin/cos features appended to the state input
    losses: list[float] = field(default_factory=list, repr=False)

    @property
    def prior_std(self) -> float:
        return self.sigma_max if self.kind == "edm" else 1.0

    @property
    def conditional(self) -> bool:
        return self.n_classes > 0

    def embed(self, level, labels=None) -> np.ndarray:
        """Conditioning input: noise-level (or time) features, then one-hot label."""
        level = np.atleast_1d(np.asarray(level, dtype=np.float64))
        feat = np.log(level) / 4.0 if self.kind == "edm" else level
        emb = sinusoidal_embedding(feat)
        if self.conditional:
            if labels is None:
                raise ConfigError("conditional teacher needs labels")
            labels = np.broadcast_to(np.asarray(labels), (len(level),))
            emb = np.concatenate([emb, np.eye(self.n_classes)[labels]], axis=1)
        elif labels is not None:
            raise ConfigError("unconditional teacher got labels")
        return emb

    def scalings(self, sigma):
        """(c_skip, c_out, c_in) per row; identity scalings when sigma_data == 0."""
        sigma = np.asarray(sigma, dtype=np.float64)[:, None]
        if self.kind != "edm" or not self.sigma_data:
            one = np.ones_like(sigma)
            return 0.0 * one, one, one
        sd2 = self.sigma_data ** 2
        root = np.sqrt(sigma ** 2 + sd2)
        return sd2 / root ** 2, sigma * self.sigma_data / root, 1.0 / root

    def evaluate(self, x, level, labels=None) -> np.ndarray:
        """D(x; sigma) for EDM, v(x, t) for FM; ``level`` is sigma or t."""
        x = np.atleast_2d(x)
        level = np.broadcast_to(np.asarray(level, dtype=np.float64), (len(x),))
        c_skip, c_out, c_in = self.scalings(level)
        return c_skip * x + c_out * mlp_forward(self.net, self.features(c_in * x), self.embed(level, labels))

    def features(self, u) -> np.ndarray:
        """State input of the net: ``u`` followed by sin/cos of 2^k u for k < fourier."""
        if not self.fourier:
            return u
        arg = np.concatenate([u * 2.0 ** k for k in range(self.fourier)], axis=1)
        return np.concatenate([u, np.sin(arg), np.cos(arg)], axis=1)


def _new_teacher(kind, data_spec, cfg: TeacherConfig, rng) -> Teacher:
    n_classes = data_spec.n_cells if cfg.conditional else 0
    net = Mlp.init([2 + 4 * cfg.fourier, *cfg.hidden, 2], rng, embed_dim=EMBED_DIM + n_classes)
    sigma_data = data_std(data_spec) if kind == "edm" and cfg.precondition else 0.0
    return Teacher(kind, net, data_spec, cfg.sigma_min, cfg.sigma_max, cfg.rho, n_classes, sigma_data,
                   cfg.fourier)


def data_std(spec: CheckerboardSpec) -> float:
    """Per-coordinate standard deviation of the checkerboard (each marginal is uniform)."""
    return float(spec.extent / np.sqrt(3.0))


def _fit(teacher: Teacher, cfg: TeacherConfig, rng, make_batch) -> Teacher:
    params = teacher.net.params()
    state = AdamState.for_params(params, teacher.net.param_names())
    avg = [p.copy() for p in params] if cfg.ema else None
    for it in range(cfg.iterations):
        x_in, level, labels, target = make_batch(rng)
        x_in = teacher.features(x_in)
        emb = teacher.embed(level, labels)
        cache = []
        out = mlp_forward(teacher.net, x_in, emb, cache=cache)
        diff = out - target
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise TrainingError("non-finite teacher loss", it)
        grads, _ = mlp_backward(teacher.net, x_in, emb, 2.0 * diff / diff.size, cache=cache)
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * it / cfg.iterations)) if cfg.lr_decay else cfg.lr
        adam_step(params, grads, state, lr)
        if avg is not None:
            # warm-up keeps short runs from averaging in the initial weights
            decay = min(cfg.ema, (1.0 + it) / (10.0 + it))
            for a, p in zip(avg, params):
                a *= decay
                a += (1.0 - decay) * p
        if cfg.log_every and it % cfg.log_every == 0:
            teacher.losses.append(loss)
            log.debug("teacher %s it=%d loss=%.5f", teacher.kind, it, loss)
    if avg is not None:
        for a, p in zip(avg, params):
            p[...] = a
    return teacher


def train_teacher_edm(data_spec: CheckerboardSpec, cfg: TeacherConfig, rng=None,
                      data_sampler=None) -> Teacher:
    """Denoiser D(x0 + sigma*eps; sigma) ~ x0.

    log sigma is normal(p_mean, p_std) clipped to [sigma_min, sigma_max], or
    uniform on that range with ``sigma_sampling="loguniform"``.
    """
    if cfg.sigma_sampling not in ("lognormal", "loguniform"):
        raise ConfigError(f"unknown sigma_sampling {cfg.sigma_sampling!r}")
    rng = make_rng(cfg.seed) if rng is None else rng
    teacher = _new_teacher("edm", data_spec, cfg, rng)
    draw = data_sampler or (lambda r, n: sample_checkerboard(data_spec, n, r))
    lo, hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)

    def batch(rng):
        x0, labels = draw(rng, cfg.batch)
        if cfg.sigma_sampling == "lognormal":
            sigma = np.exp(np.clip(cfg.p_mean + cfg.p_std * rng.standard_normal(cfg.batch), lo, hi))
        else:
            sigma = np.exp(rng.uniform(lo, hi, size=cfg.batch))
        x = x0 + sigma[:, None] * rng.standard_normal((cfg.batch, 2))
        # regress the raw net onto the target that makes D(x; sigma) = x0
        c_skip, c_out, c_in = teacher.scalings(sigma)
        return c_in * x, sigma, (labels if cfg.conditional else None), (x0 - c_skip * x) / c_out

    return _fit(teacher, cfg, rng, batch)


def train_teacher_fm(data_spec: CheckerboardSpec, cfg: TeacherConfig, rng=None,
                     data_sampler=None) -> Teacher:
    """Velocity v(x_t, t) ~ x1 - x0 on the line x_t = (1-t) x0 + t x1, x1 ~ N(0, I).

    ``data_sampler(rng, n) -> (points, labels)`` replaces the checkerboard
    as the source of x0 when given.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    teacher = _new_teacher("fm", data_spec, cfg, rng)
    draw = data_sampler or (lambda r, n: sample_checkerboard(data_spec, n, r))

    def batch(rng):
        x0, labels = draw(rng, cfg.batch)
        x1 = rng.standard_normal((cfg.batch, 2))
        t = rng.uniform(0.0, 1.0, size=cfg.batch)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        return xt, t, (labels if cfg.conditional else None), x1 - x0

    return _fit(teacher, cfg, rng, batch)


def heun_steps(kind: str, nfe: int) -> int:
    """Solver steps that fit in an ``nfe`` evaluation budget.

    EDM: n Karras levels cost 2n - 1 evaluations (the last step is Euler).
    FM: n Heun steps cost 2n evaluations; nfe = 1 is a single Euler step.
    """
    if nfe < 1:
        raise ConfigError(f"nfe must be >= 1, got {nfe}")
    return (nfe + 1) // 2 if kind == "edm" else max(nfe // 2, 1)


def sample_ode(teacher: Teacher, x_T, nfe: int = 10, labels=None) -> np.ndarray:
    """Deterministic reverse-time integration; returns the whole trajectory.

    Output shape is (steps + 1, *x_T.shape) with ``[0] == x_T`` and ``[-1]``
    the generated sample.
    """
    x = np.asarray(x_T, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x).copy()
    n = heun_steps(teacher.kind, nfe)
    traj = [x.copy()]
    if teacher.kind == "edm":
        sig = karras_grid(n, teacher.sigma_min, teacher.sigma_max, teacher.rho).sigmas

        def slope(x, s):
            return (x - teacher.evaluate(x, s, labels)) / s

        for i in range(n):
            s, s_next = sig[i], sig[i + 1]
            d = slope(x, s)
            if s_next == 0.0:
                x = x + (s_next - s) * d
            else:
                x_eul = x + (s_next - s) * d
                x = x + (s_next - s) * 0.5 * (d + slope(x_eul, s_next))
            _check_finite(x, i)
            traj.append(x.copy())
    else:
        ts = np.linspace(1.0, 0.0, n + 1)
        euler_only = nfe == 1
        for i in range(n):
            t, t_next = ts[i], ts[i + 1]
            d = teacher.evaluate(x, t, labels)
            x_eul = x + (t_next - t) * d
            if euler_only:
                x = x_eul
            else:
                x = x + (t_next - t) * 0.5 * (d + teacher.evaluate(x_eul, t_next, labels))
            _check_finite(x, i)
            traj.append(x.copy())
    out = np.stack(traj)
    return out[:, 0] if single else out


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state", step)


def end_map(teacher: Teacher, nfe: int = 10, labels=None):
    """x_T -> x_0 as a plain function of a batch of noises."""
    return lambda x: sample_ode(teacher, x, nfe, labels)[-1]


def draw_noises(teacher: Teacher, n: int, seed: int, start: int = 0, conditional: bool = False):
    """Per-index prior draws: pair ``i`` uses substream (seed, i) only."""
    xs = np.empty((n, 2))
    req = np.zeros(n, dtype=np.int64) if conditional and teacher.conditional else None
    for k in range(n):
        r = make_rng(seed, start + k)
        xs[k] = teacher.prior_std * r.standard_normal(2)
        if req is not None:
            req[k] = r.integers(0, teacher.n_classes)
    return xs, req


def generate_pairs(teacher: Teacher, n: int, nfe: int = 10, seed: int = 0,
                   conditional: bool = False, threads: int = 1, chunk: int = 4096) -> PairSet:
    """Harvest (x_T, x_0) pairs from the teacher's reverse ODE.

    Work is split into fixed index chunks, so the result does not depend on
    ``threads``. With ``conditional`` the stored label is the cell the
    sample actually landed in (a conditional teacher is asked for a uniformly
    drawn cell first); samples outside every cell are kept and flagged.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if teacher.conditional and not conditional:
        raise ConfigError("a conditional teacher needs a conditional harvest")
    starts = list(range(0, n, chunk))

    def run(start):
        m = min(chunk, n - start)
        xT, req = draw_noises(teacher, m, seed, start, conditional)
        return xT, sample_ode(teacher, xT, nfe, req)[-1]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    x_T = np.concatenate([p[0] for p in parts])
    x_0 = np.concatenate([p[1] for p in parts])
    labels = cell_of(teacher.data_spec, x_0) if conditional else None
    meta = PairMeta(teacher_kind=teacher.kind, nfe=nfe, seed=seed, grid=teacher.data_spec.grid,
                    extent=teacher.data_spec.extent, conditional=conditional,
                    prior_std=teacher.prior_std)
    return PairSet(x_T, x_0, labels, meta)


def teacher_to_arrays(teacher: Teacher) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Weights plus the scalar settings needed to rebuild the teacher."""
    meta = {
        "artifact": "teacher", "kind": teacher.kind, "grid": str(teacher.data_spec.grid),
        "extent": repr(float(teacher.data_spec.extent)), "sigma_min": repr(float(teacher.sigma_min)),
        "sigma_max": repr(float(teacher.sigma_max)), "rho": repr(float(teacher.rho)),
        "n_classes": str(teacher.n_classes), "sigma_data": repr(float(teacher.sigma_data)),
        "embed_dim": str(teacher.net.embed_dim), "fourier": str(teacher.fourier),
    }
    arrays = teacher.net.to_arrays("net")
    arrays["losses"] = np.asarray(teacher.losses, dtype=np.float64)
    return arrays, meta


def teacher_from_arrays(arrays: dict[str, np.ndarray], meta: dict[str, str]) -> Teacher:
    if meta.get("artifact") != "teacher":
        raise ConfigError(f"checkpoint holds {meta.get('artifact')!r}, not a teacher")
    net = Mlp.from_arrays(arrays, "net", int(meta["embed_dim"]))
    spec = CheckerboardSpec(int(meta["grid"]), float(meta["extent"]))
    return Teacher(meta["kind"], net, spec, float(meta["sigma_min"]), float(meta["sigma_max"]),
                   float(meta["rho"]), int(meta["n_classes"]), float(meta["sigma_data"]),
                   int(meta.get("fourier", 0)), list(arrays.get("losses", np.empty(0)).tolist()))
