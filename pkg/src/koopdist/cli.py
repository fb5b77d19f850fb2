"""``kdm`` command line: six config-driven subcommands sharing one work directory.

Config files are UTF-8 ``key=value`` lines with section prefixes
(``teacher.lr=0.0003``); ``#`` starts a comment. A flat or sectioned JSON
object is accepted as well. Every key has a default (see ``DEFAULTS``) and
unknown keys are rejected.

Artifacts are content addressed: each file name carries the stage seed and a
hash of every setting that can change its bytes, so a rerun with the same
config lands on the same paths and downstream stages find their inputs
without being told where they are.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .errors import ConfigError, FormatError, KdmError, MissingInputError
from .ndmath import make_rng
from .pairs import export_csv, load_checkpoint, load_pairs, save_checkpoint, save_pairs
from .student import KdmConfig, model_from_arrays, model_to_arrays, sample_one_step, train_kdm
from .teacher import (
    CheckerboardSpec,
    TeacherConfig,
    cell_of,
    generate_pairs,
    sample_checkerboard,
    sample_ode,
    teacher_from_arrays,
    teacher_to_arrays,
    train_teacher_edm,
    train_teacher_fm,
)
from .theory import EDMD_CSV_HEADER, edmd_sweep, verify_semantic_proximity

_KDM_DEFAULTS = KdmConfig()
_TEACHER_DEFAULTS = TeacherConfig()

DEFAULTS: dict[str, object] = {
    "data.grid": 4,
    "data.extent": 4.0,
    **{f"teacher.{k}": getattr(_TEACHER_DEFAULTS, k) for k in (
        "kind", "sigma_min", "sigma_max", "rho", "iterations", "batch", "lr", "hidden",
        "conditional", "precondition", "sigma_sampling", "p_mean", "p_std", "ema", "lr_decay",
        "fourier", "seed")},
    "pairs.n": 50_000,
    "pairs.nfe": 10,
    "pairs.seed": 0,
    "pairs.conditional": False,
    **{f"kdm.{k}": getattr(_KDM_DEFAULTS, k) for k in (
        "iterations", "batch", "lr", "disc_lr", "adv_weight", "latent_noise", "latent_dim",
        "hidden", "disc_hidden", "conditional", "operator", "use_rec", "use_lat", "use_pred",
        "use_adv", "rec_noise_free", "seed")},
    "theory.degrees": (1, 2, 3, 4, 5),
    "theory.samples": 4000,
    "theory.radius": 0.5,
    "theory.n_pairs": 10_000,
    "theory.n_calibration": 10_000,
    "theory.seed": 0,
    "eval.k": 10,
    "eval.eps": 0.15,
    "eval.min_pts": 4,
    "eval.sigmas": ev.SIGMA_GRID,
    "eval.normalize": "norm",
    "eval.n": 10_000,
    "eval.sweep_n": 500,
    "eval.seed": 0,
    "sample.source": "student",
    "sample.count": 1000,
    "sample.label": -1,
    "sample.nfe": 10,
    "sample.seed": 0,
    "paths.workdir": "kdm_work",
    "threads": 1,
}

# settings that only say where or how fast, never what
_NOT_HASHED = ("paths.workdir", "threads")


def _parse_value(key: str, raw) -> object:
    default = DEFAULTS[key]
    try:
        if isinstance(raw, str):
            raw = raw.strip()
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("true", "1", "yes"):
                return True
            if str(raw).lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
            return tuple(kind(v) for v in items)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[prefix + k] = v
    return flat


def parse_config_text(text: str) -> dict:
    """Key/value pairs from a config document (key=value lines or JSON)."""
    if text.lstrip().startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc.msg} at line {exc.lineno}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v
    return out


def resolve_config(overrides: dict) -> dict:
    """Defaults updated by ``overrides``; unknown keys and bad values raise ConfigError."""
    cfg = dict(DEFAULTS)
    for k, v in overrides.items():
        if k not in DEFAULTS:
            raise ConfigError(f"{k}: unknown config key")
        cfg[k] = _parse_value(k, v)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    checks = [
        ("teacher.kind", cfg["teacher.kind"] in ("edm", "fm"), "must be edm or fm"),
        ("sample.source", cfg["sample.source"] in ("student", "teacher"), "must be student or teacher"),
        ("eval.normalize", cfg["eval.normalize"] in ("norm", "standardize"), "must be norm or standardize"),
        ("kdm.operator", cfg["kdm.operator"] in ("dense", "factorized"), "must be dense or factorized"),
        ("teacher.sigma_sampling", cfg["teacher.sigma_sampling"] in ("lognormal", "loguniform"),
         "must be lognormal or loguniform"),
        ("pairs.n", cfg["pairs.n"] >= 1, "must be >= 1"),
        ("pairs.nfe", cfg["pairs.nfe"] >= 1, "must be >= 1"),
        ("sample.nfe", cfg["sample.nfe"] >= 1, "must be >= 1"),
        ("sample.count", cfg["sample.count"] >= 0, "must be >= 0"),
        ("threads", cfg["threads"] >= 1, "must be >= 1"),
        ("teacher.fourier", cfg["teacher.fourier"] >= 0, "must be >= 0"),
        ("teacher.iterations", cfg["teacher.iterations"] >= 0, "must be >= 0"),
        ("teacher.batch", cfg["teacher.batch"] >= 1, "must be >= 1"),
        ("teacher.lr", cfg["teacher.lr"] > 0, "must be positive"),
        ("teacher.sigma_min", 0 < cfg["teacher.sigma_min"] < cfg["teacher.sigma_max"],
         "must satisfy 0 < sigma_min < sigma_max"),
        ("teacher.ema", 0 <= cfg["teacher.ema"] < 1, "must lie in [0, 1)"),
        ("data.grid", cfg["data.grid"] >= 2 and cfg["data.grid"] % 2 == 0, "must be an even number >= 2"),
        ("data.extent", cfg["data.extent"] > 0, "must be positive"),
        ("theory.radius", cfg["theory.radius"] > 0, "must be positive"),
        ("eval.eps", cfg["eval.eps"] > 0, "must be positive"),
        ("eval.k", cfg["eval.k"] >= 1, "must be >= 1"),
        ("eval.n", cfg["eval.n"] >= 2, "must be >= 2"),
        ("pairs.conditional", cfg["pairs.conditional"] or not cfg["teacher.conditional"],
         "must be true for a conditional teacher"),
        ("kdm.conditional", cfg["pairs.conditional"] or not cfg["kdm.conditional"],
         "needs pairs.conditional=true"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}")
    try:
        kdm_config(cfg)
    except ConfigError as exc:
        raise ConfigError(f"kdm.*: {exc}") from None


def load_config(path, overrides: dict | None = None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"config file not found: {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{p}: config is not valid UTF-8") from None
    values = parse_config_text(text)
    values.update(overrides or {})
    if os.environ.get("KDM_WORKDIR"):
        values["paths.workdir"] = os.environ["KDM_WORKDIR"]
    return resolve_config(values)


def config_to_text(cfg: dict) -> str:
    return "".join(f"{k}={_format_value(cfg[k])}\n" for k in DEFAULTS)


# -- artifact naming ----------------------------------------------------------

_STAGE_SECTIONS = {
    "teacher": ("data.", "teacher."),
    "pairs": ("data.", "teacher.", "pairs."),
    "kdm": ("data.", "teacher.", "pairs.", "kdm."),
    "eval": ("data.", "teacher.", "pairs.", "kdm.", "eval."),
    "theory": ("data.", "teacher.", "theory."),
    "sample": ("data.", "teacher.", "pairs.", "kdm.", "sample."),
}
_STAGE_SEED = {"teacher": "teacher.seed", "pairs": "pairs.seed", "kdm": "kdm.seed",
               "eval": "eval.seed", "theory": "theory.seed", "sample": "sample.seed"}


def config_hash(cfg: dict, stage: str) -> str:
    """Short digest of the settings that determine ``stage``'s output bytes."""
    keys = [k for k in DEFAULTS if k.startswith(_STAGE_SECTIONS[stage]) and k not in _NOT_HASHED]
    if stage == "sample" and cfg["sample.source"] == "teacher":
        keys = [k for k in keys if not k.startswith(("pairs.", "kdm."))]
    doc = "\n".join(f"{k}={_format_value(cfg[k])}" for k in keys)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Layout:
    cfg: dict

    @property
    def root(self) -> Path:
        return Path(self.cfg["paths.workdir"])

    def stem(self, stage: str) -> str:
        return f"{stage}-s{self.cfg[_STAGE_SEED[stage]]}-{config_hash(self.cfg, stage)}"

    def path(self, stage: str, suffix: str) -> Path:
        folder = self.root / ("kdm" if stage == "sample" else stage)
        folder.mkdir(parents=True, exist_ok=True)
        return folder / (self.stem(stage) + suffix)

    @property
    def teacher(self) -> Path:
        return self.path("teacher", ".kdmc")

    @property
    def pairs(self) -> Path:
        return self.path("pairs", ".kdmp")

    @property
    def kdm(self) -> Path:
        return self.path("kdm", ".kdmc")

    def write_config(self, stage: str) -> Path:
        p = self.path(stage, ".cfg")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(config_to_text(self.cfg), encoding="utf-8")
        return p


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingInputError(f"missing input: {what} expected at {path}")
    return path


def _copy_out(src: Path, out: str | None) -> None:
    if out:
        dst = Path(out)
        dst.parent.mkdir(parents=True, exist_ok=True)
        if dst.resolve() != src.resolve():
            dst.write_bytes(src.read_bytes())


# -- config -> library objects --------------------------------------------------

def data_spec(cfg: dict) -> CheckerboardSpec:
    return CheckerboardSpec(cfg["data.grid"], cfg["data.extent"])


def teacher_config(cfg: dict) -> TeacherConfig:
    return TeacherConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("teacher.")})


def kdm_config(cfg: dict) -> KdmConfig:
    return KdmConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("kdm.")})


def _load_teacher(lay: Layout):
    arrays, meta = load_checkpoint(_require(lay.teacher, "teacher checkpoint (run train-teacher)"))
    return teacher_from_arrays(arrays, meta)


def _load_student(lay: Layout):
    arrays, meta = load_checkpoint(_require(lay.kdm, "kdm checkpoint (run train-kdm)"))
    return model_from_arrays(arrays, meta)[0]


def _prior_draws(n: int, seed: int, prior_std: float) -> np.ndarray:
    """Noise row ``i`` comes from substream (seed, i), as in the pair harvest."""
    out = np.empty((n, 2))
    for i in range(n):
        out[i] = prior_std * make_rng(seed, i).standard_normal(2)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_train_teacher(cfg: dict, out: str | None = None) -> Path:
    lay = Layout(cfg)
    tcfg = teacher_config(cfg)
    train = train_teacher_edm if tcfg.kind == "edm" else train_teacher_fm
    teacher = train(data_spec(cfg), tcfg)
    arrays, meta = teacher_to_arrays(teacher)
    save_checkpoint(lay.teacher, arrays, meta)
    _write_rows(lay.path("teacher", "-log.csv"), "record,loss",
                [(i, v) for i, v in enumerate(teacher.losses)])
    lay.write_config("teacher")
    _copy_out(lay.teacher, out)
    return lay.teacher


def cmd_gen_pairs(cfg: dict, out: str | None = None) -> Path:
    lay = Layout(cfg)
    teacher = _load_teacher(lay)
    ps = generate_pairs(teacher, cfg["pairs.n"], cfg["pairs.nfe"], cfg["pairs.seed"],
                        conditional=cfg["pairs.conditional"], threads=cfg["threads"])
    save_pairs(ps, lay.pairs)
    export_csv(ps, lay.path("pairs", ".csv"))
    lay.write_config("pairs")
    _copy_out(lay.pairs, out)
    return lay.pairs


def cmd_train_kdm(cfg: dict, out: str | None = None) -> Path:
    lay = Layout(cfg)
    ps = load_pairs(_require(lay.pairs, "pairs file (run gen-pairs)"))
    model, disc, log, _ = train_kdm(ps, kdm_config(cfg))
    arrays, meta = model_to_arrays(model, disc)
    meta["artifact"] = "kdm"
    save_checkpoint(lay.kdm, arrays, meta)
    log.to_csv(lay.path("kdm", "-log.csv"))
    lay.write_config("kdm")
    _copy_out(lay.kdm, out)
    return lay.kdm


def cmd_sample(cfg: dict, out: str | None = None) -> Path:
    """One-step student samples (or multi-step teacher samples) as CSV."""
    lay = Layout(cfg)
    n, seed, label = cfg["sample.count"], cfg["sample.seed"], cfg["sample.label"]
    if cfg["sample.source"] == "teacher":
        teacher = _load_teacher(lay)
        prior_std, n_classes = teacher.prior_std, teacher.n_classes
    else:
        model = _load_student(lay)
        prior_std, n_classes = model.input_scale, model.n_classes
    if label >= 0 and not n_classes:
        raise ConfigError("sample.label: the sampled model is unconditional")
    if label >= n_classes > 0:
        raise ConfigError(f"sample.label: must be < {n_classes}")
    x_T = _prior_draws(n, seed, prior_std)
    labels = None
    if n_classes:
        labels = (np.full(n, label) if label >= 0
                  else make_rng(seed, n, 1).integers(0, n_classes, size=n))
    if n == 0:
        x_0 = np.empty((0, 2))
    elif cfg["sample.source"] == "teacher":
        x_0 = sample_ode(teacher, x_T, cfg["sample.nfe"], labels)[-1]
    else:
        x_0 = sample_one_step(model, x_T, labels)
    cells = cell_of(data_spec(cfg), x_0) if n else np.empty(0, dtype=np.int64)
    path = Path(out) if out else lay.path("sample", ".csv")
    _write_rows(path, "xT_x,xT_y,x0_x,x0_y,label",
                [(*map(float, x_T[i]), *map(float, x_0[i]), int(cells[i])) for i in range(n)])
    lay.write_config("sample")
    return path


def _write_rows(path: Path, header: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")


def cmd_eval(cfg: dict, out: str | None = None) -> Path:
    """Quality, structure, outlier, sweep and agreement reports plus SVG figures."""
    lay = Layout(cfg)
    spec = data_spec(cfg)
    teacher = _load_teacher(lay)
    ps = load_pairs(_require(lay.pairs, "pairs file (run gen-pairs)"))
    model = _load_student(lay)
    folder = Path(out) if out else lay.root / "eval" / lay.stem("eval")
    folder.mkdir(parents=True, exist_ok=True)
    n, seed, nfe = cfg["eval.n"], cfg["eval.seed"], cfg["pairs.nfe"]
    prior = teacher.prior_std
    labels = (make_rng(seed, 2).integers(0, teacher.n_classes, size=n) if teacher.conditional
              else None)
    s_labels = labels if model.conditional else None

    def teacher_map(x, lab=labels):
        return sample_ode(teacher, x, nfe, lab)[-1]

    def student_map(x, lab=s_labels):
        return sample_one_step(model, x, lab)

    x_T = _prior_draws(n, seed, prior)
    real = sample_checkerboard(spec, n, make_rng(seed, 1))[0]
    t_samples, s_samples = teacher_map(x_T), student_map(x_T)
    gauss = make_rng(seed, 3).standard_normal((n, 2))
    _write_rows(folder / "quality.csv", "metric,value", [
        ("energy_teacher", ev.energy_distance(t_samples, real)),
        ("energy_student", ev.energy_distance(s_samples, real)),
        ("energy_gaussian_baseline", ev.energy_distance(gauss, real)),
        ("in_cell_teacher", ev.in_cell_fraction(spec, t_samples)),
        ("in_cell_student", ev.in_cell_fraction(spec, s_samples)),
    ])
    agr = ev.agreement(teacher_map, student_map, n, seed, prior)
    _write_rows(folder / "agreement.csv", "paired_mse,permuted_mse,ratio",
                [(agr.paired_mse, agr.permuted_mse, agr.ratio)])

    cells = cell_of(spec, ps.x_0)
    st = ev.knn_purity(ps.x_T, cells, cfg["eval.k"], spec.n_cells)
    _write_rows(folder / "structure.csv", "k,purity,chance,ratio,n_points",
                [(st.k, st.purity, st.chance, st.ratio, st.n_points)])
    rep = ev.detect_outliers(ps.x_0, cfg["eval.eps"], cfg["eval.min_pts"])
    prov = ev.outlier_provenance(ps.x_T, ps.x_0, rep, spec, prior)
    _write_rows(folder / "outliers.csv", "metric,value",
                [(k, str(v)) for k, v in prov.rows()]
                + [("tail_cause", str(prov.tail_cause)), ("boundary_cause", str(prov.boundary_cause))])

    m = min(cfg["eval.sweep_n"], n)
    sw_lab = None if labels is None else labels[:m]
    sw_t = ev.perturbation_sweep(lambda x: teacher_map(x, sw_lab), x_T[:m], cfg["eval.sigmas"],
                                 seed, cfg["eval.normalize"], prior)
    sw_s = ev.perturbation_sweep(lambda x: student_map(x, None if s_labels is None else s_labels[:m]),
                                 x_T[:m], cfg["eval.sigmas"], seed, cfg["eval.normalize"], prior)
    dt, ds = sw_t.displacement(), sw_s.displacement()
    _write_rows(folder / "sweep.csv", "sigma,teacher_displacement,student_displacement",
                list(zip(sw_t.sigmas, dt.tolist(), ds.tolist())))

    ext = spec.extent * 1.25
    figs = {
        "noise_by_cell.svg": ev.scatter_svg(ps.x_T[:5000], cells[:5000], title="x_T colored by cell of x_0"),
        "teacher_samples.svg": ev.scatter_svg(t_samples[:5000], cell_of(spec, t_samples[:5000]),
                                              extent=ext, title="teacher samples"),
        "student_samples.svg": ev.scatter_svg(s_samples[:5000], cell_of(spec, s_samples[:5000]),
                                              extent=ext, title="one-step student samples"),
        "outliers.svg": ev.scatter_svg(ps.x_0[:5000], np.where(rep.mask[:5000], 3, 0),
                                       extent=ext, title="DBSCAN outliers (red)"),
        "sweep.svg": ev.line_svg(sw_t.sigmas, {"teacher": dt, "student": ds},
                                 title="mean displacement vs perturbation sigma"),
    }
    for name, svg in figs.items():
        (folder / name).write_text(svg, encoding="utf-8")
    lay.write_config("eval")
    return folder


def cmd_verify_theory(cfg: dict, out: str | None = None) -> Path:
    """EDMD sweep and semantic-proximity check on the teacher's end map."""
    lay = Layout(cfg)
    teacher = _load_teacher(lay)
    nfe = cfg["pairs.nfe"]
    folder = Path(out) if out else lay.root / "theory" / lay.stem("theory")
    folder.mkdir(parents=True, exist_ok=True)
    if teacher.conditional:
        raise ConfigError("teacher.conditional: theory checks need an unconditional teacher")

    def end_map(x):
        return sample_ode(teacher, x, nfe)[-1]

    # EDMD samples are standard normal; scale them onto the teacher's prior
    reports = edmd_sweep(lambda x: end_map(teacher.prior_std * x), 2, cfg["theory.degrees"],
                         n_samples=cfg["theory.samples"], seed=cfg["theory.seed"])
    (folder / "edmd.csv").write_text(
        EDMD_CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in reports), encoding="utf-8")
    prox = verify_semantic_proximity(end_map, cfg["theory.n_pairs"], cfg["theory.radius"],
                                     seed=cfg["theory.seed"], prior_std=teacher.prior_std,
                                     n_calibration=cfg["theory.n_calibration"])
    (folder / "proximity.txt").write_text(prox.summary() + "\n", encoding="utf-8")
    lay.write_config("theory")
    return folder


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "gen-pairs": cmd_gen_pairs,
    "train-kdm": cmd_train_kdm,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
}


def _error_code(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, MissingInputError):
        return "missing-input", 3
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, FormatError):
        return "format", 4
    return "runtime", 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdm", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="key=value or JSON config file")
    ap.add_argument("--seed", type=int, help="seed of the stage being run")
    ap.add_argument("--out", help="extra copy of the main artifact (sample: the CSV path)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key; repeatable")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = {"train-teacher": "teacher", "gen-pairs": "pairs", "train-kdm": "kdm",
             "verify-theory": "theory"}.get(args.command, args.command)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        if args.seed is not None:
            overrides[_STAGE_SEED[stage]] = str(args.seed)
        cfg = load_config(args.config, overrides)
        result = COMMANDS[args.command](cfg, args.out)
    except (KdmError, OSError, ValueError, ArithmeticError) as exc:
        code, status = _error_code(exc)
        msg = " ".join(str(exc).split())
        print(f"kdm: error: {code}: {msg}", file=sys.stderr)
        return status
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
