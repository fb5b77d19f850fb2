"""Koopman-distilled one-step student.

The student encodes a noise sample, advances the latent code with a single
linear operator and decodes: x0_hat = dec(K enc_noisy(x_T) [+ control(c)]).
Training follows the alternating generator / discriminator loop with latent
noise injection; sampling uses one pass through each network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, UnsupportedOperation
from .ndmath import (
    EMBED_DIM,
    AdamState,
    Mlp,
    adam_step,
    make_rng,
    mlp_backward,
    mlp_forward,
    sigmoid,
    sinusoidal_embedding,
    softplus,
)
from .pairs import PairSet

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_rec", "L_lat", "L_pred", "L_adv_gen", "L_total")


@dataclass
class DenseKoopman:
    C: np.ndarray

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def params(self):
        return [self.C]

    def param_names(self):
        return ["koopman.C"]


@dataclass
class FactorizedKoopman:
    """C = P_inv diag(lambda) P in real block form, lambda_j = exp(-exp(nu_j)) e^{i theta_j}."""

    P_re: np.ndarray
    P_im: np.ndarray
    Pinv_re: np.ndarray
    Pinv_im: np.ndarray
    nu: np.ndarray
    theta: np.ndarray

    @property
    def dim(self) -> int:
        return self.P_re.shape[0]

    def params(self):
        return [self.P_re, self.P_im, self.Pinv_re, self.Pinv_im, self.nu, self.theta]

    def param_names(self):
        return [f"koopman.{n}" for n in ("P_re", "P_im", "Pinv_re", "Pinv_im", "nu", "theta")]

    def eigen_parts(self):
        mod = np.exp(-np.exp(self.nu))
        return mod * np.cos(self.theta), mod * np.sin(self.theta)


KoopmanOperator = DenseKoopman | FactorizedKoopman


def init_koopman(kind: str, d: int, rng: np.random.Generator) -> KoopmanOperator:
    if kind == "dense":
        return DenseKoopman(np.eye(d))
    if kind == "factorized":
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return FactorizedKoopman(
            P_re=q, P_im=0.01 * rng.standard_normal((d, d)),
            Pinv_re=q.T.copy(), Pinv_im=0.01 * rng.standard_normal((d, d)),
            # moduli start near 0.9
            nu=np.full(d, np.log(-np.log(0.9))), theta=rng.uniform(-0.1, 0.1, d))
    raise ConfigError(f"unknown operator kind {kind!r}")


def _check_latent(op, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != op.dim:
        raise ShapeError(f"latent width {z.shape[-1]} != operator dimension {op.dim}")
    return z


def koopman_apply(op: KoopmanOperator, z, cache: dict | None = None) -> np.ndarray:
    """Advance latent rows ``z`` one step with the operator."""
    z = _check_latent(op, z)
    if cache is not None:
        cache["z"] = z
    if isinstance(op, DenseKoopman):
        return z @ op.C.T
    # [z; 0] through the 2d x 2d block matrices, keeping the top half
    a = z @ op.P_re.T
    b = z @ op.P_im.T
    lr, li = op.eigen_parts()
    u_re = a * lr - b * li
    u_im = a * li + b * lr
    if cache is not None:
        cache.update(a=a, b=b, lr=lr, li=li, u_re=u_re, u_im=u_im)
    return u_re @ op.Pinv_re.T - u_im @ op.Pinv_im.T


def koopman_backward(op: KoopmanOperator, z, g, cache: dict | None = None):
    """Gradients of sum(koopman_apply(op, z) * g): (param_grads, dz)."""
    g = np.asarray(g, dtype=np.float64)
    if isinstance(op, DenseKoopman):
        z = _check_latent(op, cache["z"] if cache else z)
        return [g.T @ z], g @ op.C
    if cache is None:
        cache = {}
        koopman_apply(op, z, cache)
    z, a, b = cache["z"], cache["a"], cache["b"]
    lr, li, u_re, u_im = cache["lr"], cache["li"], cache["u_re"], cache["u_im"]
    g_pinv_re = g.T @ u_re
    g_pinv_im = -(g.T @ u_im)
    du_re = g @ op.Pinv_re
    du_im = -(g @ op.Pinv_im)
    da = du_re * lr + du_im * li
    db = -du_re * li + du_im * lr
    g_lr = np.sum(du_re * a + du_im * b, axis=0)
    g_li = np.sum(du_im * a - du_re * b, axis=0)
    mod = np.exp(-np.exp(op.nu))
    c, s = np.cos(op.theta), np.sin(op.theta)
    g_theta = mod * (c * g_li - s * g_lr)
    g_nu = (g_lr * c + g_li * s) * (-np.exp(op.nu) * mod)
    g_p_re = da.T @ z
    g_p_im = db.T @ z
    dz = da @ op.P_re + db @ op.P_im
    return [g_p_re, g_p_im, g_pinv_re, g_pinv_im, g_nu, g_theta], dz


def koopman_eigenvalues(op: KoopmanOperator) -> np.ndarray:
    if not isinstance(op, FactorizedKoopman):
        raise UnsupportedOperation("eigenvalues are only exposed for the factorized operator")
    return np.exp(-np.exp(op.nu)) * np.exp(1j * op.theta)


@dataclass
class KdmConfig:
    iterations: int = 5_000
    batch: int = 512
    lr: float = 3e-4
    disc_lr: float = 3e-4
    adv_weight: float = 0.01
    latent_noise: float = 0.4
    latent_dim: int = 64
    hidden: tuple[int, ...] = (128, 128)
    disc_hidden: tuple[int, ...] = (64, 64)
    conditional: bool = False
    operator: str = "dense"
    use_rec: bool = True
    use_lat: bool = True
    use_pred: bool = True
    use_adv: bool = True
    rec_noise_free: bool = False
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.adv_weight < 0:
            raise ConfigError("adv_weight must be >= 0")
        if self.latent_noise < 0:
            raise ConfigError("latent_noise must be >= 0")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.operator not in ("dense", "factorized"):
            raise ConfigError(f"unknown operator kind {self.operator!r}")
        if self.iterations < 0 or self.batch < 1 or self.lr <= 0 or self.disc_lr <= 0:
            raise ConfigError("iterations >= 0, batch >= 1 and positive learning rates required")

    @property
    def adversarial(self) -> bool:
        return self.use_adv and self.adv_weight > 0


@dataclass
class KdmModel:
    enc_clean: Mlp
    enc_noisy: Mlp
    koopman: KoopmanOperator
    dec: Mlp
    control: np.ndarray | None = None  # (n_classes, d) per-class latent offset
    input_scale: float = 1.0  # x_T is divided by this before encoding

    @property
    def latent_dim(self) -> int:
        return self.koopman.dim

    @property
    def n_classes(self) -> int:
        return 0 if self.control is None else self.control.shape[0]

    @property
    def conditional(self) -> bool:
        return self.control is not None

    def params(self) -> list[np.ndarray]:
        ps = self.enc_clean.params() + self.enc_noisy.params() + self.koopman.params() + self.dec.params()
        return ps + ([self.control] if self.conditional else [])

    def param_names(self) -> list[str]:
        names = (self.enc_clean.param_names("enc_clean.") + self.enc_noisy.param_names("enc_noisy.")
                 + self.koopman.param_names() + self.dec.param_names("dec."))
        return names + (["control"] if self.conditional else [])

    def embed(self, t: float, labels, n: int) -> np.ndarray:
        """Time marker features (t=1 noisy side, t=0 clean side) plus one-hot label."""
        emb = np.broadcast_to(sinusoidal_embedding([t]), (n, EMBED_DIM))
        if not self.conditional:
            return emb
        return np.concatenate([emb, np.eye(self.n_classes)[labels]], axis=1)

    def __post_init__(self):
        d = self.latent_dim
        if self.enc_clean.out_dim != d or self.enc_noisy.out_dim != d or self.dec.in_dim != d:
            raise ShapeError("encoder outputs, operator and decoder input must share latent_dim")
        if self.control is not None and self.control.shape[1] != d:
            raise ShapeError("control output width must equal latent_dim")


@dataclass
class Discriminator:
    net: Mlp
    n_classes: int = 0

    def embed(self, labels, n):
        if not self.n_classes:
            return None
        return np.eye(self.n_classes)[labels]

    def logits(self, x, labels=None) -> np.ndarray:
        return mlp_forward(self.net, x, self.embed(labels, len(x)))[:, 0]


def init_model(cfg: KdmConfig, rng: np.random.Generator, n_classes: int = 0,
               input_scale: float = 1.0) -> tuple[KdmModel, Discriminator]:
    d = cfg.latent_dim
    k = n_classes if cfg.conditional else 0
    emb = EMBED_DIM + k
    model = KdmModel(
        enc_clean=Mlp.init([2, *cfg.hidden, d], rng, emb),
        enc_noisy=Mlp.init([2, *cfg.hidden, d], rng, emb),
        koopman=init_koopman(cfg.operator, d, rng),
        dec=Mlp.init([d, *cfg.hidden, 2], rng, emb),
        control=np.zeros((k, d)) if k else None,
        input_scale=float(input_scale),
    )
    disc = Discriminator(Mlp.init([2, *cfg.disc_hidden, 1], rng, k), k)
    return model, disc


def _require_labels(model, labels, n):
    if model.conditional:
        if labels is None:
            raise ConfigError("conditional model needs a label")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        if labels.min() < 0 or labels.max() >= model.n_classes:
            raise ConfigError(f"labels must lie in [0, {model.n_classes})")
        return labels
    if labels is not None:
        raise ConfigError("unconditional model takes no label")
    return None


def _mse(a, b):
    diff = a - b
    with np.errstate(over="ignore", invalid="ignore"):  # caller checks finiteness
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _generator_pass(model: KdmModel, disc: Discriminator | None, x_T, x_0, labels,
                    cfg: KdmConfig, rng: np.random.Generator, grads: bool):
    """Losses (and optionally parameter grads) for one batch; also returns the fakes."""
    n = len(x_T)
    k_noisy = model.embed(1.0, labels, n)
    k_clean = model.embed(0.0, labels, n)
    d = model.latent_dim
    eps_0 = cfg.latent_noise * rng.standard_normal((n, d))
    eps_T = cfg.latent_noise * rng.standard_normal((n, d))

    c_clean, c_noisy, c_rec, c_push, c_op = [], [], [], [], {}
    z_0 = mlp_forward(model.enc_clean, x_0, k_clean, cache=c_clean)
    xs = x_T / model.input_scale
    z_T = mlp_forward(model.enc_noisy, xs, k_noisy, cache=c_noisy)
    z_push = koopman_apply(model.koopman, z_T + eps_T, cache=c_op)
    if model.conditional:
        z_push = z_push + model.control[labels]
    z_rec_in = z_0 if cfg.rec_noise_free else z_0 + eps_0
    x_rec = mlp_forward(model.dec, z_rec_in, k_clean, cache=c_rec)
    x_push = mlp_forward(model.dec, z_push, k_clean, cache=c_push)

    l_rec, g_rec = _mse(x_rec, x_0)
    l_lat, g_lat = _mse(z_push, z_0)  # gradient w.r.t. z_push; negated for z_0
    l_pred, g_pred = _mse(x_push, x_0)
    l_adv, g_adv = 0.0, None
    if disc is not None:
        d_cache = []
        logit = mlp_forward(disc.net, x_push, disc.embed(labels, n), cache=d_cache)[:, 0]
        l_adv = float(np.mean(softplus(-logit)))
        g_adv = (d_cache, -sigmoid(-logit)[:, None] / n)
    total = 0.0
    for on, val, w in ((cfg.use_rec, l_rec, 1.0), (cfg.use_lat, l_lat, 1.0),
                       (cfg.use_pred, l_pred, 1.0), (cfg.adversarial, l_adv, cfg.adv_weight)):
        if on:
            total = total + w * val
    losses = dict(L_rec=l_rec, L_lat=l_lat, L_pred=l_pred, L_adv_gen=l_adv, L_total=total)
    if not all(np.isfinite(v) for v in losses.values()):
        raise TrainingError(f"non-finite loss {losses}")
    if not grads:
        return losses, None, x_push

    # reverse pass, accumulating into the same order as model.params()
    g_dec = [np.zeros_like(p) for p in model.dec.params()]
    g_xpush = np.zeros_like(x_push)
    if cfg.use_pred:
        g_xpush += g_pred
    if cfg.adversarial and g_adv is not None:
        _, g_in = mlp_backward(disc.net, x_push, disc.embed(labels, n), g_adv[1], cache=g_adv[0])
        g_xpush += cfg.adv_weight * g_in
    g_push = np.zeros_like(z_push)
    if cfg.use_pred or cfg.adversarial:
        pg, g_push = mlp_backward(model.dec, z_push, k_clean, g_xpush, cache=c_push)
        g_dec = [a + b for a, b in zip(g_dec, pg)]
    g_z0 = np.zeros_like(z_0)
    if cfg.use_rec:
        pg, g_zr = mlp_backward(model.dec, z_rec_in, k_clean, g_rec, cache=c_rec)
        g_dec = [a + b for a, b in zip(g_dec, pg)]
        g_z0 += g_zr
    if cfg.use_lat:
        g_push = g_push + g_lat
        g_z0 -= g_lat
    g_op, g_zT = koopman_backward(model.koopman, None, g_push, cache=c_op)
    g_enc_noisy, _ = mlp_backward(model.enc_noisy, xs, k_noisy, g_zT, cache=c_noisy)
    g_enc_clean, _ = mlp_backward(model.enc_clean, x_0, k_clean, g_z0, cache=c_clean)
    all_grads = g_enc_clean + g_enc_noisy + g_op + g_dec
    if model.conditional:
        g_ctrl = np.zeros_like(model.control)
        np.add.at(g_ctrl, labels, g_push)
        all_grads.append(g_ctrl)
    return losses, all_grads, x_push


def kdm_losses(model: KdmModel, x_T, x_0, disc: Discriminator | None, cfg: KdmConfig,
               rng: np.random.Generator, labels=None) -> dict[str, float]:
    """The four loss terms and their weighted total on one batch."""
    x_T = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    x_0 = np.atleast_2d(np.asarray(x_0, dtype=np.float64))
    if len(x_T) == 0 or len(x_T) != len(x_0):
        raise ConfigError("batch must be nonempty with matching x_T / x_0")
    if cfg.adversarial and disc is None:
        raise ConfigError("adversarial loss enabled but no discriminator given")
    labels = _require_labels(model, labels, len(x_T))
    losses, _, _ = _generator_pass(model, disc if cfg.adversarial else None, x_T, x_0, labels,
                                   cfg, rng, grads=False)
    return losses


def disc_loss(disc: Discriminator, real, fake, labels=None, grads: bool = False):
    """CE(1, D(real)) + CE(0, D(fake)); fakes are constants here."""
    real = np.atleast_2d(real)
    fake = np.atleast_2d(fake)
    if len(real) == 0 or len(fake) == 0:
        raise ConfigError("real and fake batches must be nonempty")
    x = np.concatenate([real, fake])
    emb = None
    if disc.n_classes:
        lab = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(real),))
        emb = disc.embed(np.concatenate([lab, lab]), len(x))
    cache = []
    logit = mlp_forward(disc.net, x, emb, cache=cache)[:, 0]
    lr_, lf = logit[:len(real)], logit[len(real):]
    loss = float(np.mean(softplus(-lr_)) + np.mean(softplus(lf)))
    if not grads:
        return loss
    g = np.concatenate([-sigmoid(-lr_) / len(real), sigmoid(lf) / len(fake)])[:, None]
    pg, _ = mlp_backward(disc.net, x, emb, g, cache=cache)
    return loss, pg


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self, path) -> None:
        cols = ("iteration", "L_rec", "L_lat", "L_pred", "L_adv_gen", "L_disc")
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) if c != "iteration" else str(r[c]) for c in cols) + "\n")


def training_pairs(pairs: PairSet, cfg: KdmConfig):
    """Arrays used for training; conditional runs drop pairs that landed outside every cell."""
    if len(pairs) == 0:
        raise ConfigError("cannot train on an empty pair set")
    if cfg.conditional:
        if pairs.labels is None:
            raise ConfigError("conditional training needs a labeled pair set")
        keep = pairs.labels >= 0
        return pairs.x_T[keep], pairs.x_0[keep], pairs.labels[keep]
    return pairs.x_T, pairs.x_0, None


def train_kdm(pairs: PairSet, cfg: KdmConfig, rng: np.random.Generator | None = None,
              model: KdmModel | None = None, disc: Discriminator | None = None):
    """Alternating Adam updates: model on the total loss, then discriminator.

    Returns (model, discriminator, TrainLog, (model_opt, disc_opt)).
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    x_T, x_0, labels = training_pairs(pairs, cfg)
    n_classes = pairs.meta.grid ** 2 // 2 if cfg.conditional else 0
    if model is None:
        model, disc = init_model(cfg, rng, n_classes, input_scale=pairs.meta.prior_std)
    params = model.params()
    opt = AdamState.for_params(params, model.param_names())
    d_params = disc.net.params()
    d_opt = AdamState.for_params(d_params, disc.net.param_names("disc."))
    train_log = TrainLog()
    any_loss = cfg.use_rec or cfg.use_lat or cfg.use_pred or cfg.adversarial
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(x_T), size=cfg.batch)
        lab = None if labels is None else labels[idx]
        try:
            losses, grads, fake = _generator_pass(model, disc if cfg.adversarial else None,
                                                  x_T[idx], x_0[idx], lab, cfg, rng, grads=True)
        except TrainingError as exc:
            raise TrainingError(str(exc), it) from None
        l_disc = 0.0
        if any_loss:
            adam_step(params, grads, opt, cfg.lr)
        if cfg.adversarial:
            l_disc, d_grads = disc_loss(disc, x_0[idx], fake, lab, grads=True)
            if not np.isfinite(l_disc):
                raise TrainingError("non-finite discriminator loss", it)
            adam_step(d_params, d_grads, d_opt, cfg.disc_lr)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            train_log.append(iteration=it, L_disc=l_disc,
                             **{k: losses[k] for k in LOSS_KEYS if k != "L_total"})
            log.debug("kdm it=%d %s", it, losses)
    return model, disc, train_log, (opt, d_opt)


def sample_one_step(model: KdmModel, x_T, label=None) -> np.ndarray:
    """x0_hat = dec(K enc_noisy(x_T) [+ control(label)]); no randomness."""
    x = np.asarray(x_T, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = len(x)
    labels = _require_labels(model, label, n)
    z = mlp_forward(model.enc_noisy, x / model.input_scale, model.embed(1.0, labels, n))
    z = koopman_apply(model.koopman, z)
    if model.conditional:
        z = z + model.control[labels]
    out = mlp_forward(model.dec, z, model.embed(0.0, labels, n))
    return out[0] if single else out


def model_to_arrays(model: KdmModel, disc: Discriminator | None = None):
    arrays = {}
    arrays.update(model.enc_clean.to_arrays("enc_clean"))
    arrays.update(model.enc_noisy.to_arrays("enc_noisy"))
    arrays.update(model.dec.to_arrays("dec"))
    arrays.update(dict(zip(model.koopman.param_names(), model.koopman.params())))
    if model.conditional:
        arrays["control"] = model.control
    if disc is not None:
        arrays.update(disc.net.to_arrays("disc"))
    meta = dict(operator="dense" if isinstance(model.koopman, DenseKoopman) else "factorized",
                n_classes=str(model.n_classes), input_scale=repr(float(model.input_scale)))
    return arrays, meta


def model_from_arrays(arrays, meta) -> tuple[KdmModel, Discriminator | None]:
    k = int(meta["n_classes"])
    emb = EMBED_DIM + k
    if meta["operator"] == "dense":
        op = DenseKoopman(np.array(arrays["koopman.C"]))
    else:
        op = FactorizedKoopman(*(np.array(arrays[f"koopman.{f.name}"])
                                 for f in fields(FactorizedKoopman)))
    model = KdmModel(Mlp.from_arrays(arrays, "enc_clean", emb), Mlp.from_arrays(arrays, "enc_noisy", emb),
                     op, Mlp.from_arrays(arrays, "dec", emb),
                     np.array(arrays["control"]) if k else None, float(meta["input_scale"]))
    disc = None
    if "disc.layer0.weight" in arrays:
        disc = Discriminator(Mlp.from_arrays(arrays, "disc", k), k)
    return model, disc
