"""iVAE and its VAE-family baselines.

Generative side: z ~ p(z | u) from :mod:`ivae_lab.priors`, then
x = f(z) + eps with eps ~ N(0, sigma^2 I), or x ~ Bernoulli(sigmoid(f(z))).
Inference side: q(z | x, u) = N(g(x, u), diag exp(logvar(x, u))).

Variants:

* ``ivae``        conditional prior with a learned lambda(u); u fed to the encoder.
* ``vae``         fixed standard normal (or Laplace) prior; u columns zeroed.
* ``beta_vae``    as ``vae`` with the KL weighted by beta.
* ``beta_tc_vae`` as ``vae`` with the KL split into index-code MI, total
  correlation and dimension-wise KL (minibatch-weighted sampling), weighted
  by alpha, beta, gamma.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import priors, rng
from .autodiff import (
    LOG_2PI,
    DomainError,
    NumericError,
    Tape,
    Tensor,
    apply_primitive,
    backward,
    concat,
    logsumexp,
    no_grad,
    softplus,
)
from .nets import (
    AdamState,
    LrSchedule,
    Mlp,
    MlpSpec,
    adam_step,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
    schedule_lr,
)

VARIANTS = ("ivae", "vae", "beta_vae", "beta_tc_vae")
GAUSSIAN_FAMILIES = ("gaussian_var", "gaussian_mean_var")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int
    latent_dim: int
    aux_dim: int
    family: str = "gaussian_var"
    variant: str = "ivae"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    hidden_dim: int = 50
    num_layers: int = 3
    slope: float = 0.01
    likelihood: str = "gaussian"
    noise_var: float = 0.01
    learn_noise: bool = False
    vae_prior: str = "gaussian"
    lambda_kind: str = "lookup_table"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "gaussian" and self.noise_var <= 0:
            raise ValueError("gaussian noise variance must be > 0")
        if self.vae_prior not in ("gaussian", "laplace"):
            raise ValueError(f"unknown vae prior {self.vae_prior!r}")
        if min(self.data_dim, self.latent_dim, self.aux_dim) < 1:
            raise ValueError("dimensions must be >= 1")

    @property
    def uses_u(self) -> bool:
        return self.variant == "ivae"

    @property
    def prior_spec(self) -> priors.ExpFamilySpec:
        if self.uses_u:
            return priors.ExpFamilySpec(self.family, self.latent_dim)
        kind = "laplace_scale" if self.vae_prior == "laplace" else "gaussian_var"
        return priors.ExpFamilySpec(kind, self.latent_dim)


class Model:
    """All parameters of one model: decoder, encoder and prior."""

    def __init__(self, config: ModelConfig, f_net: Mlp, g_net: Mlp, logvar_net: Mlp,
                 lambda_map: priors.LambdaMap | None, log_noise: Tensor | None = None):
        self.config = config
        self.f_net = f_net
        self.g_net = g_net
        self.logvar_net = logvar_net
        self.lambda_map = lambda_map
        self.log_noise = log_noise

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Canonical order: decoder, noise, encoder mean, encoder log-variance, prior."""
        out = self.f_net.named_parameters("decoder.f.")
        if self.log_noise is not None:
            out.append(("decoder.log_noise_var", self.log_noise))
        out += self.g_net.named_parameters("encoder.g.")
        out += self.logvar_net.named_parameters("encoder.logvar.")
        if self.lambda_map is not None:
            out += self.lambda_map.named_parameters("prior.lambda.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def prior_naturals(self, u) -> Tensor:
        """Natural parameters of p(z | u) per row."""
        spec = self.config.prior_spec
        if self.lambda_map is not None:
            return priors.eval_lambda(self.lambda_map, u)
        batch = u.shape[0]
        if spec.family_kind == "laplace_scale":
            row = np.ones(spec.dim)  # rate 1
        else:
            row = np.full(spec.dim, -0.5)  # unit variance
        return Tensor(np.broadcast_to(row, (batch, spec.dim)))


def build_model(config: ModelConfig, seed: int) -> Model:
    c = config
    f_out = "identity"
    f_net = init_mlp(MlpSpec(c.latent_dim, c.data_dim, c.hidden_dim, c.num_layers, c.slope, f_out), rng_seed(seed, 1))
    enc_in = c.data_dim + c.aux_dim
    g_net = init_mlp(MlpSpec(enc_in, c.latent_dim, c.hidden_dim, c.num_layers, c.slope), rng_seed(seed, 2))
    lv_net = init_mlp(MlpSpec(enc_in, c.latent_dim, c.hidden_dim, c.num_layers, c.slope), rng_seed(seed, 3))
    lambda_map = None
    if c.uses_u:
        spec = c.prior_spec
        if c.lambda_kind == "lookup_table":
            lambda_map = priors.LambdaMap.init_table(spec, c.aux_dim, rng_seed(seed, 4))
        else:
            lambda_map = priors.LambdaMap.init_mlp(spec, c.aux_dim, rng_seed(seed, 4), c.hidden_dim,
                                                   c.num_layers, c.slope)
    log_noise = None
    if c.learn_noise and c.likelihood == "gaussian":
        log_noise = Tensor(np.array(math.log(c.noise_var)), requires_grad=True)
    return Model(config, f_net, g_net, lv_net, lambda_map, log_noise)


def rng_seed(seed: int, salt: int) -> int:
    return int(rng.derive(seed, "model", salt).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# building blocks


def reparameterize(mu: Tensor, logvar: Tensor, seed) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) held constant."""
    eps = _noise(mu.shape, seed)
    return mu + (logvar * 0.5).exp() * Tensor._from_op(eps)


def _noise(shape, seed) -> np.ndarray:
    gen = rng.derive(*seed, "reparam") if isinstance(seed, tuple) else rng.derive(seed, "reparam")
    return rng.normal(gen, shape)


def encode(model: Model, x: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
    if model.config.uses_u:
        xu = concat([x, u], axis=1)
    else:
        xu = concat([x, Tensor(np.zeros(u.shape))], axis=1)
    return mlp_forward(model.g_net, xu), mlp_forward(model.logvar_net, xu)


def log_likelihood(model: Model, x: Tensor, z: Tensor) -> Tensor:
    """log p(x | z) per row."""
    c = model.config
    out = mlp_forward(model.f_net, z)
    if c.likelihood == "bernoulli":
        return (x * out - softplus(out)).sum(axis=1)
    sq = (x - out).square().sum(axis=1)
    if model.log_noise is None:
        return sq * (-0.5 / c.noise_var) - 0.5 * c.data_dim * (LOG_2PI + math.log(c.noise_var))
    inv = (-model.log_noise).exp()
    return -0.5 * (sq * inv) - 0.5 * c.data_dim * (model.log_noise + LOG_2PI)


def gaussian_kl(model: Model, mu: Tensor, logvar: Tensor, lam: Tensor) -> Tensor:
    """KL(q || p) per row for Gaussian priors given by natural parameters."""
    spec = model.config.prior_spec
    if spec.family_kind == "gaussian_var":
        prec = -2.0 * lam  # 1 / prior variance
        dev = mu.square()
    elif spec.family_kind == "gaussian_mean_var":
        l1 = apply_primitive("slice", [lam], {"key": (slice(None), slice(0, None, 2))})
        l2 = apply_primitive("slice", [lam], {"key": (slice(None), slice(1, None, 2))})
        prec = -2.0 * l2
        dev = (mu - l1 / prec).square()
    else:
        raise ValueError(f"analytic KL needs a Gaussian prior, got {spec.family_kind}")
    terms = -prec.log() - logvar + (logvar.exp() + dev) * prec - 1.0
    return 0.5 * terms.sum(axis=1)


def _log_q_pairwise(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """log q(z_i | x_j) per dimension, shape (B, B, n)."""
    b, n = z.shape
    zz = apply_primitive("broadcast", [z.reshape(b, 1, n)], {"shape": (b, b, n)})
    # (B, n) operands broadcast over the leading axis, so they vary with j
    return ((zz - mu).square() * (-logvar).exp() + (logvar + LOG_2PI)) * -0.5


def elbo(model: Model, x, u, seed, dataset_size: int | None = None, samples: int = 1,
         analytic_kl: bool = False, weights: tuple[float, float, float, float] | None = None) -> tuple[Tensor, dict]:
    """Mean objective per datapoint and its breakdown.

    The returned scalar is the variant's training objective; the breakdown
    holds floats for each term, the plain ELBO (``elbo``) and the
    per-datapoint plain ELBO values (``per_point``).
    """
    c = model.config
    xt = x if isinstance(x, Tensor) else Tensor(x)
    ut = u if isinstance(u, Tensor) else Tensor(u)
    if c.likelihood == "bernoulli" and not np.all((xt.data == 0) | (xt.data == 1)):
        raise ValueError("bernoulli likelihood needs x in {0, 1}")
    spec = c.prior_spec
    use_kl = analytic_kl and spec.family_kind in GAUSSIAN_FAMILIES

    mu, logvar = encode(model, xt, ut)
    lam = model.prior_naturals(ut)
    kl = gaussian_kl(model, mu, logvar, lam) if use_kl else None

    objective = None
    parts: dict[str, float] = {}
    per_point = np.zeros(xt.shape[0])
    for s in range(samples):
        sub_seed = (seed if isinstance(seed, tuple) else (seed,)) + (s,)
        eps = _noise(mu.shape, sub_seed)
        z = mu + (logvar * 0.5).exp() * Tensor._from_op(eps)
        recon = log_likelihood(model, xt, z)
        if use_kl:
            neg_kl = -kl
        else:
            log_q = -0.5 * (logvar.sum(axis=1) + float(eps.shape[1]) * LOG_2PI) \
                - 0.5 * Tensor._from_op((eps * eps).sum(axis=1))
            log_p = priors.log_prior(spec, lam, z)
            neg_kl = log_p - log_q

        if weights is not None or c.variant == "beta_tc_vae":
            if use_kl:
                raise ValueError("the decomposed objective is sampled; disable analytic_kl")
            a, b_mi, b_tc, b_dw = weights if weights is not None else (1.0, c.alpha, c.beta, c.gamma)
            n_data = dataset_size or xt.shape[0]
            log_nm = math.log(n_data * xt.shape[0])
            pair = _log_q_pairwise(z, mu, logvar)
            log_qz = logsumexp(pair.sum(axis=2), axis=1) - log_nm
            log_qz_prod = (logsumexp(pair, axis=1) - log_nm).sum(axis=1)
            mi = log_q - log_qz
            tc = log_qz - log_qz_prod
            dwkl = log_qz_prod - log_p
            obj = recon * a - mi * b_mi - tc * b_tc - dwkl * b_dw
            terms = {"recon": recon, "mutual_info": mi, "total_correlation": tc, "dimwise_kl": dwkl}
        elif c.variant in ("ivae", "vae"):
            obj = recon + neg_kl
            terms = {"recon": recon, "kl": -neg_kl}
        elif c.variant == "beta_vae":
            obj = recon + c.beta * neg_kl
            terms = {"recon": recon, "kl": -neg_kl}
        per_point += (recon + neg_kl).data / samples
        sample_obj = obj.mean()
        objective = sample_obj if objective is None else objective + sample_obj
        for key, val in terms.items():
            parts[key] = parts.get(key, 0.0) + float(val.data.mean()) / samples
    if samples > 1:
        objective = objective * (1.0 / samples)
    parts["objective"] = objective.item()
    parts["elbo"] = float(per_point.mean())
    parts["per_point"] = per_point
    return objective, parts


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    samples: int = 1
    analytic_kl: bool = False
    anneal: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.anneal <= 1.0:
            raise ValueError("anneal must be a fraction of training in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.samples < 1:
            raise ValueError(f"invalid training config {self}")
        if isinstance(self.schedule, dict):
            self.schedule = LrSchedule(**self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    adam: AdamState


def anneal_weights(step: int, anneal_steps: int, noise_var: float) -> tuple[float, float, float, float] | None:
    """Weights (recon, MI, TC, dimension-wise KL) during the warm-up phase.

    Early on the dimension-wise KL to the conditional prior dominates and the
    TC term is off; the weights then move toward a reconstruction-heavy
    objective. After ``anneal_steps`` the plain ELBO is used (None).
    """
    if step >= anneal_steps:
        return None
    t = step / anneal_steps
    a = 0.5 / noise_var
    return a * (1.0 + t), max(1.0, 0.3 * a * (1.0 - t)), t, max(1.0, 0.5 * a * (1.0 - t))


def train(model: Model, x: np.ndarray, u: np.ndarray, config: TrainConfig, start_epoch: int = 0,
          adam: AdamState | None = None, on_epoch=None) -> TrainResult:
    """Maximize the objective with Adam over shuffled minibatches.

    Shuffles and reparameterization noise are derived from (seed, epoch,
    batch), so resuming at ``start_epoch`` with the saved Adam state
    reproduces an uninterrupted run.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n_data = x.shape[0]
    if x.shape[1] != model.config.data_dim or u.shape[1] != model.config.aux_dim:
        raise ValueError(f"data dims {x.shape[1]}, {u.shape[1]} do not match model "
                         f"{model.config.data_dim}, {model.config.aux_dim}")
    if config.batch_size > n_data:
        raise ValueError("batch size exceeds dataset size")
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    adam = adam or AdamState(lr=config.lr)
    trace = []
    batches = -(-n_data // config.batch_size)
    anneal_steps = int(config.anneal * config.epochs * batches)
    for epoch in range(start_epoch, config.epochs):
        adam.lr = schedule_lr(config.schedule, epoch, config.lr)
        order = rng.derive(config.seed, "shuffle", epoch).permutation(n_data)
        per_point = np.empty(n_data)
        for b, start in enumerate(range(0, n_data, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                weights = anneal_weights(epoch * batches + b, anneal_steps, model.config.noise_var)
                with Tape():
                    obj, parts = elbo(model, x[idx], u[idx], (config.seed, epoch, b), n_data,
                                      config.samples, config.analytic_kl, weights)
                    model.zero_grad()
                    backward(-obj)
                adam_step(adam, params, names=names)
            except (NumericError, DomainError, FloatingPointError) as err:
                raise TrainingDivergedError(f"training diverged at epoch {epoch}, batch {b}: {err}") from err
            per_point[idx] = parts["per_point"]
        row = {
            "epoch": epoch,
            "elbo": float(per_point.mean()),
            "elbo_se": float(per_point.std(ddof=1) / math.sqrt(n_data)),
            "lr": adam.lr,
        }
        trace.append(row)
        if on_epoch is not None:
            on_epoch(row, model, adam)
    return TrainResult(model, trace, adam)


def evaluate_elbo(model: Model, x: np.ndarray, u: np.ndarray, seed: int = 0, samples: int = 1,
                  analytic_kl: bool = False, batch_size: int = 4096) -> tuple[float, float]:
    """Mean plain ELBO over a dataset and its standard error."""
    vals = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            _, parts = elbo(model, x[start:start + batch_size], u[start:start + batch_size],
                            (seed, start), x.shape[0], samples, analytic_kl)
            vals.append(parts["per_point"])
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def posterior_stats(model: Model, x, u, seed: int = 0, batch_size: int = 8192):
    """Posterior means, variances and one reparameterized sample per row."""
    mus, vars_ = [], []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            mu, logvar = encode(model, Tensor(x[start:start + batch_size]), Tensor(u[start:start + batch_size]))
            mus.append(mu.data)
            vars_.append(np.exp(logvar.data))
    mu, var = np.concatenate(mus), np.concatenate(vars_)
    sample = mu + np.sqrt(var) * _noise(mu.shape, (seed, 0))
    return mu, var, sample


def latent_estimate(model: Model, x, u, use_samples: bool = False, seed: int = 0) -> np.ndarray:
    mu, _, sample = posterior_stats(model, x, u, seed)
    return sample if use_samples else mu


def generate(model: Model, u: np.ndarray, seed: int, noise: bool = True) -> np.ndarray:
    """Draw z ~ p(z | u) then x ~ p(x | z)."""
    c = model.config
    u = np.asarray(u, dtype=np.float64)
    with no_grad():
        lam = model.prior_naturals(Tensor(u)).data
        z = priors.sample_prior(c.prior_spec, lam, u.shape[0], seed)
        out = mlp_forward(model.f_net, Tensor(z)).data
    gen = rng.derive(seed, "generate-noise")
    if c.likelihood == "bernoulli":
        m = 0.5 * (1.0 + np.tanh(0.5 * out))
        return (gen.random(m.shape) < m).astype(np.float64) if noise else m
    if not noise:
        return out
    var = c.noise_var if model.log_noise is None else math.exp(model.log_noise.item())
    return out + math.sqrt(var) * rng.normal(gen, out.shape)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: Model, stem, metadata: dict | None = None, adam: AdamState | None = None):
    named = [(name, p.data) for name, p in model.named_parameters()]
    meta = dict(metadata or {})
    meta["model_config"] = asdict(model.config)
    meta["variant"] = model.config.variant
    meta["prior"] = {"family": model.config.prior_spec.family_kind, "n": model.config.latent_dim,
                     "conditional": model.config.uses_u,
                     "lambda_kind": model.config.lambda_kind if model.config.uses_u else None}
    meta["init"] = "uniform fan-based, a = sqrt(6 / (fan_in + fan_out)), zero biases"
    if model.lambda_map is not None and model.lambda_map.kind == "lookup_table":
        meta["prior"]["naturals"] = model.lambda_map.naturals_table().tolist()
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                        "step_count": adam.step_count}
        if adam.m:
            names = [n for n, _ in named]
            named += [(f"adam.m.{n}", m) for n, m in zip(names, adam.m)]
            named += [(f"adam.v.{n}", v) for n, v in zip(names, adam.v)]
    return save_checkpoint(stem, named, meta)


def load_model(stem) -> tuple[Model, dict, AdamState | None]:
    meta, arrays = load_checkpoint(stem)
    config = ModelConfig(**meta["model_config"])
    model = build_model(config, 0)
    names = []
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].copy()
        p.grad = np.zeros_like(p.data)
        names.append(name)
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step_count=a["step_count"])
        if f"adam.m.{names[0]}" in arrays:
            adam.m = [arrays[f"adam.m.{n}"].copy() for n in names]
            adam.v = [arrays[f"adam.v.{n}"].copy() for n in names]
    return model, meta, adam


def with_variant(config: ModelConfig, variant: str, **overrides) -> ModelConfig:
    return replace(config, variant=variant, **overrides)
