"""Conditionally factorized exponential-family priors p(z | u).

Each latent component has a univariate density

    Q(z_i) / Z(lambda_i) * exp(<T(z_i), lambda_i>)

with natural parameters lambda_i = lambda(u)_i. Natural parameters are laid
out component-major, statistic-minor: for ``gaussian_mean_var`` a row is
``(l_11, l_12, l_21, l_22, ...)``.

Supported families:

================== === ============== ============ ==========================
family              k   T(z)           Q(z)         natural domain
================== === ============== ============ ==========================
gaussian_mean_var   2   (z, z^2)       1            second entry < 0
gaussian_var        1   z^2            1            < 0
laplace_scale       1   -|z|           1            > 0
gaussian_location   1   z              exp(-z^2)    any real
================== === ============== ============ ==========================

Functions take numpy arrays or :class:`Tensor` inputs; numpy in gives numpy
out, a Tensor anywhere gives a Tensor out (on the tape when tracked).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .autodiff import Tensor, apply_primitive, concat, no_grad, softplus
from .nets import Mlp, MlpSpec, init_mlp, mlp_forward

FAMILY_K = {"gaussian_mean_var": 2, "gaussian_var": 1, "laplace_scale": 1, "gaussian_location": 1}
LOG_PI = math.log(math.pi)
DOMAIN_EPS = 1e-6


@dataclass(frozen=True)
class ExpFamilySpec:
    family_kind: str
    n: int

    def __post_init__(self):
        if self.family_kind not in FAMILY_K:
            raise ValueError(f"unknown family {self.family_kind!r}; expected one of {sorted(FAMILY_K)}")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def k(self) -> int:
        return FAMILY_K[self.family_kind]

    @property
    def dim(self) -> int:
        return self.n * self.k


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(result: Tensor, *inputs):
    if any(isinstance(x, Tensor) for x in inputs):
        return result
    return result.data


def _cols(x: Tensor, start: int, step: int) -> Tensor:
    return apply_primitive("slice", [x], {"key": (slice(None), slice(start, None, step))})


def sufficient_stats(spec: ExpFamilySpec, z):
    """T(z) for a (batch, n) array, shape (batch, n*k)."""
    zt = _tensor(z)
    kind = spec.family_kind
    if kind == "gaussian_var":
        out = zt.square()
    elif kind == "laplace_scale":
        out = -zt.abs()
    elif kind == "gaussian_location":
        out = zt * 1.0
    else:
        batch = zt.shape[0]
        pair = concat([zt.reshape(batch, spec.n, 1), zt.square().reshape(batch, spec.n, 1)], axis=2)
        out = pair.reshape(batch, spec.dim)
    return _out(out, z)


def check_domain(spec: ExpFamilySpec, lam) -> None:
    values = np.asarray(lam.data if isinstance(lam, Tensor) else lam, dtype=np.float64)
    if values.shape[-1] != spec.dim:
        raise ValueError(f"natural parameters must have trailing size {spec.dim}, got {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("natural parameters contain non-finite values")
    kind = spec.family_kind
    if kind == "gaussian_var" and np.any(values >= 0):
        raise ValueError("gaussian_var naturals must be strictly negative")
    if kind == "gaussian_mean_var" and np.any(values[..., 1::2] >= 0):
        raise ValueError("gaussian_mean_var z^2 coefficients must be strictly negative")
    if kind == "laplace_scale" and np.any(values <= 0):
        raise ValueError("laplace_scale naturals must be strictly positive")


def log_normalizer(spec: ExpFamilySpec, lam):
    """Per-component log Z, shape (batch, n)."""
    lt = _tensor(lam)
    kind = spec.family_kind
    if kind == "gaussian_var":
        out = 0.5 * LOG_PI - 0.5 * (-lt).log()
    elif kind == "laplace_scale":
        out = math.log(2.0) - lt.log()
    elif kind == "gaussian_location":
        out = 0.25 * lt.square() + 0.5 * LOG_PI
    else:
        l1, l2 = _cols(lt, 0, 2), _cols(lt, 1, 2)
        out = -(l1.square() / (4.0 * l2)) + 0.5 * LOG_PI - 0.5 * (-l2).log()
    return _out(out, lam)


def expected_stats(spec: ExpFamilySpec, lam: np.ndarray) -> np.ndarray:
    """Gradient of log Z with respect to lambda (the mean of T), closed form."""
    lam = np.asarray(lam, dtype=np.float64)
    kind = spec.family_kind
    if kind == "gaussian_var":
        return -0.5 / lam
    if kind == "laplace_scale":
        return -1.0 / lam
    if kind == "gaussian_location":
        return lam / 2.0
    out = np.empty_like(lam)
    l1, l2 = lam[..., 0::2], lam[..., 1::2]
    out[..., 0::2] = -l1 / (2.0 * l2)
    out[..., 1::2] = l1**2 / (4.0 * l2**2) - 0.5 / l2
    return out


def log_prior(spec: ExpFamilySpec, lam, z):
    """Normalized log p(z | lambda) summed over components, shape (batch,)."""
    check_domain(spec, lam)
    lt, zt = _tensor(lam), _tensor(z)
    if lt.ndim == 1:
        lt = lt.reshape(1, spec.dim)
    stats = sufficient_stats(spec, zt)
    if lt.shape[0] != stats.shape[0]:
        lt = apply_primitive("broadcast", [lt], {"shape": stats.shape})
    inner = (stats * lt).sum(axis=1)
    log_z = log_normalizer(spec, lt).sum(axis=1)
    out = inner - log_z
    if spec.family_kind == "gaussian_location":
        out = out - zt.square().sum(axis=1)
    return _out(out, lam, z)


def natural_to_moment(spec: ExpFamilySpec, lam) -> tuple[np.ndarray, np.ndarray]:
    """(mean, variance) per component."""
    check_domain(spec, lam)
    lam = np.asarray(lam, dtype=np.float64)
    kind = spec.family_kind
    if kind == "gaussian_var":
        return np.zeros_like(lam), -0.5 / lam
    if kind == "laplace_scale":
        return np.zeros_like(lam), 2.0 / lam**2
    if kind == "gaussian_location":
        return lam / 2.0, np.full_like(lam, 0.5)
    var = -0.5 / lam[..., 1::2]
    return lam[..., 0::2] * var, var


def moment_to_natural(spec: ExpFamilySpec, mean, variance) -> np.ndarray:
    """Natural parameters from per-component mean and variance.

    For ``laplace_scale`` the scale is the mean absolute deviation
    b = sqrt(variance / 2) and the natural parameter is 1 / b. For
    ``gaussian_location`` the variance is pinned to 1/2 by the base measure.
    """
    variance = np.asarray(variance, dtype=np.float64)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), variance.shape)
    if np.any(variance <= 0):
        raise ValueError("variance must be strictly positive")
    kind = spec.family_kind
    if kind == "gaussian_var":
        return -0.5 / variance
    if kind == "laplace_scale":
        return 1.0 / np.sqrt(variance / 2.0)
    if kind == "gaussian_location":
        if not np.allclose(variance, 0.5):
            raise ValueError("gaussian_location has variance fixed at 0.5")
        return 2.0 * mean
    out = np.empty(variance.shape[:-1] + (2 * variance.shape[-1],))
    out[..., 0::2] = mean / variance
    out[..., 1::2] = -0.5 / variance
    return out


def sample_prior(spec: ExpFamilySpec, lam, count: int, seed: int) -> np.ndarray:
    """``count`` independent draws; ``lam`` is one row or one row per draw."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = np.broadcast_to(lam, (count, spec.dim))
    if lam.shape != (count, spec.dim):
        raise ValueError(f"lambda must be ({spec.dim},) or ({count}, {spec.dim}), got {lam.shape}")
    mean, var = natural_to_moment(spec, lam)
    gen = rng.derive(seed, "prior")
    if spec.family_kind == "laplace_scale":
        return rng.laplace(gen, (count, spec.n), scale=np.sqrt(var / 2.0))
    return mean + np.sqrt(var) * rng.normal(gen, (count, spec.n))


# ---------------------------------------------------------------------------
# lambda(u)


def constrain(spec: ExpFamilySpec, raw: Tensor) -> Tensor:
    """Map unconstrained outputs into the family's natural-parameter domain."""
    kind = spec.family_kind
    if kind == "gaussian_var":
        return -(softplus(raw) + DOMAIN_EPS)
    if kind == "laplace_scale":
        return softplus(raw) + DOMAIN_EPS
    if kind == "gaussian_location":
        return raw * 1.0
    batch = raw.shape[0]
    pairs = raw.reshape(batch, spec.n, 2)
    first = apply_primitive("slice", [pairs], {"key": (slice(None), slice(None), slice(0, 1))})
    second = apply_primitive("slice", [pairs], {"key": (slice(None), slice(None), slice(1, 2))})
    return concat([first, -(softplus(second) + DOMAIN_EPS)], axis=2).reshape(batch, spec.dim)


def unconstrain(spec: ExpFamilySpec, lam: np.ndarray) -> np.ndarray:
    check_domain(spec, lam)
    lam = np.array(lam, dtype=np.float64)

    def inv_softplus(y):
        y = np.maximum(y - DOMAIN_EPS, 1e-12)
        return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))

    kind = spec.family_kind
    if kind == "gaussian_var":
        return inv_softplus(-lam)
    if kind == "laplace_scale":
        return inv_softplus(lam)
    if kind == "gaussian_location":
        return lam
    lam[..., 1::2] = inv_softplus(-lam[..., 1::2])
    return lam


class LambdaMap:
    """lambda(u): a lookup table over segments or an MLP on u."""

    def __init__(self, spec: ExpFamilySpec, kind: str, table: Tensor | None = None, net: Mlp | None = None):
        if kind not in ("lookup_table", "mlp"):
            raise ValueError(f"unknown LambdaMap kind {kind!r}")
        self.spec = spec
        self.kind = kind
        self.table = table
        self.net = net

    @classmethod
    def from_naturals(cls, spec: ExpFamilySpec, naturals: np.ndarray, trainable: bool = True) -> "LambdaMap":
        raw = unconstrain(spec, np.asarray(naturals, dtype=np.float64))
        return cls(spec, "lookup_table", table=Tensor(raw, requires_grad=trainable))

    @classmethod
    def init_table(cls, spec: ExpFamilySpec, num_segments: int, seed: int) -> "LambdaMap":
        gen = rng.derive(seed, "lambda-table")
        raw = 0.1 * rng.normal(gen, (num_segments, spec.dim))
        return cls(spec, "lookup_table", table=Tensor(raw, requires_grad=True))

    @classmethod
    def init_mlp(cls, spec: ExpFamilySpec, aux_dim: int, seed: int, hidden_dim: int = 50,
                 num_layers: int = 3, slope: float = 0.01) -> "LambdaMap":
        net = init_mlp(MlpSpec(aux_dim, spec.dim, hidden_dim, num_layers, slope), seed)
        return cls(spec, "mlp", net=net)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        if self.kind == "lookup_table":
            return [(f"{prefix}table", self.table)]
        return self.net.named_parameters(prefix)

    def naturals_table(self) -> np.ndarray:
        """Natural parameters for every segment (lookup-table kind only)."""
        with no_grad():
            return constrain(self.spec, Tensor(self.table.data)).data


def _check_one_hot(u: np.ndarray) -> None:
    ok = np.all((u == 0) | (u == 1), axis=1) & (u.sum(axis=1) == 1)
    if not ok.all():
        raise ValueError(f"u row {int(np.argmin(ok))} is not one-hot")


def eval_lambda(lmap: LambdaMap, u) -> Tensor:
    """Natural parameters for each row of u, shape (batch, n*k)."""
    ut = u if isinstance(u, Tensor) else Tensor(u)
    if lmap.kind == "lookup_table":
        _check_one_hot(ut.data)
        raw = apply_primitive("matmul", [ut, lmap.table])
    else:
        raw = mlp_forward(lmap.net, ut)
    return constrain(lmap.spec, raw)
