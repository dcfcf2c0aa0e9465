"""Bivariate causal direction from recovered disturbances.

In a nonlinear SEM x1 = f1(n1), x2 = f2(n1, n2) with independent disturbances
the cause is independent of the effect's disturbance and every other pair is
dependent. Disturbances are estimated with an iVAE and the four pairs are
tested with a kernel (HSIC) permutation test.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datagen, evaluation, rng
from . import model as mdl

VERDICTS = ("x1_causes_x2", "x2_causes_x1", "none")
PAIRS = ("x1_n1", "x1_n2", "x2_n1", "x2_n2")


@dataclass
class HsicResult:
    statistic: float
    p_value: float
    num_perms: int
    bandwidths: tuple[float, float]
    alpha: float
    reject: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bandwidths"] = list(self.bandwidths)
        return out


@dataclass(frozen=True)
class HsicConfig:
    alpha: float = 0.05
    num_perms: int = 500
    max_samples: int = 1000
    seed: int = 0


def _as_column(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.isfinite(a).all():
        raise ValueError(f"hsic: {name} contains non-finite values")
    if np.ptp(a) == 0.0:
        raise ValueError(f"hsic: {name} is constant")
    return a


def _gram(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Gaussian kernel matrix with the median pairwise distance as bandwidth."""
    sq = (a[:, None] - a[None, :]) ** 2
    dists = np.sqrt(sq[np.triu_indices(a.size, k=1)])
    width = float(np.median(dists))
    if width <= 0.0:
        # more than half the pairs coincide; fall back to the mean distance
        width = float(dists.mean())
    return np.exp(-sq / (2.0 * width * width)), width


def hsic(a, b, alpha: float = 0.05, num_perms: int = 500, seed: int = 0,
         max_samples: int | None = None) -> HsicResult:
    """Biased HSIC statistic trace(K H L H) / N^2 with a permutation p-value.

    The p-value counts the observed statistic among the permuted ones, so it
    is never below 1 / (num_perms + 1). With ``max_samples`` larger inputs are
    subsampled (seeded) before the kernels are built.
    """
    a = _as_column(a, "first input")
    b = _as_column(b, "second input")
    if a.size != b.size:
        raise ValueError(f"hsic: inputs differ in length ({a.size} vs {b.size})")
    if num_perms < 100:
        raise ValueError("hsic: need at least 100 permutations")
    gen = rng.derive(seed, "hsic")
    if max_samples is not None and a.size > max_samples:
        keep = np.sort(gen.permutation(a.size)[:max_samples])
        a, b = a[keep], b[keep]
        if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
            raise ValueError("hsic: input is constant after subsampling")
    N = a.size
    if N < 50:
        raise ValueError(f"hsic: need at least 50 samples, got {N}")
    K, wa = _gram(a)
    L, wb = _gram(b)
    # H K H, so trace(K H L H) = sum(HKH * L) for symmetric L
    Kc = K - K.mean(axis=0)[None, :] - K.mean(axis=1)[:, None] + K.mean()
    stat = float((Kc * L).sum()) / N**2
    exceed = 0
    for _ in range(num_perms):
        p = gen.permutation(N)
        if float((Kc * L[np.ix_(p, p)]).sum()) / N**2 >= stat:
            exceed += 1
    p_value = (exceed + 1) / (num_perms + 1)
    return HsicResult(max(stat, 0.0), p_value, num_perms, (wa, wb), alpha, p_value < alpha)


@dataclass
class CausalDecision:
    verdict: str
    p_values: dict[str, float]
    alpha: float
    matching: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verdict_from_p_values(p_values: dict[str, float], alpha: float) -> str:
    """Exactly one non-rejected test picks the direction; anything else is 'none'."""
    accepted = [k for k in PAIRS if not p_values[k] < alpha]
    if accepted == ["x1_n2"]:
        return "x1_causes_x2"
    if accepted == ["x2_n1"]:
        return "x2_causes_x1"
    return "none"


def decide_direction(x, n_hat, hsic_config: HsicConfig = HsicConfig()) -> CausalDecision:
    """Match n_hat columns to x by MCC assignment, then run the four tests."""
    x = np.asarray(x, dtype=np.float64)
    n_hat = np.asarray(n_hat, dtype=np.float64)
    if x.shape != n_hat.shape or x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"decide_direction: need two N x 2 arrays, got {x.shape} and {n_hat.shape}")
    perm = evaluation.assign(evaluation.correlation_matrix(x, n_hat))
    matched = n_hat[:, perm]
    p_values = {}
    for idx, key in enumerate(PAIRS):
        i, j = divmod(idx, 2)
        res = hsic(x[:, i], matched[:, j], hsic_config.alpha, hsic_config.num_perms,
                   seed=hash_seed(hsic_config.seed, key), max_samples=hsic_config.max_samples)
        p_values[key] = res.p_value
    return CausalDecision(verdict_from_p_values(p_values, hsic_config.alpha), p_values,
                          hsic_config.alpha, [int(c) for c in perm], asdict(hsic_config))


def hash_seed(seed: int, label: str) -> int:
    return int(rng.derive(seed, label).integers(0, 2**31 - 1))


def recover_disturbances(dataset: datagen.Dataset, train_config: mdl.TrainConfig,
                         model_config: mdl.ModelConfig | None = None) -> np.ndarray:
    """Train an iVAE on (x, u) and return posterior means as disturbance estimates."""
    cfg = dataset.config
    if cfg.variant != "causal_sem":
        raise ValueError("recover_disturbances needs a causal_sem dataset")
    if model_config is None:
        model_config = mdl.ModelConfig(data_dim=cfg.d, latent_dim=cfg.n, aux_dim=cfg.M, family=cfg.family)
    model = mdl.build_model(model_config, train_config.seed)
    mdl.train(model, dataset.x, dataset.u, train_config)
    return mdl.latent_estimate(model, dataset.x, dataset.u)
