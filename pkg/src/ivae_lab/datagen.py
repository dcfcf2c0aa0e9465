"""Synthetic nonstationary-source benchmarks.

Sources are split into M segments of L samples; each segment has its own
natural parameters lambda*(u), drawn independently per segment and
component. Sources are pushed through a random injective MLP and observed
with small Gaussian noise (or through a Bernoulli link).

Also here: the assumption-(iv) audit on the matrix of natural-parameter
differences, and the rotation witness showing location-only Gaussian
priors are not identifiable beyond a linear map.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import priors, rng

MAX_RESAMPLES = 100


@dataclass(frozen=True)
class GenConfig:
    M: int = 40
    L: int = 1000
    n: int = 5
    d: int = 5
    family: str = "gaussian_var"
    var_range: tuple[float, float] = (0.5, 3.0)
    mean_range: tuple[float, float] = (-3.0, 3.0)
    mixing_layers: int = 4
    mixing_slope: float = 0.2
    mixing: str = "random"
    max_condition: float = 25.0
    noise_var: float = 0.01
    signal_scale: float = 1.0
    observation: str = "gaussian"
    logit_scale: float = 1.0
    variant: str = "normal"
    alpha: float = 2.0
    permutation_shift: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "var_range", tuple(self.var_range))
        object.__setattr__(self, "mean_range", tuple(self.mean_range))
        errors = []
        if self.M < 2:
            errors.append("M must be >= 2")
        if self.L < 1:
            errors.append("L must be >= 1")
        if self.n < 1 or self.d < self.n:
            errors.append("need 1 <= n <= d")
        if self.noise_var < 0:
            errors.append("noise_var must be >= 0")
        if self.signal_scale <= 0:
            errors.append("signal_scale must be > 0")
        if self.mixing_layers < 1:
            errors.append("mixing_layers must be >= 1")
        if self.mixing not in ("random", "identity"):
            errors.append(f"unknown mixing {self.mixing!r}")
        if self.mixing == "identity" and self.n != self.d:
            errors.append("identity mixing needs n == d")
        if self.observation not in ("gaussian", "bernoulli"):
            errors.append(f"unknown observation model {self.observation!r}")
        if self.variant not in ("normal", "easy_classify", "causal_sem"):
            errors.append(f"unknown variant {self.variant!r}")
        if self.variant == "easy_classify":
            if self.n != 2 or self.d != 2:
                errors.append("easy_classify needs n = d = 2")
            if self.family != "gaussian_mean_var":
                errors.append("easy_classify needs the gaussian_mean_var family")
        if self.variant == "causal_sem" and self.n != self.d:
            errors.append("causal_sem needs n == d")
        if not 0 < self.var_range[0] <= self.var_range[1]:
            errors.append("var_range must be positive and ordered")
        if self.family not in priors.FAMILY_K:
            errors.append(f"unknown family {self.family!r}")
        if errors:
            raise ValueError("invalid GenConfig: " + "; ".join(errors))

    @property
    def spec(self) -> priors.ExpFamilySpec:
        return priors.ExpFamilySpec(self.family, self.n)

    @property
    def N(self) -> int:
        return self.M * self.L

    def to_dict(self) -> dict:
        out = asdict(self)
        out["var_range"] = list(self.var_range)
        out["mean_range"] = list(self.mean_range)
        return out


@dataclass
class Mixing:
    """An MLP with invertible layers; leaky ReLU between layers, none after the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = 0.2
    activation: str = "leaky_relu"
    free_columns: list[int] = field(default_factory=list)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = np.asarray(z, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.where(h >= 0, h, self.slope * h) if self.activation == "leaky_relu" else np.tanh(h)
        if self.free_columns:
            # columns that bypass the mixing (x_j = z_j)
            h = h.copy()
            h[:, self.free_columns] = z[:, self.free_columns]
        return h

    def to_dict(self) -> dict:
        return {"weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases],
                "slope": self.slope, "activation": self.activation, "free_columns": list(self.free_columns)}

    @classmethod
    def from_dict(cls, d: dict) -> "Mixing":
        return cls([np.array(w, dtype=np.float64) for w in d["weights"]],
                   [np.array(b, dtype=np.float64) for b in d["biases"]],
                   d["slope"], d.get("activation", "leaky_relu"), list(d.get("free_columns", [])))


def condition_number(w: np.ndarray) -> float:
    s = np.linalg.svd(w, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else math.inf


def _orthonormal_rows(gen: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Haar-random (fan_in, fan_out) matrix with orthonormal rows."""
    q, r = np.linalg.qr(rng.normal(gen, (fan_out, fan_out)))
    q = q * np.sign(np.diag(r))
    return q[:fan_in]


def make_mixing(config: GenConfig, seed: int | None = None, activation: str = "leaky_relu") -> Mixing:
    """Random injective mixing n -> d -> ... -> d.

    Weight matrices are Haar-orthogonal (lower-triangular Gaussian for the
    causal variant) and every draw must pass the condition-number gate.
    Orthogonal layers keep the weakest direction of the composite Jacobian as
    far above the observation noise as the leaky-ReLU kinks allow.
    """
    seed = config.seed if seed is None else seed
    n, d = config.n, config.d
    dims = [n] + [d] * config.mixing_layers
    if config.mixing == "identity":
        # slope 1 keeps the activation linear so the composite is exactly the identity
        return Mixing([np.eye(n) for _ in range(config.mixing_layers)],
                      [np.zeros(n) for _ in range(config.mixing_layers)], 1.0, "leaky_relu")
    gen = rng.derive(seed, "mixing")
    lower = config.variant == "causal_sem"
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        for _ in range(MAX_RESAMPLES):
            if lower:
                # x = h @ w, so an upper-triangular w gives a lower-triangular map
                w = np.triu(rng.normal(gen, (fan_in, fan_out)) / math.sqrt(fan_in))
                w[np.diag_indices(fan_in)] = np.sign(np.diag(w)) * np.maximum(np.abs(np.diag(w)), 0.5)
            else:
                w = _orthonormal_rows(gen, fan_in, fan_out)
            if condition_number(w) < config.max_condition:
                break
        else:
            raise RuntimeError(f"mixing layer {layer}: no matrix with condition < {config.max_condition} "
                               f"in {MAX_RESAMPLES} draws")
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mixing(weights, biases, config.mixing_slope, activation)


def standardize_output(mixing: Mixing, z: np.ndarray, scale: float) -> np.ndarray:
    """Rescale the last layer so each output coordinate has std ``scale`` on ``z``; returns f(z)."""
    clean = mixing(z)
    std = clean.std(axis=0)
    std[std <= 0] = 1.0
    factor = scale / std
    if mixing.free_columns:
        factor[mixing.free_columns] = 1.0
    mixing.weights[-1] = mixing.weights[-1] * factor[None, :]
    mixing.biases[-1] = mixing.biases[-1] * factor
    return mixing(z)


@dataclass
class Dataset:
    x: np.ndarray
    segments: np.ndarray
    z_star: np.ndarray
    lambda_star: np.ndarray
    mixing: Mixing
    config: GenConfig

    @property
    def u(self) -> np.ndarray:
        return one_hot(self.segments, self.config.M)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    def blob(self) -> bytes:
        return (np.ascontiguousarray(self.x, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.segments, dtype="<i8").tobytes()
                + np.ascontiguousarray(self.z_star, dtype="<f8").tobytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.blob()).hexdigest()


def one_hot(segments: np.ndarray, M: int) -> np.ndarray:
    u = np.zeros((segments.shape[0], M))
    u[np.arange(segments.shape[0]), segments] = 1.0
    return u


def draw_lambda(config: GenConfig, gen: np.random.Generator) -> np.ndarray:
    """True natural parameters, one row per segment."""
    M, n = config.M, config.n
    spec = config.spec
    var = rng.uniform(gen, (M, n), *config.var_range)
    if config.variant == "easy_classify":
        gamma = (np.arange(M) + config.permutation_shift) % M
        mean = np.zeros((M, n))
        mean[:, 1] = config.alpha * gamma
        return priors.moment_to_natural(spec, mean, var)
    if spec.family_kind == "gaussian_mean_var":
        mean = rng.uniform(gen, (M, n), *config.mean_range)
        return priors.moment_to_natural(spec, mean, var)
    if spec.family_kind == "gaussian_location":
        mean = rng.uniform(gen, (M, n), *config.mean_range)
        return priors.moment_to_natural(spec, mean, np.full((M, n), 0.5))
    return priors.moment_to_natural(spec, 0.0, var)


def generate(config: GenConfig) -> Dataset:
    gen = rng.derive(config.seed, "lambda")
    lam = draw_lambda(config, gen)
    segments = np.repeat(np.arange(config.M), config.L)
    z = priors.sample_prior(config.spec, lam[segments], config.N, rng_seed(config.seed, "sources"))
    mixing = make_mixing(config)
    if config.variant == "easy_classify":
        mixing.free_columns = [1]
    clean = standardize_output(mixing, z, config.signal_scale) if config.mixing == "random" else mixing(z)
    noise_gen = rng.derive(config.seed, "obs-noise")
    if config.observation == "bernoulli":
        logits = config.logit_scale * clean
        prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
        x = (noise_gen.random(prob.shape) < prob).astype(np.float64)
    else:
        x = clean + math.sqrt(config.noise_var) * rng.normal(noise_gen, clean.shape) if config.noise_var > 0 else clean
    return Dataset(x, segments, z, lam, mixing, config)


def rng_seed(seed: int, label: str) -> int:
    return int(rng.derive(seed, label).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# files: <stem>.json metadata, <stem>.bin = x (N*d <f8) | segments (N <i8) | z_star (N*n <f8)


def save_dataset(ds: Dataset, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = ds.blob()
    meta = {
        "config": ds.config.to_dict(),
        "seed": ds.config.seed,
        "N": ds.N,
        "lambda_star": ds.lambda_star.tolist(),
        "mixing": ds.mixing.to_dict(),
        "checksum": hashlib.sha256(blob).hexdigest(),
        "layout": ["x: N*d float64 little-endian row-major",
                   "segments: N int64 little-endian",
                   "z_star: N*n float64 little-endian row-major"],
        "notes": {"mean_range": "segment means uniform on mean_range when k=2 (not stated in the source protocol)"},
    }
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    bin_path.write_bytes(blob)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return json_path, bin_path


def load_dataset(stem) -> Dataset:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["checksum"]:
        raise ValueError(f"dataset checksum mismatch for {stem}")
    config = GenConfig(**meta["config"])
    N, d, n = meta["N"], config.d, config.n
    off = 0
    x = np.frombuffer(blob, dtype="<f8", count=N * d, offset=off).reshape(N, d).astype(np.float64)
    off += 8 * N * d
    seg = np.frombuffer(blob, dtype="<i8", count=N, offset=off).astype(np.int64)
    off += 8 * N
    z = np.frombuffer(blob, dtype="<f8", count=N * n, offset=off).reshape(N, n).astype(np.float64)
    return Dataset(x, seg, z, np.array(meta["lambda_star"]), Mixing.from_dict(meta["mixing"]), config)


def export_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    header = [f"x{i}" for i in range(ds.config.d)] + ["segment"] + [f"z{i}" for i in range(ds.config.n)]
    table = np.column_stack([ds.x, ds.segments, ds.z_star])
    fmt = ["%.17g"] * ds.config.d + ["%d"] + ["%.17g"] * ds.config.n
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    return path

# invertibility of the natural-parameter table
# ---------------------------------------------------------------------------
# assumption (iv)


@dataclass
class LMatrixCheck:
    pivot: int
    points: list[int]
    L: np.ndarray
    smallest_singular_value: float
    largest_singular_value: float
    verdict: str


def _min_sv(cols: np.ndarray) -> float:
    if cols.shape[1] == 0:
        return math.inf
    return float(np.linalg.svd(cols, compute_uv=False)[-1])


def check_assumption_iv(lam, n: int, k: int, candidates=None, pivot: int | None = None,
                        rel_tol: float = 1e-6) -> LMatrixCheck:
    """Search for nk+1 points whose natural-parameter differences are independent.

    ``lam`` is either a (P, nk) array with one row per candidate point, or a
    callable evaluated at each entry of ``candidates``. Points are picked
    greedily to maximize the smallest singular value of the difference
    matrix; every pivot is tried unless one is given. Reported indices refer
    to rows of the candidate table, and columns of L follow index order.
    """
    if callable(lam):
        if candidates is None:
            raise ValueError("a callable lambda needs a candidate set")
        table = np.array([np.atleast_1d(lam(c)) for c in candidates], dtype=np.float64)
    else:
        table = np.asarray(lam, dtype=np.float64)
    nk = n * k
    if table.ndim != 2 or table.shape[1] != nk:
        raise ValueError(f"lambda table must be (points, {nk}), got {table.shape}")
    distinct = np.unique(table, axis=0).shape[0] if candidates is None else len({repr(c) for c in candidates})
    if table.shape[0] < nk + 1 or (candidates is not None and distinct < nk + 1):
        raise ValueError(f"need at least {nk + 1} distinct points, got {table.shape[0]}")

    best = None
    pivots = [pivot] if pivot is not None else range(table.shape[0])
    for p in pivots:
        diffs = table - table[p]
        chosen: list[int] = []
        for _ in range(nk):
            scores = []
            for j in range(table.shape[0]):
                if j == p or j in chosen:
                    continue
                scores.append((_min_sv(diffs[chosen + [j]].T), -j))
            score, neg_j = max(scores)
            chosen.append(-neg_j)
        sv = _min_sv(diffs[chosen].T)
        if best is None or sv > best[0]:
            best = (sv, p, sorted(chosen))
    _, p, chosen = best
    L = (table[chosen] - table[p]).T
    s = np.linalg.svd(L, compute_uv=False)
    verdict = "invertible" if s[0] > 0 and s[-1] > rel_tol * s[0] else "degenerate"
    return LMatrixCheck(p, chosen, L, float(s[-1]), float(s[0]), verdict)


# ---------------------------------------------------------------------------
# rotation witness


@dataclass
class WitnessResult:
    family: str
    rotation: np.ndarray
    lambda_table: np.ndarray
    lambda_tilde: np.ndarray
    mixing: Mixing
    max_gap: float
    log_density: np.ndarray
    log_density_tilde: np.ndarray


def random_rotation(n: int, gen: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(gen, (n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def distance_to_signed_permutation(R: np.ndarray) -> float:
    """Frobenius distance from R to the nearest signed permutation matrix."""
    R = np.abs(np.asarray(R, dtype=np.float64))
    n = R.shape[0]
    best = max(R[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
    return math.sqrt(max(2 * n - 2 * best, 0.0))


WITNESS_MIN_DISTANCE = 0.5


def witness_rotation(n: int, gen: np.random.Generator) -> np.ndarray:
    """Haar rotation redrawn until it is not close to a signed permutation.

    Signed permutations are trivial indeterminacies for every family, so a
    rotation near one would make the variance-family gap vanish for reasons
    unrelated to identifiability.
    """
    for _ in range(MAX_RESAMPLES):
        R = random_rotation(n, gen)
        if distance_to_signed_permutation(R) >= WITNESS_MIN_DISTANCE:
            return R
    raise RuntimeError("no rotation away from the signed permutations")


def _log_marginal(x, prior_mean, prior_sd, decoder, noise_var, nodes, weights):
    """log of integral N(x; decoder(z), noise_var I) N(z; mean, diag sd^2) dz by tensor Gauss-Hermite."""
    n = prior_mean.shape[0]
    grids = np.meshgrid(*([nodes] * n), indexing="ij")
    std_pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    log_w = sum(np.log(np.meshgrid(*([weights] * n), indexing="ij")[i].reshape(-1)) for i in range(n))
    z = prior_mean + prior_sd * std_pts
    fz = decoder(z)
    d = fz.shape[1]
    sq = ((x[None, :] - fz) ** 2).sum(axis=1)
    terms = log_w - 0.5 * sq / noise_var - 0.5 * d * math.log(2 * math.pi * noise_var)
    top = terms.max()
    return top + math.log(np.exp(terms - top).sum())


def proposition3_witness(n: int = 2, seed: int = 0, family: str = "gaussian_location", rotation=None,
                         num_points: int = 100, M: int = 5, noise_var: float = 0.5,
                         quad_nodes: int = 60) -> WitnessResult:
    """Compare log p(x|u) under theta and its rotated counterpart.

    theta~ = (f o R^T, T, lambda~) with lambda~ = R lambda for the location
    family. For the variance family, (R * R) lambda is used, which keeps the
    naturals negative and reproduces theta exactly when R is a signed
    permutation. Densities are integrals over z computed with tensor-product
    Gauss-Hermite rules built in each parameterization's own coordinates.
    """
    if family not in ("gaussian_location", "gaussian_var"):
        raise ValueError("witness supports gaussian_location and gaussian_var")
    gen = rng.derive(seed, "witness")
    spec = priors.ExpFamilySpec(family, n)
    R = witness_rotation(n, gen) if rotation is None else np.asarray(rotation, dtype=np.float64)
    cfg = GenConfig(M=M, L=1, n=n, d=n, family=family, mixing_layers=3, seed=seed)
    if family == "gaussian_location":
        lam = rng.uniform(gen, (M, n), -2.0, 2.0)
        lam_t = lam @ R.T
    else:
        lam = priors.moment_to_natural(spec, 0.0, rng.uniform(gen, (M, n), 0.5, 3.0))
        lam_t = lam @ (R * R).T
    mixing = make_mixing(cfg, seed=rng_seed(seed, "witness-mixing"), activation="tanh")

    def f_tilde(zt):
        return mixing(zt @ R)  # f(R^T z~) for row vectors

    nodes, weights = np.polynomial.hermite_e.hermegauss(quad_nodes)
    weights = weights / math.sqrt(2 * math.pi)
    seg = gen.integers(0, M, num_points)
    z_pts = priors.sample_prior(spec, lam[seg], num_points, rng_seed(seed, "witness-z"))
    x_pts = mixing(z_pts) + math.sqrt(noise_var) * rng.normal(gen, (num_points, n))
    lp, lpt = np.empty(num_points), np.empty(num_points)
    for i in range(num_points):
        mean, var = priors.natural_to_moment(spec, lam[seg[i]])
        lp[i] = _log_marginal(x_pts[i], mean, np.sqrt(var), mixing, noise_var, nodes, weights)
        mean_t, var_t = priors.natural_to_moment(spec, lam_t[seg[i]])
        lpt[i] = _log_marginal(x_pts[i], mean_t, np.sqrt(var_t), f_tilde, noise_var, nodes, weights)
    return WitnessResult(family, R, lam, lam_t, mixing, float(np.max(np.abs(lp - lpt))), lp, lpt)
