"""MLPs, Adam, learning-rate schedules and the flat checkpoint format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .autodiff import Tensor, apply_primitive

OUTPUT_ACTIVATIONS = ("identity", "softplus", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dim: int = 50
    num_layers: int = 3
    slope: float = 0.01
    output_activation: str = "identity"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_dim, self.num_layers) < 1:
            raise ValueError(f"MlpSpec dims must be >= 1: {self}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.output_dim]


class Mlp:
    """Weights stored as (fan_in, fan_out) so a layer is ``x @ W + b``."""

    def __init__(self, spec: MlpSpec, weights: list[Tensor], biases: list[Tensor]):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}layer{i}.weight", w))
            out.append((f"{prefix}layer{i}.bias", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def init_mlp(spec: MlpSpec, seed: int) -> Mlp:
    """Uniform fan-based weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    gen = rng.derive(seed, "mlp-init")
    widths = spec.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(gen, (fan_in, fan_out), -bound, bound), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(spec, weights, biases)


def mlp_forward(params: Mlp, x: Tensor) -> Tensor:
    spec = params.spec
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"mlp_forward: expected (batch, {spec.input_dim}) input, got {x.shape}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = apply_primitive("add", [apply_primitive("matmul", [h, w]), b])
        if i < last:
            h = apply_primitive("leaky_relu", [h], {"slope": spec.slope})
    if spec.output_activation == "softplus":
        h = apply_primitive("softplus", [h])
    elif spec.output_activation == "sigmoid":
        h = apply_primitive("sigmoid", [h])
    return h


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None,
              names: list[str] | None = None) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("adam_step: params, grads and moments differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {params[i].shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"param[{i}]"
            raise FloatingPointError(f"adam_step: non-finite gradient for {label}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_hat = state.eps * math.sqrt(1.0 - b2**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= scale * m / (np.sqrt(v) + eps_hat)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "multiplicative-decay"
    factor: float = 0.99
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "multiplicative-decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.factor <= 1.0 or self.floor < 0.0:
            raise ValueError(f"invalid schedule {self}")


def schedule_lr(schedule: LrSchedule, epoch: int, base_lr: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == "constant":
        return base_lr
    return max(schedule.floor, base_lr * schedule.factor**epoch)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json (metadata + parameter manifest) and <stem>.bin
# (little-endian float64, parameters concatenated in manifest order, each
# flattened row-major).


def save_checkpoint(stem, named: list[tuple[str, np.ndarray]], metadata: dict) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest, offset = [], 0
    chunks = []
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    meta = dict(metadata)
    meta["format"] = {"dtype": "<f8", "order": "manifest", "layout": "row-major", "total": int(offset)}
    meta["params"] = manifest
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    bin_path.write_bytes(blob.astype("<f8").tobytes())
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return json_path, bin_path


def load_checkpoint(stem) -> tuple[dict, dict[str, np.ndarray]]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != meta["format"]["total"]:
        raise ValueError(f"checkpoint blob has {blob.size} values, manifest expects {meta['format']['total']}")
    arrays = {}
    for entry in meta["params"]:
        start = entry["offset"]
        arrays[entry["name"]] = blob[start:start + entry["count"]].reshape(entry["shape"]).astype(np.float64)
    return meta, arrays


def spec_dict(spec: MlpSpec) -> dict:
    return asdict(spec)
