"""Encoder + cosine classifier, its EMA copy, vector augmentations, checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PARAM_NAMES = ("W1", "b1", "W2", "b2", "V")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    hidden: int = 64
    d_feat: int = 32
    n_classes: int = 6
    tau_cls: float = 0.05


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    V: np.ndarray

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
        return cls(
            W1=rng.normal(0.0, np.sqrt(2.0 / cfg.d_in), (cfg.d_in, cfg.hidden)),
            b1=np.zeros(cfg.hidden),
            W2=rng.normal(0.0, np.sqrt(2.0 / cfg.hidden), (cfg.hidden, cfg.d_feat)),
            b2=np.zeros(cfg.d_feat),
            V=rng.normal(0.0, 1.0, (cfg.n_classes, cfg.d_feat)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> ModelParams:
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays().items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays().values()])

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self.arrays().items()}


# the momentum model has the same layout and is only ever written by ema_update
MomentumParams = ModelParams


def _get(params, name):
    return params[name] if isinstance(params, dict) else getattr(params, name)


def forward_features(params, x) -> Tensor:
    """L2-normalized encoder output ``l2n(relu(x W1 + b1) W2 + b2)``."""
    x = nx.as_tensor(x)
    W1 = _get(params, "W1")
    d_in = W1.shape[0]
    if x.value.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"forward_features: input width {x.shape} does not match D_in={d_in}")
    h = nx.relu(nx.linear(x, W1, _get(params, "b1")))
    return nx.l2_normalize(nx.linear(h, _get(params, "W2"), _get(params, "b2")))


def forward_logits(params, z, tau_cls: float) -> Tensor:
    V = nx.as_tensor(_get(params, "V"))
    if np.any(np.linalg.norm(V.value, axis=1) <= nx.EPS_NORM):
        raise ValueError("forward_logits: classifier has a zero class row")
    directions = nx.l2_normalize(V)
    return nx.scale(nx.matmul(z, nx.transpose(directions)), 1.0 / tau_cls)


def predict_proba(params: ModelParams, x: np.ndarray, tau_cls: float) -> np.ndarray:
    z = forward_features(params, x)
    return nx.softmax(forward_logits(params, z, tau_cls)).value


def ema_update(params: ModelParams, momentum_params: ModelParams, m: float) -> ModelParams:
    """Coordinatewise ``m * momentum + (1 - m) * live``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"ema momentum must lie in [0, 1], got {m}")
    out = {}
    for name in PARAM_NAMES:
        live, slow = getattr(params, name), getattr(momentum_params, name)
        if live.shape != slow.shape:
            raise ShapeError(f"ema_update: {name} shapes {live.shape} vs {slow.shape}")
        # endpoints are exact copies so signed zeros survive
        if m == 1.0:
            out[name] = slow.copy()
        elif m == 0.0:
            out[name] = live.copy()
        else:
            out[name] = m * slow + (1.0 - m) * live
    return ModelParams(**out)


class AugmentationKind(str, Enum):
    WEAK = "weak"
    STRONG = "strong"
    STRONG_ALT = "strong_alt"


@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.05
    sigma_strong: float = 0.2
    mask_frac: float = 0.25


def augment(x: np.ndarray, kind: AugmentationKind, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Gaussian jitter; the strong views also zero a random fraction of coordinates.

    ``STRONG`` and ``STRONG_ALT`` share parameters and differ only through the
    generator state at call time.
    """
    x = np.asarray(x, dtype=np.float64)
    kind = AugmentationKind(kind)
    if kind is AugmentationKind.WEAK:
        return x + rng.normal(0.0, 1.0, x.shape) * cfg.sigma_weak
    out = x + rng.normal(0.0, 1.0, x.shape) * cfg.sigma_strong
    width = x.shape[-1]
    n_mask = int(round(cfg.mask_frac * width))
    if n_mask:
        order = np.argsort(rng.random(x.shape), axis=-1)
        np.put_along_axis(out, order[..., :n_mask], 0.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json header + <stem>.bin little-endian float64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, seed: int,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format": "regiontta-checkpoint/1",
        "dtype": "<f8",
        "order": list(PARAM_NAMES),
        "shapes": params.shapes(),
        "model": asdict(cfg),
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    params.flat().astype("<f8").tofile(path.with_suffix(".bin"))
    return path.with_suffix(".json")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["model"].items() if k in known})
    arrays, offset = {}, 0
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        n = int(np.prod(shape))
        if offset + n > flat.size:
            raise ValueError(f"checkpoint payload too short for {name}")
        arrays[name] = flat[offset:offset + n].reshape(shape).copy()
        offset += n
    if offset != flat.size:
        raise ValueError("checkpoint payload has trailing values")
    return ModelParams(**arrays), cfg, header
