"""Desk-scale training: Adam on the composite loss with seeded crops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .archive import load_archive, load_weights, save_archive, save_weights
from .data import ImagePair
from .losses import ConvFeatureExtractor, LossWeights, total_loss
from .network import NetConfig, NetworkParams, hifi_forward, init_params
from .tensor import ConfigError, GradTape, Tensor

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 25
    max_steps: int = 0
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_charbonnier: float = 1.0
    lambda_ssim: float = 1.1
    lambda_perceptual: float = 11.0
    charbonnier_eps: float = 1e-3
    seed: int = 0
    extractor_seed: int = 0
    checkpoint_every: int = 0
    crop_size: int = 64
    flip: bool = True
    dtype: str = "float32"
    use_haar: bool = True
    use_cbam: bool = True
    use_rfm: bool = True
    use_residual: bool = True
    use_maxpool: bool = True
    use_mlp: bool = True
    use_base_image: bool = True
    confidence: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("learning_rate", "batch_size", "crop_size", "adam_eps", "charbonnier_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("epochs", "max_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        self.net_config()
        self.loss_weights()

    def net_config(self) -> NetConfig:
        names = {f.name for f in fields(NetConfig)} - {"channels"}
        return NetConfig(**{n: getattr(self, n) for n in names})

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda_charbonnier, self.lambda_ssim, self.lambda_perceptual,
                               self.charbonnier_eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adaptive moment estimation over a name -> array mapping."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name in self.m:
            arrays["m." + name] = self.m[name]
            arrays["v." + name] = self.v[name]
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray], t: int, dtype) -> None:
        self.t = t
        self.m = {k[2:]: a.astype(dtype) for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: a.astype(dtype) for k, a in arrays.items() if k.startswith("v.")}


class TrainResult(NamedTuple):
    params: NetworkParams
    history: list[float]


def smoothed(history: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        return h
    c = np.cumsum(np.concatenate([[0.0], h]))
    idx = np.arange(1, h.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def _batch(pairs: Sequence[ImagePair], idx: np.ndarray, crop: int, flip: bool,
           seed: int, step: int, dtype) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng([seed, 2, step])
    xs, ys = [], []
    for i in idx:
        pair = pairs[int(i)]
        _, _, h, w = pair.degraded.shape
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        mirror = flip and bool(rng.integers(0, 2))
        for src, dst in ((pair.degraded, xs), (pair.ground_truth, ys)):
            patch = src.data[0, :, y0:y0 + crop, x0:x0 + crop]
            if mirror:
                patch = patch[:, :, ::-1]
            dst.append(patch)
    return Tensor(np.stack(xs).astype(dtype)), Tensor(np.stack(ys).astype(dtype))


def plan_steps(n_pairs: int, cfg: TrainConfig) -> tuple[int, int]:
    per_epoch = math.ceil(n_pairs / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    return per_epoch, total


def save_checkpoint(directory, params: NetworkParams, opt: Adam, step: int,
                    history: Sequence[float], cfg: TrainConfig) -> Path:
    d = Path(directory) / f"step_{step:06d}"
    d.mkdir(parents=True, exist_ok=True)
    save_weights(d / "weights.hifiw", params, meta={"step": step})
    save_archive(d / "optimizer.hifiw", opt.state_arrays(), meta={"t": opt.t})
    state = {"step": step, "loss": history[-1] if history else None,
             "history": list(history), "config": cfg.to_dict()}
    (d / "state.json").write_text(json.dumps(state, indent=2))
    return d


def train(pairs: Sequence[ImagePair], cfg: TrainConfig, checkpoint_dir=None, resume_from=None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimise the composite loss; returns final params and the per-step loss history.

    With ``resume_from`` (a checkpoint directory) training continues from the
    stored step and the returned history includes the steps before it.
    Batches, crops and flips depend only on ``(seed, epoch, step)``, so a
    resumed run replays the same data as an uninterrupted one.
    """
    if not pairs:
        raise ValueError("train needs at least one image pair")
    dtype = cfg.np_dtype
    crop = min(cfg.crop_size, min(min(p.degraded.shape[2:]) for p in pairs))
    weights = cfg.loss_weights()
    extractor = ConvFeatureExtractor(cfg.extractor_seed, dtype=dtype)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    if resume_from is not None:
        rdir = Path(resume_from)
        params = load_weights(rdir / "weights.hifiw", dtype=dtype)
        arrays, _, meta = load_archive(rdir / "optimizer.hifiw")
        opt.load_state(arrays, int(meta["t"]), dtype)
        state = json.loads((rdir / "state.json").read_text())
        step, history = int(state["step"]), [float(v) for v in state["history"]]
        if params.config != cfg.net_config():
            raise ConfigError("checkpoint network config does not match the training config")
    else:
        params = init_params(cfg.seed, cfg.net_config(), dtype=dtype)
        step, history = 0, []

    per_epoch, total = plan_steps(len(pairs), cfg)
    arrays = {n: t.data for n, t in params.items()}
    while step < total:
        epoch, k = divmod(step, per_epoch)
        order = _epoch_order(cfg.seed, epoch, len(pairs))
        idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
        x, y = _batch(pairs, idx, crop, cfg.flip, cfg.seed, step, dtype)

        live = params.with_arrays(arrays, requires_grad=True)
        with GradTape() as tape:
            loss = total_loss(hifi_forward(x, live), y, weights, extractor)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        grads = tape.gradient(loss, live.tensors)
        arrays = opt.step(arrays, grads)
        params = params.with_arrays(arrays)
        history.append(value)
        step += 1
        if on_step is not None:
            on_step(step, value)
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, params, opt, step, history, cfg)
    # the final state is always checkpointed, whatever the cadence
    if checkpoint_dir is not None and history and not (Path(checkpoint_dir) / f"step_{step:06d}").is_dir():
        save_checkpoint(checkpoint_dir, params, opt, step, history, cfg)
    return TrainResult(params, history)
