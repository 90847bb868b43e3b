"""Training loop: dual encoding, latent swapping, loss assembly, ADAM, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objective as O
from . import tensor as T
from .data import add_awgn, crop_patches, make_toy_dataset, rng_for, sample_blind_sigma
from .flow import FlowModel, LatentCode, flow_forward, flow_inverse, init_model
from .inference import denoise
from .metrics import psnr
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

MODES = ("fixed", "blind", "real")
CHECKPOINT_MAGIC = "FINO-CHECKPOINT"
CHECKPOINT_VERSION = 1
_LOCATION_KEYS = ("checkpoint_path", "log_path")

# streams for rng_for(seed, stream, ...)
_STREAM_STEP = 1
_STREAM_EVAL = 2
_STREAM_TOY_EVAL = 3


@dataclass
class TrainConfig:
    """Training hyperparameters.  ``sigma``/``sigma_range`` use the 0-255 scale."""

    num_blocks: int = 2
    layers_per_block: int = 4
    hidden_width: int = 16
    channels: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    use_rec: bool = True
    use_cnt: bool = True
    use_noise: bool = True
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    patch_size: int = 32
    batch_size: int = 4
    steps: int = 2000
    mode: str = "fixed"
    sigma: float = 25.0
    sigma_range: tuple[float, float] = (0.0, 55.0)
    patch_edge: int = O.DEFAULT_PATCH_EDGE
    patch_stride: int = O.DEFAULT_PATCH_STRIDE
    patch_joint_channels: bool = False
    seed: int = 0
    eval_every: int = 500
    eval_images: int = 4
    checkpoint_path: str = ""
    log_path: str = ""
    dtype: str = "float64"
    identity_init: bool = True
    toy_images: int = 16
    toy_size: int = 32
    data_dir: str = ""
    noisy_dir: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        f = 2**self.num_blocks
        if self.patch_size % f:
            raise ValueError(f"patch_size {self.patch_size} not divisible by 2^num_blocks={f}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        lo, hi = self.sigma_range
        if not 0 <= lo < hi:
            raise ValueError(f"sigma_range must satisfy 0 <= low < high, got {self.sigma_range}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def weights(self) -> O.LossWeights:
        return O.LossWeights(self.alpha, self.beta, self.gamma, self.use_rec, self.use_cnt,
                             self.use_noise and self.mode != "real")

    # -- flat key=value files --------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _coerce(types[key], value)
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), str(path))


def _coerce(type_name, value: str):
    t = str(type_name)
    if t == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t.startswith("tuple"):
        parts = [float(p) for p in value.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated numbers, got {value!r}")
        return tuple(parts)
    return value


@dataclass
class TrainLogRecord:
    step: int
    total_loss: float
    l_reg: float
    l_rec: float
    l_cnt: float
    l_noise: float
    eval_psnr: float | None = None
    wall_ms: float = 0.0

    FIELDS = ("step", "total_loss", "l_reg", "l_rec", "l_cnt", "l_noise", "eval_psnr", "wall_ms")

    def row(self) -> list[str]:
        vals = [self.step, self.total_loss, self.l_reg, self.l_rec, self.l_cnt, self.l_noise]
        out = [str(self.step)] + [repr(float(v)) for v in vals[1:]]
        out.append("" if self.eval_psnr is None else repr(float(self.eval_psnr)))
        out.append(f"{self.wall_ms:.3f}")
        return out

    def key(self) -> tuple:
        """Everything except wall time (which is not reproducible)."""
        return (self.step, self.total_loss, self.l_reg, self.l_rec, self.l_cnt, self.l_noise, self.eval_psnr)


def write_log(records: Sequence[TrainLogRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TrainLogRecord.FIELDS)
        for r in records:
            w.writerow(r.row())


def read_log(path) -> list[TrainLogRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [TrainLogRecord(int(r["step"]), float(r["total_loss"]), float(r["l_reg"]), float(r["l_rec"]),
                           float(r["l_cnt"]), float(r["l_noise"]),
                           float(r["eval_psnr"]) if r["eval_psnr"] else None, float(r["wall_ms"]))
            for r in rows]


# -- the loss graph --------------------------------------------------------

def compute_losses(model: FlowModel, x, y, n, sigmas, z_r, weights: O.LossWeights, *,
                   patch_edge: int = O.DEFAULT_PATCH_EDGE, stride: int = O.DEFAULT_PATCH_STRIDE,
                   joint_channels: bool = False):
    """Build the full objective for one batch; returns (total, LossParts).

    Both encodes share one batched flow pass, and the three decodes
    (swapped noisy, swapped clean, clean code + random noise code) share
    another; the per-sample arithmetic is unchanged by the batching.
    """
    x, y, n, z_r = (T.as_tensor(v) for v in (x, y, n, z_r))
    b = x.shape[0]
    code = flow_forward(T.batch_concat([x, y]), model)
    zc, zn = code.split()
    zc_x, zc_y = T.batch_split(zc, [b, b])
    zn_x, zn_y = T.batch_split(zn, [b, b])
    if z_r.shape != zn_x.shape:
        raise ValueError(f"random noise code has shape {z_r.shape}, expected {zn_x.shape}")

    need_swap = (weights.use_rec and weights.alpha) or (weights.use_noise and weights.gamma)
    clean_parts, noise_parts = [zc_y], [z_r]
    if need_swap:
        clean_parts = [zc_x, zc_y] + clean_parts
        noise_parts = [zn_y, zn_x] + noise_parts
    decoded = flow_inverse(LatentCode.join(T.batch_concat(clean_parts), T.batch_concat(noise_parts)), model)
    pieces = T.batch_split(decoded, [b] * len(clean_parts)) if need_swap else [decoded]
    y_tilde = pieces[-1]

    parts = O.LossParts(reg=O.loss_reg(y_tilde, x))
    if need_swap:
        y_hat, x_hat = pieces[0], pieces[1]
        n_hat = T.sub(y_hat, x)
        if weights.use_rec and weights.alpha:
            parts.rec = O.loss_rec(n_hat, n, x_hat, x)
        if weights.use_noise and weights.gamma:
            parts.noise = O.batch_noise_loss(n_hat, sigmas, patch_edge, stride, joint_channels)
    if weights.use_cnt and weights.beta:
        parts.cnt = O.loss_cnt(zc_x, zc_y)
    return O.total_loss(parts, weights), parts


def train_step(model: FlowModel, opt: AdamState, x, y, n, sigmas, z_r, cfg: TrainConfig) -> dict | None:
    """One optimization step; returns the unweighted loss parts, or ``None`` if aborted."""
    params = model.named_parameters()
    T.zero_grads(params.values())
    try:
        total, parts = compute_losses(model, x, y, n, sigmas, z_r, cfg.weights(),
                                      patch_edge=cfg.patch_edge, stride=cfg.patch_stride,
                                      joint_channels=cfg.patch_joint_channels)
        if not math.isfinite(total.item()):
            raise FloatingPointError(f"non-finite loss {total.item()}")
        total.backward()
        adam_step(params, opt)
    except (FloatingPointError, ZeroDivisionError) as exc:
        log.warning("step aborted, parameters unchanged: %s", exc)
        T.zero_grads(params.values())
        return None
    value = lambda t: 0.0 if t is None else t.item()  # noqa: E731
    return {"total": total.item(), "reg": value(parts.reg), "rec": value(parts.rec),
            "cnt": value(parts.cnt), "noise": value(parts.noise)}


# -- batches ---------------------------------------------------------------

def _as_pair(item) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(item, tuple):
        return item[0], item[1]
    return item, None


def make_batch(dataset: Sequence, cfg: TrainConfig, step: int):
    """Deterministic batch for ``step``: depends only on (seed, step, dataset)."""
    rng = rng_for(cfg.seed, _STREAM_STEP, step)
    dtype = cfg.np_dtype
    xs, ys, ns, sig = [], [], [], []
    for _ in range(cfg.batch_size):
        clean, noisy = _as_pair(dataset[int(rng.integers(0, len(dataset)))])
        if noisy is None:
            if cfg.mode == "blind":
                sigma = float(sample_blind_sigma(rng, cfg.sigma_range[0] / 255, cfg.sigma_range[1] / 255))
            else:
                sigma = cfg.sigma / 255
            ((xp, _, _),) = crop_patches(clean, clean, cfg.patch_size, 1, rng, multiple=2**cfg.num_blocks)
            yp, n = add_awgn(xp, sigma, rng)
        else:
            ((xp, yp, _),) = crop_patches(clean, noisy, cfg.patch_size, 1, rng, multiple=2**cfg.num_blocks)
            n = yp - xp
            sigma = float(np.std(n))
        xs.append(xp)
        ys.append(yp)
        ns.append(n)
        sig.append(sigma)
    x, y, n = (np.stack(v).astype(dtype) for v in (xs, ys, ns))
    lat = 2**cfg.num_blocks
    latent_c = cfg.channels * 4**cfg.num_blocks
    noise_c = latent_c - int(min(max(round(0.75 * latent_c), 1), latent_c - 1))
    z_r = rng.standard_normal((cfg.batch_size, noise_c, cfg.patch_size // lat, cfg.patch_size // lat)).astype(dtype)
    return x, y, n, np.asarray(sig), z_r


def make_eval_set(clean_images: Sequence[np.ndarray], sigma255: float, seed: int):
    """Fixed noisy copies of held-out images (seeded per image index)."""
    out = []
    for i, img in enumerate(clean_images):
        y, _ = add_awgn(img, sigma255 / 255, rng_for(seed, _STREAM_EVAL, i))
        out.append((img, y))
    return out


def evaluate_psnr(model: FlowModel, eval_set) -> float:
    return float(np.mean([psnr(denoise(model, y), x) for x, y in eval_set]))


def load_dataset(cfg: TrainConfig):
    """Training images and a held-out set from the config (toy corpus when no data_dir)."""
    from .data import list_images, load_image

    if not cfg.data_dir:
        train = make_toy_dataset(cfg.toy_images, cfg.toy_size, cfg.seed, cfg.channels)
        held = make_toy_dataset(cfg.eval_images, cfg.toy_size, cfg.seed + 1_000_003, cfg.channels)
        return train, held
    paths = list_images(cfg.data_dir)
    if not paths:
        raise FileNotFoundError(f"{cfg.data_dir}: no images found")
    clean = [load_image(p) for p in paths]
    if cfg.noisy_dir:
        noisy = [load_image(Path(cfg.noisy_dir) / p.name) for p in paths]
        items = list(zip(clean, noisy))
    else:
        items = clean
    n_eval = min(cfg.eval_images, max(len(items) - 1, 0))
    held = [_as_pair(it)[0] for it in items[len(items) - n_eval:]] if n_eval else []
    return items[:len(items) - n_eval] if n_eval else items, held


# -- the loop --------------------------------------------------------------

@dataclass
class TrainResult:
    model: FlowModel
    opt: AdamState
    log: list[TrainLogRecord] = field(default_factory=list)
    step: int = 0


def new_model(cfg: TrainConfig) -> FlowModel:
    return init_model(cfg.channels, cfg.num_blocks, cfg.layers_per_block, cfg.hidden_width,
                      seed=cfg.seed, identity_init=cfg.identity_init, dtype=cfg.np_dtype)


def train(dataset: Sequence, cfg: TrainConfig, *, eval_images: Sequence[np.ndarray] | None = None,
          resume_from=None, progress: bool = False) -> TrainResult:
    """Run ``cfg.steps`` total steps (continuing from a checkpoint if given).

    ``dataset`` items are clean C×H×W arrays (noise synthesized per mode) or
    (clean, noisy) pairs.
    """
    if not len(dataset):
        raise ValueError("train: empty dataset")
    if resume_from is not None:
        model, opt, start, _ = load_checkpoint(resume_from)
        expected = new_model(cfg)
        _check_compatible(model, expected, resume_from)
    else:
        model, opt, start = new_model(cfg), AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon), 0
    eval_set = make_eval_set(eval_images, cfg.sigma, cfg.seed) if eval_images else []
    records: list[TrainLogRecord] = []

    for step in range(start, cfg.steps):
        if cfg.lr_decay_every:
            opt.lr = cfg.lr * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)
        t0 = time.perf_counter()
        x, y, n, sigmas, z_r = make_batch(dataset, cfg, step)
        losses = train_step(model, opt, x, y, n, sigmas, z_r, cfg)
        done = step + 1
        at_eval = cfg.eval_every > 0 and (done % cfg.eval_every == 0 or done == cfg.steps)
        eval_psnr = evaluate_psnr(model, eval_set) if (at_eval and eval_set) else None
        wall = (time.perf_counter() - t0) * 1e3
        if losses is not None:
            records.append(TrainLogRecord(done, losses["total"], losses["reg"], losses["rec"], losses["cnt"],
                                          losses["noise"], eval_psnr, wall))
        if at_eval and cfg.checkpoint_path:
            save_checkpoint(model, opt, cfg, cfg.checkpoint_path, step=done)
        if progress and (at_eval or done % 100 == 0) and losses is not None:
            msg = f"step {done}/{cfg.steps} loss {losses['total']:.5f}"
            if eval_psnr is not None:
                msg += f" eval_psnr {eval_psnr:.2f} dB"
            log.info(msg)
    if cfg.log_path:
        write_log(records, cfg.log_path)
    return TrainResult(model, opt, records, max(start, cfg.steps))


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: FlowModel, opt: AdamState | None, cfg: TrainConfig | None, path, *, step: int = 0) -> None:
    params = model.named_parameters()
    dtype = np.dtype(model.dtype).name
    lines = [
        CHECKPOINT_MAGIC,
        f"format_version={CHECKPOINT_VERSION}",
        f"num_blocks={model.num_blocks}",
        f"layers_per_block={model.layers_per_block}",
        f"hidden_width={model.hidden_width}",
        f"input_channels={model.input_channels}",
        f"clean_channels={model.clean_channels}",
        f"dtype={dtype}",
        f"step={step}",
        f"param_count={len(params)}",
        f"params={','.join(params)}",
        f"optimizer={1 if opt is not None else 0}",
    ]
    if opt is not None:
        lines += [f"adam_lr={opt.lr!r}", f"adam_beta1={opt.beta1!r}", f"adam_beta2={opt.beta2!r}",
                  f"adam_epsilon={opt.epsilon!r}", f"adam_step_count={opt.step_count}"]
    if cfg is not None:
        # output locations stay out so identical runs give identical bytes
        lines += [f"config.{ln}" for ln in cfg.to_text().splitlines()
                  if ln.split("=", 1)[0] not in _LOCATION_KEYS]
    lines.append("END")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for p in params.values():
            T.write_raw(f, p.data)
        if opt is not None:
            for name, p in params.items():
                T.write_raw(f, opt.first_moment.get(name, np.zeros_like(p.data)))
            for name, p in params.items():
                T.write_raw(f, opt.second_moment.get(name, np.zeros_like(p.data)))
    tmp.replace(path)


def read_manifest(f) -> dict[str, str]:
    first = f.readline().decode(errors="replace").strip()
    if first != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint (header {first!r})")
    manifest = {}
    for lineno in range(2, 10_000):
        line = f.readline()
        if not line:
            raise ValueError(f"corrupt manifest: missing END (line {lineno})")
        text = line.decode(errors="replace").rstrip("\n")
        if text == "END":
            return manifest
        if "=" not in text:
            raise ValueError(f"corrupt manifest line {lineno}: {text!r}")
        k, v = text.split("=", 1)
        manifest[k] = v
    raise ValueError("corrupt manifest: too many lines")


def load_checkpoint(path, expect: FlowModel | None = None):
    """Returns (model, optimizer state or None, step, config or None)."""
    with open(path, "rb") as f:
        try:
            m = read_manifest(f)
            version = int(m["format_version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
            dtype = {"float64": np.float64, "float32": np.float32}[m["dtype"]]
            model = init_model(int(m["input_channels"]), int(m["num_blocks"]), int(m["layers_per_block"]),
                               int(m["hidden_width"]), dtype=dtype)
            names = m["params"].split(",")
            if int(m["clean_channels"]) != model.clean_channels:
                raise ValueError(f"clean_channels {m['clean_channels']} does not match {model.clean_channels}")
        except KeyError as exc:
            raise ValueError(f"{path}: corrupt manifest, missing key {exc}") from None
        if expect is not None:
            _check_compatible(model, expect, path)
        params = model.named_parameters()
        if names != list(params) or int(m["param_count"]) != len(names):
            raise ValueError(f"{path}: parameter list does not match the declared architecture")
        for name in names:
            arr = T.read_raw(f)
            if arr.shape != params[name].shape:
                raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {params[name].shape}")
            params[name].data = arr
        opt = None
        if m.get("optimizer") == "1":
            opt = AdamState(float(m["adam_lr"]), float(m["adam_beta1"]), float(m["adam_beta2"]),
                            float(m["adam_epsilon"]), int(m["adam_step_count"]))
            for name in names:
                opt.first_moment[name] = T.read_raw(f)
            for name in names:
                opt.second_moment[name] = T.read_raw(f)
        cfg_text = "\n".join(f"{k[7:]}={v}" for k, v in m.items() if k.startswith("config."))
        cfg = TrainConfig.from_text(cfg_text, f"{path} manifest") if cfg_text else None
    return model, opt, int(m.get("step", 0)), cfg


def _check_compatible(model: FlowModel, expect: FlowModel, path) -> None:
    for attr in ("num_blocks", "layers_per_block", "hidden_width", "input_channels"):
        a, b = getattr(model, attr), getattr(expect, attr)
        if a != b:
            raise ValueError(f"{path}: checkpoint {attr}={a} does not match expected {b}")
