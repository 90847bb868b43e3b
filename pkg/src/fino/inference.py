"""Denoising with a trained flow and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .flow import FlowModel, LatentCode, flow_forward, flow_inverse
from .metrics import psnr, ssim

DENOISE_MODES = ("zero", "sample", "average")


def _reflect_pad(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (0, 0)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode=mode), (ph, pw)


def denoise(model: FlowModel, y: np.ndarray, mode: str = "zero", *, seed: int = 0, k: int = 8,
            return_padding: bool = False):
    """Encode ``y``, keep its clean code, decode with a substitute noise code.

    ``zero`` uses an all-zero noise code (deterministic), ``sample`` one
    standard-normal draw, ``average`` the mean of ``k`` decoded draws.
    Accepts C×H×W or N×C×H×W; extents not divisible by 2^B are
    reflect-padded and cropped back.  The output is not clamped.
    """
    if mode not in DENOISE_MODES:
        raise ValueError(f"unknown denoise mode {mode!r}; choose from {DENOISE_MODES}")
    y = np.asarray(y, dtype=model.dtype)
    single = y.ndim == 3
    batch = y[None] if single else y
    if batch.ndim != 4 or batch.shape[1] != model.input_channels:
        raise ValueError(f"denoise: image shape {y.shape} incompatible with a "
                         f"{model.input_channels}-channel model")
    h, w = batch.shape[-2:]
    padded, pads = _reflect_pad(batch, 2**model.num_blocks)
    rng = np.random.default_rng(seed)
    with T.no_grad():
        code = flow_forward(padded, model)
        zc, zn = code.split()
        if mode == "zero":
            draws = [np.zeros(zn.shape, dtype=model.dtype)]
        elif mode == "sample":
            draws = [rng.standard_normal(zn.shape).astype(model.dtype)]
        else:
            if k < 1:
                raise ValueError(f"average mode needs k >= 1, got {k}")
            draws = [rng.standard_normal(zn.shape).astype(model.dtype) for _ in range(k)]
        outs = [flow_inverse(LatentCode.join(zc, T.Tensor(d)), model).data for d in draws]
    out = np.mean(outs, axis=0) if len(outs) > 1 else outs[0]
    out = out[..., :h, :w]
    if single:
        out = out[0]
    return (out, pads) if return_padding else out


@dataclass
class EvalRow:
    path: str
    noisy_psnr: float
    denoised_psnr: float
    ssim: float
    padding: tuple[int, int] = (0, 0)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    domain: str = "unclamped float output vs clean reference in [0,1]"

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {"noisy_psnr": math.nan, "denoised_psnr": math.nan, "ssim": math.nan}
        return {
            "noisy_psnr": float(np.mean([r.noisy_psnr for r in self.rows])),
            "denoised_psnr": float(np.mean([r.denoised_psnr for r in self.rows])),
            "ssim": float(np.mean([r.ssim for r in self.rows])),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in sorted(self.config.items()):
            buf.write(f"# {key}={value}\n")
        buf.write(f"# seed={self.seed}\n# domain={self.domain}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "noisy_psnr", "denoised_psnr", "ssim_gauss11_s1.5", "pad_h", "pad_w"])
        for r in self.rows:
            writer.writerow([r.path, _fmt(r.noisy_psnr), _fmt(r.denoised_psnr), _fmt(r.ssim), *r.padding])
        m = self.means()
        writer.writerow(["MEAN", _fmt(m["noisy_psnr"]), _fmt(m["denoised_psnr"]), _fmt(m["ssim"]), "", ""])
        return buf.getvalue()


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def parse_report_csv(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def evaluate_pairs(model: FlowModel | None, items, *, mode: str = "zero", seed: int = 0) -> EvalReport:
    """``items`` yields (label, clean, noisy_or_output).

    With a model the third entry is a noisy input that gets denoised; without
    one it is taken as an already-denoised image and noisy PSNR is ``nan``.
    """
    report = EvalReport(seed=seed)
    for label, clean, other in items:
        if model is None:
            row = EvalRow(label, math.nan, psnr(other, clean), ssim(other, clean))
        else:
            out, pads = denoise(model, other, mode, seed=seed, return_padding=True)
            row = EvalRow(label, psnr(other, clean), psnr(out, clean), ssim(out, clean), pads)
        report.rows.append(row)
    return report
