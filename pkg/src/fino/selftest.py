"""Fast property checks runnable without pytest (``fino selftest``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .data import add_awgn
from .flow import flow_forward, flow_inverse, haar_forward, haar_inverse, init_model, latent_swap
from .gradcheck import audit_full_loss, tiny_problem
from .metrics import psnr, ssim
from .objective import extract_patches, loss_noise, noise_correlation


def check_haar() -> str:
    rng = np.random.default_rng(0)
    worst_e = worst_r = 0.0
    for _ in range(20):
        x = rng.standard_normal((1, 3, 8, 8))
        u = haar_forward(x).data
        worst_e = max(worst_e, abs(np.sum(u * u) - np.sum(x * x)) / np.sum(x * x))
        worst_r = max(worst_r, np.abs(haar_inverse(u).data - x).max())
    assert worst_e < 1e-12 and worst_r < 1e-12, (worst_e, worst_r)
    return f"energy rel err {worst_e:.1e}, round-trip {worst_r:.1e}"


def check_roundtrip() -> str:
    model = init_model(3, 2, 4, 8, seed=7, identity_init=False)
    x = np.random.default_rng(7).uniform(size=(2, 3, 16, 16))
    with T.no_grad():
        err = np.abs(flow_inverse(flow_forward(x, model), model).data - x).max()
    assert err < 1e-9, err
    return f"max abs err {err:.1e}"


def check_swap() -> str:
    model = init_model(1, 2, 2, 8, seed=3, identity_init=False)
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(2, 1, 1, 16, 16))
    with T.no_grad():
        zx, zy = flow_forward(x, model), flow_forward(y, model)
        a, b = latent_swap(*latent_swap(zx, zy))
        same = np.array_equal(a.z.data, zx.z.data) and np.array_equal(b.z.data, zy.z.data)
        err = np.abs(flow_inverse(latent_swap(zx, zx)[0], model).data - x).max()
    assert same and err < 1e-9, (same, err)
    return f"double swap bit-exact, self-swap decode err {err:.1e}"


def check_gradients() -> str:
    model, batch = tiny_problem(0, layers=1)
    audit = audit_full_loss(model, batch)
    assert audit.max_error < 1e-5, audit.worst_parameter()
    return f"worst relative error {audit.max_error:.1e} over {audit.checked} entries"


def check_noise_correlation() -> str:
    sigma = 25 / 255
    _, n = add_awgn(np.zeros((1, 3, 64, 64)), sigma, 0)
    white = loss_noise(noise_correlation(extract_patches(n)), sigma).item()
    sorted_n = np.sort(n, axis=-1)
    corr = loss_noise(noise_correlation(extract_patches(sorted_n)), sigma).item()
    assert corr > 10 * white, (white, corr)
    return f"white {white:.2e} vs sorted {corr:.2e}"


def check_metrics() -> str:
    a = np.random.default_rng(1).uniform(size=(1, 16, 16))
    p = psnr(a, a + 0.1)
    s = ssim(a, a)
    assert abs(p - 20.0) < 1e-9 and s == 1.0, (p, s)
    return f"psnr {p:.6f} dB, ssim(a,a) {s}"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("haar", check_haar),
    ("roundtrip", check_roundtrip),
    ("swap", check_swap),
    ("gradients", check_gradients),
    ("noise-correlation", check_noise_correlation),
    ("metrics", check_metrics),
]


def run(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn()
            status = "PASS"
        except AssertionError as exc:
            detail, status, ok = f"failed: {exc}", "FAIL", False
        out(f"{status} {name:<18} {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok
