"""Release gate: numeric checks that need no training run.

Each check returns a :class:`CheckResult`; ``run_selfcheck`` runs them all.
``inject_fault`` perturbs a layer's backward pass so tests can confirm the
gradient check notices.
"""

from __future__ import annotations

import contextlib
import time
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from .learners import lucir_loss
from .memory import herding_select
from .numerics import (Conv1d, CosineLinear, Flatten, Linear, MaxPool1d, ReLU, kd_loss,
                       softmax_cross_entropy)
from .sigmod import add_awgn, constellation_for, make_dataset, ml_classify, rrc_taps

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _signed_gap(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + gap)


def _layer_error(layer, x, rng) -> float:
    out = layer.forward(x, train=False)
    r = rng.standard_normal(out.shape)
    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(r)

    def f():
        return float((layer.forward(x, train=False) * r).sum())

    errs = [rel_error(dx, numeric_grad(f, x))]
    errs += [rel_error(layer.grads[k], numeric_grad(f, p)) for k, p in layer.params.items()]
    return max(errs)


def _layer_cases(rng):
    f64 = np.float64
    conv = Conv1d(2, 3, rng).astype(f64)
    conv.params["bias"][...] = rng.standard_normal(3)
    yield conv, rng.standard_normal((2, 6, 2))
    yield ReLU(), _signed_gap(rng, (2, 5, 3))
    # strictly increasing runs keep every pooling window away from a tie
    yield MaxPool1d(), np.cumsum(_signed_gap(rng, (2, 6, 3)), axis=1)
    yield Flatten(), rng.standard_normal((2, 4, 3))
    yield Linear(5, 4, rng).astype(f64), rng.standard_normal((3, 5))
    yield CosineLinear(5, 4, rng, scale=float(rng.uniform(1, 10))).astype(f64), rng.standard_normal((3, 5))


def _ce_error(rng) -> float:
    z = rng.standard_normal((4, 5)) * 3
    y = rng.integers(0, 5, 4)
    _, g = softmax_cross_entropy(z, y)
    return rel_error(g, numeric_grad(lambda: softmax_cross_entropy(z, y)[0], z))


def _kd_error(rng) -> float:
    s, t = rng.standard_normal((3, 4)) * 2, rng.standard_normal((3, 4)) * 2
    temp = float(rng.uniform(1, 4))
    _, g = kd_loss(s, t, temp)
    return rel_error(g, numeric_grad(lambda: kd_loss(s, t, temp)[0], s))


def lucir_instance(rng, n_old=3, n_new=2, b=6, dim=4, margin=0.5, k=2):
    """Random LUCIR inputs whose hinge terms and top-k ranks sit away from kinks."""
    while True:
        cos = rng.uniform(-0.9, 0.9, (b, n_old + n_new))
        labels = rng.integers(0, n_old + n_new, b)
        labels[:2] = rng.integers(0, n_old, 2)
        old = labels < n_old
        novel = np.sort(cos[old, n_old:], axis=1)
        gaps_ok = np.all(np.diff(novel, axis=1) > 0.05)
        hinge = margin - cos[old, labels[old]][:, None] + cos[old, n_old:]
        if gaps_ok and np.all(np.abs(hinge) > 0.05):
            break
    feats = rng.standard_normal((b, dim))
    teacher = rng.standard_normal((b, dim))
    return cos, feats, teacher, labels


def _lucir_error(rng) -> float:
    n_old, n_new = 3, 2
    cos, feats, teacher, labels = lucir_instance(rng, n_old, n_new)
    scale = np.array([float(rng.uniform(1, 10))])

    def total():
        return lucir_loss(cos, scale[0], feats, labels, teacher, n_old, n_new, 5.0, 0.5, 2)[0]

    _, dlogits, dcos, dfeat = lucir_loss(cos, scale[0], feats, labels, teacher, n_old, n_new, 5.0, 0.5, 2)
    return max(rel_error(scale[0] * dlogits + dcos, numeric_grad(total, cos)),
               rel_error(dfeat, numeric_grad(total, feats)),
               rel_error([(dlogits * cos).sum()], numeric_grad(total, scale)))


def check_gradients(n_instances: int = 20, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        for layer, x in _layer_cases(rng):
            worst[layer.kind] = max(worst.get(layer.kind, 0.0), _layer_error(layer, x, rng))
        for name, fn in (("cross_entropy", _ce_error), ("kd", _kd_error), ("lucir", _lucir_error)):
            worst[name] = max(worst.get(name, 0.0), fn(rng))
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    if bad:
        detail = "; ".join(f"{k} max rel err {v:.2e}" for k, v in bad.items())
    else:
        detail = f"{len(worst)} kinds x {n_instances} instances, max rel err {max(worst.values()):.1e}"
    return CheckResult("gradients", not bad, detail, time.perf_counter() - start)


def _herding_oracle(feats: np.ndarray, q: int) -> list[int]:
    """Greedy mean matching in exact rational arithmetic, so true ties resolve
    to the lowest index instead of to rounding noise."""
    rows = [[Fraction(float(v)) for v in row] for row in feats]
    mu = [sum(col) / len(rows) for col in zip(*rows)]
    chosen: list[int] = []
    for k in range(1, q + 1):
        best, best_d = None, None
        for i in range(len(rows)):
            if i in chosen:
                continue
            mean = [sum(col) / k for col in zip(*(rows[j] for j in chosen + [i]))]
            d = sum((a - b) ** 2 for a, b in zip(mu, mean))
            if best_d is None or d < best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def check_herding(n_instances: int = 50, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_instances):
        n, f = int(rng.integers(1, 13)), int(rng.integers(1, 5))
        q = int(rng.integers(1, n + 1))
        feats = rng.standard_normal((n, f))
        if herding_select(feats, q) != _herding_oracle(feats, q):
            mismatches += 1
    return CheckResult("herding", mismatches == 0, f"{n_instances - mismatches}/{n_instances} match the oracle",
                       time.perf_counter() - start)


def rrc_isi(beta: float = 0.35, sps: int = 8, span: int = 8) -> float:
    """Largest off-peak symbol-spaced tap of the filter convolved with itself, relative to the peak."""
    h = rrc_taps(beta, sps, span)
    full = np.convolve(h, h)
    mid = len(full) // 2
    at_symbols = full[mid % sps::sps]
    peak = full[mid]
    off = np.delete(at_symbols, mid // sps)
    return float(np.abs(off).max() / abs(peak))


def check_rrc() -> CheckResult:
    start = time.perf_counter()
    isi = rrc_isi()
    return CheckResult("rrc", isi < 0.02, f"off-peak ISI {100 * isi:.2f}% of peak", time.perf_counter() - start)


def measured_snr_db(snr_db: float, n: int = 10_000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    sig = np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    noisy = add_awgn(sig, snr_db, rng)
    noise = noisy - sig
    return float(10 * np.log10(np.mean(np.abs(sig) ** 2) / np.mean(np.abs(noise) ** 2)))


def check_awgn() -> CheckResult:
    start = time.perf_counter()
    errs = {s: measured_snr_db(s, seed=s) - s for s in (0, 10, 20)}
    ok = all(abs(e) <= 0.5 for e in errs.values())
    detail = ", ".join(f"{s} dB -> {s + e:.2f}" for s, e in errs.items())
    return CheckResult("awgn", ok, detail, time.perf_counter() - start)


def ml_accuracy(names=("BPSK", "QPSK", "16QAM"), snr_db: int = 20, frames: int = 100, seed: int = 0,
                sps: int = 8) -> float:
    ds = make_dataset(names, (snr_db,), frames, 256, seed, sps=sps)
    schemes = [constellation_for(n) for n in names]
    hits = 0
    for i in range(len(ds)):
        x = ds.samples[i, 0] + 1j * ds.samples[i, 1]
        hits += ml_classify(x, schemes, snr_db, sps=sps) == ds.labels[i]
    return hits / len(ds)


def check_ml_classifier() -> CheckResult:
    start = time.perf_counter()
    acc = ml_accuracy()
    return CheckResult("ml-separability", acc >= 0.99, f"BPSK/QPSK/16QAM at 20 dB: {100 * acc:.1f}%",
                       time.perf_counter() - start)


@contextlib.contextmanager
def inject_fault(kind: str = "conv1d", factor: float = 1.01):
    """Scale the weight gradient of one layer kind by ``factor`` while active."""
    classes = {cls.kind: cls for cls in (Conv1d, Linear, CosineLinear)}
    if kind not in classes:
        raise ValueError(f"cannot inject a fault into {kind!r}")
    cls = classes[kind]
    original = cls.backward

    def faulty(self, dout, *args):
        out = original(self, dout, *args)
        self.grads["weight"] *= factor
        return out

    cls.backward = faulty
    try:
        yield
    finally:
        cls.backward = original


CHECKS = (check_gradients, check_herding, check_rrc, check_awgn, check_ml_classifier)


def run_selfcheck(fault: str | None = None, report=print) -> list[CheckResult]:
    results = []
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for check in CHECKS:
            res = check()
            results.append(res)
            if report is not None:
                report(res.line())
    return results


__all__ = ["CheckResult", "check_gradients", "check_herding", "check_rrc", "check_awgn",
           "check_ml_classifier", "inject_fault", "run_selfcheck", "rrc_isi", "measured_snr_db",
           "ml_accuracy"]
