"""Finite-difference verification of every layer and loss at 64-bit.

Each component runs a number of randomised trials; a trial compares the
hand-written backward pass with central differences over all inputs and
reports the max-norm relative error. Layer functions are looked up on the
module at call time so a patched backward is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from fedifl import losses as L
from fedifl.nn import functional as F
from fedifl.nn.gradcheck import finite_diff_gradient, relative_error

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckRow:
    component: str
    kind: str
    trials: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= TOLERANCE)


def _compare(fn, analytic: dict, inputs: dict) -> float:
    numeric = finite_diff_gradient(fn, inputs, STEP)
    return max(relative_error(analytic[k], numeric[k]) for k in inputs)


def _labels(rng, n, classes):
    # every class present at least once when n allows
    y = rng.integers(0, classes, n)
    y[:min(n, classes)] = np.arange(min(n, classes))
    return rng.permutation(y)


# ---------------------------------------------------------------- layers

def _projected(forward, backward, inputs, rng):
    """Check ``sum(R * forward())`` so every output element contributes."""
    R = rng.standard_normal(forward().shape)
    return _compare(lambda: float((forward() * R).sum()), backward(R), inputs)


def trial_conv1d(rng):
    B, cin, cout = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.choice([1, 3, 5]))
    length = int(rng.integers(k, 9))
    stride = int(rng.integers(1, 3))
    x = rng.standard_normal((B, cin, length))
    w = rng.standard_normal((cout, cin, k))
    b = rng.standard_normal(cout)
    cache = {}

    def fwd():
        out, cache["c"] = F.conv1d(x, w, b, stride, "same")
        return out

    return _projected(fwd, lambda up: F.conv1d_backward(up, cache["c"]),
                      {"input": x, "kernel": w, "bias": b}, rng)


def trial_maxpool1d(rng):
    # well-separated values keep the argmax away from ties under perturbation
    B, C, n = rng.integers(1, 3), rng.integers(1, 3), int(rng.integers(2, 9))
    x = rng.permutation(np.arange(B * C * n, dtype=float)).reshape(B, C, n) * 0.1
    x += 0.01 * rng.standard_normal(x.shape)
    cache = {}

    def fwd():
        out, cache["c"] = F.maxpool1d(x, 2, 2)
        return out

    return _projected(fwd, lambda up: F.maxpool1d_backward(up, cache["c"]), {"input": x}, rng)


def trial_batchnorm1d(rng):
    three_d = bool(rng.integers(0, 2))
    C = int(rng.integers(1, 4))
    shape = (int(rng.integers(2, 5)), C, int(rng.integers(1, 5))) if three_d else (int(rng.integers(2, 6)), C)
    x = rng.standard_normal(shape)
    gain = rng.standard_normal(C)
    shift = rng.standard_normal(C)
    mode = "train" if rng.random() < 0.7 else "eval"
    rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)
    cache = {}

    def fwd():
        out, cache["c"] = F.batchnorm1d(x, gain, shift, rm.copy(), rv.copy(), mode)
        return out

    return _projected(fwd, lambda up: F.batchnorm1d_backward(up, cache["c"]),
                      {"input": x, "gain": gain, "shift": shift}, rng)


def trial_relu(rng):
    x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 6))))
    x[np.abs(x) < 1e-3] += 0.01
    cache = {}

    def fwd():
        out, cache["m"] = F.relu(x)
        return out

    return _projected(fwd, lambda up: F.relu_backward(up, cache["m"]), {"input": x}, rng)


def trial_sigmoid(rng):
    x = 3 * rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 6))))
    return _projected(lambda: F.sigmoid(x), lambda up: F.sigmoid_backward(up, F.sigmoid(x)),
                      {"input": x}, rng)


def trial_fc(rng):
    B, din, dout = (int(v) for v in rng.integers(1, 5, 3))
    x, w, b = rng.standard_normal((B, din)), rng.standard_normal((dout, din)), rng.standard_normal(dout)
    cache = {}

    def fwd():
        out, cache["c"] = F.fc(x, w, b)
        return out

    return _projected(fwd, lambda up: F.fc_backward(up, cache["c"]), {"input": x, "weight": w, "bias": b}, rng)


def trial_softmax(rng):
    x = 2 * rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 6))))
    return _projected(lambda: F.softmax(x, axis=1), lambda up: F.softmax_backward(up, F.softmax(x, axis=1), axis=1),
                      {"input": x}, rng)


# ---------------------------------------------------------------- losses

def _feature_batch(rng, n=None, d=None, classes=None):
    n = n or int(rng.integers(3, 7))
    d = d or int(rng.integers(2, 5))
    classes = classes or int(rng.integers(2, 4))
    return rng.standard_normal((n, d)), _labels(rng, n, classes), classes


def trial_structural_similarity(rng):
    f, y, c = _feature_batch(rng)
    space = range(c)
    _, g = L.structural_similarity_grad(f, y, space)
    return _compare(lambda: L.structural_similarity_grad(f, y, space)[0], {"f": g}, {"f": f})


def trial_cross_entropy(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    z = 2 * rng.standard_normal((n, c))
    index = {10 + i: i for i in range(c)}
    y = rng.integers(10, 10 + c, n)
    _, g = L.cross_entropy_grad(z, y, index)
    return _compare(lambda: L.cross_entropy(z, y, index), {"z": g}, {"z": z})


def trial_ipcl(rng):
    f, y, c = _feature_batch(rng)
    w, b = rng.standard_normal((c, f.shape[1])), rng.standard_normal(c)
    index = {i: i for i in range(c)}

    def value():
        ss, _ = L.structural_similarity_grad(f, y, range(c))
        return L.ipcl_loss(ss, L.cross_entropy(F.fc(f, w, b)[0], y, index))

    logits, cache = F.fc(f, w, b)
    _, dss = L.structural_similarity_grad(f, y, range(c))
    _, dlog = L.cross_entropy_grad(logits, y, index)
    g = F.fc_backward(dlog, cache)
    return _compare(value, {"f": dss + g["input"], "w": g["weight"]}, {"f": f, "w": w})


def trial_adversarial(rng):
    n = int(rng.integers(1, 6))
    real, fake = rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, n)
    dri, dfi, dfg = L.adversarial_grads(real, fake)
    e_i = _compare(lambda: L.adversarial_losses(real, fake)[1], {"r": dri, "f": dfi}, {"r": real, "f": fake})
    e_g = _compare(lambda: L.adversarial_losses(real, fake)[0], {"f": dfg}, {"f": fake})
    return max(e_i, e_g)


def trial_adversarial_logits(rng):
    n = int(rng.integers(1, 6))
    zr, zf = 3 * rng.standard_normal(n), 3 * rng.standard_normal(n)
    _, _, dri, dfi, dfg = L.adversarial_losses_from_logits(zr, zf)
    e_i = _compare(lambda: L.adversarial_losses_from_logits(zr, zf)[1], {"r": dri, "f": dfi}, {"r": zr, "f": zf})
    e_g = _compare(lambda: L.adversarial_losses_from_logits(zr, zf)[0], {"f": dfg}, {"f": zf})
    return max(e_i, e_g)


def trial_ipfg(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    zf, logits = 3 * rng.standard_normal(n), rng.standard_normal((n, c))
    y = rng.integers(0, c, n)
    index = {i: i for i in range(c)}
    zr = rng.standard_normal(n)

    def value():
        return L.ipfg_loss(L.adversarial_losses_from_logits(zr, zf)[0], L.cross_entropy(logits, y, index))

    dfg = L.adversarial_losses_from_logits(zr, zf)[4]
    _, dlog = L.cross_entropy_grad(logits, y, index)
    return _compare(value, {"z": dfg, "l": dlog}, {"z": zf, "l": logits})


def trial_similarity_matrix(rng):
    n, m = (int(v) for v in rng.integers(1, 5, 2))
    d = int(rng.integers(2, 5))
    A, B = rng.standard_normal((n, d)), rng.standard_normal((m, d))
    R = rng.standard_normal((n, m))
    dA, dB = L.similarity_matrix_backward(A, B, R)
    return _compare(lambda: float((L.similarity_matrix(A, B) * R).sum()), {"A": dA, "B": dB}, {"A": A, "B": B})


def _pair(rng):
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    return rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.integers(0, c, n), rng.integers(0, c, n)


def trial_csi(rng):
    A, B, la, lb = _pair(rng)
    _, dA, dB = L.csi_grad(A, B, la, lb)
    return _compare(lambda: L.csi(A, B, la, lb), {"A": dA, "B": dB}, {"A": A, "B": B})


def trial_cdsi(rng):
    A, B, la, lb = _pair(rng)
    _, dA, dB = L.cdsi_grad(A, B, la, lb)
    return _compare(lambda: L.cdsi(A, B, la, lb), {"A": dA, "B": dB}, {"A": A, "B": B})


def _sets(rng, k=None, n=None, d=None):
    k = k or int(rng.integers(2, 4))
    n = n or int(rng.integers(1, 5))
    d = d or int(rng.integers(2, 5))
    return [L.LabeledFeatureBatch(rng.standard_normal((n, d)), rng.integers(0, 3, n)) for _ in range(k)]


def trial_ficl(rng):
    sets = _sets(rng)
    red = str(rng.choice(["sum", "mean"]))
    _, g = L.ficl_grad(sets, red)
    inputs = {str(i): s.features for i, s in enumerate(sets)}
    return _compare(lambda: L.ficl(sets, red), {str(i): v for i, v in enumerate(g)}, inputs)


def trial_fipl(rng):
    k, n, d = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
    inv = _sets(rng, k, n, d)
    spe = [L.LabeledFeatureBatch(rng.standard_normal((n, d)), s.labels) for s in inv]
    red = str(rng.choice(["sum", "mean"]))
    _, gi, gs = L.fipl_grad(inv, spe, red)
    inputs = {**{f"i{j}": s.features for j, s in enumerate(inv)}, **{f"s{j}": s.features for j, s in enumerate(spe)}}
    analytic = {**{f"i{j}": v for j, v in enumerate(gi)}, **{f"s{j}": v for j, v in enumerate(gs)}}
    return _compare(lambda: L.fipl(inv, spe, red), analytic, inputs)


def trial_orthogonal(rng):
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    A, B = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    # keep norms away from the kink of |norm - 1|
    for M in (A, B):
        nrm = np.linalg.norm(M, axis=1)
        M[np.abs(nrm - 1) < 1e-2] *= 1.1
    form, red = str(rng.choice(["squared", "raw"])), str(rng.choice(["sum", "mean"]))
    _, dA, dB = L.orthogonal_loss_grad(A, B, form, red)
    return _compare(lambda: L.orthogonal_loss(A, B, form, red), {"A": dA, "B": dB}, {"A": A, "B": B})


def trial_cct(rng):
    # total cross-client loss over invariant/specific batches and global logits
    k, n, d, c = int(rng.integers(2, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), 3
    IF = [rng.standard_normal((n, d)) for _ in range(k)]
    SF = [rng.standard_normal((n, d)) for _ in range(k)]
    ys = [rng.integers(0, c, n) for _ in range(k)]
    logits = rng.standard_normal((k * n, c))
    index = {i: i for i in range(c)}
    y_all = np.concatenate(ys)

    def parts(need_grad):
        inv = [L.LabeledFeatureBatch(f, y) for f, y in zip(IF, ys)]
        spe = [L.LabeledFeatureBatch(f, y) for f, y in zip(SF, ys)]
        fic, gf = L.ficl_grad(inv, "mean", need_grad)
        fip, gi, gs = L.fipl_grad(inv, spe, "mean", need_grad)
        o, d_if, d_sf = L.orthogonal_loss_grad(IF[0], SF[0], "squared", "mean")
        ce, dlog = L.cross_entropy_grad(logits, y_all, index)
        return L.cct_loss(fic, fip, o, ce), (gf, gi, gs, d_if, d_sf, dlog)

    _, (gf, gi, gs, d_if, d_sf, dlog) = parts(True)
    analytic = {"logits": dlog}
    inputs = {"logits": logits}
    for j in range(k):
        analytic[f"if{j}"] = gf[j] + gi[j] + (d_if if j == 0 else 0)
        analytic[f"sf{j}"] = gs[j] + (d_sf if j == 0 else 0)
        inputs[f"if{j}"], inputs[f"sf{j}"] = IF[j], SF[j]
    return _compare(lambda: parts(False)[0], analytic, inputs)


LAYER_CHECKS = {
    "conv1d": trial_conv1d,
    "maxpool1d": trial_maxpool1d,
    "batchnorm1d": trial_batchnorm1d,
    "relu": trial_relu,
    "sigmoid": trial_sigmoid,
    "fc": trial_fc,
    "softmax": trial_softmax,
}

LOSS_CHECKS = {
    "structural_similarity": trial_structural_similarity,
    "cross_entropy": trial_cross_entropy,
    "ipcl": trial_ipcl,
    "adversarial": trial_adversarial,
    "adversarial_logits": trial_adversarial_logits,
    "ipfg": trial_ipfg,
    "similarity_matrix": trial_similarity_matrix,
    "csi": trial_csi,
    "cdsi": trial_cdsi,
    "ficl": trial_ficl,
    "fipl": trial_fipl,
    "orthogonal": trial_orthogonal,
    "cct": trial_cct,
}

# public functions of the losses module and the check exercising each
LOSS_COVERAGE = {
    "structural_similarity_loss": "structural_similarity",
    "structural_similarity_grad": "structural_similarity",
    "cross_entropy": "cross_entropy",
    "cross_entropy_grad": "cross_entropy",
    "ipcl_loss": "ipcl",
    "adversarial_losses": "adversarial",
    "adversarial_grads": "adversarial",
    "adversarial_losses_from_logits": "adversarial_logits",
    "ipfg_loss": "ipfg",
    "similarity_matrix": "similarity_matrix",
    "similarity_matrix_backward": "similarity_matrix",
    "csi": "csi",
    "csi_grad": "csi",
    "cdsi": "cdsi",
    "cdsi_grad": "cdsi",
    "ficl": "ficl",
    "ficl_grad": "ficl",
    "fipl": "fipl",
    "fipl_grad": "fipl",
    "orthogonal_loss": "orthogonal",
    "orthogonal_loss_grad": "orthogonal",
    "cct_loss": "cct",
}


def run_suite(trials: int = 100, seed: int = 0, only=None) -> list[CheckRow]:
    rows = []
    checks = [("layer", k, f) for k, f in LAYER_CHECKS.items()] + [("loss", k, f) for k, f in LOSS_CHECKS.items()]
    for i, (kind, name, fn) in enumerate(checks):
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            try:
                err = fn(rng)
            except FloatingPointError:
                err = float("inf")
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        rows.append(CheckRow(name, kind, trials, worst, time.perf_counter() - t0))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = [f"{'component':<22} {'kind':<6} {'trials':>6} {'max rel err':>12}  status"]
    for r in rows:
        lines.append(f"{r.component:<22} {r.kind:<6} {r.trials:>6} {r.max_rel_error:>12.3e}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
