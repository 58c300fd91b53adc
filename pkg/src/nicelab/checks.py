"""Verification suites behind ``nice-lab check``.

``gradient_suite`` runs central-difference checks over every differentiable
op the model uses; ``oracle_suite`` compares the geometric and metric
primitives with brute-force reimplementations on random instances.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import bdl, cga, diffcore as dc, encoders, losses, metrics
from .diffcore import Tensor, grad_check

GRAD_H = 1e-6
OP_TOL = 1e-5
STACK_TOL = 1e-4
N_TRIALS = 10


def _rand(rng, *shape, scale=1.0):
    return rng.normal(0.0, scale, size=shape)


# ---------------------------------------------------------------- gradient cases
# each case: rng -> (callable, inputs)

def _case_matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    return dc.matmul, [_rand(rng, m, k), _rand(rng, k, n)]


def _case_masked_softmax(rng):
    rows, cols = rng.integers(1, 5), rng.integers(2, 7)
    mask = np.where(rng.random((rows, cols)) < 0.3, dc.NEG_INF, 0.0)
    mask[0] = dc.NEG_INF  # exercise the fallback row
    return (lambda x: dc.masked_softmax(x, mask)), [_rand(rng, rows, cols)]


def _case_layer_norm(rng):
    # two channels saturate the output at +-gamma and leave an O(eps) input gradient
    rows, c = rng.integers(1, 5), rng.integers(3, 9)
    return (lambda x, g, b: dc.layer_norm(x, g, b, 1e-5)), [_rand(rng, rows, c), _rand(rng, c), _rand(rng, c)]


def _elementwise(op_name, positive=False):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        x = rng.uniform(0.5, 2.0, size=shape) if positive else _rand(rng, *shape)
        # looked up per call so the corruption hook reaches it
        return getattr(dc, op_name), [x]
    return case


def _case_div(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    return dc.div, [_rand(rng, *shape), rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1, 1], size=shape)]


def _case_conv2d(rng):
    H, W, cin, cout = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 4)
    return dc.conv2d, [_rand(rng, H, W, cin), _rand(rng, 3, 3, cin, cout), _rand(rng, cout)]


def _case_avg_pool(rng):
    s = int(rng.choice([1, 2]))
    H, W, C = s * rng.integers(1, 4), s * rng.integers(1, 4), rng.integers(1, 3)
    return (lambda x: dc.avg_pool(x, s)), [_rand(rng, H, W, C)]


def _case_bilinear(rng):
    H, W, C, N = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 5), rng.integers(1, 4)
    # keep points off integer grid lines where the interpolant has a kink
    pts = np.stack([rng.uniform(0, W - 1, N), rng.uniform(0, H - 1, N)], axis=1)
    pts = np.floor(pts) + np.clip(pts - np.floor(pts), 0.05, 0.95)
    return dc.bilinear_sample, [_rand(rng, H, W, C), pts]


def _case_encode_image(rng):
    s = int(rng.choice([1, 2]))
    H0, W0, C = 4 * s, 4 * s, 4

    def op(img, w1, b1, w2, b2):
        return encoders.encode_image(img, encoders.VisualEncoderParams(w1, b1, w2, b2, s))

    return op, [rng.random((H0, W0, 3)), _rand(rng, 3, 3, 3, C, scale=0.5), _rand(rng, C, scale=0.5),
                _rand(rng, 3, 3, C, C, scale=0.5), _rand(rng, C, scale=0.5)]


def _case_encode_phrases(rng):
    V, E, C = 8, 5, 4
    toks = [list(rng.integers(0, V, size=rng.integers(1, 4))) for _ in range(rng.integers(1, 4))]

    def op(emb, w, b):
        return encoders.encode_phrases(toks, encoders.PhraseEncoderParams(emb, w, b))

    return op, [_rand(rng, V, E), _rand(rng, E, C), _rand(rng, C)]


def _small_attention(rng, C, hidden, scale=0.5):
    return [_rand(rng, C, C, scale=scale), _rand(rng, C, C, scale=scale), _rand(rng, C, C, scale=scale),
            _rand(rng, C, C, scale=scale), 1.0 + _rand(rng, C, scale=0.1), _rand(rng, C, scale=0.1),
            _rand(rng, C, hidden, scale=scale), _rand(rng, hidden, scale=0.1), _rand(rng, hidden, C, scale=scale),
            _rand(rng, C, scale=0.1)]


def _case_init_masks(rng):
    N, H, W, C = rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 5), rng.integers(2, 6)
    return (lambda k, f: cga.init_masks(cga.KernelState(k), f).masks), \
        [_rand(rng, N, C, scale=0.5), _rand(rng, H, W, C, scale=0.5)]


def _case_cga_stack(rng):
    N, H, W, C, heads = 2, 4, 4, 8, 2
    cfg = cga.CGAConfig(layers=2, heads=heads, tau=0.5, hidden=8)
    layer_arrays = [_small_attention(rng, C, 8) for _ in range(cfg.layers)]

    def op(k0, fv):
        lps = [cga.AttentionParams(*[Tensor(a) for a in arrs]) for arrs in layer_arrays]
        return cga.run_cga(cga.KernelState(k0), fv, lps, cfg)[-1][1].masks

    return op, [_rand(rng, N, C, scale=0.5), _rand(rng, H, W, C, scale=0.5)]


def _case_cga_layer_params(rng):
    N, H, W, C, heads = 2, 3, 3, 4, 2
    cfg = cga.CGAConfig(layers=1, heads=heads, tau=0.5, hidden=6)
    k0 = _rand(rng, N, C, scale=0.5)
    fv = _rand(rng, H, W, C, scale=0.5)
    prev = cga.init_masks(cga.KernelState(Tensor(k0)), Tensor(fv))

    def op(*arrs):
        state, masks = cga.cga_layer(cga.KernelState(Tensor(k0)), Tensor(fv), prev,
                                     cga.AttentionParams(*arrs), cfg)
        return masks.masks

    return op, _small_attention(rng, C, 6)


def _case_offset_map(rng):
    H, W, C = rng.integers(2, 5), rng.integers(2, 5), 4

    def op(fv, w1, b1, w2, b2):
        return bdl.offset_map(fv, bdl.BottleneckParams(w1, b1, w2, b2))

    return op, [_rand(rng, H, W, C), _rand(rng, 3, 3, C, 1, scale=0.5), _rand(rng, 1),
                _rand(rng, 3, 3, 1, 4, scale=0.5), _rand(rng, 4)]


def _case_barycenter(rng):
    N, H, W = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 6)
    return bdl.barycenter_mean, [rng.uniform(0.05, 1.0, size=(N, H, W))]


def _case_assemble(rng):
    N, H, W = rng.integers(1, 4), rng.integers(3, 6), rng.integers(3, 6)
    D = np.stack([rng.uniform(0, W - 1, N), rng.uniform(0, H - 1, N)], axis=1)
    D = np.floor(D) + np.clip(D - np.floor(D), 0.05, 0.95)
    return (lambda d, o: bdl.assemble_boxes(d, o, W, H)), [D, rng.random((H, W, 4))]


def _case_mask_to_box_path(rng):
    # box loss through barycenter + bilinear sampling back into the masks
    N, H, W = 2, 5, 5
    O = rng.uniform(0.1, 0.4, size=(H, W, 4))
    G = np.array([[0.5, 0.5, 3.5, 4.0], [1.0, 0.0, 4.5, 3.0]])

    def op(logits):
        D = bdl.barycenter_mean(dc.sigmoid(logits))
        B = bdl.assemble_boxes(D, Tensor(O), W, H)
        return losses.giou_loss(B, G) + losses.smooth_l1_loss(B, G, W, H)

    return op, [_rand(rng, N, H, W)]


def _case_direct_head(rng):
    N, C = rng.integers(1, 4), rng.integers(2, 6)
    return (lambda k, w, b: bdl.direct_box_head(k, bdl.BoxHeadParams(w, b), 8, 6)), \
        [_rand(rng, N, C), _rand(rng, C, 4), _rand(rng, 4)]


def _case_bce(rng):
    N, H, W = rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 5)
    Y = (rng.random((N, H, W)) < 0.5).astype(float)
    return (lambda m: losses.bce_loss(m, Y)), [rng.uniform(0.05, 0.95, size=(N, H, W))]


def _case_dice(rng):
    N, H, W = rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 5)
    Y = (rng.random((N, H, W)) < 0.5).astype(float)
    return (lambda m: losses.dice_loss(m, Y)), [rng.uniform(0.05, 0.95, size=(N, H, W))]


def _random_boxes(rng, n, lo=0.0, hi=10.0):
    x1 = rng.uniform(lo, hi, n)
    y1 = rng.uniform(lo, hi, n)
    return np.stack([x1, y1, x1 + rng.uniform(0.5, 5, n), y1 + rng.uniform(0.5, 5, n)], axis=1)


def _case_smooth_l1(rng):
    n = rng.integers(1, 4)
    B, G = _random_boxes(rng, n), _random_boxes(rng, n)
    # push every residual at least 0.05 away from the kink at |x| = xi
    r = (losses.xyxy_to_cxcywh(B, 12, 12) - losses.xyxy_to_cxcywh(G, 12, 12)).data
    if np.any(np.abs(np.abs(r) - 0.5) < 0.05):
        B = G + 0.01
    return (lambda b: losses.smooth_l1_loss(b, G, 12, 12)), [B]


def _case_giou(rng):
    n = rng.integers(1, 4)
    B, G = _random_boxes(rng, n), _random_boxes(rng, n)
    return (lambda b: losses.giou_loss(b, G)), [B]


GRADIENT_CASES = [
    ("matmul", _case_matmul, OP_TOL),
    ("masked_softmax", _case_masked_softmax, OP_TOL),
    ("layer_norm", _case_layer_norm, OP_TOL),
    ("sigmoid", _elementwise("sigmoid"), OP_TOL),
    ("silu", _elementwise("silu"), OP_TOL),
    ("exp", _elementwise("exp"), OP_TOL),
    ("log", _elementwise("log", positive=True), OP_TOL),
    ("sqrt", _elementwise("sqrt", positive=True), OP_TOL),
    ("div", _case_div, OP_TOL),
    ("conv2d", _case_conv2d, OP_TOL),
    ("avg_pool", _case_avg_pool, OP_TOL),
    ("bilinear_sample", _case_bilinear, OP_TOL),
    ("encode_image", _case_encode_image, OP_TOL),
    ("encode_phrases", _case_encode_phrases, OP_TOL),
    ("init_masks", _case_init_masks, OP_TOL),
    ("cga_layer(params)", _case_cga_layer_params, STACK_TOL),
    ("cga_stack(K0, Fv)", _case_cga_stack, STACK_TOL),
    ("offset_map", _case_offset_map, OP_TOL),
    ("barycenter_mean", _case_barycenter, OP_TOL),
    ("assemble_boxes", _case_assemble, OP_TOL),
    ("box_loss->masks", _case_mask_to_box_path, STACK_TOL),
    ("direct_box_head", _case_direct_head, OP_TOL),
    ("bce_loss", _case_bce, OP_TOL),
    ("dice_loss", _case_dice, OP_TOL),
    ("smooth_l1_loss", _case_smooth_l1, OP_TOL),
    ("giou_loss", _case_giou, OP_TOL),
]


@contextlib.contextmanager
def corrupted_gradient(op_name: str):
    """Test hook: make one primitive's backward wrong by 10% while active."""
    targets = {"sigmoid": "sigmoid", "matmul": "matmul", "layer_norm": "layer_norm",
               "masked_softmax": "masked_softmax", "conv2d": "conv2d"}
    if op_name not in targets:
        raise ValueError(f"cannot corrupt {op_name!r}; choose from {sorted(targets)}")
    original = getattr(dc, targets[op_name])

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: tuple(None if x is None else 1.1 * x for x in inner(g))
        return out

    modules = [dc, cga, bdl, encoders, losses]
    saved = [(m, getattr(m, targets[op_name], None)) for m in modules]
    try:
        for m, _ in saved:
            if hasattr(m, targets[op_name]):
                setattr(m, targets[op_name], broken)
        yield
    finally:
        for m, v in saved:
            if v is not None:
                setattr(m, targets[op_name], v)


def gradient_suite(trials: int = N_TRIALS, names=None) -> list:
    """Worst report per case over ``trials`` random shape/seed combinations."""
    reports = []
    for name, case, tol in GRADIENT_CASES:
        if names is not None and name not in names:
            continue
        worst = None
        for seed in range(trials):
            rng = np.random.default_rng(1000 + seed)
            op, inputs = case(rng)
            rep = grad_check(op, inputs, h=GRAD_H, tol=tol, name=name, seed=seed)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        reports.append(worst)
    return reports


# ---------------------------------------------------------------- brute-force oracles

def centroid_oracle(mask2d: np.ndarray):
    H, W = mask2d.shape
    sx = sy = s = 0.0
    for y in range(H):
        for x in range(W):
            v = mask2d[y, x]
            sx += x * v
            sy += y * v
            s += v
    return sx / s, sy / s


def tight_box_oracle(mask2d: np.ndarray):
    H, W = mask2d.shape
    x1, y1, x2, y2 = W, H, -1, -1
    for y in range(H):
        for x in range(W):
            if mask2d[y, x] >= 0.5:
                x1, y1 = min(x1, x), min(y1, y)
                x2, y2 = max(x2, x + 1), max(y2, y + 1)
    return (float(x1), float(y1), float(x2), float(y2))


def box_iou_cell_oracle(a, b):
    """Exact IoU of integer-corner boxes by counting unit cells."""
    inter = union = 0
    for x in range(int(min(a[0], b[0])), int(max(a[2], b[2]))):
        for y in range(int(min(a[1], b[1])), int(max(a[3], b[3]))):
            ina = a[0] <= x < a[2] and a[1] <= y < a[3]
            inb = b[0] <= x < b[2] and b[1] <= y < b[3]
            inter += ina and inb
            union += ina or inb
    return inter / union if union else 0.0


def box_iou_monte_carlo(a, b, rng, samples=20000):
    lo = np.minimum(a[:2], b[:2])
    hi = np.maximum(a[2:], b[2:])
    p = rng.uniform(lo, hi, size=(samples, 2))
    ina = (p[:, 0] >= a[0]) & (p[:, 0] < a[2]) & (p[:, 1] >= a[1]) & (p[:, 1] < a[3])
    inb = (p[:, 0] >= b[0]) & (p[:, 0] < b[2]) & (p[:, 1] >= b[1]) & (p[:, 1] < b[3])
    u = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / u if u else 0.0


def average_recall_oracle(ious):
    ious = list(ious)
    curve = []
    for i in range(101):
        t = i / 100
        curve.append(sum(1 for v in ious if v >= t) / len(ious))
    return sum((curve[i] + curve[i + 1]) / 2 * 0.01 for i in range(100))


def giou_oracle(b, g):
    def area(r):
        return (r[2] - r[0]) * (r[3] - r[1])
    ix = max(0.0, min(b[2], g[2]) - max(b[0], g[0]))
    iy = max(0.0, min(b[3], g[3]) - max(b[1], g[1]))
    inter = ix * iy
    union = area(b) + area(g) - inter
    hull = (max(b[2], g[2]) - min(b[0], g[0])) * (max(b[3], g[3]) - min(b[1], g[1]))
    return inter / union - (hull - union) / hull


@dataclass
class OracleReport:
    name: str
    instances: int
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<32s} n={self.instances:<5d} max_abs_err={self.max_abs_error:.3e} " \
               f"tol={self.tolerance:.0e} {status}"


def oracle_suite(instances: int = 1000, seed: int = 0, tol: float = 1e-9) -> list:
    rng = np.random.default_rng(seed)
    out = []

    err = 0.0
    for _ in range(instances):
        H, W = rng.integers(1, 9, size=2)
        m = rng.random((1, H, W)) * (rng.random((1, H, W)) < 0.7)
        m[0, rng.integers(H), rng.integers(W)] += 0.1
        D = bdl.barycenter_mean(m).data[0]
        err = max(err, *np.abs(D - np.array(centroid_oracle(m[0]))))
    out.append(OracleReport("barycenter_mean", instances, err, tol))

    err = 0.0
    for _ in range(instances):
        H, W = rng.integers(1, 12, size=2)
        m = (rng.random((H, W)) < rng.uniform(0.02, 0.5)).astype(float)
        m[rng.integers(H), rng.integers(W)] = 1.0
        box, found = bdl.mask_to_tight_box(m)
        err = max(err, float(np.max(np.abs(np.array(box) - tight_box_oracle(m)))), 0.0 if found else np.inf)
    out.append(OracleReport("mask_to_tight_box", instances, err, tol))

    err = 0.0
    for _ in range(instances):
        a = rng.integers(0, 10, size=4)
        b = rng.integers(0, 10, size=4)
        a = np.array([a[0], a[1], a[0] + 1 + a[2], a[1] + 1 + a[3]])
        b = np.array([b[0], b[1], b[0] + 1 + b[2], b[1] + 1 + b[3]])
        err = max(err, abs(metrics.box_iou(a, b) - box_iou_cell_oracle(a, b)))
    out.append(OracleReport("box_iou", instances, err, tol))

    err = 0.0
    for _ in range(instances):
        n = rng.integers(1, 30)
        ious = rng.random(n)
        ious[rng.random(n) < 0.2] = rng.integers(0, 101, size=1) / 100  # land on grid thresholds
        err = max(err, abs(metrics.average_recall(ious)[0] - average_recall_oracle(ious)))
    out.append(OracleReport("average_recall", instances, err, tol))

    err = 0.0
    B = _random_boxes(rng, instances)
    G = _random_boxes(rng, instances)
    for i in range(instances):
        got = float(losses.giou_loss(B[i:i + 1], G[i:i + 1]).data)
        err = max(err, abs(got - (1.0 - giou_oracle(B[i], G[i]))))
    out.append(OracleReport("giou_loss", instances, err, tol))
    return out


def monte_carlo_box_iou(instances: int = 1000, seed: int = 1) -> float:
    """Largest gap between box_iou and a point-sampling estimate on continuous boxes."""
    rng = np.random.default_rng(seed)
    B, G = _random_boxes(rng, instances), _random_boxes(rng, instances)
    return max(abs(metrics.box_iou(B[i], G[i]) - box_iou_monte_carlo(B[i], G[i], rng)) for i in range(instances))


def run_all(trials: int = N_TRIALS, instances: int = 1000):
    grads = gradient_suite(trials)
    oracles = oracle_suite(instances)
    return grads, oracles
