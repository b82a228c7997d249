"""Finite-difference verification suites shared by the CLI and the tests.

Each entry builds a scalar graph exercising one operation (or one full loss
graph) and compares tape gradients against central differences in float64.
Readouts are weighted sums with random fixed weights so no output squaring
masks small gradients near zero.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import losses as ls
from . import model as am


def _readout(expr: dc.DiffNode, w: dc.DiffNode) -> dc.DiffNode:
    return dc.mul(expr, w).sum()


def _op_cases(rng: np.random.Generator) -> dict:
    """name -> (inputs, build). Inputs are float64; build is pure."""
    x = rng.standard_normal((4, 3)) * 0.8
    y = rng.standard_normal((4, 3)) * 0.8 + 2.5  # safe divisor
    m = rng.standard_normal((3, 4)) * 0.8
    pos = np.abs(rng.standard_normal((4, 3))) + 0.5
    vec = rng.standard_normal(7)
    col = np.abs(rng.standard_normal((4, 1))) + 0.5
    row = rng.standard_normal(3)
    kern = rng.standard_normal((3, 3, 2)) * 0.5
    w43 = rng.standard_normal((4, 3))
    w44 = rng.standard_normal((4, 4))
    w34 = rng.standard_normal((3, 4))
    w46 = rng.standard_normal((4, 6))
    w42 = rng.standard_normal((4, 2))
    w41 = rng.standard_normal((4, 1))
    w4 = rng.standard_normal(4)
    w3 = rng.standard_normal(3)

    cases = {
        "matmul": ({"x": x, "m": m, "w": w44}, lambda t, l: _readout(dc.matmul(l["x"], l["m"]), l["w"])),
        "transpose": ({"x": x, "w": w34}, lambda t, l: _readout(dc.transpose(l["x"]), l["w"])),
        "reshape": ({"x": x, "w": w43}, lambda t, l: _readout(dc.reshape(dc.reshape(l["x"], (12,)), (4, 3)), l["w"])),
        "concat_cols": ({"x": x, "y": y, "w": w46}, lambda t, l: _readout(dc.concat_cols(l["x"], l["y"]), l["w"])),
        "take_column": ({"x": x, "w": w4}, lambda t, l: _readout(dc.take_column(l["x"], 1), l["w"])),
        "take": ({"x": vec}, lambda t, l: dc.take(l["x"], 2)),
        "stack": (
            {"x": x, "w": w3},
            lambda t, l: _readout(dc.stack([dc.take_column(l["x"], j).mean() for j in range(3)]), l["w"]),
        ),
        "add": ({"x": x, "y": y, "w": w43}, lambda t, l: _readout(dc.add(l["x"], l["y"]), l["w"])),
        "sub": ({"x": x, "y": y, "w": w43}, lambda t, l: _readout(dc.sub(l["x"], l["y"]), l["w"])),
        "mul": ({"x": x, "y": y, "w": w43}, lambda t, l: _readout(dc.mul(l["x"], l["y"]), l["w"])),
        "div": ({"x": x, "y": y, "w": w43}, lambda t, l: _readout(dc.div(l["x"], l["y"]), l["w"])),
        "sigmoid": ({"x": x, "w": w43}, lambda t, l: _readout(dc.sigmoid(l["x"]), l["w"])),
        "relu": ({"x": x, "w": w43}, lambda t, l: _readout(dc.relu(l["x"]), l["w"])),
        "gelu": ({"x": x, "w": w43}, lambda t, l: _readout(dc.gelu(l["x"]), l["w"])),
        "exp": ({"x": x, "w": w43}, lambda t, l: _readout(dc.exp(l["x"]), l["w"])),
        "log": ({"x": pos, "w": w43}, lambda t, l: _readout(dc.log(l["x"]), l["w"])),
        "sqrt": ({"x": pos, "w": w43}, lambda t, l: _readout(dc.sqrt(l["x"]), l["w"])),
        "square": ({"x": x, "w": w43}, lambda t, l: _readout(dc.square(l["x"]), l["w"])),
        "pow_const": ({"x": pos, "w": w43}, lambda t, l: _readout(dc.pow_const(l["x"], 2.5), l["w"])),
        "clip": ({"x": x, "w": w43}, lambda t, l: _readout(dc.clip(l["x"], -0.9, 0.9), l["w"])),
        "softmax": ({"x": x, "w": w43}, lambda t, l: _readout(dc.softmax(l["x"], axis=1), l["w"])),
        "sum_all": ({"x": x}, lambda t, l: dc.sum_all(l["x"])),
        "mean_all": ({"x": x}, lambda t, l: dc.mean_all(l["x"])),
        "sum_axis": ({"x": x, "w": w41}, lambda t, l: _readout(dc.sum_axis(l["x"], axis=1), l["w"])),
        "add_rowvec": ({"x": x, "v": row, "w": w43}, lambda t, l: _readout(dc.add_rowvec(l["x"], l["v"]), l["w"])),
        "div_colvec": ({"x": x, "v": col, "w": w43}, lambda t, l: _readout(dc.div_colvec(l["x"], l["v"]), l["w"])),
        "conv1d": ({"x": x, "k": kern, "w": w42}, lambda t, l: _readout(dc.conv1d(l["x"], l["k"], pad=1), l["w"])),
        "topk_mean": ({"x": vec}, lambda t, l: dc.topk_mean(l["x"], 3)),
    }
    return cases


def op_gradchecks(seed: int) -> dict[str, float]:
    """Worst relative error per operation for one seed."""
    rng = np.random.default_rng(seed)
    return {
        name: dc.gradcheck(build, inputs).worst
        for name, (inputs, build) in _op_cases(rng).items()
    }


def _random_params(seed: int, d: int, scale: float = 0.4) -> am.ModelParams:
    cfg = am.ModelConfig(d=d, classes=["normal", "bang", "shatter"])
    params = am.init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for name in params.names():
        params.tensors[name] = (
            rng.standard_normal(params.tensors[name].shape) * scale
        ).astype(np.float32)
    return params


def loss_gradchecks(seed: int, d: int = 8, n: int = 5) -> dict[str, float]:
    """End-to-end gradient checks through the complete loss graphs."""
    params = _random_params(seed, d)
    config = params.config
    rng = np.random.default_rng(seed + 2)
    base = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    xv = rng.standard_normal((n, d)) * 0.5
    xa = rng.standard_normal((n, d)) * 0.5
    x_t = rng.standard_normal((n, d)) * 0.5
    label = [0, 1, 0]
    lcfg = ls.LossConfig()

    def build_teacher(tape, lv):
        out = am.teacher_forward(tape, lv, config, lv["__xv"], lv["__xa"])
        return ls.task_loss(out, label, lcfg)["total"]

    def build_distill(tape, lv):
        out = am.student_forward(tape, lv, config, lv["__xv"])
        return ls.distill_loss(out, lv["__xt"], label, lcfg)["total"]

    teacher = dc.gradcheck(build_teacher, {**base, "__xv": xv, "__xa": xa}).worst
    distill = dc.gradcheck(build_distill, {**base, "__xv": xv, "__xt": x_t}).worst
    return {"teacher_task_loss": teacher, "student_distill_loss": distill}
