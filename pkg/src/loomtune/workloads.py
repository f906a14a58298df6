"""Built-in workload definitions.

Each entry builds a ComputeDAG from keyword parameters with sensible
defaults. Names and iterator conventions are chosen so that derivation
orders are stable: topological order visits outputs first and breaks ties
by ascending node name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .expr import Bin, Call, Const, IterVal, Lin, Read, Reduce, Select
from .graph import Axes, ComputeDAG, ComputeNode, compute, placeholder


def _v(name: str) -> Lin:
    return Lin.var(name)


def matmul(n: int = 512, m: int = 512, k: int = 512) -> ComputeDAG:
    a = placeholder("A", (n, k), iters=("a0", "a1"))
    b = placeholder("B", (k, m), constant=True, iters=("b0", "b1"))
    body = Reduce("sum", ("k",),
                  Bin("mul", Read("A", (_v("i"), _v("k"))), Read("B", (_v("k"), _v("j")))))
    c = compute("C", (("i", n), ("j", m)), body, reduce=(("k", k),))
    return ComputeDAG((a, b, c))


def matmul_bias_relu(n: int = 512, m: int = 512, k: int = 512) -> ComputeDAG:
    a = placeholder("A", (n, k), iters=("a0", "a1"))
    b = placeholder("B", (k, m), constant=True, iters=("b0", "b1"))
    bias = placeholder("bias", (m,), constant=True, iters=("c0",))
    mm = Reduce("sum", ("k",),
                Bin("mul", Read("A", (_v("i"), _v("k"))), Read("B", (_v("k"), _v("j")))))
    c = compute("C", (("i", n), ("j", m)), mm, reduce=(("k", k),))
    d = compute("D", (("i", n), ("j", m)),
                Bin("add", Read("C", (_v("i"), _v("j"))), Read("bias", (_v("j"),))))
    e = compute("E", (("i", n), ("j", m)),
                Bin("max", Read("D", (_v("i"), _v("j"))), Const(0.0)))
    return ComputeDAG((a, b, bias, c, d, e))


def _conv_nodes(h: int, w: int, ci: int, co: int, kernel: int, stride: int,
                pad: int, n: int) -> tuple[list[ComputeNode], str, int, int]:
    """Shared x/weight/pad/conv construction. Returns (nodes, source buffer
    for the conv read, padded h, padded w)."""
    nodes: list[ComputeNode] = [
        placeholder("x", (n, h, w, ci), iters=("x0", "x1", "x2", "x3")),
        placeholder("W", (kernel, kernel, ci, co), constant=True,
                    iters=("w0", "w1", "w2", "w3")),
    ]
    hp, wp = h + 2 * pad, w + 2 * pad
    src = "x"
    if pad > 0:
        inb = Bin("mul",
                  Bin("mul", Bin("ge", IterVal(_v("ph")), Const(float(pad))),
                      Bin("lt", IterVal(_v("ph")), Const(float(h + pad)))),
                  Bin("mul", Bin("ge", IterVal(_v("pw")), Const(float(pad))),
                      Bin("lt", IterVal(_v("pw")), Const(float(w + pad)))))
        body = Select(inb,
                      Read("x", (_v("pn"), _v("ph").shift(-pad), _v("pw").shift(-pad), _v("pc"))),
                      Const(0.0))
        nodes.append(compute("P", (("pn", n), ("ph", hp), ("pw", wp), ("pc", ci)), body))
        src = "P"
    return nodes, src, hp, wp


def conv2d(h: int = 14, w: int = 14, ci: int = 64, co: int = 64,
           kernel: int = 3, stride: int = 1, pad: int = 1, n: int = 1) -> ComputeDAG:
    nodes, src, hp, wp = _conv_nodes(h, w, ci, co, kernel, stride, pad, n)
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    body = Reduce("sum", ("rh", "rw", "rc"),
                  Bin("mul",
                      Read(src, (_v("cn"),
                                 _v("ch").scale(stride) + _v("rh"),
                                 _v("cw").scale(stride) + _v("rw"),
                                 _v("rc"))),
                      Read("W", (_v("rh"), _v("rw"), _v("rc"), _v("cc")))))
    conv = compute("C", (("cn", n), ("ch", ho), ("cw", wo), ("cc", co)), body,
                   reduce=(("rh", kernel), ("rw", kernel), ("rc", ci)))
    nodes.append(conv)
    return ComputeDAG(tuple(nodes))


def conv2d_relu(h: int = 14, w: int = 14, ci: int = 64, co: int = 64,
                kernel: int = 3, stride: int = 1, pad: int = 1, n: int = 1) -> ComputeDAG:
    base = conv2d(h, w, ci, co, kernel, stride, pad, n)
    conv = base.node("C")
    relu = compute("R", conv.space,
                   Bin("max", Read("C", tuple(_v(a) for a, _ in conv.space)), Const(0.0)))
    return ComputeDAG(base.nodes + (relu,))


def grouped_conv2d(h: int = 14, w: int = 14, ci: int = 64, co: int = 64,
                   kernel: int = 3, stride: int = 1, pad: int = 1,
                   groups: int = 4, n: int = 1) -> ComputeDAG:
    if ci % groups or co % groups:
        raise ValueError("channel counts must divide by groups")
    cig, cog = ci // groups, co // groups
    nodes: list[ComputeNode] = [
        placeholder("x", (n, h, w, groups, cig), iters=("x0", "x1", "x2", "x3", "x4")),
        placeholder("W", (groups, kernel, kernel, cig, cog), constant=True,
                    iters=("w0", "w1", "w2", "w3", "w4")),
    ]
    hp, wp = h + 2 * pad, w + 2 * pad
    src = "x"
    if pad > 0:
        inb = Bin("mul",
                  Bin("mul", Bin("ge", IterVal(_v("ph")), Const(float(pad))),
                      Bin("lt", IterVal(_v("ph")), Const(float(h + pad)))),
                  Bin("mul", Bin("ge", IterVal(_v("pw")), Const(float(pad))),
                      Bin("lt", IterVal(_v("pw")), Const(float(w + pad)))))
        body = Select(inb,
                      Read("x", (_v("pn"), _v("ph").shift(-pad), _v("pw").shift(-pad),
                                 _v("pg"), _v("pc"))),
                      Const(0.0))
        nodes.append(compute(
            "P", (("pn", n), ("ph", hp), ("pw", wp), ("pg", groups), ("pc", cig)), body))
        src = "P"
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    body = Reduce("sum", ("rh", "rw", "rc"),
                  Bin("mul",
                      Read(src, (_v("cn"),
                                 _v("ch").scale(stride) + _v("rh"),
                                 _v("cw").scale(stride) + _v("rw"),
                                 _v("cg"), _v("rc"))),
                      Read("W", (_v("cg"), _v("rh"), _v("rw"), _v("rc"), _v("cc")))))
    conv = compute("C", (("cn", n), ("ch", ho), ("cw", wo), ("cg", groups), ("cc", cog)),
                   body, reduce=(("rh", kernel), ("rw", kernel), ("rc", cig)))
    nodes.append(conv)
    return ComputeDAG(tuple(nodes))


def norm2(n: int = 32, m: int = 32) -> ComputeDAG:
    x = placeholder("x", (n, m), iters=("x0", "x1"))
    sq = Reduce("sum", ("i", "j"),
                Bin("mul", Read("x", (_v("i"), _v("j"))), Read("x", (_v("i"), _v("j")))))
    r = compute("r", (("u", 1),), sq, reduce=(("i", n), ("j", m)))
    out = compute("out", (("u", 1),), Call("sqrt", Read("r", (_v("u"),))))
    return ComputeDAG((x, r, out))


def elemwise_chain(n: int = 4096) -> ComputeDAG:
    x = placeholder("x", (n,), iters=("x0",))
    a = compute("a", (("i", n),), Bin("mul", Read("x", (_v("i"),)), Const(2.0)))
    b = compute("b", (("i", n),), Bin("add", Read("a", (_v("i"),)), Const(1.0)))
    c = compute("c", (("i", n),), Bin("max", Read("b", (_v("i"),)), Const(0.0)))
    return ComputeDAG((x, a, b, c))


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    builder: Callable[..., ComputeDAG]
    defaults: dict


REGISTRY: dict[str, WorkloadSpec] = {
    "matmul": WorkloadSpec("matmul", matmul, {"n": 512, "m": 512, "k": 512}),
    "matmul_bias_relu": WorkloadSpec(
        "matmul_bias_relu", matmul_bias_relu, {"n": 512, "m": 512, "k": 512}),
    "conv2d": WorkloadSpec(
        "conv2d", conv2d,
        {"h": 14, "w": 14, "ci": 64, "co": 64, "kernel": 3, "stride": 1, "pad": 1, "n": 1}),
    "conv2d_relu": WorkloadSpec(
        "conv2d_relu", conv2d_relu,
        {"h": 14, "w": 14, "ci": 64, "co": 64, "kernel": 3, "stride": 1, "pad": 1, "n": 1}),
    "grouped_conv2d": WorkloadSpec(
        "grouped_conv2d", grouped_conv2d,
        {"h": 14, "w": 14, "ci": 64, "co": 64, "kernel": 3, "stride": 1, "pad": 1,
         "groups": 4, "n": 1}),
    "norm2": WorkloadSpec("norm2", norm2, {"n": 32, "m": 32}),
    "elemwise_chain": WorkloadSpec("elemwise_chain", elemwise_chain, {"n": 4096}),
}


def build(name: str, **params) -> ComputeDAG:
    if name not in REGISTRY:
        raise KeyError(f"unknown workload {name!r}; known: {', '.join(sorted(REGISTRY))}")
    spec = REGISTRY[name]
    merged = dict(spec.defaults)
    for key, val in params.items():
        if key not in merged:
            raise TypeError(f"{name} has no parameter {key!r}")
        merged[key] = int(val)
    return spec.builder(**merged)
