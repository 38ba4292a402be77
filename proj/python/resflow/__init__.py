import json

from ._core import (
    ResflowError,
    accumulator_requirements,
    dequantize,
    packed_dot,
    quantize,
    window_slices,
)
from . import _core


def _run(fn, *args, **kwargs):
    code, out, _ = fn(*args, **kwargs)
    return code, json.loads(out)


def generate(net, out_dir, seed=1, frames=0):
    return _run(_core.generate, net, str(out_dir), seed, frames)


def plan(model, weights, board="kv260", n_par=0):
    return _run(_core.plan, str(model), str(weights), board, n_par)


def simulate(model, weights, board="kv260", n_par=0, frames=1, seed=1):
    return _run(_core.simulate, str(model), str(weights), board, n_par, frames, seed)


__all__ = [
    "ResflowError",
    "accumulator_requirements",
    "dequantize",
    "generate",
    "packed_dot",
    "plan",
    "quantize",
    "simulate",
    "window_slices",
]
