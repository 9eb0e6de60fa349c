"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import ops
from .engine import Graph, Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                       coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place).

    With ``coords`` (flat indices) only those entries are estimated; the
    result then has one entry per coordinate.
    """
    flat = x.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
) -> dict[str, float]:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives one :class:`Tensor` per entry of ``inputs`` (keyword
    arguments). Non-scalar outputs are reduced with a fixed random
    projection so every output entry contributes. Returns the relative
    error per input.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

    with Graph() as g:
        out = fn(**tensors)
        proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        g.backward(out, seed=proj)

    def objective() -> float:
        plain = {k: Tensor(v) for k, v in arrays.items()}
        return float((fn(**plain).data * proj).sum())

    errors = {}
    for name, arr in arrays.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        numeric = numerical_gradient(objective, arr, eps, coords)
        picked = analytic.reshape(-1) if coords is None else analytic.reshape(-1)[coords]
        errors[name] = relative_error(picked, numeric)
    return errors


# --------------------------------------------------------------------------
# the standard suite: every differentiable op plus whole network paths


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], dict[str, np.ndarray]]
    max_coords: Optional[int] = None


def _tiny_nets(rng: np.random.Generator):
    from .bridging import BridgeParams
    from .classnet import ClassNetArch, ClassNetParams
    from .segnet import SegNetArch, SegNetParams

    arch = ClassNetArch(num_classes=3, in_channels=2, input_size=(8, 8), widths=(3, 4),
                        hidden=(5,))
    cls = ClassNetParams.init(arch, rng)
    bridge = BridgeParams.init(arch.feature_shape[0], rng)
    seg = SegNetParams.init(SegNetArch.mirror(arch), rng)
    # zero biases put exact zeros (relu kinks) wherever unpooling leaves holes
    for params in (cls, bridge, seg):
        for name, t in params.tensors.items():
            if name.endswith("bias"):
                t.data[...] = 0.1 * rng.standard_normal(t.shape)
    return arch, cls, bridge, seg


def _cls_case() -> GradCase:
    from .classnet import ClassNetParams, cls_forward

    names: list[str] = []
    arch_box = []

    def make(rng):
        arch, cls, _, _ = _tiny_nets(rng)
        arch_box[:] = [arch]
        names[:] = list(cls.tensors)
        return {"x": rng.standard_normal((2, arch.in_channels, *arch.input_size)),
                **{n.replace(".", "_"): a for n, a in cls.arrays().items()}}

    def fn(x, **kw):
        params = ClassNetParams(arch_box[0], {n: kw[n.replace(".", "_")] for n in names})
        return cls_forward(x, params)[0]

    return GradCase("cls_path", fn, make, max_coords=40)


def _seg_case() -> GradCase:
    from .bridging import BridgeParams, all_class_saliencies, bridge_forward, combine_saliencies, spatial_features
    from .classnet import cls_forward
    from .segnet import SegNetParams, seg_forward

    state = {}

    def make(rng):
        arch, cls, bridge, seg = _tiny_nets(rng)
        x = rng.standard_normal((2, arch.in_channels, *arch.input_size))
        _, cache = cls_forward(x, cls)
        per_class = all_class_saliencies(cls, cache)
        sal = combine_saliencies(per_class, [0, 2])
        state.update(switches=cache.switches, channels=bridge.channels, seg_arch=seg.arch,
                     bridge_names=list(bridge.tensors), seg_names=list(seg.tensors))
        arrays = {**bridge.arrays(), **seg.arrays()}
        return {"spat": spatial_features(cache).data, "sal": sal,
                **{n.replace(".", "_"): a for n, a in arrays.items()}}

    def fn(spat, sal, **kw):
        bridge = BridgeParams(state["channels"], {n: kw[n.replace(".", "_")]
                                                  for n in state["bridge_names"]})
        seg = SegNetParams(state["seg_arch"], {n: kw[n.replace(".", "_")]
                                               for n in state["seg_names"]})
        return seg_forward(bridge_forward(spat, sal, bridge), state["switches"], seg)[1]

    return GradCase("seg_path", fn, make, max_coords=40)


def _pool_case() -> GradCase:
    def make(rng):
        # well separated values keep every window's argmax away from a tie
        x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1
        return {"x": x + 0.01 * rng.standard_normal(x.shape)}

    return GradCase("maxpool2d", lambda x: ops.maxpool2d(x, 2)[0], make)


def _unpool_case() -> GradCase:
    state = {}

    def make(rng):
        _, sw = ops.maxpool2d(Tensor(rng.standard_normal((2, 3, 6, 6))), 2)
        state["sw"] = sw
        return {"x": rng.standard_normal((2, 3, 3, 3))}

    return GradCase("unpool2d", lambda x: ops.unpool2d(x, state["sw"], 6, 6), make)


def _relu_case() -> GradCase:
    def make(rng):
        x = rng.standard_normal((3, 4, 5))
        return {"x": np.where(np.abs(x) < 0.05, 0.5, x)}   # stay off the kink
    return GradCase("relu", ops.relu, make)


def _bridge_case() -> GradCase:
    from .bridging import BridgeParams, bridge_forward

    def make(rng):
        c = 3
        b = BridgeParams.init(c, rng)
        for name, t in b.tensors.items():
            if name.endswith("bias"):
                t.data[...] = 0.1 * rng.standard_normal(t.shape)
        return {"spat": rng.standard_normal((2, c, 4, 4)), "sal": rng.standard_normal((2, c, 4, 4)),
                **{n.split(".", 1)[1].replace(".", "_"): a for n, a in b.arrays().items()}}

    def fn(spat, sal, **kw):
        c = spat.shape[1]
        return bridge_forward(spat, sal, BridgeParams(c, {f"bridge.{k.replace('_', '.')}": v
                                                         for k, v in kw.items()}))

    return GradCase("bridge_forward", fn, make)


def standard_suite() -> list[GradCase]:
    n = lambda *shape: (lambda rng: {"x": rng.standard_normal(shape)})  # noqa: E731
    labels = {}

    def sce_inputs(rng):
        labels["y"] = (rng.random((4, 3)) < 0.5).astype(float)
        return {"s": 3.0 * rng.standard_normal((4, 3))}

    def psl_inputs(rng):
        labels["m"] = (rng.random((2, 5, 5)) < 0.4).astype(float)
        return {"z": rng.standard_normal((2, 2, 5, 5))}

    return [
        GradCase("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1),
                 lambda rng: {"x": rng.standard_normal((2, 3, 6, 6)),
                              "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)}),
        GradCase("conv2d_strided", lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=0),
                 lambda rng: {"x": rng.standard_normal((2, 2, 7, 7)),
                              "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}),
        GradCase("deconv2d", lambda x, w, b: ops.deconv2d(x, w, b, stride=1, pad=1),
                 lambda rng: {"x": rng.standard_normal((2, 3, 5, 5)),
                              "w": rng.standard_normal((3, 4, 3, 3)), "b": rng.standard_normal(4)}),
        GradCase("deconv2d_strided", lambda x, w, b: ops.deconv2d(x, w, b, stride=2, pad=0),
                 lambda rng: {"x": rng.standard_normal((2, 2, 3, 3)),
                              "w": rng.standard_normal((2, 3, 3, 3)), "b": rng.standard_normal(3)}),
        _pool_case(),
        _unpool_case(),
        _relu_case(),
        GradCase("fully_connected", lambda x, w, b: ops.fully_connected(x, w, b),
                 lambda rng: {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((4, 5)),
                              "b": rng.standard_normal(4)}),
        GradCase("sigmoid", ops.sigmoid, n(3, 4)),
        GradCase("concat_channels", ops.concat_channels,
                 lambda rng: {"a": rng.standard_normal((2, 2, 3, 3)),
                              "b": rng.standard_normal((2, 3, 3, 3))}),
        GradCase("softmax_channels", ops.softmax_channels, n(2, 3, 4, 4)),
        GradCase("sigmoid_cross_entropy", lambda s: ops.sigmoid_cross_entropy(s, labels["y"]),
                 sce_inputs),
        GradCase("pixelwise_softmax_loss", lambda z: ops.pixelwise_softmax_loss(z, labels["m"]),
                 psl_inputs),
        _bridge_case(),
        _cls_case(),
        _seg_case(),
    ]


def run_case(case: GradCase, seed: int, eps: float = 1e-5) -> float:
    """Worst relative error over the case's inputs for one seed."""
    rng = np.random.default_rng(seed)
    inputs = case.make_inputs(rng)
    errors = check_gradients(case.fn, inputs, rng, eps=eps, max_coords=case.max_coords)
    return max(errors.values())
