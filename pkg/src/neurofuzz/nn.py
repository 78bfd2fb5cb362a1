"""Sequential neural-network models: forward evaluation with full activation
recording, and reverse-mode differentiation of a scalar objective with respect
to the input.

Supported layer kinds are the LeNet-family building blocks: dense, conv2d
(valid padding, channels-last), relu, maxpool2d (non-overlapping), flatten,
softmax. The objective combines class-confidence terms with a weighted sum of
intermediate neuron outputs, so the backward pass supports gradient injection
at arbitrary layer outputs.

Conventions (pinned, covered by tests):
  - argmax and top-k tie-breaks go to the lowest class index;
  - relu passes no gradient at exactly-zero pre-activations;
  - maxpool routes gradient to the first maximal element in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten", "softmax")


# ---------------------------------------------------------------------------
# model structure


@dataclass(frozen=True)
class Layer:
    """One layer of a sequential model.

    weights/bias are present for dense and conv2d only. hyper carries
    kind-specific settings: conv2d {"stride": int, "padding": "valid"},
    maxpool2d {"pool": (ph, pw)}.
    """

    kind: str
    weights: Tensor | None = None
    bias: Tensor | None = None
    hyper: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            if self.weights is None or self.bias is None:
                raise ContractViolation("dense layer needs weights and bias")
            if len(self.weights.shape) != 2:
                raise ContractViolation("dense weights must be [in, out]")
            if self.bias.shape != (self.weights.shape[1],):
                raise ContractViolation("dense bias shape must be [out]")
        elif self.kind == "conv2d":
            if self.weights is None or self.bias is None:
                raise ContractViolation("conv2d layer needs weights and bias")
            if len(self.weights.shape) != 4:
                raise ContractViolation("conv2d weights must be [kh, kw, in_ch, out_ch]")
            if self.bias.shape != (self.weights.shape[3],):
                raise ContractViolation("conv2d bias shape must be [out_ch]")
            if self.hyper.get("padding", "valid") != "valid":
                raise ContractViolation("only valid padding is supported")
            if self.stride < 1:
                raise ContractViolation("conv2d stride must be >= 1")
        else:
            if self.weights is not None or self.bias is not None:
                raise ContractViolation(f"{self.kind} layer takes no parameters")
            if self.kind == "maxpool2d":
                ph, pw = self.pool
                if ph < 1 or pw < 1:
                    raise ContractViolation("pool size must be >= 1")

    @property
    def stride(self) -> int:
        return int(self.hyper.get("stride", 1))

    @property
    def pool(self) -> tuple[int, int]:
        p = self.hyper.get("pool", 2)
        if isinstance(p, int):
            return (p, p)
        return (int(p[0]), int(p[1]))


def dense(weights: Tensor, bias: Tensor) -> Layer:
    return Layer("dense", weights, bias)


def conv2d(weights: Tensor, bias: Tensor, stride: int = 1) -> Layer:
    return Layer("conv2d", weights, bias, {"stride": stride, "padding": "valid"})


def relu() -> Layer:
    return Layer("relu")


def maxpool2d(pool: int | tuple[int, int] = 2) -> Layer:
    if isinstance(pool, int):
        pool = (pool, pool)
    return Layer("maxpool2d", hyper={"pool": tuple(pool)})


def flatten() -> Layer:
    return Layer("flatten")


def softmax() -> Layer:
    return Layer("softmax")


@dataclass(frozen=True)
class Model:
    """Ordered layers with chain-compatible shapes ending in a softmax head."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = infer_output_shapes(self.layers, self.input_shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ContractViolation("final layer must be softmax")
        if shapes[-1] != (self.num_classes,):
            raise ContractViolation(
                f"model output shape {shapes[-1]} != [num_classes]={self.num_classes}"
            )
        precisions = {
            t.precision
            for layer in self.layers
            for t in (layer.weights, layer.bias)
            if t is not None
        }
        if len(precisions) > 1:
            raise ContractViolation("mixed parameter precisions in one model")
        object.__setattr__(self, "_output_shapes", shapes)
        object.__setattr__(self, "_precision", precisions.pop() if precisions else "single")

    @property
    def output_shapes(self) -> tuple[tuple[int, ...], ...]:
        return self._output_shapes

    @property
    def precision(self) -> str:
        return self._precision

    def astype(self, precision: str) -> "Model":
        layers = tuple(
            Layer(
                l.kind,
                l.weights.astype(precision) if l.weights is not None else None,
                l.bias.astype(precision) if l.bias is not None else None,
                dict(l.hyper),
            )
            for l in self.layers
        )
        return Model(layers, self.input_shape, self.num_classes)


def infer_output_shapes(
    layers: tuple[Layer, ...], input_shape: tuple[int, ...]
) -> tuple[tuple[int, ...], ...]:
    """Walk the layer chain, checking compatibility; raises with layer index."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        try:
            shape = _layer_output_shape(layer, shape)
        except ContractViolation as exc:
            raise ContractViolation(f"layer {i} ({layer.kind}): {exc}") from None
        if layer.kind == "softmax" and i != len(layers) - 1:
            raise ContractViolation(f"layer {i}: softmax must be the final layer")
        shapes.append(shape)
    return tuple(shapes)


def _layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.weights.shape[0]:
            raise ContractViolation(
                f"expects rank-1 input of {layer.weights.shape[0]}, got {shape}"
            )
        return (layer.weights.shape[1],)
    if layer.kind == "conv2d":
        if len(shape) != 3:
            raise ContractViolation(f"expects [h, w, c] input, got {shape}")
        kh, kw, in_ch, out_ch = layer.weights.shape
        h, w, c = shape
        s = layer.stride
        if c != in_ch:
            raise ContractViolation(f"input channels {c} != kernel channels {in_ch}")
        if kh > h or kw > w:
            raise ContractViolation(f"kernel {kh}x{kw} larger than input {h}x{w}")
        return ((h - kh) // s + 1, (w - kw) // s + 1, out_ch)
    if layer.kind == "maxpool2d":
        if len(shape) != 3:
            raise ContractViolation(f"expects [h, w, c] input, got {shape}")
        ph, pw = layer.pool
        h, w, c = shape
        if h // ph < 1 or w // pw < 1:
            raise ContractViolation(f"pool {ph}x{pw} larger than input {h}x{w}")
        return (h // ph, w // pw, c)
    if layer.kind == "flatten":
        n = 1
        for d in shape:
            n *= d
        return (n,)
    # relu and softmax preserve shape; softmax additionally requires rank 1
    if layer.kind == "softmax" and len(shape) != 1:
        raise ContractViolation(f"expects rank-1 input, got {shape}")
    return shape


# ---------------------------------------------------------------------------
# forward


@dataclass(frozen=True)
class ActivationTrace:
    """Every layer's output for one input, last entry being the confidences."""

    input: Tensor
    outputs: tuple[Tensor, ...]

    @property
    def confidences(self) -> Tensor:
        return self.outputs[-1]

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.confidences.array))


def predict(model: Model, x: Tensor) -> ActivationTrace:
    """Forward pass recording all layer outputs; argmax of the final vector is
    the predicted label (lowest index wins ties)."""
    _check_input(model, x)
    acts = _forward(model, x.array[None, ...])
    return ActivationTrace(x, tuple(Tensor.wrap(a[0]) for a in acts))


def _check_input(model: Model, x: Tensor):
    if x.shape != model.input_shape:
        raise ContractViolation(f"input shape {x.shape} != model {model.input_shape}")
    if x.precision != model.precision:
        raise ContractViolation(
            f"input precision {x.precision} != model {model.precision}"
        )


def _forward(model: Model, xb: np.ndarray) -> list[np.ndarray]:
    """Batched forward; returns one output array [n, ...] per layer."""
    acts = []
    a = xb
    for layer in model.layers:
        a = _layer_forward(layer, a)
        acts.append(a)
    return acts


def _layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        return x @ layer.weights.array + layer.bias.array
    if kind == "conv2d":
        cols, oh, ow = _im2col(x, layer)
        kh, kw, in_ch, out_ch = layer.weights.shape
        wmat = layer.weights.array.reshape(kh * kw * in_ch, out_ch)
        y = cols.reshape(-1, cols.shape[-1]) @ wmat + layer.bias.array
        return y.reshape(x.shape[0], oh, ow, out_ch)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "maxpool2d":
        return _pool_windows(x, layer.pool).max(axis=3)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    raise ContractViolation(f"unknown layer kind {kind!r}")


def _im2col(x: np.ndarray, layer: Layer) -> tuple[np.ndarray, int, int]:
    kh, kw, _, _ = layer.weights.shape
    s = layer.stride
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]  # [n, oh, ow, c, kh, kw]
    n, oh, ow = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, -1)
    return np.ascontiguousarray(cols), oh, ow


def _pool_windows(x: np.ndarray, pool: tuple[int, int]) -> np.ndarray:
    """Reshape [n, h, w, c] into [n, oh, ow, ph*pw, c] windows (row-major)."""
    ph, pw = pool
    n, h, w, c = x.shape
    oh, ow = h // ph, w // pw
    xc = x[:, : oh * ph, : ow * pw, :]
    return xc.reshape(n, oh, ph, ow, pw, c).transpose(0, 1, 3, 2, 4, 5).reshape(
        n, oh, ow, ph * pw, c
    )


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class ObjectiveSpec:
    """Joint objective: sum of top-k other-class terms minus the original
    class term, plus lam times the sum of target neuron outputs.

    Label terms use post-softmax confidences by default; use_logits switches
    them to the pre-softmax logits.
    """

    original_label: int
    topk_labels: tuple[int, ...]
    target_neurons: tuple = ()
    lam: float = 1.0
    use_logits: bool = False

    def __post_init__(self):
        object.__setattr__(self, "topk_labels", tuple(self.topk_labels))
        object.__setattr__(self, "target_neurons", tuple(self.target_neurons))
        if self.original_label in self.topk_labels:
            raise ContractViolation("original label cannot appear in topk_labels")
        if len(set(self.topk_labels)) != len(self.topk_labels):
            raise ContractViolation("topk_labels must be distinct")


def top_k_other_labels(trace: ActivationTrace, k: int) -> list[int]:
    """The k labels with highest confidence excluding the predicted one,
    descending; ties broken toward the lower class index."""
    conf = trace.confidences.array
    n = conf.shape[0]
    if not 1 <= k < n:
        raise ContractViolation(f"k={k} out of range [1, {n - 1}]")
    predicted = trace.predicted_label
    order = sorted((i for i in range(n) if i != predicted), key=lambda i: (-conf[i], i))
    return order[:k]


def objective_value(model: Model, x: Tensor, spec: ObjectiveSpec) -> float:
    return objective_from_trace(model, predict(model, x), spec)


def objective_from_trace(model: Model, trace: ActivationTrace, spec: ObjectiveSpec) -> float:
    """Objective evaluated from an existing trace of the same model."""
    from .coverage import neuron_value

    _check_labels(model, spec)
    label_src = trace.outputs[-2] if spec.use_logits else trace.confidences
    vals = label_src.array.astype(np.float64)
    total = float(vals[list(spec.topk_labels)].sum() - vals[spec.original_label])
    for nid in spec.target_neurons:
        total += spec.lam * neuron_value(model, trace, nid)
    return total


def _check_labels(model: Model, spec: ObjectiveSpec):
    labels = (spec.original_label, *spec.topk_labels)
    if any(not 0 <= c < model.num_classes for c in labels):
        raise ContractViolation(f"class index out of range in {labels}")


def input_gradient(model: Model, x: Tensor, spec: ObjectiveSpec) -> Tensor:
    """Gradient of the objective with respect to every input element."""
    from .coverage import activation_layer_index, conv_map_size, check_neuron

    _check_input(model, x)
    _check_labels(model, spec)
    xb = x.array[None, ...]
    acts = _forward(model, xb)

    inject: dict[int, np.ndarray] = {}

    def add(layer_index: int, grad: np.ndarray):
        if layer_index in inject:
            inject[layer_index] = inject[layer_index] + grad
        else:
            inject[layer_index] = grad

    label_layer = len(model.layers) - (2 if spec.use_logits else 1)
    v = np.zeros_like(acts[label_layer])
    for c in spec.topk_labels:
        v[0, c] += 1.0
    v[0, spec.original_label] -= 1.0
    add(label_layer, v)

    for nid in spec.target_neurons:
        check_neuron(model, nid)
        li = activation_layer_index(model, nid.layer_index)
        g = np.zeros_like(acts[li])
        if len(g.shape) == 4:  # conv feature map: neuron value is the channel mean
            g[0, :, :, nid.unit_index] = spec.lam / conv_map_size(model, nid.layer_index)
        else:
            g[0, nid.unit_index] = spec.lam
        add(li, g)

    dx = _backward_input(model, xb, acts, inject)
    return Tensor.wrap(dx[0])


# ---------------------------------------------------------------------------
# backward


def _backward_input(
    model: Model, xb: np.ndarray, acts: list[np.ndarray], inject: dict[int, np.ndarray]
) -> np.ndarray:
    g = None
    for i in range(len(model.layers) - 1, -1, -1):
        extra = inject.get(i)
        if extra is not None:
            g = extra.copy() if g is None else g + extra
        if g is None:
            continue
        x_in = acts[i - 1] if i > 0 else xb
        g, _ = _layer_backward(model.layers[i], x_in, acts[i], g, need_params=False)
    return np.zeros_like(xb) if g is None else g.astype(xb.dtype, copy=False)


def _backward_params(
    model: Model, xb: np.ndarray, acts: list[np.ndarray], dlogits: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Parameter gradients given dL/dlogits (gradient at the input of the
    final softmax). Used by the trainer; skips the input gradient."""
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.layers)
    g = dlogits
    for i in range(len(model.layers) - 2, -1, -1):
        x_in = acts[i - 1] if i > 0 else xb
        need_input = i > 0
        g, pg = _layer_backward(
            model.layers[i], x_in, acts[i], g, need_params=True, need_input=need_input
        )
        grads[i] = pg
    return grads


def _layer_backward(
    layer: Layer,
    x: np.ndarray,
    out: np.ndarray,
    g: np.ndarray,
    *,
    need_params: bool,
    need_input: bool = True,
):
    kind = layer.kind
    if kind == "dense":
        dx = g @ layer.weights.array.T if need_input else None
        pg = None
        if need_params:
            pg = (x.T @ g, g.sum(axis=0))
        return dx, pg
    if kind == "conv2d":
        return _conv2d_backward(layer, x, g, need_params, need_input)
    if kind == "relu":
        return g * (x > 0), None
    if kind == "maxpool2d":
        return _maxpool_backward(layer, x, g), None
    if kind == "flatten":
        return g.reshape(x.shape), None
    if kind == "softmax":
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot), None
    raise ContractViolation(f"unknown layer kind {kind!r}")


def _conv2d_backward(layer, x, g, need_params, need_input):
    kh, kw, in_ch, out_ch = layer.weights.shape
    s = layer.stride
    n, oh, ow, _ = g.shape
    gmat = g.reshape(-1, out_ch)
    pg = None
    if need_params:
        cols, _, _ = _im2col(x, layer)
        dw = cols.reshape(-1, kh * kw * in_ch).T @ gmat
        pg = (dw.reshape(kh, kw, in_ch, out_ch), gmat.sum(axis=0))
    dx = None
    if need_input:
        wmat = layer.weights.array.reshape(kh * kw * in_ch, out_ch)
        dcols = (gmat @ wmat.T).reshape(n, oh, ow, kh, kw, in_ch)
        dx = np.zeros_like(x)
        for ki in range(kh):
            for kj in range(kw):
                dx[:, ki : ki + s * oh : s, kj : kj + s * ow : s, :] += dcols[
                    :, :, :, ki, kj, :
                ]
    return dx, pg


def _maxpool_backward(layer, x, g):
    ph, pw = layer.pool
    n, h, w, c = x.shape
    oh, ow = h // ph, w // pw
    win = _pool_windows(x, (ph, pw))
    # first maximal element in row-major window order gets all the gradient
    idx = win.argmax(axis=3)
    mask = idx[:, :, :, None, :] == np.arange(ph * pw)[None, None, None, :, None]
    dwin = g[:, :, :, None, :] * mask
    dx = np.zeros_like(x)
    dx[:, : oh * ph, : ow * pw, :] = (
        dwin.reshape(n, oh, ow, ph, pw, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh * ph, ow * pw, c)
    )
    return dx
