"""Neuron identity, campaign-wide coverage tracking, and the four
neuron-selection strategies that steer the fuzzer.

A neuron is a dense unit or a conv2d output channel; other layer kinds do not
contribute neurons. A neuron's observed value is taken after the activation
that directly follows its layer (relu, or softmax for the final dense); a conv
channel's value is the mean of its post-activation feature map. Within each
layer the observed values are min-max scaled to [0, 1] and a neuron counts as
activated when its scaled value exceeds the tracker's threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

if TYPE_CHECKING:
    from .nn import ActivationTrace, Model

DEFAULT_ACTIVATION_THRESHOLD = 0.25

STRATEGY_NAMES = {
    1: "most frequently activated first",
    2: "least frequently activated first",
    3: "largest incoming weight magnitude first",
    4: "closest to the activation threshold first",
}


@dataclass(frozen=True, order=True)
class NeuronId:
    """A dense unit or conv output channel, addressed by layer position."""

    layer_index: int
    unit_index: int


def neuron_layers(model: Model) -> list[tuple[int, int]]:
    """(layer_index, unit count) for every layer that contributes neurons."""
    out = []
    for i, layer in enumerate(model.layers):
        if layer.kind == "dense":
            out.append((i, layer.weights.shape[1]))
        elif layer.kind == "conv2d":
            out.append((i, layer.weights.shape[3]))
    return out


def all_neurons(model: Model) -> tuple[NeuronId, ...]:
    return tuple(
        NeuronId(li, u) for li, units in neuron_layers(model) for u in range(units)
    )


def check_neuron(model: Model, nid: NeuronId):
    units = dict(neuron_layers(model)).get(nid.layer_index)
    if units is None or not 0 <= nid.unit_index < units:
        raise ContractViolation(f"{nid} is not a neuron of this model")


def activation_layer_index(model: Model, layer_index: int) -> int:
    """Index of the layer whose output carries the neuron's observed value:
    the relu/softmax directly after it when present, else the layer itself."""
    nxt = layer_index + 1
    if nxt < len(model.layers) and model.layers[nxt].kind in ("relu", "softmax"):
        return nxt
    return layer_index


def conv_map_size(model: Model, layer_index: int) -> int:
    h, w, _ = model.output_shapes[layer_index]
    return h * w


def neuron_value(model: Model, trace: ActivationTrace, nid: NeuronId) -> float:
    check_neuron(model, nid)
    out = trace.outputs[activation_layer_index(model, nid.layer_index)].array
    if out.ndim == 3:
        return float(out[:, :, nid.unit_index].mean(dtype=np.float64))
    return float(out[nid.unit_index])


def neuron_outputs(model: Model, trace: ActivationTrace) -> dict[NeuronId, float]:
    """Observed value of every neuron for one trace."""
    _check_trace(model, trace)
    values = {}
    for li, units in neuron_layers(model):
        out = trace.outputs[activation_layer_index(model, li)].array
        if out.ndim == 3:
            vals = out.mean(axis=(0, 1), dtype=np.float64)
        else:
            vals = out
        for u in range(units):
            values[NeuronId(li, u)] = float(vals[u])
    return values


def scale_layer(outputs: Sequence[float]) -> list[float]:
    """Min-max scale one layer's neuron values to [0, 1]; a layer whose values
    are all equal scales to zeros (it cannot self-activate)."""
    if len(outputs) == 0:
        raise ContractViolation("scale_layer needs a non-empty layer")
    arr = np.asarray(outputs, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return [0.0] * len(outputs)
    return list((arr - lo) / (hi - lo))


def _check_trace(model: Model, trace: ActivationTrace):
    if len(trace.outputs) != len(model.layers) or any(
        t.shape != s for t, s in zip(trace.outputs, model.output_shapes)
    ):
        raise ContractViolation("trace does not match this model")


def _scaled_by_neuron(model: Model, trace: ActivationTrace) -> dict[NeuronId, float]:
    values = neuron_outputs(model, trace)
    scaled = {}
    for li, units in neuron_layers(model):
        ids = [NeuronId(li, u) for u in range(units)]
        for nid, s in zip(ids, scale_layer([values[n] for n in ids])):
            scaled[nid] = s
    return scaled


def activated_neurons(
    model: Model, trace: ActivationTrace, threshold: float
) -> frozenset[NeuronId]:
    """Neurons whose scaled value exceeds the threshold for this one trace."""
    scaled = _scaled_by_neuron(model, trace)
    return frozenset(n for n, s in scaled.items() if s > threshold)


class CoverageTracker:
    """Mutable per-campaign record of which neurons were ever activated.

    covered flags are monotone; activation_count counts activating traces;
    last_scaled_output remembers each neuron's scaled value from the most
    recent update. Not thread-safe: concurrent updates must be serialized by
    the caller.
    """

    def __init__(
        self, model: Model, activation_threshold: float = DEFAULT_ACTIVATION_THRESHOLD
    ):
        if not 0 < activation_threshold < 1:
            raise ContractViolation("activation_threshold must be in (0, 1)")
        self._signature = tuple(neuron_layers(model))
        self._ids = all_neurons(model)
        if not self._ids:
            raise ContractViolation("model has no dense or conv2d layers")
        self._index = {nid: i for i, nid in enumerate(self._ids)}
        self._covered = np.zeros(len(self._ids), dtype=bool)
        self._count = np.zeros(len(self._ids), dtype=np.int64)
        self._last_scaled = np.zeros(len(self._ids), dtype=np.float64)
        self.activation_threshold = float(activation_threshold)

    @property
    def total_neurons(self) -> int:
        return len(self._ids)

    @property
    def neuron_ids(self) -> tuple[NeuronId, ...]:
        return self._ids

    def covered(self, nid: NeuronId) -> bool:
        return bool(self._covered[self._index[nid]])

    def activation_count(self, nid: NeuronId) -> int:
        return int(self._count[self._index[nid]])

    def last_scaled_output(self, nid: NeuronId) -> float:
        return float(self._last_scaled[self._index[nid]])

    def covered_neurons(self) -> frozenset[NeuronId]:
        return frozenset(nid for nid, c in zip(self._ids, self._covered) if c)

    def covered_count(self) -> int:
        return int(self._covered.sum())


def update(tracker: CoverageTracker, model: Model, trace: ActivationTrace) -> int:
    """Fold one trace into the tracker; returns how many neurons flipped from
    uncovered to covered."""
    if tuple(neuron_layers(model)) != tracker._signature:
        raise ContractViolation("tracker was built for a different model")
    scaled = _scaled_by_neuron(model, trace)
    before = tracker.covered_count()
    for nid, s in scaled.items():
        i = tracker._index[nid]
        tracker._last_scaled[i] = s
        if s > tracker.activation_threshold:
            tracker._covered[i] = True
            tracker._count[i] += 1
    return tracker.covered_count() - before


def coverage_rate(tracker: CoverageTracker) -> float:
    return tracker.covered_count() / tracker.total_neurons


def _strategy_key(tracker: CoverageTracker, model: Model, strategy: int):
    """Sort key over candidate neurons; lower sorts first. Every strategy
    falls back to (layer_index, unit_index) so the order is total."""
    if strategy == 1:
        return lambda n: (-tracker.activation_count(n), n.layer_index, n.unit_index)
    if strategy == 2:
        return lambda n: (tracker.activation_count(n), n.layer_index, n.unit_index)
    if strategy == 3:
        scores = _weight_scores(model)
        return lambda n: (-scores[n], n.layer_index, n.unit_index)
    if strategy == 4:
        t = tracker.activation_threshold
        return lambda n: (
            abs(tracker.last_scaled_output(n) - t),
            n.layer_index,
            n.unit_index,
        )
    raise ContractViolation(f"unknown strategy {strategy}; expected 1-4")


def _weight_scores(model: Model) -> dict[NeuronId, float]:
    """Strategy 3 score: L1 norm of the weights feeding each neuron."""
    scores = {}
    for li, units in neuron_layers(model):
        w = np.abs(model.layers[li].weights.array.astype(np.float64))
        mag = w.sum(axis=tuple(range(w.ndim - 1)))
        for u in range(units):
            scores[NeuronId(li, u)] = float(mag[u])
    return scores


def select_neurons(
    tracker: CoverageTracker,
    model: Model,
    strategies: Iterable[int],
    m: int,
    trace: ActivationTrace,
    rng=None,
) -> list[NeuronId]:
    """Pick up to m distinct neurons to push toward activation.

    Candidates are the neurons NOT activated by the current trace. m is split
    as evenly as possible among the given strategies, remainder going to the
    earlier ones; each strategy ranks the remaining candidates and takes its
    share. All four strategies are deterministic, so rng is accepted only for
    signature stability and never consulted. Returns fewer than m ids when
    the candidate pool is smaller than m.
    """
    strategies = list(strategies)
    if m < 1:
        raise ContractViolation("m must be >= 1")
    if not strategies:
        raise ContractViolation("need at least one strategy")
    for s in strategies:
        if s not in (1, 2, 3, 4):
            raise ContractViolation(f"unknown strategy {s}; expected 1-4")
    active = activated_neurons(model, trace, tracker.activation_threshold)
    remaining = [n for n in tracker.neuron_ids if n not in active]
    base, rem = divmod(m, len(strategies))
    chosen: list[NeuronId] = []
    for pos, strategy in enumerate(strategies):
        quota = base + (1 if pos < rem else 0)
        if quota == 0 or not remaining:
            continue
        remaining.sort(key=_strategy_key(tracker, model, strategy))
        chosen.extend(remaining[:quota])
        remaining = remaining[quota:]
    return chosen
