"""Threat models: layer graphs, traced forward passes, partial backprop.

A model is a DAG of :class:`~salattack.tensorops.LayerPrimitive` nodes ending
in a 1-channel sigmoid saliency head. The two built-in toy architectures,
MiniSal-S (single stream) and MiniSal-M (coarse + fine streams merged by a
channel concat), stand in for full-size saliency networks at desk scale.

The attack-facing machinery lives here too: ``forward_trace`` caches every
layer activation, and ``grad_input_from_layer`` backpropagates an injected
gradient from an arbitrary layer down to the image while touching only the
weights of layers up to that point. An optional ``access_log`` set records
every conv layer whose weights were read, so tests (and the attack loop) can
assert the partial-knowledge contract.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorops as T
from .tensorops import Array, LayerPrimitive, ShapeMismatchError


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer graph with optional stream metadata.

    ``streams`` is bookkeeping only: a mapping with layer-index lists for the
    ``fine`` and ``coarse`` sub-networks and the index of their ``merge``
    concat layer. The graph wiring itself lives in each layer's ``sources``.
    """

    layers: tuple[LayerPrimitive, ...]
    streams: dict | None = None

    def __post_init__(self):
        for idx, layer in enumerate(self.layers):
            for src in self.inputs_of(idx):
                if src >= idx:
                    raise ValueError(
                        f"layer {idx} ({layer.describe()}) depends on layer {src}; "
                        "sources must precede the layer")
                if src < -1:
                    raise ValueError(f"layer {idx}: bad source index {src}")
        if not self.layers or self.layers[-1].kind != "sigmoid":
            raise ValueError("the final layer must be a sigmoid saliency head")

    @property
    def output_layer(self) -> int:
        return len(self.layers) - 1

    def inputs_of(self, idx: int) -> tuple[int, ...]:
        layer = self.layers[idx]
        if layer.sources is not None:
            return layer.sources
        return (idx - 1,) if idx > 0 else (-1,)

    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    def channels_at(self, idx: int, input_shape=(3, 48, 64)) -> int:
        return infer_shapes(self, input_shape)[idx][0]


def infer_shapes(spec: ModelSpec, input_shape) -> list[tuple[int, int, int]]:
    """Predict every layer's output shape from the input shape alone."""
    shapes: list[tuple[int, int, int]] = []
    for idx, layer in enumerate(spec.layers):
        src = [tuple(input_shape) if j < 0 else shapes[j] for j in spec.inputs_of(idx)]
        shapes.append(T.output_shape(layer, src if layer.kind == "concat" else src[0]))
    out_c = shapes[-1][0]
    if out_c != 1:
        raise ShapeMismatchError(f"saliency head must emit 1 channel, got {out_c}")
    return shapes


@dataclass(frozen=True)
class ModelWeights:
    """Per-conv-layer (kernel, bias) tensors, immutable once built."""

    conv: dict[int, tuple[Array, Array]]

    def get(self, idx: int) -> tuple[Array, Array]:
        return self.conv[idx]

    def validate_for(self, spec: ModelSpec, input_shape=(3, 48, 64)) -> None:
        for idx in spec.conv_layers():
            layer = spec.layers[idx]
            w, b = self.conv[idx]
            want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            if tuple(w.shape) != want or tuple(b.shape) != (layer.out_channels,):
                raise ShapeMismatchError(
                    f"layer {idx} weights {tuple(w.shape)} do not match {want}")
        infer_shapes(spec, input_shape)


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass, indexed by layer position.

    Keeps the input image alongside, since backward passes need it as the
    cached input of the first layer(s).
    """

    outputs: list[Array]
    image: Array

    def __getitem__(self, idx: int) -> Array:
        return self.outputs[idx]

    def __len__(self) -> int:
        return len(self.outputs)

    @property
    def final(self) -> Array:
        return self.outputs[-1]


# ---------------------------------------------------------------------------
# Forward / backward engines
# ---------------------------------------------------------------------------

def _gather_inputs(spec, idx, image, outputs):
    return [image if j < 0 else outputs[j] for j in spec.inputs_of(idx)]


def _run_layers(spec, weights, image, upto, access_log):
    outputs: list[Array] = []
    for idx in range(upto + 1):
        layer = spec.layers[idx]
        ins = _gather_inputs(spec, idx, image, outputs)
        w = None
        if layer.kind == "conv2d":
            if access_log is not None:
                access_log.add(idx)
            w = weights.get(idx)
        x = ins if layer.kind == "concat" else ins[0]
        outputs.append(T.forward(layer, w, x))
    return outputs


def forward_trace(spec: ModelSpec, weights: ModelWeights, image: Array,
                  access_log: set | None = None) -> ActivationTrace:
    """Run the full model, caching every layer's output.

    The image must be 3xHxW with values in [0, 1].
    """
    _validate_image(image)
    return ActivationTrace(_run_layers(spec, weights, image, spec.output_layer, access_log),
                           image)


def forward_to_layer(spec: ModelSpec, weights: ModelWeights, image: Array,
                     layer: int, access_log: set | None = None) -> ActivationTrace:
    """Forward pass through layers 0..layer only; later layers are never run.

    Range validation on the image is skipped: this is the attack-side entry
    point and the iterate may sit slightly outside [0, 1] when clipping is
    disabled.
    """
    if not 0 <= layer <= spec.output_layer:
        raise IndexError(f"layer {layer} out of range 0..{spec.output_layer}")
    return ActivationTrace(_run_layers(spec, weights, image, layer, access_log), image)


def predict(spec: ModelSpec, weights: ModelWeights, image: Array) -> Array:
    """Black-box style query: the final saliency map only, no trace kept."""
    return _run_layers(spec, weights, image, spec.output_layer, None)[-1]


def continue_forward(spec: ModelSpec, weights: ModelWeights,
                     partial: ActivationTrace) -> ActivationTrace:
    """Extend a partial trace through the remaining layers to the output."""
    outputs = list(partial.outputs)
    for idx in range(len(outputs), spec.output_layer + 1):
        layer = spec.layers[idx]
        ins = _gather_inputs(spec, idx, partial.image, outputs)
        w = weights.get(idx) if layer.kind == "conv2d" else None
        x = ins if layer.kind == "concat" else ins[0]
        outputs.append(T.forward(layer, w, x))
    return ActivationTrace(outputs, partial.image)


def _validate_image(image: Array) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeMismatchError(f"expected a 3xHxW image, got {tuple(image.shape)}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


def _backward_layers(spec, weights, trace, image, start: int, grad_at_start: Array,
                     access_log=None, with_weight_grads=False):
    grads: dict[int, Array] = {start: grad_at_start}
    weight_grads: dict[int, tuple[Array, Array]] = {}
    grad_image = np.zeros_like(image)
    for idx in range(start, -1, -1):
        if idx not in grads:
            continue
        g = grads.pop(idx)
        layer = spec.layers[idx]
        ins = _gather_inputs(spec, idx, image, trace.outputs)
        w = None
        if layer.kind == "conv2d":
            if access_log is not None:
                access_log.add(idx)
            w = weights.get(idx)
        cached = ins if layer.kind == "concat" else ins[0]
        gin, gw = T.backward(layer, w, cached, g, with_weight_grad=with_weight_grads)
        if gw is not None:
            weight_grads[idx] = gw
        gins = gin if layer.kind == "concat" else [gin]
        for j, gj in zip(spec.inputs_of(idx), gins):
            if j < 0:
                grad_image += gj
            elif j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return grad_image, weight_grads


def grad_input_from_layer(spec: ModelSpec, weights: ModelWeights, trace: ActivationTrace,
                          attacked_layer: int, grad_at_layer: Array,
                          access_log: set | None = None) -> Array:
    """Gradient of an injected scalar loss w.r.t. the image.

    ``grad_at_layer`` is d(loss)/d(activation of ``attacked_layer``); only
    layers 0..attacked_layer participate, which is what makes the feature-space
    attack a partial-knowledge attack. ``trace`` must come from a forward pass
    over the same image the gradient is meant for.
    """
    if not 0 <= attacked_layer <= spec.output_layer:
        raise IndexError(f"attacked layer {attacked_layer} out of range "
                         f"0..{spec.output_layer}")
    want = tuple(trace[attacked_layer].shape)
    if tuple(grad_at_layer.shape) != want:
        raise ShapeMismatchError(
            f"grad-at-layer shape {tuple(grad_at_layer.shape)} does not match "
            f"trace entry {want}")
    grad_image, _ = _backward_layers(spec, weights, trace, trace.image, attacked_layer,
                                     grad_at_layer, access_log=access_log)
    return grad_image


def backward_all(spec: ModelSpec, weights: ModelWeights, trace: ActivationTrace,
                 grad_at_output: Array):
    """Full conventional backward pass: image gradient plus all weight grads."""
    return _backward_layers(spec, weights, trace, trace.image, spec.output_layer,
                            grad_at_output, with_weight_grads=True)


# ---------------------------------------------------------------------------
# Receptive fields
# ---------------------------------------------------------------------------

def receptive_field(spec: ModelSpec, layer: int) -> tuple[int, int]:
    """(receptive-field size, jump) of one layer, in input pixels.

    Uses the usual recursion r_i = r_{i-1} + (k_i - 1) * j_{i-1} and
    j_i = j_{i-1} * s_i with r = j = 1 at the input; element-wise layers count
    as k = 1, s = 1, and 2x nearest upsampling halves the jump.
    """
    if not 0 <= layer <= spec.output_layer:
        raise IndexError(f"layer {layer} out of range")
    rf: list[tuple[float, float]] = []
    for idx in range(layer + 1):
        lay = spec.layers[idx]
        src = [(1.0, 1.0) if j < 0 else rf[j] for j in spec.inputs_of(idx)]
        if lay.kind == "concat":
            rf.append((max(r for r, _ in src), max(j for _, j in src)))
            continue
        r, j = src[0]
        if lay.kind in ("conv2d", "maxpool"):
            r = r + (lay.kernel - 1) * j
            j = j * lay.stride
        elif lay.kind == "upsample":
            j = j / 2.0
        rf.append((r, j))
    r, j = rf[layer]
    return int(round(r)), int(round(j))


# ---------------------------------------------------------------------------
# Toy architectures
# ---------------------------------------------------------------------------

def minisal_s() -> ModelSpec:
    """Single-stream encoder-decoder; context layer is the post-relu bottleneck."""
    return ModelSpec(layers=(
        T.conv2d(3, 16), T.relu(), T.maxpool(),
        T.conv2d(16, 32), T.relu(), T.maxpool(),
        T.conv2d(32, 64), T.relu(),                 # context: layer 7
        T.upsample(), T.conv2d(64, 16), T.relu(),
        T.upsample(), T.conv2d(16, 1), T.sigmoid(),
    ))


def minisal_m() -> ModelSpec:
    """Two MiniSal-S encoders (full and half resolution) with a shared decoder.

    The coarse stream pools the input once, runs the same encoder, then
    upsamples its bottleneck so both streams align spatially before the
    channel concat.
    """
    layers = (
        # fine encoder: 0..7
        T.conv2d(3, 16), T.relu(), T.maxpool(),
        T.conv2d(16, 32), T.relu(), T.maxpool(),
        T.conv2d(32, 64), T.relu(),
        # coarse encoder on the pooled input: 8..17
        T.maxpool(sources=(-1,)),
        T.conv2d(3, 16), T.relu(), T.maxpool(),
        T.conv2d(16, 32), T.relu(), T.maxpool(),
        T.conv2d(32, 64), T.relu(),
        T.upsample(),
        # merge + shared decoder: 18..24
        T.concat((7, 17)),
        T.upsample(), T.conv2d(128, 16), T.relu(),
        T.upsample(), T.conv2d(16, 1), T.sigmoid(),
    )
    streams = {"fine": list(range(0, 8)), "coarse": list(range(8, 18)), "merge": 18}
    return ModelSpec(layers=layers, streams=streams)


def context_layer(spec: ModelSpec) -> int:
    """The encoder/decoder bottleneck: merge concat if present, else the last
    activation before the first upsample."""
    if spec.streams and "merge" in spec.streams:
        return spec.streams["merge"]
    first_up = next(i for i, l in enumerate(spec.layers) if l.kind == "upsample")
    return first_up - 1


def attackable_layers(spec: ModelSpec) -> list[int]:
    """Layers worth attacking: each conv stage's activation output, the merge
    concat (multi-stream), and the final saliency map."""
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("relu", "sigmoid") and spec.layers[i - 1].kind == "conv2d":
            out.append(i)
        elif layer.kind == "concat":
            out.append(i)
    return out


# ---------------------------------------------------------------------------
# Initialization and training
# ---------------------------------------------------------------------------

def init_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    """Seeded uniform init in [-1/sqrt(fan-in), +1/sqrt(fan-in)]."""
    rng = np.random.default_rng(seed)
    conv = {}
    for idx in spec.conv_layers():
        layer = spec.layers[idx]
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels,
                                             layer.kernel, layer.kernel))
        b = rng.uniform(-bound, bound, size=layer.out_channels)
        conv[idx] = (w, b)
    return ModelWeights(conv=conv)


def _bce(pred: Array, target: Array, eps: float = 1e-7) -> tuple[float, Array]:
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).mean()
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / n
    return float(loss), grad


def _training_target(sal_map: Array) -> Array:
    # Ground-truth maps sum to 1; rescale to peak 1, then smooth into
    # [0.1, 0.9] so the sigmoid head trains without saturating. CC-style
    # evaluation is affine-invariant, so the smoothing costs nothing there.
    return 0.1 + 0.8 * (sal_map / sal_map.max())


def evaluate_bce(spec: ModelSpec, weights: ModelWeights, dataset) -> float:
    """Mean binary cross-entropy of the model over (image, map) pairs."""
    total = 0.0
    for image, sal_map in dataset:
        trace = forward_trace(spec, weights, image)
        loss, _ = _bce(trace.final[0], _training_target(sal_map))
        total += loss
    return total / len(dataset)


def train_toy(spec: ModelSpec, dataset, epochs: int, learning_rate: float,
              seed: int) -> ModelWeights:
    """Plain per-sample SGD on binary cross-entropy against blob ground truth.

    Deterministic: seeded init, fixed sample order, no momentum. Raises
    :class:`TrainingDivergedError` if the loss goes non-finite.
    """
    weights = init_weights(spec, seed)
    if epochs == 0:
        return weights
    conv = {idx: (w.copy(), b.copy()) for idx, (w, b) in weights.conv.items()}
    work = ModelWeights(conv=conv)
    for epoch in range(epochs):
        for sample_idx, (image, sal_map) in enumerate(dataset):
            trace = forward_trace(spec, work, image)
            loss, grad_map = _bce(trace.final[0], _training_target(sal_map))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss non-finite at epoch {epoch}, sample {sample_idx}")
            _, wgrads = backward_all(spec, work, trace, grad_map[None])
            for idx, (gw, gb) in wgrads.items():
                w, b = conv[idx]
                w -= learning_rate * gw
                b -= learning_rate * gb
    final = ModelWeights(conv={i: (w.copy(), b.copy()) for i, (w, b) in conv.items()})
    final.validate_for(spec, input_shape=dataset[0][0].shape)
    return final


# ---------------------------------------------------------------------------
# Model manifests on disk
# ---------------------------------------------------------------------------

def _layer_to_json(layer: LayerPrimitive) -> dict:
    d = {"kind": layer.kind}
    if layer.kind in ("conv2d", "maxpool"):
        d.update(kernel=layer.kernel, stride=layer.stride)
    if layer.kind == "conv2d":
        d.update(padding=layer.padding, in_channels=layer.in_channels,
                 out_channels=layer.out_channels)
    if layer.sources is not None:
        d["sources"] = list(layer.sources)
    return d


def _layer_from_json(d: dict) -> LayerPrimitive:
    sources = tuple(d["sources"]) if "sources" in d else None
    kind = d["kind"]
    if kind == "conv2d":
        return T.conv2d(d["in_channels"], d["out_channels"], kernel=d["kernel"],
                        stride=d["stride"], padding=d["padding"], sources=sources)
    if kind == "maxpool":
        return T.maxpool(kernel=d["kernel"], stride=d["stride"], sources=sources)
    if kind == "concat":
        return T.concat(sources)
    return LayerPrimitive(kind, sources=sources)


def save_model(directory, spec: ModelSpec, weights: ModelWeights) -> None:
    """Write a model manifest plus one SFT1 file per weight tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "layers": [_layer_to_json(l) for l in spec.layers],
        "streams": spec.streams,
        "weights": {},
    }
    for idx in spec.conv_layers():
        w, b = weights.get(idx)
        wname, bname = f"w{idx:02d}.sft1", f"b{idx:02d}.sft1"
        T.write_sft1(directory / wname, w)
        T.write_sft1(directory / bname, b)
        manifest["weights"][str(idx)] = {"kernel": wname, "bias": bname}
    (directory / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(directory) -> tuple[ModelSpec, ModelWeights]:
    """Read a model manifest written by :func:`save_model`."""
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    layers = tuple(_layer_from_json(d) for d in manifest["layers"])
    streams = manifest.get("streams")
    spec = ModelSpec(layers=layers, streams=streams)
    conv = {}
    for key, names in manifest["weights"].items():
        idx = int(key)
        conv[idx] = (T.read_sft1(directory / names["kernel"]),
                     T.read_sft1(directory / names["bias"]))
    weights = ModelWeights(conv=conv)
    return spec, weights
