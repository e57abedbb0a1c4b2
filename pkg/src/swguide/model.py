"""The trainable system: MLP extractor with per-domain norm layers,
linear classifier, and a domain discriminator on multilinear features.

Architecture (widths from config): input d_x → linear → norm → relu →
linear → norm → relu ≡ features f (d_f) → linear classifier → softmax.
The discriminator consumes the flattened outer product f ⊗ p through a
gradient-reversal layer, one hidden relu layer, and a sigmoid unit.

Normalization always runs in inference form — each sample is normalized
with the running statistics of its own domain tag, then scaled/shifted by
that domain's learnable γ, β.  Running statistics are set once by the
norm-adaptation pass and are never updated by gradient steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import NonPositiveVarianceError, ShapeMismatchError, UnknownDomainTagError

NORM_DOMAINS = ("source", "target")


@dataclass(frozen=True)
class NormLayerState:
    """One domain's affine-normalization state for one layer; all (1, d)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            object.__setattr__(self, name, arr)
        width = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != width:
                raise ShapeMismatchError(
                    f"norm state field {name} has shape {getattr(self, name).shape}, "
                    f"expected {width}"
                )
        if self.running_var.min() <= 0.0:
            raise NonPositiveVarianceError("running variance must be positive")

    @staticmethod
    def identity(width: int) -> "NormLayerState":
        return NormLayerState(
            gamma=np.ones((1, width)),
            beta=np.zeros((1, width)),
            running_mean=np.zeros((1, width)),
            running_var=np.ones((1, width)),
        )


@dataclass
class ModelParams:
    """All trainable arrays plus per-domain norm states.

    Weight matrices are (fan_in, fan_out); biases and norm vectors are
    (1, width) so every array on the tape stays 2-D.
    """

    extractor: list[tuple[np.ndarray, np.ndarray]]
    norm_states: list[dict[str, NormLayerState]]
    classifier: tuple[np.ndarray, np.ndarray]
    discriminator: list[tuple[np.ndarray, np.ndarray]]

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier[0].shape[1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat name → array view in a fixed, documented order."""
        named: dict[str, np.ndarray] = {}
        for i, (weight, bias) in enumerate(self.extractor):
            named[f"extractor.{i}.weight"] = weight
            named[f"extractor.{i}.bias"] = bias
        for i, states in enumerate(self.norm_states):
            for domain in NORM_DOMAINS:
                state = states[domain]
                named[f"norm.{i}.{domain}.gamma"] = state.gamma
                named[f"norm.{i}.{domain}.beta"] = state.beta
                named[f"norm.{i}.{domain}.mean"] = state.running_mean
                named[f"norm.{i}.{domain}.var"] = state.running_var
        named["classifier.weight"] = self.classifier[0]
        named["classifier.bias"] = self.classifier[1]
        for i, (weight, bias) in enumerate(self.discriminator):
            named[f"discriminator.{i}.weight"] = weight
            named[f"discriminator.{i}.bias"] = bias
        return named

    def copy(self) -> "ModelParams":
        return ModelParams(
            extractor=[(w.copy(), b.copy()) for w, b in self.extractor],
            norm_states=[
                {
                    domain: replace(
                        state,
                        gamma=state.gamma.copy(),
                        beta=state.beta.copy(),
                        running_mean=state.running_mean.copy(),
                        running_var=state.running_var.copy(),
                    )
                    for domain, state in states.items()
                }
                for states in self.norm_states
            ],
            classifier=(self.classifier[0].copy(), self.classifier[1].copy()),
            discriminator=[(w.copy(), b.copy()) for w, b in self.discriminator],
        )


def params_from_named(named: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild ModelParams from the checkpoint dictionary layout."""
    extractor = []
    i = 0
    while f"extractor.{i}.weight" in named:
        extractor.append((named[f"extractor.{i}.weight"], named[f"extractor.{i}.bias"]))
        i += 1
    norm_states = []
    i = 0
    while f"norm.{i}.source.gamma" in named:
        norm_states.append(
            {
                domain: NormLayerState(
                    gamma=named[f"norm.{i}.{domain}.gamma"],
                    beta=named[f"norm.{i}.{domain}.beta"],
                    running_mean=named[f"norm.{i}.{domain}.mean"],
                    running_var=named[f"norm.{i}.{domain}.var"],
                )
                for domain in NORM_DOMAINS
            }
        )
        i += 1
    discriminator = []
    i = 0
    while f"discriminator.{i}.weight" in named:
        discriminator.append(
            (named[f"discriminator.{i}.weight"], named[f"discriminator.{i}.bias"])
        )
        i += 1
    if not extractor or not discriminator or "classifier.weight" not in named:
        raise ShapeMismatchError("named arrays do not describe a complete model")
    return ModelParams(
        extractor=extractor,
        norm_states=norm_states,
        classifier=(named["classifier.weight"], named["classifier.bias"]),
        discriminator=discriminator,
    )


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    rng: np.random.Generator,
    input_dim: int,
    n_classes: int,
    hidden_dim: int = 64,
    disc_hidden: int = 64,
) -> ModelParams:
    """Seeded Glorot-uniform weights, zero biases, identity norm states.

    Draw order is fixed (extractor layers, classifier, discriminator
    layers) so a given generator state always yields the same model.
    """
    widths = [input_dim, hidden_dim, hidden_dim]
    extractor = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        extractor.append((glorot_uniform(rng, fan_in, fan_out), np.zeros((1, fan_out))))
    classifier = (glorot_uniform(rng, hidden_dim, n_classes), np.zeros((1, n_classes)))
    joint_dim = hidden_dim * n_classes
    discriminator = [
        (glorot_uniform(rng, joint_dim, disc_hidden), np.zeros((1, disc_hidden))),
        (glorot_uniform(rng, disc_hidden, 1), np.zeros((1, 1))),
    ]
    norm_states = [
        {domain: NormLayerState.identity(fan_out) for domain in NORM_DOMAINS}
        for fan_out in widths[1:]
    ]
    return ModelParams(
        extractor=extractor,
        norm_states=norm_states,
        classifier=classifier,
        discriminator=discriminator,
    )


@dataclass
class ParamNodes:
    """Tape nodes for every trainable array of one lifted model."""

    extractor: list[tuple[ad.Node, ad.Node]]
    norms: list[dict[str, tuple[ad.Node, ad.Node]]]  # domain -> (gamma, beta)
    classifier: tuple[ad.Node, ad.Node]
    discriminator: list[tuple[ad.Node, ad.Node]]

    def named_nodes(self) -> dict[str, ad.Node]:
        named: dict[str, ad.Node] = {}
        for i, (weight, bias) in enumerate(self.extractor):
            named[f"extractor.{i}.weight"] = weight
            named[f"extractor.{i}.bias"] = bias
        for i, states in enumerate(self.norms):
            for domain, (gamma, beta) in states.items():
                named[f"norm.{i}.{domain}.gamma"] = gamma
                named[f"norm.{i}.{domain}.beta"] = beta
        named["classifier.weight"] = self.classifier[0]
        named["classifier.bias"] = self.classifier[1]
        for i, (weight, bias) in enumerate(self.discriminator):
            named[f"discriminator.{i}.weight"] = weight
            named[f"discriminator.{i}.bias"] = bias
        return named


def lift(tape: ad.Tape, params: ModelParams) -> ParamNodes:
    """Put every trainable array on the tape as a leaf (stats stay constant)."""
    extractor = [(tape.leaf(w), tape.leaf(b)) for w, b in params.extractor]
    norms = [
        {
            domain: (tape.leaf(state.gamma), tape.leaf(state.beta))
            for domain, state in states.items()
        }
        for states in params.norm_states
    ]
    classifier = (tape.leaf(params.classifier[0]), tape.leaf(params.classifier[1]))
    discriminator = [(tape.leaf(w), tape.leaf(b)) for w, b in params.discriminator]
    return ParamNodes(
        extractor=extractor,
        norms=norms,
        classifier=classifier,
        discriminator=discriminator,
    )


def _domain_masks(domain_tags) -> dict[str, np.ndarray]:
    """(n, 1) 0/1 column per domain present, in fixed NORM_DOMAINS order."""
    tags = list(domain_tags)
    for tag in tags:
        if tag not in NORM_DOMAINS:
            raise UnknownDomainTagError(f"unknown domain tag {tag!r}")
    masks = {}
    for domain in NORM_DOMAINS:
        column = np.array([[1.0] if tag == domain else [0.0] for tag in tags])
        if column.sum() > 0:
            masks[domain] = column
    return masks


def forward_on_tape(
    tape: ad.Tape,
    nodes: ParamNodes,
    params: ModelParams,
    x: ad.Node,
    domain_tags,
    collect_prenorm: bool = False,
):
    """Differentiable forward pass: returns (f, logits, p[, prenorm values]).

    ``params`` supplies the constant running statistics; ``nodes`` the
    trainable leaves.  Each norm layer computes every domain's normalized
    output over the whole batch and blends them with 0/1 row masks, so a
    single tape serves mixed-domain batches.
    """
    tags = list(domain_tags)
    if x.value.shape[0] != len(tags):
        raise ShapeMismatchError(f"{x.value.shape[0]} rows but {len(tags)} domain tags")
    masks = _domain_masks(tags)
    prenorm = []
    h = x
    for layer, (weight, bias) in enumerate(nodes.extractor):
        h = ad.add(ad.matmul(h, weight), bias)
        if collect_prenorm:
            prenorm.append(h.value.copy())
        branches = []
        for domain, mask in masks.items():
            state = params.norm_states[layer][domain]
            gamma, beta = nodes.norms[layer][domain]
            centered = ad.add(h, tape.leaf(-state.running_mean))
            xhat = ad.mul(centered, tape.leaf(1.0 / np.sqrt(state.running_var)))
            y = ad.add(ad.mul(xhat, gamma), beta)
            branches.append(ad.mul(y, tape.leaf(mask)) if len(masks) > 1 else y)
        out = branches[0]
        for branch in branches[1:]:
            out = ad.add(out, branch)
        h = ad.relu(out)
    features = h
    logits = ad.add(ad.matmul(features, nodes.classifier[0]), nodes.classifier[1])
    probs = ad.softmax_rows(logits, 1.0)
    if collect_prenorm:
        return features, logits, probs, prenorm
    return features, logits, probs


def discriminate_on_tape(
    tape: ad.Tape, nodes: ParamNodes, joint: ad.Node, lam: float
) -> ad.Node:
    """Domain probability per row: reversal → hidden relu layers → sigmoid."""
    h = ad.gradient_reverse(joint, lam)
    for weight, bias in nodes.discriminator[:-1]:
        h = ad.relu(ad.add(ad.matmul(h, weight), bias))
    weight, bias = nodes.discriminator[-1]
    return ad.sigmoid(ad.add(ad.matmul(h, weight), bias))


def multilinear_map(features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row-wise flattened outer product f_i p_i^T (eager form)."""
    features = np.asarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if features.shape[0] != probs.shape[0]:
        raise ShapeMismatchError(
            f"row counts differ: {features.shape[0]} vs {probs.shape[0]}"
        )
    n = features.shape[0]
    return np.einsum("ni,nk->nik", features, probs).reshape(n, -1)


def forward(params: ModelParams, x, domain_tags):
    """Eager forward pass; returns (features, probabilities) as arrays."""
    tape = ad.Tape()
    nodes = lift(tape, params)
    x_node = tape.leaf(x)
    features, _, probs = forward_on_tape(tape, nodes, params, x_node, domain_tags)
    return features.value.copy(), probs.value.copy()


def predict_logits(params: ModelParams, x, domain_tags) -> np.ndarray:
    """Eager classifier logits (used for temperature-1 prediction files)."""
    tape = ad.Tape()
    nodes = lift(tape, params)
    x_node = tape.leaf(x)
    _, logits, _ = forward_on_tape(tape, nodes, params, x_node, domain_tags)
    return logits.value.copy()


def discriminate(params: ModelParams, joint, lam: float = 1.0) -> np.ndarray:
    """Eager discriminator output for a joint (f ⊗ p) batch."""
    tape = ad.Tape()
    nodes = lift(tape, params)
    joint_node = tape.leaf(joint)
    expected = params.feature_dim * params.n_classes
    if joint_node.value.shape[1] != expected:
        raise ShapeMismatchError(
            f"joint width {joint_node.value.shape[1]}, discriminator expects {expected}"
        )
    return discriminate_on_tape(tape, nodes, joint_node, lam).value.copy()
