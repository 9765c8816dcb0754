"""Full parameter set and the per-sample forward pipeline.

Wires the pieces together: text boxes are encoded and fed both to the layout
graph's pseudo-classifier and to the text projection head; pill features go
through the image projection head; cosine similarities between the two sides
feed the losses and the matching decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment, encoders, graph
from . import numerics as nm
from .alignment import LossConfig
from .data import PrescriptionSample
from .encoders import EncoderParams, ProjectionParams, Vocabulary
from .graph import LayoutGraph, SageParams
from .numerics import Tensor

__all__ = ["ModelConfig", "ModelParams", "PreparedSample", "SampleOutputs",
           "init_params", "prepare_sample", "forward_sample",
           "LOSS_VARIANTS"]

LOSS_VARIANTS = ("contrastive", "matched_only")


@dataclass(frozen=True)
class ModelConfig:
    """All widths; K (number of graph layers) is len(sage_dims)."""

    vocab_size: int
    d_tok: int = 32
    d_ff: int = 64
    sage_dims: tuple[int, ...] = (32, 32)
    d_img: int = 16
    proj_hidden: int = 128
    d_proj: int = 256
    use_graph: bool = True

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("ModelConfig: vocabulary must include PAD and UNK")
        if self.d_proj != ProjectionParams.OUTPUT_DIM:
            raise ValueError(
                f"ModelConfig: projection width is fixed at {ProjectionParams.OUTPUT_DIM}")
        if len(self.sage_dims) < 1:
            raise ValueError("ModelConfig: need at least one graph layer")


@dataclass
class ModelParams:
    """Every trainable tensor, addressable by stable dotted names."""

    encoder: EncoderParams
    sage: SageParams
    text_projection: ProjectionParams
    image_projection: ProjectionParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        enc = self.encoder
        out["encoder.embedding"] = enc.embedding
        for name in ("wq", "wk", "wv", "wo", "ff1", "ff1_bias", "ff2", "ff2_bias",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[f"encoder.{name}"] = getattr(enc, name)
        for k, w in enumerate(self.sage.layers):
            out[f"sage.layer{k}.weight"] = w
        out["sage.classifier.weight"] = self.sage.classifier_weight
        out["sage.classifier.bias"] = self.sage.classifier_bias
        for tag, proj in (("text", self.text_projection), ("image", self.image_projection)):
            out[f"projection.{tag}.w1"] = proj.w1
            out[f"projection.{tag}.b1"] = proj.b1
            out[f"projection.{tag}.w2"] = proj.w2
            out[f"projection.{tag}.b2"] = proj.b2
        return out

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded uniform(+-1/sqrt(fan_in)) init; layer-norm gains start at one."""
    rng = np.random.default_rng([seed, 101])
    d, d_ff = config.d_tok, config.d_ff

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    encoder = EncoderParams(
        embedding=_uniform(rng, (config.vocab_size, d), d),
        wq=_uniform(rng, (d, d), d),
        wk=_uniform(rng, (d, d), d),
        wv=_uniform(rng, (d, d), d),
        wo=_uniform(rng, (d, d), d),
        ff1=_uniform(rng, (d, d_ff), d),
        ff1_bias=_uniform(rng, (1, d_ff), d),
        ff2=_uniform(rng, (d_ff, d), d_ff),
        ff2_bias=_uniform(rng, (1, d), d_ff),
        ln1_gain=ones((1, d)),
        ln1_bias=zeros((1, d)),
        ln2_gain=ones((1, d)),
        ln2_bias=zeros((1, d)),
    )

    layers = []
    d_in = d
    for d_out in config.sage_dims:
        layers.append(_uniform(rng, (d_out, 2 * d_in), 2 * d_in))
        d_in = d_out
    sage = SageParams(
        layers=layers,
        classifier_weight=_uniform(rng, (d_in, 1), d_in),
        classifier_bias=_uniform(rng, (1, 1), d_in),
    )

    def projection(d_input: int) -> ProjectionParams:
        return ProjectionParams(
            w1=_uniform(rng, (d_input, config.proj_hidden), d_input),
            b1=_uniform(rng, (1, config.proj_hidden), d_input),
            w2=_uniform(rng, (config.proj_hidden, config.d_proj), config.proj_hidden),
            b2=_uniform(rng, (1, config.d_proj), config.proj_hidden),
        )

    return ModelParams(encoder, sage, projection(d), projection(config.d_img))


@dataclass
class PreparedSample:
    """A sample preprocessed for repeated forward passes."""

    sample: PrescriptionSample
    token_seqs: list[list[int]]
    layout: LayoutGraph
    labels: np.ndarray                      # bool per box
    correspondence: list[frozenset[int]]
    pill_features: np.ndarray               # (M, d_img)


def prepare_sample(sample: PrescriptionSample, vocab: Vocabulary,
                   feature_dim: int) -> PreparedSample:
    token_seqs = [encoders.tokenize(b.text, vocab) for b in sample.boxes]
    layout = graph.build_layout_graph(sample.boxes)
    features = [encoders.ingest_pill_features(p.features, feature_dim,
                                              f"{sample.sample_id}/{p.pill_id}").data
                for p in sample.pills]
    return PreparedSample(
        sample=sample,
        token_seqs=token_seqs,
        layout=layout,
        labels=sample.labels(),
        correspondence=sample.correspondence(),
        pill_features=np.stack(features) if features else np.zeros((0, feature_dim)),
    )


@dataclass
class SampleOutputs:
    """Forward results for one prescription."""

    probabilities: Tensor       # (N, 1) pseudo-classifier output
    similarities: Tensor        # (M, N)
    loss_matching: Tensor | None
    loss_classification: Tensor | None
    loss_total: Tensor | None


def forward_sample(params: ModelParams, config: ModelConfig, prep: PreparedSample,
                   loss_cfg: LossConfig, loss_variant: str = "contrastive",
                   with_losses: bool = True) -> SampleOutputs:
    """Run the full pipeline on one prescription.

    With use_graph disabled the probabilities are a constant 1 for every box,
    so text embeddings pass through unweighted and the classification term
    carries no gradient.
    """
    if loss_variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {loss_variant!r}")
    te = encoders.encode_text_batch(prep.token_seqs, params.encoder)
    if config.use_graph:
        h = graph.sage_forward(prep.layout, te, params.sage)
        g = graph.pseudo_classify(h, params.sage)
    else:
        g = Tensor(np.ones((len(prep.token_seqs), 1)))
    tp = encoders.project(te, params.text_projection)
    tp_weighted = graph.weight_text_embeddings(tp, g)
    ip = encoders.project(Tensor(prep.pill_features), params.image_projection)
    sims = alignment.similarity_matrix(ip, tp_weighted, loss_cfg.cosine_eps)

    if not with_losses:
        return SampleOutputs(g, sims, None, None, None)
    if loss_variant == "matched_only":
        loss_match = alignment.clip_style_loss(sims, prep.correspondence, loss_cfg.margin)
    else:
        loss_match = alignment.matching_loss(sims, prep.correspondence, loss_cfg.margin)
    loss_cls = alignment.classification_loss(g, prep.labels)
    loss_tot = alignment.total_loss(loss_match, loss_cls, loss_cfg.balance)
    return SampleOutputs(g, sims, loss_match, loss_cls, loss_tot)
