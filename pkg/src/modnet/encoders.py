"""Jointly trained feature extractor, question encoder, and fusion head.

The convolutional stack turns a raw image into the feature map the
network modules consume; its parameters live in the same store as the
module weights, so gradients from the question-answering loss train it
end to end. The stack's pooling is arranged so the default 30x30 image
yields a 9x9 map: one attention cell per third of a scene cell, aligning
attention with grid geometry.

The LSTM question encoder and the fusion head are optional: the plain
module-network model classifies straight from the root representation,
while the fused model adds a projection of the question encoding before
the final classifier. The VIS+LSTM baseline reuses the same pieces in the
conventional "embed image as a pseudo-token" arrangement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .modules import ModuleConfig
from .params import ParameterStore

__all__ = [
    "ConvStackConfig",
    "LstmConfig",
    "conv_features",
    "lstm_encode",
    "fuse_and_classify",
    "vis_lstm_forward",
    "tokenize",
    "build_vocabulary",
    "PAD_INDEX",
    "UNK_INDEX",
]

PAD_INDEX = 0
UNK_INDEX = 1


@dataclass(frozen=True)
class ConvStackConfig:
    """conv(k1, same) + relu + maxpool(p1/p1) + conv(k2, same) + relu +
    maxpool(window p2, stride 1)."""

    in_channels: int = 3
    channels1: int = 16
    kernel1: int = 5
    pool1: int = 2
    channels2: int = 64
    kernel2: int = 3
    pool2_window: int = 7

    def output_dims(self, image_hw: tuple[int, int]) -> tuple[int, int, int]:
        h, w = image_hw
        if h % self.pool1 or w % self.pool1:
            raise ShapeError(f"image dims {h}x{w} not divisible by pool {self.pool1}")
        h, w = h // self.pool1, w // self.pool1
        h, w = h - self.pool2_window + 1, w - self.pool2_window + 1
        if h <= 0 or w <= 0:
            raise ShapeError("pooling window larger than the pooled map")
        return h, w, self.channels2

    def check_against(self, image_hw: tuple[int, int], config: ModuleConfig) -> None:
        got = self.output_dims(image_hw)
        want = (config.attention_height, config.attention_width,
                config.feature_channels)
        if got != want:
            raise ShapeError(f"conv stack yields {got}, modules expect {want}")


def _run_stack(pixels: Tensor, store: ParameterStore, stack: ConvStackConfig) -> Tensor:
    w1 = store.weight("lenet.features.conv1.weight",
                      (stack.kernel1, stack.kernel1, stack.in_channels,
                       stack.channels1))
    b1 = store.bias("lenet.features.conv1.bias", (stack.channels1,))
    w2 = store.weight("lenet.features.conv2.weight",
                      (stack.kernel2, stack.kernel2, stack.channels1,
                       stack.channels2))
    b2 = store.bias("lenet.features.conv2.bias", (stack.channels2,))
    x = ad.relu(ad.conv2d(pixels, w1, b1, "same"))
    x = ad.maxpool2d(x, (stack.pool1, stack.pool1), (stack.pool1, stack.pool1))
    x = ad.relu(ad.conv2d(x, w2, b2, "same"))
    return ad.maxpool2d(x, (stack.pool2_window, stack.pool2_window), (1, 1))


def _check_image(image: np.ndarray, stack: ConvStackConfig,
                 config: ModuleConfig) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != stack.in_channels:
        raise ShapeError(f"expected HxWx{stack.in_channels} image, got {arr.shape}")
    stack.check_against(arr.shape[:2], config)
    return np.asarray(arr, dtype=np.float64) / 255.0


def conv_features(image: np.ndarray, store: ParameterStore,
                  stack: ConvStackConfig, config: ModuleConfig) -> Tensor:
    """Forward an HxWx3 image (uint8 or float) through the stack."""
    pixels = ad.constant(_check_image(image, stack, config))
    return _run_stack(pixels, store, stack)


def conv_features_batch(images: list[np.ndarray], store: ParameterStore,
                        stack: ConvStackConfig,
                        config: ModuleConfig) -> list[Tensor]:
    """Feature maps for several images through one shared-stack pass.

    Per-example results are bit-identical to :func:`conv_features`; the
    batch dimension only amortizes dispatch overhead.
    """
    scaled = np.stack([_check_image(image, stack, config) for image in images])
    batch = _run_stack(ad.constant(scaled), store, stack)
    return [ad.take_batch(batch, i) for i in range(len(images))]


@dataclass(frozen=True)
class LstmConfig:
    vocabulary: dict = field(default_factory=dict)
    embedding_size: int = 64
    hidden_size: int = 128

    def __post_init__(self):
        if self.embedding_size <= 0 or self.hidden_size <= 0:
            raise ValueError("embedding and hidden sizes must be positive")
        if self.vocabulary.get("<pad>", PAD_INDEX) != PAD_INDEX:
            raise ValueError("vocabulary index 0 is reserved for padding")

    @property
    def vocab_size(self) -> int:
        return max(self.vocabulary.values(), default=UNK_INDEX) + 1


def tokenize(question: str) -> list[str]:
    return question.lower().replace("?", " ").split()


def build_vocabulary(questions: list[str]) -> dict[str, int]:
    """Token to index map over a training corpus; 0 pads, 1 is out-of-vocabulary."""
    vocab = {"<pad>": PAD_INDEX, "<unk>": UNK_INDEX}
    for token in sorted({t for q in questions for t in tokenize(q)}):
        vocab.setdefault(token, len(vocab))
    return vocab


def encode_tokens(question: str, vocab: dict[str, int]) -> list[int]:
    return [vocab.get(tok, UNK_INDEX) for tok in tokenize(question)]


_GATES = ("input", "forget", "output", "cell")


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, store: ParameterStore,
               config: LstmConfig, prefix: str) -> tuple[Tensor, Tensor]:
    e, n = x.dims[0], config.hidden_size
    acts = []
    for gate in _GATES:
        wx = store.weight(f"{prefix}.{gate}.wx", (e, n))
        wh = store.weight(f"{prefix}.{gate}.wh", (n, n))
        b = store.bias(f"{prefix}.{gate}.bias", (n,))
        acts.append(ad.add(ad.fully_connected(x, wx, b),
                           ad.fully_connected(h, wh, None)))
    i = ad.sigmoid(acts[0])
    f = ad.sigmoid(acts[1])
    o = ad.sigmoid(acts[2])
    g = ad.tanh(acts[3])
    c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_next = ad.mul(o, ad.tanh(c_next))
    return h_next, c_next


def _run_lstm(inputs: list[Tensor], store: ParameterStore, config: LstmConfig,
              prefix: str) -> Tensor:
    if not inputs:
        raise ValueError("LSTM needs at least one input step")
    n = config.hidden_size
    h = ad.constant(np.zeros(n))
    c = ad.constant(np.zeros(n))
    for x in inputs:
        h, c = _lstm_step(x, h, c, store, config, prefix)
    return h


def lstm_encode(tokens: list[int], store: ParameterStore,
                config: LstmConfig) -> Tensor:
    """Final hidden state of a single-layer LSTM over embedded tokens."""
    if not tokens:
        raise ValueError("cannot encode an empty token sequence")
    embed = store.weight("lstm.question.embed.weight",
                         (config.vocab_size, config.embedding_size))
    inputs = [ad.lookup_row(embed, t) for t in tokens]
    return _run_lstm(inputs, store, config, "lstm.question")


def fuse_and_classify(root_rep: Tensor, question_h: Tensor | None,
                      store: ParameterStore, config: ModuleConfig,
                      lstm: LstmConfig | None = None) -> Tensor:
    """Distribution over answers from the root representation.

    With a question encoding: softmax(FC2(relu(root + FC1(h)))). Without
    one the root representation is already label-sized and is softmaxed
    directly.
    """
    if question_h is None:
        if root_rep.dims != (len(config.labels),):
            raise ShapeError(
                f"root representation dims {root_rep.dims} must match the "
                f"{len(config.labels)} labels when fusion is disabled")
        return ad.softmax(root_rep)
    if lstm is None:
        raise ValueError("fusing a question encoding requires the LSTM config")
    d = config.d_ans
    w1 = store.weight("fusion.head.project.weight", (lstm.hidden_size, d))
    b1 = store.bias("fusion.head.project.bias", (d,))
    w2 = store.weight("fusion.head.classify.weight", (d, len(config.labels)))
    b2 = store.bias("fusion.head.classify.bias", (len(config.labels),))
    projected = ad.fully_connected(question_h, w1, b1)
    fused = ad.relu(ad.add(root_rep, projected))
    return ad.softmax(ad.fully_connected(fused, w2, b2))


def vis_lstm_forward(image: np.ndarray, tokens: list[int], store: ParameterStore,
                     stack: ConvStackConfig, config: ModuleConfig,
                     lstm: LstmConfig, features: Tensor | None = None) -> Tensor:
    """Baseline: globally pooled image features as a pseudo-token, then LSTM.

    The pooled feature vector is projected to embedding size and prepended
    to the question embeddings; the final hidden state feeds one linear
    classifier.
    """
    feats = features if features is not None else conv_features(
        image, store, stack, config)
    uniform = ad.constant(np.zeros((config.attention_height,
                                    config.attention_width)))
    pooled = ad.attention_weighted_pool(feats, uniform)
    wi = store.weight("vislstm.image.project.weight",
                      (config.feature_channels, lstm.embedding_size))
    bi = store.bias("vislstm.image.project.bias", (lstm.embedding_size,))
    image_token = ad.fully_connected(pooled, wi, bi)
    embed = store.weight("lstm.question.embed.weight",
                         (lstm.vocab_size, lstm.embedding_size))
    inputs = [image_token] + [ad.lookup_row(embed, t) for t in tokens]
    h = _run_lstm(inputs, store, lstm, "lstm.question")
    wo = store.weight("vislstm.head.classify.weight",
                      (lstm.hidden_size, len(config.labels)))
    bo = store.bias("vislstm.head.classify.bias", (len(config.labels),))
    return ad.softmax(ad.fully_connected(h, wo, bo))
