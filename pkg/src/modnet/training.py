"""Likelihood training over dynamically assembled networks.

Every batch groups examples whose layouts share a shape; each example's
network is built from the same tied parameter store, the batch loss is
the mean negative log likelihood, and one reverse sweep accumulates
gradients for exactly the parameters the batch's layouts touch. Adadelta
then updates those parameters only, so module instances that appear in
few questions keep usable per-weight step sizes.

Training is single-threaded and deterministic: given the same data,
config and seed, two runs produce bit-identical checkpoints.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tape, Tensor
from .checkpoint import save_checkpoint, store_from_checkpoint
from .dataset import DatasetManifest, load_image
from .encoders import (ConvStackConfig, LstmConfig, build_vocabulary,
                       conv_features, conv_features_batch, encode_tokens,
                       fuse_and_classify, lstm_encode, vis_lstm_forward)
from .imageio import write_pgm
from .layout import Layout, assemble, group_by_layout, layout_from_query
from .modules import ModuleConfig
from .params import ParameterStore, named_seed
from .query import parse_query

__all__ = [
    "MODEL_KINDS",
    "TrainConfig",
    "TrainExample",
    "ModelContext",
    "ModelError",
    "EvalReport",
    "adadelta_step",
    "fit_examples",
    "train_on_dataset",
    "evaluate_model",
    "dump_attention",
    "save_model",
    "load_model",
    "examples_from_manifest",
]

MODEL_KINDS = ("nmn", "nmn+lstm", "vis+lstm", "majority")

MAJORITY_PARAM = "majority.class.prior"


class ModelError(ValueError):
    """Checkpoint, metadata, or vocabulary does not fit the request."""


@dataclass(frozen=True)
class TrainConfig:
    model: str = "nmn"
    epochs: int = 30
    batch_size: int = 64
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 10.0
    val_fraction: float = 0.05
    patience: int = 8
    seed: int = 0
    exclude_size: int | None = None
    batch_by_shape: bool = True
    lstm_hidden: int = 128
    lstm_embed: int = 64
    fused_rep_size: int = 32

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ModelError(f"unknown model {self.model!r}; "
                             f"choose from {', '.join(MODEL_KINDS)}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class TrainExample:
    image: np.ndarray
    question: str
    query: str
    answer: str
    layout_size: int


def examples_from_manifest(data_dir: str | Path, manifest: DatasetManifest,
                           split: str) -> list[TrainExample]:
    out = []
    for record in manifest.split_records(split):
        out.append(TrainExample(
            image=load_image(data_dir, record),
            question=record.question,
            query=record.query,
            answer=record.answer,
            layout_size=record.layout_size,
        ))
    return out


class ModelContext:
    """A trained (or training) model: store, configs and compiled caches."""

    def __init__(self, kind: str, store: ParameterStore,
                 module_config: ModuleConfig, stack: ConvStackConfig,
                 lstm: LstmConfig | None):
        if kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.store = store
        self.module_config = module_config
        self.stack = stack
        self.lstm = lstm
        self._layouts: dict[str, Layout] = {}
        self._networks: dict[str, object] = {}

    @property
    def labels(self) -> tuple[str, ...]:
        return self.module_config.labels

    def layout_for(self, query_text: str) -> Layout:
        layout = self._layouts.get(query_text)
        if layout is None:
            layout = layout_from_query(parse_query(query_text), "shapes")
            self._layouts[query_text] = layout
        return layout

    def network_for(self, layout: Layout):
        key = layout.render()
        network = self._networks.get(key)
        if network is None:
            network = assemble(layout, self.store, self.module_config)
            self._networks[key] = network
        return network

    def tokens_for(self, question: str) -> list[int]:
        if self.lstm is None:
            raise ModelError(f"model {self.kind!r} has no question encoder")
        return encode_tokens(question, self.lstm.vocabulary)

    def distribution(self, example: TrainExample,
                     features: Tensor | None = None) -> Tensor:
        """Predicted answer distribution for one example.

        ``features`` may carry a precomputed conv-stack output (shared
        batched pass); otherwise the stack runs here.
        """
        if self.kind == "majority":
            return self.store.get(MAJORITY_PARAM)
        if self.kind == "vis+lstm":
            return vis_lstm_forward(example.image, self.tokens_for(example.question),
                                    self.store, self.stack, self.module_config,
                                    self.lstm, features=features)
        if features is None:
            features = conv_features(example.image, self.store, self.stack,
                                     self.module_config)
        network = self.network_for(self.layout_for(example.query))
        rep = network(features)
        if self.kind == "nmn":
            return fuse_and_classify(rep, None, self.store, self.module_config)
        question_h = lstm_encode(self.tokens_for(example.question), self.store,
                                 self.lstm)
        return fuse_and_classify(rep, question_h, self.store,
                                 self.module_config, self.lstm)

    def batch_features(self, examples: list[TrainExample]) -> list[Tensor | None]:
        if self.kind == "majority":
            return [None] * len(examples)
        return conv_features_batch([e.image for e in examples], self.store,
                                   self.stack, self.module_config)

    def predict(self, example: TrainExample) -> str:
        dist = self.distribution(example)
        return self.labels[int(dist.data.argmax())]

    def predict_many(self, examples: list[TrainExample],
                     chunk: int = 64) -> list[str]:
        out = []
        for start in range(0, len(examples), chunk):
            part = examples[start:start + chunk]
            for example, feats in zip(part, self.batch_features(part)):
                dist = self.distribution(example, features=feats)
                out.append(self.labels[int(dist.data.argmax())])
        return out


def adadelta_step(store: ParameterStore, names, rho: float = 0.95,
                  eps: float = 1e-6) -> None:
    """Adadelta update for the named parameters; everything else untouched.

    E[g2] <- rho E[g2] + (1-rho) g2
    dx    <- -sqrt(E[dx2]+eps) / sqrt(E[g2]+eps) * g
    E[dx2]<- rho E[dx2] + (1-rho) dx2
    """
    for name in sorted(names):
        tensor = store.get(name)
        g = tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
        eg2, edx2 = store.opt_state(name)
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        delta = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1.0 - rho) * delta * delta
        tensor.data += delta


def clip_gradients(store: ParameterStore, names, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = []
    for name in sorted(names):
        g = store.get(name).grad
        if g is not None:
            grads.append(g)
            total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def _accuracy_by_size(context: ModelContext,
                      examples: list[TrainExample]) -> tuple[float, dict]:
    correct_total: dict[int, list[int]] = {}
    correct = 0
    predictions = context.predict_many(examples)
    for example, predicted in zip(examples, predictions):
        ok = predicted == example.answer
        correct += ok
        bucket = correct_total.setdefault(example.layout_size, [0, 0])
        bucket[0] += ok
        bucket[1] += 1
    overall = correct / len(examples) if examples else 0.0
    return overall, correct_total


METRICS_HEADER = ["epoch", "split", "loss", "accuracy",
                  "acc_size4", "acc_size5", "acc_size6"]


@dataclass
class FitResult:
    context: ModelContext
    metrics_rows: list[list[str]] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_epoch: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(self.metrics_rows)
        return buf.getvalue()


def _snapshot(store: ParameterStore) -> dict:
    return {name: (store.get(name).data.copy(),
                   store.opt_state(name)[0].copy(),
                   store.opt_state(name)[1].copy())
            for name in store.names()}


def _restore(store: ParameterStore, snapshot: dict) -> None:
    for name, (value, eg2, edx2) in snapshot.items():
        store.set_value(name, value)
        store.set_opt_state(name, eg2, edx2)


def _size_cell(by_size: dict, size: int) -> str:
    if size not in by_size or by_size[size][1] == 0:
        return ""
    good, total = by_size[size]
    return f"{good / total:.6f}"


def build_context(config: TrainConfig, labels: tuple[str, ...],
                  questions: list[str],
                  stack: ConvStackConfig | None = None) -> ModelContext:
    uses_lstm = config.model in ("nmn+lstm", "vis+lstm")
    module_config = ModuleConfig(
        labels=labels,
        answer_rep_size=config.fused_rep_size if config.model == "nmn+lstm" else None,
    )
    lstm = None
    if uses_lstm:
        lstm = LstmConfig(vocabulary=build_vocabulary(questions),
                          embedding_size=config.lstm_embed,
                          hidden_size=config.lstm_hidden)
    store = ParameterStore(seed=config.seed)
    return ModelContext(config.model, store, module_config,
                        stack or ConvStackConfig(), lstm)


def fit_examples(examples: list[TrainExample], config: TrainConfig,
                 log=None, context: ModelContext | None = None) -> FitResult:
    """Train a model on in-memory examples; returns the best-validation state."""
    if not examples:
        raise ValueError("no training examples")
    if config.exclude_size is not None:
        examples = [e for e in examples if e.layout_size != config.exclude_size]
        if not examples:
            raise ValueError("exclude_size filtered out every training example")
    labels = tuple(sorted({e.answer for e in examples}))
    if context is None:
        context = build_context(config, labels, [e.question for e in examples])
    elif context.labels != labels:
        raise ModelError(f"context labels {context.labels} do not match "
                         f"the training answers {labels}")
    label_index = {label: i for i, label in enumerate(labels)}
    result = FitResult(context=context)

    if config.model == "majority":
        counts = np.array([sum(1 for e in examples if e.answer == label)
                           for label in labels], dtype=np.float64)
        prior = counts / counts.sum()
        context.store.set_value(MAJORITY_PARAM, prior)
        accuracy = float(counts.max() / counts.sum())
        result.metrics_rows.append(["1", "val", "", f"{accuracy:.6f}", "", "", ""])
        result.best_val_accuracy = accuracy
        result.best_epoch = 1
        return result

    rng = np.random.default_rng(named_seed(config.seed, "train"))
    n_val = max(1, int(round(config.val_fraction * len(examples))))
    val_pick = set(rng.choice(len(examples), size=n_val, replace=False).tolist())
    train_set = [e for i, e in enumerate(examples) if i not in val_pick]
    val_set = [e for i, e in enumerate(examples) if i in val_pick]

    batches = group_by_layout(train_set,
                              layout_of=lambda e: context.layout_for(e.query),
                              by_shape=config.batch_by_shape,
                              batch_size=config.batch_size)
    best = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(batches))
        losses = []
        for batch_idx in order:
            batch = batches[batch_idx]
            context.store.zero_grads()
            with Tape() as tape:
                total = None
                features = context.batch_features(batch)
                for example, feats in zip(batch, features):
                    dist = context.distribution(example, features=feats)
                    loss = ad.nll_loss(dist, label_index[example.answer])
                    total = loss if total is None else ad.add(total, loss)
                mean_loss = ad.scale(total, 1.0 / len(batch))
            touched = tape.backward(mean_loss)
            if config.clip_norm > 0:
                clip_gradients(context.store, touched, config.clip_norm)
            adadelta_step(context.store, touched, config.rho, config.eps)
            losses.append(float(mean_loss.data))
        train_loss = float(np.mean(losses))
        val_acc, val_by_size = _accuracy_by_size(context, val_set)
        result.metrics_rows.append(
            [str(epoch), "train", f"{train_loss:.6f}", "", "", "", ""])
        result.metrics_rows.append(
            [str(epoch), "val", "", f"{val_acc:.6f}",
             _size_cell(val_by_size, 4), _size_cell(val_by_size, 5),
             _size_cell(val_by_size, 6)])
        if log is not None:
            log(f"epoch {epoch}: train loss {train_loss:.4f}, "
                f"val accuracy {val_acc:.4f}")
        if best is None or val_acc > result.best_val_accuracy:
            result.best_val_accuracy = val_acc
            result.best_epoch = epoch
            best = _snapshot(context.store)
        elif config.patience > 0 and epoch - result.best_epoch >= config.patience:
            break
    if best is not None:
        _restore(context.store, best)
    return result


def train_on_dataset(data_dir: str | Path, manifest: DatasetManifest,
                     config: TrainConfig, log=None) -> FitResult:
    examples = examples_from_manifest(data_dir, manifest, "train")
    return fit_examples(examples, config, log=log)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    n_pairs: int
    overall: float
    by_size: dict[int, tuple[int, int]]
    per_question: dict[str, tuple[int, int]]
    majority_accuracy: float
    majority_label: str

    def size_accuracy(self, size: int) -> float | None:
        if size not in self.by_size or self.by_size[size][1] == 0:
            return None
        good, total = self.by_size[size]
        return good / total

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scope", "key", "pairs", "accuracy"])
        writer.writerow(["overall", "", str(self.n_pairs), f"{self.overall:.6f}"])
        for size in sorted(self.by_size):
            good, total = self.by_size[size]
            writer.writerow(["size", str(size), str(total),
                             f"{good / total:.6f}"])
        writer.writerow(["majority", self.majority_label, str(self.n_pairs),
                         f"{self.majority_accuracy:.6f}"])
        for question in sorted(self.per_question):
            good, total = self.per_question[question]
            writer.writerow(["question", question, str(total),
                             f"{good / total:.6f}"])
        return buf.getvalue()


def evaluate_model(context: ModelContext, examples: list[TrainExample],
                   train_answers: list[str]) -> EvalReport:
    """Exact-match accuracy with by-size and by-question breakdowns.

    The majority baseline predicts the most common training answer for
    every pair; it is computed from ``train_answers`` marginals.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    if not train_answers:
        raise ValueError("majority baseline needs the training answers")
    counts: dict[str, int] = {}
    for answer in train_answers:
        counts[answer] = counts.get(answer, 0) + 1
    majority_label = max(sorted(counts), key=lambda a: counts[a])
    by_size: dict[int, list[int]] = {}
    per_question: dict[str, list[int]] = {}
    correct = 0
    majority_correct = 0
    if hasattr(context, "predict_many"):
        predictions = context.predict_many(examples)
    else:
        predictions = [context.predict(e) for e in examples]
    for example, predicted in zip(examples, predictions):
        ok = predicted == example.answer
        correct += ok
        majority_correct += example.answer == majority_label
        size_bucket = by_size.setdefault(example.layout_size, [0, 0])
        size_bucket[0] += ok
        size_bucket[1] += 1
        q_bucket = per_question.setdefault(example.question, [0, 0])
        q_bucket[0] += ok
        q_bucket[1] += 1
    return EvalReport(
        n_pairs=len(examples),
        overall=correct / len(examples),
        by_size={s: (g, t) for s, (g, t) in by_size.items()},
        per_question={q: (g, t) for q, (g, t) in per_question.items()},
        majority_accuracy=majority_correct / len(examples),
        majority_label=majority_label,
    )


# ---------------------------------------------------------------------------
# attention dumps


def dump_attention(context: ModelContext, image: np.ndarray, layout: Layout,
                   out_dir: str | Path) -> tuple[list[str], np.ndarray]:
    """Write one min-max normalized PGM per attention-producing node.

    Returns the written heatmap paths and the predicted answer
    distribution. A text sidecar records the layout, each node's raw
    value range, and the distribution.
    """
    if context.kind != "nmn":
        raise ModelError("attention dumps need a plain nmn checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    network = context.network_for(layout)
    features = conv_features(image, context.store, context.stack,
                             context.module_config)
    trace: list = []
    rep = network(features, trace=trace)
    dist = ad.softmax(rep).data
    paths = []
    sidecar = [f"layout\t{layout.render()}",
               f"size\t{layout.size}", f"depth\t{layout.depth}"]
    for index, key, tensor in trace:
        raw = tensor.data
        low, high = float(raw.min()), float(raw.max())
        span = high - low
        if span > 0:
            pixels = np.round((raw - low) / span * 255.0).astype(np.uint8)
        else:
            pixels = np.zeros(raw.shape, dtype=np.uint8)
        name = f"{index:02d}_{key.module_type}_{key.instance}.pgm"
        write_pgm(out / name, pixels)
        paths.append(str(out / name))
        sidecar.append(f"node\t{index:02d}\t{key.render()}\t"
                       f"min={low:.6g}\tmax={high:.6g}")
    answers = ", ".join(f"{label}={p:.6f}"
                        for label, p in zip(context.labels, dist))
    sidecar.append(f"answer\t{answers}")
    (out / "layout.txt").write_text("\n".join(sidecar) + "\n", encoding="utf-8")
    return paths, dist


# ---------------------------------------------------------------------------
# persistence: checkpoint plus a sidecar describing the model


def save_model(context: ModelContext, path: str | Path,
               extra_meta: dict | None = None) -> None:
    path = Path(path)
    save_checkpoint(context.store, path)
    meta = {
        "model": context.kind,
        "labels": ",".join(context.labels),
        "feature_channels": str(context.module_config.feature_channels),
        "attention_height": str(context.module_config.attention_height),
        "attention_width": str(context.module_config.attention_width),
        "transform_hidden": str(context.module_config.transform_hidden),
        "answer_rep_size": str(context.module_config.answer_rep_size or ""),
        "stack_in_channels": str(context.stack.in_channels),
        "stack_channels1": str(context.stack.channels1),
        "stack_kernel1": str(context.stack.kernel1),
        "stack_pool1": str(context.stack.pool1),
        "stack_channels2": str(context.stack.channels2),
        "stack_kernel2": str(context.stack.kernel2),
        "stack_pool2_window": str(context.stack.pool2_window),
    }
    if context.lstm is not None:
        meta["lstm_embed"] = str(context.lstm.embedding_size)
        meta["lstm_hidden"] = str(context.lstm.hidden_size)
    if extra_meta:
        meta.update(extra_meta)
    meta_path = path.with_name(path.name + ".meta")
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())),
                         encoding="utf-8")
    if context.lstm is not None:
        vocab_path = path.with_name(path.name + ".vocab.tsv")
        rows = sorted(context.lstm.vocabulary.items(), key=lambda kv: kv[1])
        vocab_path.write_text(
            "".join(f"{token}\t{index}\n" for token, index in rows),
            encoding="utf-8")


def load_model(path: str | Path) -> ModelContext:
    path = Path(path)
    meta_path = path.with_name(path.name + ".meta")
    if not meta_path.exists():
        raise ModelError(f"missing model metadata {meta_path}")
    meta = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key] = value
    kind = meta.get("model", "")
    if kind not in MODEL_KINDS:
        raise ModelError(f"{meta_path}: unknown model kind {kind!r}")
    labels = tuple(meta.get("labels", "").split(","))
    if not all(labels):
        raise ModelError(f"{meta_path}: bad labels entry")
    rep = meta.get("answer_rep_size", "")
    module_config = ModuleConfig(
        feature_channels=int(meta.get("feature_channels", "64")),
        attention_height=int(meta.get("attention_height", "9")),
        attention_width=int(meta.get("attention_width", "9")),
        transform_hidden=int(meta.get("transform_hidden", "32")),
        labels=labels,
        answer_rep_size=int(rep) if rep else None,
    )
    lstm = None
    if kind in ("nmn+lstm", "vis+lstm"):
        vocab_path = path.with_name(path.name + ".vocab.tsv")
        if not vocab_path.exists():
            raise ModelError(f"missing vocabulary file {vocab_path}")
        vocabulary = {}
        for line in vocab_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                token, _, index = line.partition("\t")
                vocabulary[token] = int(index)
        lstm = LstmConfig(vocabulary=vocabulary,
                          embedding_size=int(meta.get("lstm_embed", "64")),
                          hidden_size=int(meta.get("lstm_hidden", "128")))
    defaults = ConvStackConfig()
    stack = ConvStackConfig(
        in_channels=int(meta.get("stack_in_channels", defaults.in_channels)),
        channels1=int(meta.get("stack_channels1", defaults.channels1)),
        kernel1=int(meta.get("stack_kernel1", defaults.kernel1)),
        pool1=int(meta.get("stack_pool1", defaults.pool1)),
        channels2=int(meta.get("stack_channels2", defaults.channels2)),
        kernel2=int(meta.get("stack_kernel2", defaults.kernel2)),
        pool2_window=int(meta.get("stack_pool2_window", defaults.pool2_window)),
    )
    store = store_from_checkpoint(path)
    if lstm is not None and "lstm.question.embed.weight" in store:
        rows = store.get("lstm.question.embed.weight").dims[0]
        if rows != lstm.vocab_size:
            raise ModelError(
                f"vocabulary mismatch: checkpoint embeds {rows} tokens but "
                f"{path.name}.vocab.tsv lists {lstm.vocab_size}")
    return ModelContext(kind, store, module_config, stack, lstm)
