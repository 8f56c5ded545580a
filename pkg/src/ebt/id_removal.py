"""Speaker-identity removal for MFCC windows.

A window ``x`` (W frames × C coefficients) is mapped frame by frame to
``x' = ([I | 0] + sum_j lambda_j Wbar_j) (x; 1)``, with one ``lambda`` per
window predicted by an LSTM.  The transform is trained so that a frozen
speaker classifier can no longer tell speakers apart (cross-entropy against
the uniform distribution).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import (
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    add,
    concat,
    make_rng,
    matmul,
    multiply,
    no_tape,
    reshape,
    softmax_cross_entropy,
    sum_,
    transpose,
)

log = logging.getLogger(__name__)

ID_PREFIX = "idrm"
SPK_PREFIX = "spk"


class TrainingError(RuntimeError):
    pass


@dataclass
class IdRemovalModel:
    store: ParamStore
    k: int
    n_ceps: int
    hidden: int

    def component(self, j: int) -> Tensor:
        return self.store[f"{ID_PREFIX}/components/{j}"]

    def param_names(self) -> list[str]:
        return self.store.names(ID_PREFIX + "/")


@dataclass
class SpeakerClassifier:
    store: ParamStore
    n_speakers: int
    n_ceps: int
    hidden: int

    def param_names(self) -> list[str]:
        return self.store.names(SPK_PREFIX + "/")


@dataclass
class ClassifierReport:
    train_accuracy: float
    heldout_accuracy: float
    history: list[float] = field(default_factory=list)


def init_id_removal(seed: int, n_ceps: int = 13, k: int = 4, hidden: int = 32, component_std: float = 0.01) -> IdRemovalModel:
    rng = make_rng(seed)
    store = ParamStore()
    for j in range(k):
        store.add(f"{ID_PREFIX}/components/{j}", rng.normal(0.0, component_std, (n_ceps, n_ceps + 1)).astype(np.float32))
    nn.init_lstm(store, f"{ID_PREFIX}/lstm", n_ceps, hidden, rng)
    nn.init_linear(store, f"{ID_PREFIX}/fc", hidden, k, rng)
    return IdRemovalModel(store, k, n_ceps, hidden)


def init_classifier(seed: int, n_speakers: int, n_ceps: int = 13, hidden: int = 32) -> SpeakerClassifier:
    rng = make_rng(seed)
    store = ParamStore()
    nn.init_lstm(store, f"{SPK_PREFIX}/lstm", n_ceps, hidden, rng)
    nn.init_linear(store, f"{SPK_PREFIX}/fc", hidden, n_speakers, rng)
    return SpeakerClassifier(store, n_speakers, n_ceps, hidden)


def _batched(x) -> tuple[Tensor, bool]:
    x = nn.as_tensor(x)
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


# ---------------------------------------------------------------------------
# transform


def infer_lambda(model: IdRemovalModel, windows) -> Tensor:
    """(B, W, C) -> (B, k); a single (W, C) window gives (k,)."""
    x, single = _batched(windows)
    h = nn.lstm(model.store, f"{ID_PREFIX}/lstm", x)
    lam = nn.linear(model.store, f"{ID_PREFIX}/fc", h)
    return reshape(lam, (model.k,)) if single else lam


def apply_transform(model: IdRemovalModel, lam, x) -> Tensor:
    """``x' = x + sum_j lam_j Wbar_j (x; 1)`` for every frame.

    ``x`` is (B, W, C) with ``lam`` (B, k), or a single (W, C) / (C,) input with
    ``lam`` of shape (k,).
    """
    x = nn.as_tensor(x)
    lam = nn.as_tensor(lam)
    orig = x.shape
    if x.data.ndim == 1:
        x = reshape(x, (1, 1, orig[0]))
    elif x.data.ndim == 2:
        x = reshape(x, (1,) + orig)
    if lam.data.ndim == 1:
        lam = reshape(lam, (1, lam.shape[0]))
    b, w, c = x.shape
    if c != model.n_ceps or lam.shape != (b, model.k):
        raise ValueError(f"apply_transform: x {orig} / lambda {lam.shape} do not match model (C={model.n_ceps}, k={model.k})")
    xbar = concat([x, Tensor(np.ones((b, w, 1), dtype=np.float32))], axis=-1)
    # (C+1, k*C): column block j holds Wbar_j^T
    wcat = concat([transpose(model.component(j)) for j in range(model.k)], axis=1)
    y = reshape(matmul(reshape(xbar, (b * w, c + 1)), wcat), (b, w, model.k, c))
    mixed = sum_(multiply(y, reshape(lam, (b, 1, model.k, 1))), axis=2)
    return reshape(add(x, mixed), orig)


def remove_identity(model: IdRemovalModel, windows) -> Tensor:
    """Infer one lambda per window and transform all of its frames."""
    x, single = _batched(windows)
    out = apply_transform(model, infer_lambda(model, x), x)
    return reshape(out, out.shape[1:]) if single else out


def transform_matrix(model: IdRemovalModel, lam) -> np.ndarray:
    """The assembled ``(C, C+1)`` matrix for one lambda vector."""
    lam = np.asarray(lam, dtype=np.float64)
    m = np.hstack([np.eye(model.n_ceps), np.zeros((model.n_ceps, 1))])
    for j in range(model.k):
        m = m + lam[j] * model.component(j).data.astype(np.float64)
    return m


# ---------------------------------------------------------------------------
# classifier


def classifier_logits(clf: SpeakerClassifier, windows) -> Tensor:
    x, single = _batched(windows)
    hs = nn.lstm(clf.store, f"{SPK_PREFIX}/lstm", x, keep_all=True)
    logits = nn.linear(clf.store, f"{SPK_PREFIX}/fc", nn.mean_over(hs))
    return reshape(logits, (clf.n_speakers,)) if single else logits


def predict_speaker(clf: SpeakerClassifier, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with no_tape():
        for i in range(0, len(windows), batch):
            out.append(np.argmax(classifier_logits(clf, windows[i : i + batch]).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(clf: SpeakerClassifier, windows: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict_speaker(clf, windows) == np.asarray(labels)))


def _one_hot(labels, n) -> Tensor:
    out = np.zeros((len(labels), n), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return Tensor(out)


def _check_loss(loss: Tensor, what: str) -> float:
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingError(f"{what}: non-finite loss {val}")
    return val


def _batches(rng, n: int, size: int):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def split_holdout(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; returns (train_idx, heldout_idx)."""
    rng = make_rng(seed)
    train, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_held = int(round(fraction * idx.size))
        held.append(idx[:n_held])
        train.append(idx[n_held:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def train_classifier_steps(clf: SpeakerClassifier, windows, labels, epochs: int, lr: float, batch: int, rng) -> list[float]:
    history = []
    names = clf.param_names()
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(rng, len(windows), batch):
            with Tape() as tape:
                loss = softmax_cross_entropy(classifier_logits(clf, windows[idx]), _one_hot(labels[idx], clf.n_speakers))
            total += _check_loss(loss, "classifier") * len(idx)
            adam_step(clf.store, tape.backward(loss).named(clf.store), lr, names=names)
        history.append(total / max(len(windows), 1))
    return history


def pretrain_classifier(
    windows: np.ndarray,
    labels: np.ndarray,
    n_speakers: int | None = None,
    seed: int = 0,
    epochs: int = 15,
    lr: float = 3e-3,
    batch: int = 32,
    holdout: float = 0.2,
    hidden: int = 32,
) -> tuple[SpeakerClassifier, ClassifierReport]:
    """Train the speaker classifier with cross-entropy on (normalised) MFCC windows."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("classifier corpus needs at least two speakers")
    n_speakers = int(labels.max()) + 1 if n_speakers is None else n_speakers
    train_idx, held_idx = split_holdout(labels, holdout, seed)
    clf = init_classifier(seed, n_speakers, windows.shape[-1], hidden)
    rng = make_rng(seed + 1)
    history = train_classifier_steps(clf, windows[train_idx], labels[train_idx], epochs, lr, batch, rng)
    train_acc = accuracy(clf, windows[train_idx], labels[train_idx])
    held_acc = accuracy(clf, windows[held_idx], labels[held_idx]) if held_idx.size else float("nan")
    log.info("speaker classifier: train acc %.3f, held-out acc %.3f", train_acc, held_acc)
    return clf, ClassifierReport(train_acc, held_acc, history)


# ---------------------------------------------------------------------------
# confusion training


def uniform_target(rows: int, n: int) -> Tensor:
    return Tensor(np.full((rows, n), 1.0 / n, dtype=np.float32))


def confusion_loss(clf: SpeakerClassifier, transformed) -> Tensor:
    """Mean over windows of ``-(1/N) sum_c log p(c | x')``; at least ``ln N``."""
    logits = classifier_logits(clf, transformed)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, clf.n_speakers))
    return softmax_cross_entropy(logits, uniform_target(logits.shape[0], clf.n_speakers))


def train_id_removal(
    model: IdRemovalModel,
    clf: SpeakerClassifier,
    windows: np.ndarray,
    epochs: int = 10,
    lr: float = 3e-3,
    batch: int = 32,
    seed: int = 0,
    labels: np.ndarray | None = None,
    alternate: bool = False,
) -> list[float]:
    """Adam on the confusion loss over the transform parameters only.

    The classifier stays frozen unless ``alternate`` is set, in which case it
    takes one cross-entropy step on the transformed batch (needs ``labels``)
    after every transform step.
    """
    if alternate and labels is None:
        raise ValueError("alternating updates need speaker labels")
    rng = make_rng(seed)
    names = model.param_names()
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(rng, len(windows), batch):
            with Tape() as tape:
                loss = confusion_loss(clf, remove_identity(model, windows[idx]))
            total += _check_loss(loss, "id removal") * len(idx)
            adam_step(model.store, tape.backward(loss).named(model.store), lr, names=names)
            if alternate:
                with no_tape():
                    moved = remove_identity(model, windows[idx]).data
                train_classifier_steps(clf, moved, np.asarray(labels)[idx], 1, lr, len(idx), rng)
        history.append(total / max(len(windows), 1))
    return history


def transform_all(model: IdRemovalModel, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    with no_tape():
        return np.concatenate(
            [remove_identity(model, windows[i : i + batch]).data for i in range(0, len(windows), batch)]
        )


def lambdas(model: IdRemovalModel, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    with no_tape():
        return np.concatenate([infer_lambda(model, windows[i : i + batch]).data for i in range(0, len(windows), batch)])
