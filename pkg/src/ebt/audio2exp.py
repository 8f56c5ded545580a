"""Audio-to-expression regression with a projected mouth-landmark constraint.

An LSTM reads a (W × C) feature window and its final state is mapped to
expression coefficients.  Training compares both the coefficients and the
mouth landmarks they produce under the ground-truth identity and pose,
``L_trans = |e_hat - e|_2 + |l_hat - l|_2``.  Joint training adds the
speaker-confusion loss of the identity-removal transform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import SampleSet, mouth_operator
from .face_model import FaceBasis
from .id_removal import IdRemovalModel, SpeakerClassifier, TrainingError, confusion_loss, remove_identity
from .metrics import e_exp, e_ldmk
from .tensor import (
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    add,
    l2,
    make_rng,
    matmul,
    mean,
    multiply,
    no_tape,
    reshape,
    scale,
    sub,
)

log = logging.getLogger(__name__)

A2E_PREFIX = "a2e"
INPUT_PREFIX = "a2e_in"


@dataclass
class A2EModel:
    store: ParamStore
    dim_e: int
    n_ceps: int
    hidden: int

    def param_names(self) -> list[str]:
        """Trainable parameters (the input statistics are excluded)."""
        return self.store.names(A2E_PREFIX + "/")


def init_a2e(seed: int, dim_e: int, n_ceps: int = 13, hidden: int = 64) -> A2EModel:
    rng = make_rng(seed)
    store = ParamStore()
    nn.init_lstm(store, f"{A2E_PREFIX}/lstm", n_ceps, hidden, rng)
    nn.init_linear(store, f"{A2E_PREFIX}/fc", hidden, dim_e, rng)
    store.add(f"{INPUT_PREFIX}/mean", np.zeros(n_ceps, dtype=np.float32))
    store.add(f"{INPUT_PREFIX}/inv_std", np.ones(n_ceps, dtype=np.float32))
    return A2EModel(store, dim_e, n_ceps, hidden)


def fit_input_norm(model: A2EModel, features: np.ndarray) -> None:
    """Standardise the regressor's inputs with statistics of ``features`` (N, W, C).

    The regressor sees whatever the identity-removal stage produces, whose
    scale can differ a lot from the raw features; the statistics are fixed
    before training starts.
    """
    flat = np.asarray(features, dtype=np.float64).reshape(-1, model.n_ceps)
    std = flat.std(axis=0)
    model.store.replace(f"{INPUT_PREFIX}/mean", flat.mean(axis=0))
    model.store.replace(f"{INPUT_PREFIX}/inv_std", 1.0 / np.where(std > 1e-6, std, 1.0))


def predict_expression(model: A2EModel, windows) -> Tensor:
    """(B, W, C) -> (B, De); a single (W, C) window gives (De,)."""
    x = nn.as_tensor(windows)
    single = x.data.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 3 or x.shape[2] != model.n_ceps:
        raise ValueError(f"predict_expression: window shape {x.shape} does not match C={model.n_ceps}")
    x = multiply(sub(x, model.store[f"{INPUT_PREFIX}/mean"]), model.store[f"{INPUT_PREFIX}/inv_std"])
    h = nn.lstm(model.store, f"{A2E_PREFIX}/lstm", x)
    e = nn.linear(model.store, f"{A2E_PREFIX}/fc", h)
    return reshape(e, (model.dim_e,)) if single else e


def project_expression(e_hat: Tensor, jac, offset) -> Tensor:
    """Batched affine landmark map ``l = J e + offset``: (B, De) -> (B, 2Lm)."""
    e_hat = nn.as_tensor(e_hat)
    jac = nn.as_tensor(jac)
    offset = nn.as_tensor(offset)
    b, de = e_hat.shape
    jt = Tensor(np.ascontiguousarray(np.swapaxes(jac.data, 1, 2)), dtype=jac.data.dtype)  # (B, De, 2Lm)
    out = matmul(reshape(e_hat, (b, 1, de)), jt)
    return add(reshape(out, (b, jt.shape[2])), offset)


def shape_landmarks(e_hat, s_gt, p_gt, basis: FaceBasis) -> Tensor:
    """Flat mouth landmarks of mesh(s_gt, e_hat) under pose p_gt, on the tape."""
    e_hat = nn.as_tensor(e_hat)
    if e_hat.shape != (basis.dim_e,):
        raise ValueError(f"shape_landmarks: expected ({basis.dim_e},) coefficients, got {e_hat.shape}")
    J, off = mouth_operator(basis, s_gt, p_gt)
    dt = e_hat.data.dtype
    out = project_expression(reshape(e_hat, (1, basis.dim_e)), Tensor(J[None], dtype=dt), Tensor(off[None], dtype=dt))
    return reshape(out, (off.shape[0],))


def trans_loss(e_hat, l_hat, e_gt, l_gt) -> Tensor:
    """``|e_hat - e_gt|_2 + |l_hat - l_gt|_2``; batched inputs average per-sample values."""
    e_hat, l_hat = nn.as_tensor(e_hat), nn.as_tensor(l_hat)
    e_gt = nn.as_tensor(e_gt, e_hat.data.dtype)
    l_gt = nn.as_tensor(l_gt, l_hat.data.dtype)
    if e_hat.shape != e_gt.shape or l_hat.shape != l_gt.shape:
        raise ValueError(f"trans_loss: shapes {e_hat.shape}/{e_gt.shape}, {l_hat.shape}/{l_gt.shape}")
    if e_hat.data.ndim == 1:
        return add(l2(sub(e_hat, e_gt)), l2(sub(l_hat, l_gt)))
    return add(mean(l2(sub(e_hat, e_gt), axis=1)), mean(l2(sub(l_hat, l_gt), axis=1)))


# ---------------------------------------------------------------------------
# training


@dataclass
class JointHistory:
    norm: list[float] = field(default_factory=list)
    trans: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)


def _features(id_model: IdRemovalModel | None, windows) -> Tensor:
    return remove_identity(id_model, windows) if id_model is not None else Tensor(windows)


def train_joint(
    id_model: IdRemovalModel | None,
    a2e: A2EModel,
    classifier: SpeakerClassifier | None,
    samples: SampleSet,
    weights: tuple[float, float] = (1.0, 1.0),
    epochs: int = 10,
    lr: float = 3e-3,
    batch: int = 32,
    seed: int = 0,
    id_lr: float | None = None,
) -> JointHistory:
    """Adam on ``w_norm * L_norm + w_trans * L_trans``.

    ``id_model=None`` trains the regressor on untransformed features.  The
    confusion term needs a classifier and is skipped when its weight is 0.
    The classifier is never updated here.  ``id_lr`` sets a separate step
    size for the transform parameters (default ``lr``).
    """
    w_norm, w_trans = weights
    use_norm = id_model is not None and classifier is not None and w_norm != 0
    rng = make_rng(seed)
    hist = JointHistory()
    for _ in range(epochs):
        sums = np.zeros(3)
        order = rng.permutation(len(samples))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            with Tape() as tape:
                x = _features(id_model, samples.windows[idx])
                e_hat = predict_expression(a2e, x)
                l_hat = project_expression(e_hat, samples.jac[idx].astype(np.float32), samples.offset[idx].astype(np.float32))
                lt = trans_loss(e_hat, l_hat, samples.e[idx], samples.landmarks[idx])
                total = scale(lt, w_trans)
                ln = None
                if use_norm:
                    ln = confusion_loss(classifier, x)
                    total = add(total, scale(ln, w_norm))
            val = total.item()
            if not np.isfinite(val):
                raise TrainingError(f"joint training: non-finite loss {val}")
            grads = tape.backward(total)
            named = grads.named(a2e.store)
            if id_model is not None:
                named.update(grads.named(id_model.store))
            adam_step(a2e.store, named, lr, names=a2e.param_names())
            if id_model is not None:
                adam_step(id_model.store, named, lr if id_lr is None else id_lr, names=id_model.param_names())
            sums += len(idx) * np.array([ln.item() if ln is not None else 0.0, lt.item(), val])
        sums /= max(len(samples), 1)
        hist.norm.append(float(sums[0]))
        hist.trans.append(float(sums[1]))
        hist.total.append(float(sums[2]))
        log.debug("joint epoch: norm %.4f trans %.4f", sums[0], sums[1])
    return hist


# ---------------------------------------------------------------------------
# inference / evaluation


def predict_all(id_model: IdRemovalModel | None, a2e: A2EModel, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with no_tape():
        for i in range(0, len(windows), batch):
            out.append(predict_expression(a2e, _features(id_model, windows[i : i + batch])).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, a2e.dim_e))


def landmarks_from(e: np.ndarray, samples: SampleSet) -> np.ndarray:
    return np.einsum("nij,nj->ni", samples.jac, e) + samples.offset


def evaluate_a2e(id_model: IdRemovalModel | None, a2e: A2EModel, samples: SampleSet) -> tuple[float, float]:
    """(E_exp, E_ldmk) on ``samples``."""
    e = predict_all(id_model, a2e, samples.windows)
    return e_exp(e, samples.e), e_ldmk(landmarks_from(e, samples), samples.landmarks)
