"""Training samples: MFCC windows paired with face parameters and landmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_features import MfccConfig, MfccSequence, compute_mfcc, windows_for_video
from .face_model import FaceBasis, FaceParams, expression_jacobian, landmarks_for


@dataclass
class FeatureNorm:
    """Per-coefficient standardisation fitted on training MFCC frames."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "FeatureNorm":
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, np.shape(frames)[-1])
        std = frames.std(axis=0)
        return cls(frames.mean(axis=0).astype(np.float32), np.where(std > 1e-6, std, 1.0).astype(np.float32))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)


def mouth_operator(basis: FaceBasis, s: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(J, offset)`` with mouth landmarks ``= J @ e + offset`` for fixed (s, p)."""
    J = expression_jacobian(basis, p, "mouth")
    off = landmarks_for(basis, FaceParams(s, np.zeros(basis.dim_e), p), "mouth").flat()
    return J, off


def affine_landmarks(e: np.ndarray, J: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """``J @ e + offset`` evaluated in the same operation order as the training graph,
    so a perfect prediction reproduces these landmarks bit for bit."""
    jt = np.ascontiguousarray(np.swapaxes(J[None], 1, 2))
    return (np.asarray(e, dtype=np.float64)[None, None, :] @ jt).reshape(-1) + offset


@dataclass
class SampleSet:
    """Stacked training samples; row i pairs windows[i] with its face state.

    ``landmarks[i]`` are the flat mouth landmarks of (s[i], e[i], p[i]),
    evaluated through the affine map ``jac[i] @ e + offset[i]``.
    """

    windows: np.ndarray  # (N, W, C)
    e: np.ndarray  # (N, De)
    s: np.ndarray  # (N, Ds)
    p: np.ndarray  # (N, 6)
    landmarks: np.ndarray  # (N, 2Lm)
    jac: np.ndarray  # (N, 2Lm, De)
    offset: np.ndarray  # (N, 2Lm)
    speaker: np.ndarray  # (N,)
    utterance: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, sets: list["SampleSet"]) -> "SampleSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in cls.__dataclass_fields__))


def utterance_mfcc(utt, cfg: MfccConfig | None = None) -> MfccSequence:
    return compute_mfcc(utt.audio, cfg)


def build_samples(
    basis: FaceBasis, utterances, norm: FeatureNorm, utt_offset: int = 0, stride: int = 1, mfcc: MfccConfig | None = None
) -> SampleSet:
    """One sample per (strided) video frame of every utterance."""
    parts = {f: [] for f in SampleSet.__dataclass_fields__}
    for u, utt in enumerate(utterances):
        mf = utterance_mfcc(utt, mfcc)
        frames = np.arange(0, utt.n_frames, stride)
        win = windows_for_video(mf, utt.n_frames, utt.fps)[frames]
        parts["windows"].append(norm(win))
        for t in frames:
            J, off = mouth_operator(basis, utt.identity, utt.pose[t])
            lm = affine_landmarks(utt.expression[t], J, off)
            parts["e"].append(utt.expression[t])
            parts["s"].append(utt.identity)
            parts["p"].append(utt.pose[t])
            parts["landmarks"].append(lm)
            parts["jac"].append(J)
            parts["offset"].append(off)
            parts["speaker"].append(utt.speaker_id)
            parts["utterance"].append(utt_offset + u)
    out = {}
    for f, v in parts.items():
        if f == "windows":
            out[f] = np.concatenate(v).astype(np.float32)
        else:
            arr = np.asarray(v)
            out[f] = arr.astype(np.int64) if f in ("speaker", "utterance") else arr.astype(np.float64)
    return SampleSet(**out)
