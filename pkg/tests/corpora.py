"""Small synthetic corpora shared across tests."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ebt import pipeline
from ebt.config import PipelineConfig
from ebt.synth_data import gen_face_basis, gen_phonemes, gen_speakers, gen_utterance, random_phonemes, render_footage
from ebt.tensor import make_rng


@lru_cache(maxsize=None)
def world(seed: int = 0, n_speakers: int = 3):
    basis = gen_face_basis(seed)
    defs = gen_phonemes(seed, basis)
    return basis, defs, gen_speakers(seed, basis, n_speakers)


@lru_cache(maxsize=None)
def footage(seed: int = 0, n_phonemes: int = 4, speaker: int = 0):
    """Rendered frames (T, 96, 96, 3), landmarks (T, L, 2) and the utterance."""
    basis, defs, spk = world()
    utt = gen_utterance(spk[speaker], random_phonemes(make_rng(seed), defs, n_phonemes), defs, seed=seed)
    frames, lms, _ = render_footage(basis, utt)
    return frames, lms, utt


def completion_corpus(n: int, seed: int = 0, cfg: PipelineConfig | None = None):
    """Self-reconstruction stacks (n, 4W, c, c) and targets (n, 3, c, c) from one clip."""
    cfg = cfg or PipelineConfig()
    basis = world()[0]
    frames, lms, _ = footage(seed, n_phonemes=max(1, -(-n // 5)))
    frames, lms = frames[:n], lms[:n]
    idx = np.arange(n)
    mouth = pipeline.mouth_points(lms, basis)
    points = pipeline.mouth_jaw_points(lms, basis)
    stacks, targets = [], []
    for t in idx:
        stack, origin = pipeline.completion_inputs(frames, idx, mouth, points, mouth, t, cfg)
        stacks.append(stack)
        targets.append(np.moveaxis(frames[t, origin[1] : origin[1] + cfg.crop, origin[0] : origin[0] + cfg.crop], -1, 0))
    return np.stack(stacks).astype(np.float32), np.stack(targets).astype(np.float32)
