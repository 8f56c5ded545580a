import pytest

from ebt import pipeline
from ebt.config import PipelineConfig

TINY = dict(
    n_speakers=3, utterances_per_speaker=2, heldout_per_speaker=1, phonemes_per_utterance=6,
    footage_phonemes=6, drive_phonemes=4, frame_size=64, clf_epochs=2, id_epochs=1, a2e_epochs=2,
    render_epochs=2, a2e_hidden=16, id_hidden=8, clf_hidden=8, render_width=8, sample_stride=4,
)


@pytest.fixture(scope="session")
def tiny_config():
    """A configuration that runs every stage in a few seconds."""
    return PipelineConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_project(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    report = pipeline.run_all(root, tiny_config)
    return pipeline.open_project(root), report
