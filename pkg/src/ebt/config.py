"""Pipeline configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    # face model (full-size models use dim_s=199, dim_e=29)
    dim_s: int = 16
    dim_e: int = 8
    n_vertices: int = 64
    n_landmarks: int = 28
    # synthetic corpus
    n_speakers: int = 5
    n_phonemes: int = 8
    utterances_per_speaker: int = 6
    phonemes_per_utterance: int = 10
    heldout_per_speaker: int = 2
    target_speaker: int = 0
    source_speaker: int = 1
    footage_phonemes: int = 30
    drive_phonemes: int = 20
    frame_size: int = 96
    fps: float = 25.0
    sample_rate: int = 16000
    # audio features
    n_ceps: int = 13
    n_mels: int = 26
    sample_stride: int = 2
    # identity removal / classifier
    k: int = 4
    id_hidden: int = 32
    clf_hidden: int = 32
    clf_epochs: int = 15
    id_epochs: int = 2
    id_lr: float = 3e-3
    joint_id_lr: float = 3e-4
    alternate: bool = False
    use_id_removal: bool = True
    # expression regressor
    a2e_hidden: int = 64
    a2e_epochs: int = 20
    a2e_lr: float = 3e-3
    w_norm: float = 0.01
    w_trans: float = 1.0
    # completion network and compositing
    w_stack: int = 7
    crop: int = 32
    render_width: int = 16
    render_epochs: int = 60
    render_lr: float = 2e-3
    sigma_h: float = 1.5
    erode_r: int = 1
    sigma_m: float = 1.0
    w_tv: float = 0.1
    # retiming
    gamma1: float = 1.0
    gamma2: float = 1.0
    kappa: float = -1.0  # negative: calibrate from the data
    c_hold: float = 0.1
    c_skip: float = 0.1
    # landmark smoothing and deflicker
    d_th: float = 3.0
    smooth_s: float = 0.5
    deflicker_rho: float = 1.0
    flow_block: int = 8
    flow_radius: int = 4

    def __post_init__(self):
        positive = [
            "dim_s", "dim_e", "n_vertices", "n_speakers", "n_phonemes", "utterances_per_speaker",
            "phonemes_per_utterance", "footage_phonemes", "drive_phonemes", "fps", "sample_rate",
            "n_ceps", "n_mels", "sample_stride", "k", "id_hidden", "clf_hidden", "a2e_hidden",
            "w_stack", "crop", "render_width", "sigma_h", "d_th", "smooth_s", "deflicker_rho",
            "flow_block", "id_lr", "joint_id_lr", "a2e_lr", "render_lr",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = [
            "heldout_per_speaker", "clf_epochs", "id_epochs", "a2e_epochs", "render_epochs", "erode_r",
            "sigma_m", "w_tv", "gamma1", "gamma2", "c_hold", "c_skip", "flow_radius", "w_norm", "w_trans",
        ]
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.n_speakers < 2:
            raise ConfigError("need at least two speakers")
        if not 12 <= self.n_landmarks <= self.n_vertices:
            raise ConfigError("need 12 <= n_landmarks <= n_vertices")
        if not (0 <= self.target_speaker < self.n_speakers and 0 <= self.source_speaker < self.n_speakers):
            raise ConfigError("target/source speaker out of range")
        if self.frame_size < 64:
            raise ConfigError("frame_size must be at least 64")
        if self.crop % 4 or self.crop + 2 > self.frame_size:
            raise ConfigError("crop must be a multiple of 4 and fit inside the frame")
        if self.n_ceps > self.n_mels:
            raise ConfigError("n_ceps cannot exceed n_mels")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    def replace(self, **kw) -> "PipelineConfig":
        return PipelineConfig(**{**asdict(self), **kw})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse(name: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = asdict(base or PipelineConfig())
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse(key, types[key], raw)
    return PipelineConfig(**values)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)
