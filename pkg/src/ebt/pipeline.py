"""Project layout, stage bookkeeping and the pipeline commands.

A project directory holds everything one run produces::

    manifest.json            stage flags, produced files, config snapshot
    synth/world.json         phoneme and speaker definitions
    train/<utt>/             audio.wav, params.txt, blink.txt, phonemes.txt
    footage/                 frames/NNNNN.ppm, landmarks.txt, params.txt, blink.txt, audio.wav
    drive/                   source.wav, truth_expression.txt, speaker.txt
    fit/                     params.txt, rmse.txt
    models/                  *.ebtm
    output/                  raw/, frames/, plan.txt, landmarks.txt, expression.txt, report.*

Every command checks the flags of the stages it reads from and fails with
:class:`MissingStageError` when one has not run.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import audio2exp as a2e_mod
from . import id_removal as idr
from . import render_compose as rc
from .audio_features import AudioClip, MfccConfig, compute_mfcc, frame_energy, load_wav, save_wav, windows_for_video
from .config import ConfigError, PipelineConfig
from .corpus import FeatureNorm, SampleSet, build_samples
from .face_model import FaceBasis, FaceParams, LandmarkSet, fit_params, landmarks_for
from .metrics import EvalReport, e_ldmk, evaluate
from .raster import load_ppm, save_ppm
from .storage import (
    basis_from_tensors,
    basis_tensors,
    load_landmarks,
    load_model,
    load_rows,
    load_tensors,
    quantize_basis,
    save_landmarks,
    save_model,
    save_rows,
    save_tensors,
)
from .synth_data import (
    PhonemeDef,
    SpeakerProfile,
    Utterance,
    gen_face_basis,
    gen_phonemes,
    gen_speakers,
    gen_utterance,
    oracle_expression,
    random_phonemes,
    render_footage,
    render_frame,
    neutral_mouth_area,
)
from .temporal import FootageFeatures, RetimePlan, RetimeWeights, deflicker_sequence, retime_dp, smooth_track
from .tensor import ParamStore, make_rng

log = logging.getLogger(__name__)

STAGES = ("synth", "fitface", "train-id", "train-a2e", "train-render", "drive", "post", "eval")
REQUIRES = {
    "synth": (),
    "fitface": ("synth",),
    "train-id": ("synth",),
    "train-a2e": ("train-id",),
    "train-render": ("synth",),
    "drive": ("fitface", "train-a2e", "train-render"),
    "post": ("drive",),
    "eval": ("post",),
}
TRAINING = ("train-id", "train-a2e", "train-render")
MANIFEST = "manifest.json"
FORMAT = 1


class MissingStageError(RuntimeError):
    pass


def downstream(stage: str) -> list[str]:
    """Stages that (transitively) read the outputs of ``stage``."""
    out: list[str] = []
    for s in STAGES:
        if any(d == stage or d in out for d in REQUIRES[s]):
            out.append(s)
    return out


def worker_count() -> int:
    raw = os.environ.get("EBT_THREADS", "")
    try:
        cap = int(raw) if raw else os.cpu_count() or 1
    except ValueError:
        raise ConfigError(f"EBT_THREADS must be an integer, got {raw!r}") from None
    return max(1, cap)


def _map(fn, items) -> list:
    """Order-preserving map over a worker pool capped by ``EBT_THREADS``."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# project and manifest


class Project:
    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest

    @property
    def config(self) -> PipelineConfig:
        return PipelineConfig(**self.manifest["config"])

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def done(self, stage: str) -> bool:
        return bool(self.manifest["stages"].get(stage))

    def require(self, stage: str) -> None:
        for dep in REQUIRES[stage]:
            if not self.done(dep):
                raise MissingStageError(f"'{stage}' needs stage '{dep}' to have run first")
            missing = [f for f in self.manifest["files"].get(dep, []) if not self.path(f).exists()]
            if missing:
                raise MissingStageError(f"stage '{dep}' is marked done but {missing[0]} is missing")

    def complete(self, stage: str, files: list[str]) -> None:
        for f in files:
            if not self.path(f).exists():
                raise FileNotFoundError(f"stage '{stage}' did not produce {f}")
        self.manifest["stages"][stage] = True
        self.manifest["files"][stage] = sorted(files)
        for s in downstream(stage):
            self.manifest["stages"][s] = False
            self.manifest["files"].pop(s, None)
        self.save()

    def save(self) -> None:
        tmp = self.path(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.path(MANIFEST))

    @classmethod
    def create(cls, root, config: PipelineConfig) -> "Project":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": FORMAT,
            "config": asdict(config),
            "stages": {s: False for s in STAGES},
            "files": {},
        }
        proj = cls(root, manifest)
        proj.save()
        return proj

    @classmethod
    def open(cls, root) -> "Project":
        path = Path(root) / MANIFEST
        if not path.exists():
            raise MissingStageError(f"{root} is not a project (no {MANIFEST}); run 'synth' first")
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: corrupt manifest ({exc})") from None
        if manifest.get("format") != FORMAT:
            raise ConfigError(f"{path}: unsupported manifest format {manifest.get('format')}")
        try:
            PipelineConfig(**manifest["config"])
        except TypeError as exc:
            raise ConfigError(f"{path}: bad config snapshot ({exc})") from None
        return cls(root, manifest)

    def training_started(self) -> bool:
        return any(self.done(s) for s in TRAINING)


def open_project(root, config: PipelineConfig | None = None) -> Project:
    """Open an existing project; ``config`` (if given) must equal the snapshot."""
    proj = Project.open(root)
    if config is not None and asdict(config) != proj.manifest["config"]:
        diff = sorted(k for k, v in asdict(config).items() if proj.manifest["config"].get(k) != v)
        raise ConfigError(f"config differs from the project snapshot in: {', '.join(diff)}")
    return proj


# ---------------------------------------------------------------------------
# world definitions (phonemes, speakers)


def _jsonable(obj) -> dict:
    return {k: v.tolist() if isinstance(v, np.ndarray) else v for k, v in asdict(obj).items()}


def world_to_json(basis_dims: tuple[int, int], phonemes: list[PhonemeDef], speakers: list[SpeakerProfile]) -> str:
    data = {
        "dim_s": basis_dims[0],
        "dim_e": basis_dims[1],
        "phonemes": [_jsonable(p) for p in phonemes],
        "speakers": [_jsonable(s) for s in speakers],
    }
    return json.dumps(data, indent=1)


def world_from_json(text: str) -> tuple[list[PhonemeDef], list[SpeakerProfile]]:
    data = json.loads(text)
    arrays = {"expression", "freqs", "amps", "timbre", "identity"}
    build = lambda cls, d: cls(**{k: np.array(v) if k in arrays else v for k, v in d.items()})  # noqa: E731
    return [build(PhonemeDef, p) for p in data["phonemes"]], [build(SpeakerProfile, s) for s in data["speakers"]]


def _utterance_seed(cfg: PipelineConfig, speaker: int, index: int) -> int:
    return cfg.seed * 100_003 + 1000 * speaker + index


def _mfcc_config(cfg: PipelineConfig) -> MfccConfig:
    return MfccConfig(sample_rate=cfg.sample_rate, n_mels=cfg.n_mels, n_ceps=cfg.n_ceps)


def _save_utterance(folder: Path, utt: Utterance) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    save_wav(folder / "audio.wav", utt.audio)
    save_rows(folder / "params.txt", np.hstack([np.tile(utt.identity, (utt.n_frames, 1)), utt.expression, utt.pose]))
    save_rows(folder / "blink.txt", utt.blink[:, None])
    (folder / "phonemes.txt").write_text(" ".join(utt.phonemes) + "\n")
    (folder / "speaker.txt").write_text(f"{utt.speaker_id}\n")


def _load_utterance(folder: Path, cfg: PipelineConfig) -> Utterance:
    audio = load_wav(folder / "audio.wav")
    rows = load_rows(folder / "params.txt", cfg.dim_s + cfg.dim_e + 6)
    blink = load_rows(folder / "blink.txt", 1)[:, 0]
    ds, de = cfg.dim_s, cfg.dim_e
    return Utterance(
        (folder / "phonemes.txt").read_text().split(),
        audio,
        rows[:, ds : ds + de],
        rows[:, ds + de :],
        blink,
        rows[0, :ds],
        cfg.fps,
        int((folder / "speaker.txt").read_text()),
    )


def load_basis(proj: Project) -> FaceBasis:
    basis = basis_from_tensors(load_tensors(proj.path("models", "basis.ebtm")))
    cfg = proj.config
    if (basis.dim_s, basis.dim_e, basis.n_landmarks) != (cfg.dim_s, cfg.dim_e, cfg.n_landmarks):
        raise ConfigError(
            f"face basis dims ({basis.dim_s}, {basis.dim_e}, {basis.n_landmarks}) do not match the config "
            f"({cfg.dim_s}, {cfg.dim_e}, {cfg.n_landmarks})"
        )
    return basis


def load_world(proj: Project) -> tuple[list[PhonemeDef], list[SpeakerProfile]]:
    return world_from_json(proj.path("synth", "world.json").read_text())


def _rel(proj: Project, path: Path) -> str:
    return str(Path(path).relative_to(proj.root))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(root, config: PipelineConfig) -> Project:
    """Generate the face model, the training corpus, the target footage and the driving audio."""
    root = Path(root)
    if (root / MANIFEST).exists():
        old = Project.open(root)
        if old.training_started() and asdict(config) != old.manifest["config"]:
            raise ConfigError("the config snapshot is frozen once training has started; use a new project")
    proj = Project.create(root, config)
    cfg = config
    files: list[Path] = []
    basis = quantize_basis(gen_face_basis(cfg.seed, cfg.n_vertices, cfg.dim_s, cfg.dim_e, cfg.n_landmarks))
    proj.path("models").mkdir(exist_ok=True)
    save_tensors(proj.path("models", "basis.ebtm"), basis_tensors(basis))
    files.append(proj.path("models", "basis.ebtm"))
    phonemes = gen_phonemes(cfg.seed + 1, basis, cfg.n_phonemes)
    speakers = gen_speakers(cfg.seed + 2, basis, cfg.n_speakers)
    proj.path("synth").mkdir(exist_ok=True)
    proj.path("synth", "world.json").write_text(world_to_json((cfg.dim_s, cfg.dim_e), phonemes, speakers))
    files.append(proj.path("synth", "world.json"))

    rng = make_rng(cfg.seed + 3)
    dims = (cfg.frame_size, cfg.frame_size)
    per = cfg.utterances_per_speaker + cfg.heldout_per_speaker
    for spk in speakers:
        for k in range(per):
            seq = random_phonemes(rng, phonemes, cfg.phonemes_per_utterance)
            utt = gen_utterance(
                spk, seq, phonemes, cfg.fps, cfg.sample_rate, _utterance_seed(cfg, spk.speaker_id, k), dims=dims
            )
            split = "train" if k < cfg.utterances_per_speaker else "heldout"
            folder = proj.path(split, f"spk{spk.speaker_id}_utt{k:02d}")
            _save_utterance(folder, utt)
            files.append(folder / "audio.wav")

    # target footage (speaker A) with rendered frames
    target = speakers[cfg.target_speaker]
    seq = random_phonemes(rng, phonemes, cfg.footage_phonemes)
    utt = gen_utterance(target, seq, phonemes, cfg.fps, cfg.sample_rate, _utterance_seed(cfg, cfg.target_speaker, 900), dims=dims)
    frames, lms, _ = render_footage(basis, utt, dims)
    fdir = proj.path("footage")
    _save_utterance(fdir, utt)
    (fdir / "frames").mkdir(exist_ok=True)
    for t, img in enumerate(frames):
        save_ppm(fdir / "frames" / f"{t:05d}.ppm", img)
    save_landmarks(fdir / "landmarks.txt", lms)
    files += [fdir / "landmarks.txt", fdir / "params.txt", fdir / "blink.txt"]

    # driving audio (speaker B) and its ground truth
    source = speakers[cfg.source_speaker]
    seq = random_phonemes(rng, phonemes, cfg.drive_phonemes)
    drv = gen_utterance(source, seq, phonemes, cfg.fps, cfg.sample_rate, _utterance_seed(cfg, cfg.source_speaker, 901), dims=dims)
    ddir = proj.path("drive")
    ddir.mkdir(exist_ok=True)
    save_wav(ddir / "source.wav", drv.audio)
    save_rows(ddir / "truth_expression.txt", drv.expression)
    (ddir / "speaker.txt").write_text(f"{cfg.source_speaker}\n")
    files += [ddir / "source.wav", ddir / "truth_expression.txt"]
    proj.complete("synth", [_rel(proj, f) for f in files])
    return proj


def footage_frame_paths(proj: Project) -> list[Path]:
    paths = sorted(proj.path("footage", "frames").glob("*.ppm"))
    if not paths:
        raise FileNotFoundError("footage/frames holds no PPM frames")
    return paths


def load_footage(proj: Project) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames (M, H, W, 3), landmarks (M, L, 2) and blink (M,)."""
    cfg = proj.config
    frames = np.stack([load_ppm(p) for p in footage_frame_paths(proj)])
    lms = load_landmarks(proj.path("footage", "landmarks.txt"), cfg.n_landmarks)
    blink_path = proj.path("footage", "blink.txt")
    blink = load_rows(blink_path, 1)[:, 0] if blink_path.exists() else np.zeros(len(frames))
    if not (len(frames) == len(lms) == len(blink)):
        raise ValueError(f"footage has {len(frames)} frames, {len(lms)} landmark rows and {len(blink)} blink values")
    return frames, lms, blink


FOOTAGE_STAGES = ("fitface", "train-render", "drive", "post", "eval")


def footage_is_external(proj: Project) -> bool:
    return proj.manifest.get("footage") == "external"


def cmd_ingest(proj: Project, frames_dir, landmarks_path, blink_path=None) -> int:
    """Replace the project's target footage with externally prepared data.

    ``frames_dir`` holds P6 frames (read in sorted file-name order),
    ``landmarks_path`` one ``x0 y0 x1 y1 ...`` row per frame in the face
    model's landmark order, ``blink_path`` optionally one value per frame.
    Stages that read the footage are reset.  Returns the frame count.
    """
    proj.require("fitface")
    cfg = proj.config
    src = sorted(Path(frames_dir).glob("*.ppm"))
    if not src:
        raise FileNotFoundError(f"{frames_dir} holds no .ppm frames")
    frames = [load_ppm(p) for p in src]
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError("ingested frames differ in size")
    if frames[0].shape[0] < cfg.crop or frames[0].shape[1] < cfg.crop:
        raise ConfigError(f"frames are {frames[0].shape[:2]}, smaller than the {cfg.crop}px mouth crop")
    lms = load_landmarks(landmarks_path, cfg.n_landmarks)
    blink = load_rows(blink_path, 1)[:, 0] if blink_path else np.zeros(len(frames))
    if not (len(frames) == len(lms) == len(blink)):
        raise ValueError(f"{len(frames)} frames, {len(lms)} landmark rows and {len(blink)} blink values")

    fdir = proj.path("footage")
    (fdir / "frames").mkdir(parents=True, exist_ok=True)
    for old in list((fdir / "frames").glob("*.ppm")) + [fdir / n for n in ("params.txt", "audio.wav", "phonemes.txt", "speaker.txt")]:
        old.unlink(missing_ok=True)
    for t, img in enumerate(frames):
        save_ppm(fdir / "frames" / f"{t:05d}.ppm", img)
    save_landmarks(fdir / "landmarks.txt", lms)
    save_rows(fdir / "blink.txt", blink[:, None])

    proj.manifest["footage"] = "external"
    proj.manifest["files"]["synth"] = [f for f in proj.manifest["files"].get("synth", []) if not f.startswith("footage/")]
    proj.manifest["files"]["synth"] += ["footage/landmarks.txt", "footage/blink.txt"]
    for s in FOOTAGE_STAGES:
        proj.manifest["stages"][s] = False
        proj.manifest["files"].pop(s, None)
    proj.save()
    log.info("ingest: %d frames of %dx%d", len(frames), frames[0].shape[1], frames[0].shape[0])
    return len(frames)


# ---------------------------------------------------------------------------
# fitface


def cmd_fitface(proj: Project) -> np.ndarray:
    """Fit (s, e, p) to every footage frame's landmarks; returns the (M, Ds+De+6) rows."""
    proj.require("fitface")
    basis = load_basis(proj)
    lms = load_landmarks(proj.path("footage", "landmarks.txt"), proj.config.n_landmarks)

    def fit_one(points):
        params, report = fit_params(LandmarkSet(points), basis)
        return params.vector(), report.rmse

    results = _map(fit_one, lms)
    rows = np.stack([r[0] for r in results])
    rmse = np.array([r[1] for r in results])
    proj.path("fit").mkdir(exist_ok=True)
    save_rows(proj.path("fit", "params.txt"), rows)
    save_rows(proj.path("fit", "rmse.txt"), rmse[:, None])
    log.info("fitface: %d frames, mean RMSE %.4f px", len(rows), rmse.mean())
    proj.complete("fitface", ["fit/params.txt", "fit/rmse.txt"])
    return rows


def load_fit(proj: Project) -> list[FaceParams]:
    cfg = proj.config
    rows = load_rows(proj.path("fit", "params.txt"), cfg.dim_s + cfg.dim_e + 6)
    return [FaceParams.from_vector(r, cfg.dim_s, cfg.dim_e) for r in rows]


# ---------------------------------------------------------------------------
# training corpus


def load_utterances(proj: Project, split: str) -> list[Utterance]:
    folders = sorted(p for p in proj.path(split).iterdir() if p.is_dir()) if proj.path(split).exists() else []
    return [_load_utterance(f, proj.config) for f in folders]


def _mfcc_frames(utts: list[Utterance], cfg: PipelineConfig) -> np.ndarray:
    mc = _mfcc_config(cfg)
    return np.concatenate([compute_mfcc(u.audio, mc).frames for u in utts])


def load_feature_norm(proj: Project) -> FeatureNorm:
    t = load_tensors(proj.path("models", "features.ebtm"))
    norm = FeatureNorm(t["feat/mean"], t["feat/std"])
    if norm.mean.shape != (proj.config.n_ceps,):
        raise ConfigError(f"feature statistics have {norm.mean.shape[0]} coefficients, config says {proj.config.n_ceps}")
    return norm


def training_samples(proj: Project, basis: FaceBasis, norm: FeatureNorm, split: str = "train") -> SampleSet:
    cfg = proj.config
    utts = load_utterances(proj, split)
    if not utts:
        raise FileNotFoundError(f"no {split} utterances in {proj.path(split)}")
    offset = 0 if split == "train" else 100_000
    return build_samples(basis, utts, norm, utt_offset=offset, stride=cfg.sample_stride, mfcc=_mfcc_config(cfg))


# ---------------------------------------------------------------------------
# train-id


def _check_store(store: ParamStore, expected: dict[str, tuple[int, ...]], what: str) -> None:
    for name, shape in expected.items():
        if name not in store:
            raise ConfigError(f"{what}: tensor {name} missing")
        if store[name].shape != shape:
            raise ConfigError(f"{what}: {name} has shape {store[name].shape}, config expects {shape}")


def load_classifier(proj: Project) -> idr.SpeakerClassifier:
    cfg = proj.config
    store = load_model(proj.path("models", "classifier.ebtm"))
    _check_store(store, {f"{idr.SPK_PREFIX}/fc/w": (cfg.clf_hidden, cfg.n_speakers)}, "classifier")
    return idr.SpeakerClassifier(store, cfg.n_speakers, cfg.n_ceps, cfg.clf_hidden)


def load_id_model(proj: Project, name: str = "idrm.ebtm") -> idr.IdRemovalModel:
    cfg = proj.config
    store = load_model(proj.path("models", name))
    expected = {f"{idr.ID_PREFIX}/components/{j}": (cfg.n_ceps, cfg.n_ceps + 1) for j in range(cfg.k)}
    expected[f"{idr.ID_PREFIX}/fc/w"] = (cfg.id_hidden, cfg.k)
    _check_store(store, expected, "identity-removal model")
    return idr.IdRemovalModel(store, cfg.k, cfg.n_ceps, cfg.id_hidden)


def cmd_train_id(proj: Project) -> dict[str, float]:
    """Fit feature statistics, pretrain the speaker classifier, train the identity-removal transform."""
    proj.require("train-id")
    cfg = proj.config
    basis = load_basis(proj)
    train = load_utterances(proj, "train")
    norm = FeatureNorm.fit(_mfcc_frames(train, cfg))
    save_tensors(proj.path("models", "features.ebtm"), {"feat/mean": norm.mean, "feat/std": norm.std})
    samples = training_samples(proj, basis, norm)
    clf, rep = idr.pretrain_classifier(
        samples.windows, samples.speaker, cfg.n_speakers, seed=cfg.seed + 10, epochs=cfg.clf_epochs, hidden=cfg.clf_hidden
    )
    save_model(clf.store, proj.path("models", "classifier.ebtm"))
    stats = {"classifier_train_acc": rep.train_accuracy, "classifier_holdout_acc": rep.heldout_accuracy}
    model = idr.init_id_removal(cfg.seed + 11, cfg.n_ceps, cfg.k, cfg.id_hidden)
    if cfg.use_id_removal:
        idr.train_id_removal(
            model, clf, samples.windows, cfg.id_epochs, cfg.id_lr, seed=cfg.seed + 12,
            labels=samples.speaker, alternate=cfg.alternate,
        )
        if cfg.alternate:  # keep the classifier the transform was trained against
            save_model(clf.store, proj.path("models", "classifier.ebtm"))
    save_model(model.store, proj.path("models", "idrm.ebtm"))
    held = load_utterances(proj, "heldout")
    if held:
        hs = training_samples(proj, basis, norm, "heldout")
        stats["classifier_heldout_raw_acc"] = idr.accuracy(clf, hs.windows, hs.speaker)
        stats["classifier_heldout_transformed_acc"] = idr.accuracy(clf, idr.transform_all(model, hs.windows), hs.speaker)
    _write_stats(proj.path("models", "train_id.txt"), stats)
    proj.complete("train-id", ["models/features.ebtm", "models/classifier.ebtm", "models/idrm.ebtm", "models/train_id.txt"])
    return stats


def _write_stats(path: Path, stats: dict[str, float]) -> None:
    path.write_text("".join(f"{k}={v!r}\n" for k, v in stats.items()))


def read_stats(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


# ---------------------------------------------------------------------------
# train-a2e


def load_a2e(proj: Project) -> a2e_mod.A2EModel:
    cfg = proj.config
    store = load_model(proj.path("models", "a2e.ebtm"))
    _check_store(
        store,
        {f"{a2e_mod.A2E_PREFIX}/fc/w": (cfg.a2e_hidden, cfg.dim_e), f"{a2e_mod.INPUT_PREFIX}/mean": (cfg.n_ceps,)},
        "expression regressor",
    )
    return a2e_mod.A2EModel(store, cfg.dim_e, cfg.n_ceps, cfg.a2e_hidden)


def train_translator(
    cfg: PipelineConfig,
    samples: SampleSet,
    id_model: idr.IdRemovalModel | None,
    clf: idr.SpeakerClassifier | None,
) -> a2e_mod.A2EModel:
    """The regressor, jointly trained with ``id_model`` when one is given."""
    model = a2e_mod.init_a2e(cfg.seed + 20, cfg.dim_e, cfg.n_ceps, cfg.a2e_hidden)
    feats = idr.transform_all(id_model, samples.windows) if id_model is not None else samples.windows
    a2e_mod.fit_input_norm(model, feats)
    a2e_mod.train_joint(
        id_model, model, clf, samples, (cfg.w_norm, cfg.w_trans), cfg.a2e_epochs, cfg.a2e_lr, seed=cfg.seed + 21,
        id_lr=cfg.joint_id_lr,
    )
    return model


def cmd_train_a2e(proj: Project) -> dict[str, float]:
    proj.require("train-a2e")
    cfg = proj.config
    basis = load_basis(proj)
    norm = load_feature_norm(proj)
    samples = training_samples(proj, basis, norm)
    id_model = load_id_model(proj) if cfg.use_id_removal else None
    clf = load_classifier(proj) if cfg.use_id_removal else None
    model = train_translator(cfg, samples, id_model, clf)
    save_model(model.store, proj.path("models", "a2e.ebtm"))
    if id_model is not None:
        save_model(id_model.store, proj.path("models", "idrm_joint.ebtm"))
    else:
        save_model(idr.init_id_removal(cfg.seed + 11, cfg.n_ceps, cfg.k, cfg.id_hidden).store, proj.path("models", "idrm_joint.ebtm"))
    stats = {}
    held = load_utterances(proj, "heldout")
    if held:
        hs = training_samples(proj, basis, norm, "heldout")
        stats["heldout_e_exp"], stats["heldout_e_ldmk"] = a2e_mod.evaluate_a2e(id_model, model, hs)
    _write_stats(proj.path("models", "train_a2e.txt"), stats)
    proj.complete("train-a2e", ["models/a2e.ebtm", "models/idrm_joint.ebtm", "models/train_a2e.txt"])
    return stats


# ---------------------------------------------------------------------------
# train-render


def mouth_points(lms: np.ndarray, basis: FaceBasis) -> np.ndarray:
    return lms[..., basis.mouth, :]


def mouth_jaw_points(lms: np.ndarray, basis: FaceBasis) -> np.ndarray:
    return lms[..., np.concatenate([basis.mouth, basis.jaw]), :]


def completion_inputs(
    frames: np.ndarray,
    frame_idx: np.ndarray,
    orig_mouth: np.ndarray,
    drive_points: np.ndarray,
    drive_mouth: np.ndarray,
    t: int,
    cfg: PipelineConfig,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Input stack for output frame ``t`` and the crop origin.

    ``frame_idx[i]`` is the footage frame shown at output time i,
    ``orig_mouth`` the footage mouth landmarks, ``drive_points`` /
    ``drive_mouth`` the landmarks the output should show.  Each stack frame
    is masked over the union of its own and the wanted mouth.
    """
    dims = frames.shape[1:3]
    j = frame_idx[t]
    center = 0.5 * (orig_mouth[j].mean(axis=0) + drive_mouth[t].mean(axis=0))
    origin = rc.crop_origin(center, dims, cfg.crop)
    shift = np.array(origin, dtype=np.float64)
    rng = make_rng(cfg.seed * 7919 + t)
    crops, heats = [], []
    for i in rc.stack_indices(t, cfg.w_stack):
        ji = frame_idx[i]
        box_pts = np.concatenate([orig_mouth[ji], drive_mouth[i]]) - shift
        c = rc.crop(frames[ji], origin, cfg.crop)
        crops.append(rc.mask_mouth(c, rc.mouth_box(box_pts, (cfg.crop, cfg.crop)), rng))
        heats.append(rc.landmarks_to_heatmap(drive_points[i] - shift, (cfg.crop, cfg.crop), cfg.sigma_h))
    return rc.build_input_stack(crops, heats), origin


def render_training_set(proj: Project, basis: FaceBasis) -> tuple[np.ndarray, np.ndarray]:
    """Self-reconstruction pairs from the target footage: (N, 4W, c, c) stacks, (N, 3, c, c) targets."""
    cfg = proj.config
    frames, lms, _ = load_footage(proj)
    idx = np.arange(len(frames))
    mouth = mouth_points(lms, basis)
    points = mouth_jaw_points(lms, basis)
    stacks, targets = [], []
    for t in idx:
        stack, origin = completion_inputs(frames, idx, mouth, points, mouth, t, cfg)
        stacks.append(stack)
        targets.append(np.moveaxis(rc.crop(frames[t], origin, cfg.crop), -1, 0))
    return np.stack(stacks).astype(np.float32), np.stack(targets).astype(np.float32)


def load_completion(proj: Project, name: str = "render.ebtm") -> rc.CompletionNet:
    cfg = proj.config
    store = load_model(proj.path("models", name))
    _check_store(store, {f"{rc.NET_PREFIX}/enc1/w": (cfg.render_width, 4 * cfg.w_stack, 3, 3)}, "completion network")
    return rc.CompletionNet(store, cfg.w_stack, cfg.render_width)


def cmd_train_render(proj: Project) -> dict[str, float]:
    proj.require("train-render")
    cfg = proj.config
    basis = load_basis(proj)
    stacks, targets = render_training_set(proj, basis)
    net = rc.init_completion(cfg.seed + 30, cfg.w_stack, cfg.render_width)
    hist = rc.train_completion(net, stacks, targets, cfg.render_epochs, cfg.render_lr, seed=cfg.seed + 31, w_tv=cfg.w_tv)
    save_model(net.store, proj.path("models", "render.ebtm"))
    stats = {"final_recon": hist.recon[-1] if hist.recon else float("nan"), "final_tv": hist.tv[-1] if hist.tv else float("nan")}
    _write_stats(proj.path("models", "train_render.txt"), stats)
    proj.complete("train-render", ["models/render.ebtm", "models/train_render.txt"])
    return stats


# ---------------------------------------------------------------------------
# drive


def source_windows(clip: AudioClip, cfg: PipelineConfig, norm: FeatureNorm) -> tuple[np.ndarray, int]:
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"source audio is {clip.sample_rate} Hz, the models expect {cfg.sample_rate} Hz")
    n_out = int(np.floor(clip.duration * cfg.fps + 1e-9))
    if n_out < 1:
        raise ValueError("source audio is shorter than one video frame")
    mf = compute_mfcc(clip, _mfcc_config(cfg))
    return norm(windows_for_video(mf, n_out, cfg.fps)), n_out


def retime_weights(cfg: PipelineConfig) -> RetimeWeights:
    return RetimeWeights(cfg.gamma1, cfg.gamma2, None if cfg.kappa < 0 else cfg.kappa, cfg.c_hold, cfg.c_skip)


def drive_landmarks(
    basis: FaceBasis, fits: list[FaceParams], plan: np.ndarray, expr: np.ndarray, cfg: PipelineConfig
) -> np.ndarray:
    """Smoothed mouth+jaw landmarks (T, Lm+Lj, 2) for expressions ``expr`` on the planned frames."""
    raw = np.stack(
        [landmarks_for(basis, FaceParams(fits[j].s, e, fits[j].p), "mouth_jaw").points for j, e in zip(plan, expr)]
    )
    return smooth_track(raw, cfg.d_th, cfg.smooth_s, mouth=np.arange(basis.mouth.size))


def synthesize_frames(
    net: rc.CompletionNet,
    frames: np.ndarray,
    plan: np.ndarray,
    orig_mouth: np.ndarray,
    drive_points: np.ndarray,
    n_mouth: int,
    cfg: PipelineConfig,
) -> np.ndarray:
    """Complete the mouth region of every planned frame and composite it back."""
    drive_mouth = drive_points[:, :n_mouth]
    dims = (cfg.crop, cfg.crop)

    def one(t):
        stack, origin = completion_inputs(frames, plan, orig_mouth, drive_points, drive_mouth, t, cfg)
        pred = rc.complete(net, stack[None])[0]
        shift = np.array(origin, dtype=np.float64)
        soft = np.maximum(
            rc.mouth_soft_mask(drive_mouth[t] - shift, dims, cfg.erode_r, cfg.sigma_m),
            rc.mouth_soft_mask(orig_mouth[plan[t]] - shift, dims, cfg.erode_r, cfg.sigma_m),
        )
        return rc.composite_frame(frames[plan[t]], pred, soft, origin)

    return np.stack(_map(one, range(len(plan))))


def cmd_drive(proj: Project, source_audio=None) -> np.ndarray:
    """Drive the target footage with ``source_audio`` (default: the synthetic source clip)."""
    proj.require("drive")
    cfg = proj.config
    basis = load_basis(proj)
    source = Path(source_audio) if source_audio else proj.path("drive", "source.wav")
    clip = load_wav(source)
    norm = load_feature_norm(proj)
    windows, n_out = source_windows(clip, cfg, norm)
    id_model = load_id_model(proj, "idrm_joint.ebtm") if cfg.use_id_removal else None
    model = load_a2e(proj)
    expr = a2e_mod.predict_all(id_model, model, windows)
    if not np.all(np.isfinite(expr)):
        raise FloatingPointError("expression regressor produced non-finite output")

    frames, lms, blink = load_footage(proj)
    fits = load_fit(proj)
    if len(fits) != len(frames):
        raise ValueError(f"fit has {len(fits)} frames, footage has {len(frames)}")
    energy = frame_energy(clip, n_out, cfg.fps)
    peak = energy.max()
    audio = energy / peak if peak > 0 else energy
    plan = retime_dp(audio, FootageFeatures.from_landmarks(lms, blink), retime_weights(cfg))
    points = drive_landmarks(basis, fits, plan.indices, expr, cfg)
    net = load_completion(proj)
    out = synthesize_frames(net, frames, plan.indices, mouth_points(lms, basis), points, basis.mouth.size, cfg)

    odir = proj.path("output")
    (odir / "raw").mkdir(parents=True, exist_ok=True)
    for old in (odir / "raw").glob("*.ppm"):
        old.unlink()
    for t, img in enumerate(out):
        save_ppm(odir / "raw" / f"{t:05d}.ppm", img)
    (odir / "plan.txt").write_text(plan.to_text())
    save_landmarks(odir / "landmarks.txt", points)
    save_rows(odir / "expression.txt", expr)
    (odir / "source.txt").write_text(f"{source.resolve()}\n")
    files = ["output/plan.txt", "output/landmarks.txt", "output/expression.txt", "output/source.txt"]
    files += [f"output/raw/{t:05d}.ppm" for t in range(len(out))]
    proj.complete("drive", files)
    return out


# ---------------------------------------------------------------------------
# post


def cmd_post(proj: Project) -> np.ndarray:
    proj.require("post")
    cfg = proj.config
    basis = load_basis(proj)
    raw = np.stack([load_ppm(p) for p in sorted(proj.path("output", "raw").glob("*.ppm"))])
    n_pts = basis.mouth.size + basis.jaw.size
    points = load_landmarks(proj.path("output", "landmarks.txt"), n_pts)
    centers = points[:, : basis.mouth.size].mean(axis=1)
    out = deflicker_sequence(raw, centers, cfg.flow_block, cfg.flow_radius, cfg.deflicker_rho)
    fdir = proj.path("output", "frames")
    fdir.mkdir(parents=True, exist_ok=True)
    for old in fdir.glob("*.ppm"):
        old.unlink()
    for t, img in enumerate(out):
        save_ppm(fdir / f"{t:05d}.ppm", img)
    proj.complete("post", [f"output/frames/{t:05d}.ppm" for t in range(len(out))])
    return out


# ---------------------------------------------------------------------------
# eval


def _drove_synthetic_source(proj: Project) -> bool:
    used = Path(proj.path("output", "source.txt").read_text().strip())
    return used == proj.path("drive", "source.wav").resolve()


def untrained_expressions(proj: Project, windows: np.ndarray) -> np.ndarray:
    """Predictions of freshly initialised models (same seeds, same input statistics)."""
    cfg = proj.config
    norm_model = load_a2e(proj)
    model = a2e_mod.init_a2e(cfg.seed + 20, cfg.dim_e, cfg.n_ceps, cfg.a2e_hidden)
    for name in (f"{a2e_mod.INPUT_PREFIX}/mean", f"{a2e_mod.INPUT_PREFIX}/inv_std"):
        model.store.replace(name, norm_model.store[name].data)
    id_model = idr.init_id_removal(cfg.seed + 11, cfg.n_ceps, cfg.k, cfg.id_hidden) if cfg.use_id_removal else None
    return a2e_mod.predict_all(id_model, model, windows)


def cmd_eval(proj: Project) -> EvalReport | None:
    """Score the driven output against the synthetic ground truth; ``None`` if there is none."""
    proj.require("eval")
    if not _drove_synthetic_source(proj):
        log.warning("eval: the output was driven by external audio; no ground truth to compare with")
        for name in ("report.txt", "report.csv", "baseline.txt"):
            proj.path("output", name).unlink(missing_ok=True)  # stale scores of an earlier drive
        proj.complete("eval", [])
        return None
    cfg = proj.config
    basis = load_basis(proj)
    phonemes, speakers = load_world(proj)
    clip = load_wav(proj.path("drive", "source.wav"))
    speaker = speakers[int(proj.path("drive", "speaker.txt").read_text())]
    truth_e = load_rows(proj.path("drive", "truth_expression.txt"), cfg.dim_e)
    oracle_e = oracle_expression(clip, speaker, phonemes, cfg.fps)
    pred_e = load_rows(proj.path("output", "expression.txt"), cfg.dim_e)
    plan = RetimePlan.from_text(proj.path("output", "plan.txt").read_text()).indices
    n_pts = basis.mouth.size + basis.jaw.size
    pred_points = load_landmarks(proj.path("output", "landmarks.txt"), n_pts)
    n = min(len(pred_e), len(oracle_e), len(truth_e))
    fits = load_fit(proj)

    oracle_l = np.stack([landmarks_for(basis, FaceParams(fits[plan[t]].s, oracle_e[t], fits[plan[t]].p), "mouth").points for t in range(n)])
    pred_l = pred_points[:n, : basis.mouth.size]

    if footage_is_external(proj):
        # no renderer for external footage, so only the parameter and landmark errors apply
        report = evaluate(pred_e[:n], truth_e[:n], pred_l, oracle_l)
    else:
        frames = np.stack([load_ppm(p) for p in sorted(proj.path("output", "frames").glob("*.ppm"))])[:n]
        footage = load_utterance_footage_truth(proj)
        dims = frames.shape[1:3]
        truth_frames = []
        for t in range(n):
            j = plan[t]
            prm = FaceParams(footage.identity, oracle_e[t], footage.pose[j])
            img, _ = render_frame(basis, prm, footage.blink[j], dims, neutral_mouth_area(basis, footage.identity, footage.pose[j]))
            truth_frames.append(img)
        report = evaluate(pred_e[:n], truth_e[:n], pred_l, oracle_l, frames, np.stack(truth_frames))

    windows, _ = source_windows(clip, cfg, load_feature_norm(proj))
    base_e = untrained_expressions(proj, windows)[:n]
    base_points = drive_landmarks(basis, fits, plan[:n], base_e, cfg)
    baseline = {
        "untrained_e_exp": float(np.mean(np.abs(base_e - truth_e[:n]))),
        "untrained_e_ldmk": e_ldmk(base_points[:, : basis.mouth.size], oracle_l),
        "oracle_e_exp": float(np.mean(np.abs(oracle_e[:n] - truth_e[:n]))),
    }
    odir = proj.path("output")
    (odir / "report.txt").write_text(report.to_text())
    (odir / "report.csv").write_text(report.csv_row("drive", header=True))
    _write_stats(odir / "baseline.txt", baseline)
    proj.complete("eval", ["output/report.txt", "output/report.csv", "output/baseline.txt"])
    return report


def load_utterance_footage_truth(proj: Project) -> Utterance:
    return _load_utterance(proj.path("footage"), proj.config)


COMMANDS = {
    "fitface": cmd_fitface,
    "train-id": cmd_train_id,
    "train-a2e": cmd_train_a2e,
    "train-render": cmd_train_render,
    "post": cmd_post,
    "eval": cmd_eval,
}


def run_all(root, config: PipelineConfig, source_audio=None) -> EvalReport | None:
    """Every stage in order on a fresh project."""
    proj = cmd_synth(root, config)
    for stage in ("fitface", "train-id", "train-a2e", "train-render"):
        COMMANDS[stage](proj)
    cmd_drive(proj, source_audio)
    cmd_post(proj)
    return cmd_eval(proj)
