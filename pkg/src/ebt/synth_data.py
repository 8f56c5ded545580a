"""Deterministic synthetic faces, voices, utterances and footage.

Everything here is a stand-in for recorded data: sinusoid "phonemes" give
an exactly known audio -> expression correspondence, and a flat-shaded face
renderer gives footage whose landmarks and parameters are known.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio_features import AudioClip
from .face_model import FaceBasis, FaceParams, expression_jacobian, landmarks_for, reconstruct_mesh
from .raster import fill_ellipse, fill_polygon, is_simple_polygon, polygon_area
from .tensor import make_rng

log = logging.getLogger(__name__)

PHONEME_SECONDS = 0.2
CROSSFADE_SECONDS = 0.01
MAX_ANGLE = np.pi / 3  # ±60°
MOUTH_CENTER_Y = 0.5

SKIN = np.array([0.86, 0.68, 0.56])
EYE = np.array([0.12, 0.10, 0.10])
LIP = np.array([0.72, 0.34, 0.36])
MOUTH_DARK = np.array([0.25, 0.05, 0.08])


# ---------------------------------------------------------------------------
# face basis


def _head_z(x, y):
    return 0.8 * np.sqrt(np.clip(1.0 - (x / 0.8) ** 2 - y**2, 0.02, None))


def _landmark_layout(n_landmarks: int):
    """Mean-shape landmark positions and subset sizes (mouth ring first)."""
    n_mouth = min(12, max(6, n_landmarks // 2))
    n_jaw = min(9, n_landmarks - n_mouth)
    th = 2 * np.pi * np.arange(n_mouth) / n_mouth
    mouth = np.stack([0.26 * np.cos(th), MOUTH_CENTER_Y + 0.11 * np.sin(th)], axis=1)
    phi = np.linspace(0.15 * np.pi, 0.85 * np.pi, n_jaw) if n_jaw else np.zeros(0)
    jaw = np.stack([0.78 * np.cos(phi), 0.97 * np.sin(phi)], axis=1)
    extras = [(-0.32, -0.2), (0.32, -0.2), (-0.44, -0.2), (-0.2, -0.2), (0.2, -0.2), (0.44, -0.2), (0.0, 0.15)]
    rest = np.array(extras[: max(0, n_landmarks - n_mouth - n_jaw)], dtype=np.float64).reshape(-1, 2)
    xy = np.concatenate([mouth, jaw, rest], axis=0)
    z = _head_z(xy[:, 0], xy[:, 1])
    z[n_mouth : n_mouth + n_jaw] = 0.25  # jaw lies near the silhouette
    if rest.shape[0] == 7:
        z[-1] = 0.95  # nose tip
    return np.column_stack([xy, z]), n_mouth, n_jaw


def _monomials(coords: np.ndarray, degree: int) -> np.ndarray:
    cols = [np.ones(coords.shape[0])]
    d = coords.shape[1]

    def rec(start, deg, cur):
        if deg == 0:
            return
        for k in range(start, d):
            nxt = cur * coords[:, k]
            cols.append(nxt)
            rec(k, deg - 1, nxt)

    rec(0, degree, np.ones(coords.shape[0]))
    return np.stack(cols, axis=1)


def _field_features(verts: np.ndarray, weight: np.ndarray, coords: np.ndarray, degree: int) -> np.ndarray:
    """Smooth displacement fields: (3V, 3·n_monomials)."""
    mono = _monomials(coords, degree) * weight[:, None]
    v = verts.shape[0]
    feats = []
    for axis in range(3):
        f = np.zeros((v, 3, mono.shape[1]))
        f[:, axis, :] = mono
        feats.append(f.reshape(3 * v, -1))
    return np.concatenate(feats, axis=1)


def _orthonormal(features: np.ndarray, n: int, rng, against: np.ndarray | None = None) -> np.ndarray:
    if features.shape[1] < n:
        extra = rng.normal(size=(features.shape[0], n - features.shape[1] + 4))
        features = np.concatenate([features, extra], axis=1)
    mix = rng.normal(size=(features.shape[1], n))
    cols = features @ mix
    if against is not None:
        cols = cols - against @ (against.T @ cols)
        cols = cols - against @ (against.T @ cols)
    q, _ = np.linalg.qr(cols)
    if against is not None:
        q = q - against @ (against.T @ q)
        q, _ = np.linalg.qr(q)
    return q


def gen_face_basis(
    seed: int,
    n_vertices: int = 64,
    dim_s: int = 16,
    dim_e: int = 8,
    n_landmarks: int = 28,
    max_tries: int = 20,
) -> FaceBasis:
    """Random smooth PCA-like face model with a cyclic mouth ring.

    The expression basis is localised around the mouth; geometry fields are
    global and orthogonalised against the expression basis.  A candidate is
    rejected (and the next seed tried) when the expression-to-mouth-landmark
    map is rank deficient.
    """
    if not n_vertices >= n_landmarks >= 12:
        raise ValueError("need n_vertices >= n_landmarks >= 12")
    for attempt in range(max_tries):
        basis = _basis_candidate(seed + attempt, n_vertices, dim_s, dim_e, n_landmarks)
        J = expression_jacobian(basis, np.array([0, 0, 0, 0, 0, 1.0]))
        if np.linalg.matrix_rank(J, tol=1e-8 * np.abs(J).max()) == dim_e:
            if attempt:
                log.warning("face basis seed %d rank deficient; used seed %d", seed, seed + attempt)
            return basis
    raise RuntimeError(f"no full-rank face basis found from seed {seed} in {max_tries} tries")


def _basis_candidate(seed, n_vertices, dim_s, dim_e, n_landmarks) -> FaceBasis:
    rng = make_rng(seed)
    lm, n_mouth, n_jaw = _landmark_layout(n_landmarks)
    n_rand = n_vertices - lm.shape[0]
    xs = rng.uniform(-0.75, 0.75, n_rand)
    ys = rng.uniform(-0.9, 0.9, n_rand)
    ys = np.where((np.abs(xs) < 0.35) & (np.abs(ys - MOUTH_CENTER_Y) < 0.16), ys - 0.3, ys)
    rand = np.column_stack([xs, ys, _head_z(xs, ys)])
    verts = np.concatenate([lm, rand], axis=0)

    rel = np.column_stack([verts[:, 0] / 0.3, (verts[:, 1] - MOUTH_CENTER_Y) / 0.3])
    near = np.exp(-0.5 * np.sum(rel**2, axis=1) / 1.2**2)
    exp_feats = _field_features(verts, near, rel, degree=3)
    E = _orthonormal(exp_feats, dim_e, rng)
    geo_feats = _field_features(verts, np.ones(len(verts)), verts, degree=3)
    G = _orthonormal(geo_feats, dim_s, rng, against=E)

    return FaceBasis(
        mean_shape=verts.reshape(-1),
        geometry_basis=G,
        expression_basis=E,
        geometry_sigma=0.5 / (1.0 + np.arange(dim_s)),
        expression_sigma=0.5 / (1.0 + np.arange(dim_e)),
        landmark_indices=np.arange(n_landmarks),
        mouth=np.arange(n_mouth),
        jaw=np.arange(n_mouth, n_mouth + n_jaw),
    )


# ---------------------------------------------------------------------------
# phonemes and speakers


@dataclass
class PhonemeDef:
    symbol: str
    expression: np.ndarray
    freqs: np.ndarray  # Hz, dominant first
    amps: np.ndarray


@dataclass
class SpeakerProfile:
    """A synthetic voice.

    The spectral envelope (a tilt plus one resonance, in dB) colours every
    component of the speaker's audio, so in log-mel and cepstral terms it
    acts as a near-constant per-speaker offset.
    """

    speaker_id: int
    pitch_hz: float  # voice fundamental
    formant_scale: float
    timbre: np.ndarray  # amplitudes of the voice harmonics 1..n
    tilt_db: float  # per octave, relative to 1 kHz
    resonance_hz: float
    resonance_db: float
    jitter_seed: int
    identity: np.ndarray = field(default_factory=lambda: np.zeros(0))  # geometry coefficients

    def transform(self, freqs: np.ndarray) -> np.ndarray:
        """Where this speaker puts the phoneme tones ``freqs``."""
        return np.asarray(freqs) * self.formant_scale

    def _raw_db(self, freqs) -> np.ndarray:
        f = np.clip(np.asarray(freqs, dtype=np.float64), ENVELOPE_LO, ENVELOPE_HI)
        octaves = np.log2(f / self.resonance_hz) / RESONANCE_WIDTH
        return self.tilt_db * np.log2(f / 1000.0) + self.resonance_db * np.exp(-0.5 * octaves**2)

    def envelope_db(self, freqs) -> np.ndarray:
        """Envelope normalised to a 0 dB peak, so it never amplifies."""
        peak = self._raw_db(np.geomspace(ENVELOPE_LO, ENVELOPE_HI, 1024)).max()
        return self._raw_db(freqs) - peak

    def envelope_gain(self, freqs) -> np.ndarray:
        return 10.0 ** (self.envelope_db(freqs) / 20.0)


BASE_PITCH_HZ = 95.0
PITCH_STEP_HZ = 30.0
N_HARMONICS = 6
VOICE_AMP = 0.12  # summed harmonic amplitude
BREATH_RMS = 0.02  # envelope-shaped noise floor
RESONANCE_WIDTH = 0.35  # octaves
ENVELOPE_LO, ENVELOPE_HI = 50.0, 8000.0
SYMBOLS = ("aa", "ee", "oo", "mm", "ff", "ss", "th", "ll", "rr", "ww")


def _mouth_ok(basis: FaceBasis, e: np.ndarray) -> bool:
    lm = landmarks_for(basis, FaceParams.neutral(basis) if e is None else FaceParams(
        np.zeros(basis.dim_s), e, np.array([0, 0, 0, 0, 0, 1.0])), "mouth").points
    return is_simple_polygon(lm) and polygon_area(lm) > 0.02


def gen_phonemes(seed: int, basis: FaceBasis, n: int = 8, max_tries: int = 500) -> list[PhonemeDef]:
    """``n`` phonemes with well separated expression targets and tones.

    Dominant tones sit on a 350 Hz grid from 400 Hz; targets keep the mouth
    polygon simple for every phoneme and every pairwise blend.
    """
    if n > len(SYMBOLS):
        raise ValueError(f"at most {len(SYMBOLS)} phonemes")
    rng = make_rng(seed)
    targets: list[np.ndarray] = []
    tries = 0
    while len(targets) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place phoneme expression targets")
        cand = rng.uniform(-1.6, 1.6, basis.dim_e)
        if len(targets) == 0:
            cand *= 0.1  # a near-neutral phoneme (closed mouth)
        if any(np.linalg.norm(cand - t) < 0.5 for t in targets):
            continue
        blends = [cand] + [0.5 * (cand + t) for t in targets]
        if all(_mouth_ok(basis, b) for b in blends) and all(
            _mouth_ok(basis, (cand + 2 * t) / 3) for t in targets
        ):
            targets.append(cand)
    order = rng.permutation(n)
    out = []
    for i in range(n):
        dom = 400.0 + 350.0 * i
        k = 2 + int(rng.integers(0, 2))
        second = dom * rng.uniform(1.7, 2.6, k - 1)
        freqs = np.concatenate([[dom], second])
        amps = np.array([0.4, 0.2, 0.1][:k])
        out.append(PhonemeDef(SYMBOLS[i], targets[order[i]], freqs, amps))
    return out


def gen_speakers(seed: int, basis: FaceBasis, n: int = 5) -> list[SpeakerProfile]:
    """Profiles that differ in voice pitch, timbre, spectral envelope and a mild formant scale.

    The scale stays small enough that every phoneme tone remains nearest to
    its own unscaled value, so content is decodable without knowing the speaker.
    """
    rng = make_rng(seed)
    scales = np.linspace(0.96, 1.04, n)[rng.permutation(n)]
    tilts = np.linspace(-4.0, 4.0, n)[rng.permutation(n)]
    out = []
    for i in range(n):
        identity = np.clip(rng.normal(0.0, 0.7, basis.dim_s), -1.5, 1.5)
        timbre = rng.uniform(0.1, 1.0, N_HARMONICS)
        timbre *= VOICE_AMP / timbre.sum()
        pitch = BASE_PITCH_HZ + PITCH_STEP_HZ * i
        res_hz = 600.0 * 2.0 ** rng.uniform(0.0, 2.0)
        res_db = rng.uniform(3.0, 10.0)
        out.append(
            SpeakerProfile(
                i, pitch, float(scales[i]), timbre, float(tilts[i]), float(res_hz), float(res_db),
                int(rng.integers(1 << 31)), identity,
            )
        )
    return out


# ---------------------------------------------------------------------------
# utterances


@dataclass
class Utterance:
    phonemes: list[str]
    audio: AudioClip
    expression: np.ndarray  # (T, De) per video frame
    pose: np.ndarray  # (T, 6)
    blink: np.ndarray  # (T,)
    identity: np.ndarray  # (Ds,)
    fps: float
    speaker_id: int

    @property
    def n_frames(self) -> int:
        return self.expression.shape[0]

    def params(self, t: int) -> FaceParams:
        return FaceParams(self.identity, self.expression[t], self.pose[t])


def expression_track(targets: np.ndarray, frames_per_phoneme: int) -> np.ndarray:
    """Per-frame targets smoothed by a causal 3-frame moving average (neutral before start)."""
    raw = np.repeat(targets, frames_per_phoneme, axis=0)
    padded = np.concatenate([np.zeros((2, raw.shape[1])), raw], axis=0)
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def _synth_audio(profile, defs, seq, sample_rate, rng, jitter):
    seg = int(round(PHONEME_SECONDS * sample_rate))
    half = int(round(CROSSFADE_SECONDS * sample_rate)) // 2
    total = seg * len(seq)
    out = np.zeros(total + 2 * half)
    ramp = np.linspace(0.0, 1.0, 2 * half, endpoint=False) + 0.5 / (2 * half)
    env = np.concatenate([ramp, np.ones(seg - 2 * half), ramp[::-1]])
    jit = make_rng(profile.jitter_seed ^ int(rng.integers(1 << 31)))
    for k, sym in enumerate(seq):
        d = defs[sym]
        n = seg + 2 * half
        t = (np.arange(n) + k * seg - half) / sample_rate
        gain = jit.uniform(0.8, 1.2) if jitter else 1.0
        freqs = profile.transform(d.freqs)
        phases = rng.uniform(0, 2 * np.pi, freqs.shape[0])
        amps = d.amps * profile.envelope_gain(freqs)
        wave = sum(a * np.sin(2 * np.pi * f * t + ph) for a, f, ph in zip(amps, freqs, phases))
        out[k * seg : k * seg + n] += gain * env * wave
    out = out[half : half + total]
    t = np.arange(total) / sample_rate
    for h, a in enumerate(profile.timbre, 1):
        out += a * profile.envelope_gain(h * profile.pitch_hz) * np.sin(2 * np.pi * h * profile.pitch_hz * t)
    out += breath_noise(profile, total, sample_rate, rng)
    # land on the 16-bit grid so WAV save/load is lossless
    return np.clip(np.round(out * 32768.0), -32768, 32767) / 32768.0


def breath_noise(profile: SpeakerProfile, n: int, sample_rate: int, rng) -> np.ndarray:
    """White noise shaped by the speaker's envelope, ``BREATH_RMS`` at 0 dB gain."""
    spec = np.fft.rfft(rng.normal(0.0, BREATH_RMS, n))
    spec *= profile.envelope_gain(np.fft.rfftfreq(n, 1.0 / sample_rate))
    return np.fft.irfft(spec, n)


def _pose_walk(n, rng, dims):
    h, w = dims
    ang = np.zeros((n, 3))
    vel = np.zeros(3)
    cur = rng.normal(0, [0.05, 0.12, 0.04])
    for i in range(n):
        vel = 0.9 * vel + rng.normal(0, [0.004, 0.008, 0.003])
        cur = np.clip(cur + vel - 0.02 * cur, -MAX_ANGLE, MAX_ANGLE)
        ang[i] = cur
    trans = np.zeros((n, 2))
    tv = np.zeros(2)
    tc = rng.normal(0, 0.01 * w, 2)
    for i in range(n):
        tv = 0.9 * tv + rng.normal(0, 0.03, 2)
        tc = tc + tv - 0.03 * tc
        trans[i] = tc
    pose = np.zeros((n, 6))
    pose[:, :3] = ang
    pose[:, 3] = w / 2 + trans[:, 0]
    pose[:, 4] = h / 2 - 0.08 * h + trans[:, 1]
    pose[:, 5] = 0.4 * w
    return pose


def _blinks(n, fps, rng):
    b = np.zeros(n)
    i = int(rng.integers(0, max(1, int(fps))))
    while i < n:
        for k, v in enumerate((0.5, 1.0, 0.5)):
            if i + k < n:
                b[i + k] = v
        i += max(4, int(rng.exponential(fps / 0.3)))
    return b


def gen_utterance(
    profile: SpeakerProfile,
    phonemes: list[str],
    defs: list[PhonemeDef],
    fps: float = 25.0,
    sample_rate: int = 16000,
    seed: int = 0,
    jitter: bool = True,
    dims: tuple[int, int] = (96, 96),
    still: bool = False,
) -> Utterance:
    """Audio, expression, pose and blink tracks for a phoneme string.

    ``still`` freezes the head (frontal pose, no blinks).
    """
    table = {d.symbol: d for d in defs}
    unknown = [p for p in phonemes if p not in table]
    if unknown:
        raise KeyError(f"unknown phoneme(s) {unknown}")
    rng = make_rng(seed)
    audio = _synth_audio(profile, table, phonemes, sample_rate, rng, jitter)
    fpp = int(round(PHONEME_SECONDS * fps))
    targets = np.stack([table[p].expression for p in phonemes])
    expr = expression_track(targets, fpp)
    n = expr.shape[0]
    if still:
        pose = np.tile([0, 0, 0, dims[1] / 2, dims[0] / 2 - 0.08 * dims[0], 0.4 * dims[1]], (n, 1))
        blink = np.zeros(n)
    else:
        pose = _pose_walk(n, rng, dims)
        blink = _blinks(n, fps, rng)
    return Utterance(
        list(phonemes),
        AudioClip(audio.astype(np.float32), sample_rate),
        expr,
        pose,
        blink,
        np.asarray(profile.identity, dtype=np.float64),
        fps,
        profile.speaker_id,
    )


def random_phonemes(rng, defs: list[PhonemeDef], n: int) -> list[str]:
    syms = [d.symbol for d in defs]
    return [syms[i] for i in rng.integers(0, len(syms), n)]


# ---------------------------------------------------------------------------
# oracle


def dominant_frequency(segment: np.ndarray, sample_rate: int, gain=None) -> float:
    """Peak of the windowed spectrum above 300 Hz; ``gain(freqs)`` is divided out first."""
    x = np.asarray(segment, dtype=np.float64) * np.hanning(len(segment))
    n = 1 << int(np.ceil(np.log2(len(x) * 4)))
    spec = np.abs(np.fft.rfft(x, n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    if gain is not None:
        spec /= gain(freqs)
    spec[freqs < 300] = 0  # skip the strongest voice harmonics
    return float(freqs[np.argmax(spec)])


def classify_phoneme(segment: np.ndarray, sample_rate: int, profile: SpeakerProfile, defs: list[PhonemeDef]) -> str:
    """Nearest phoneme by dominant tone under the speaker's frequency transform."""
    f = dominant_frequency(segment, sample_rate, profile.envelope_gain)
    doms = np.array([profile.transform(d.freqs[0]) for d in defs])
    return defs[int(np.argmin(np.abs(doms - f)))].symbol


def oracle_expression(clip: AudioClip, profile: SpeakerProfile, defs: list[PhonemeDef], fps: float = 25.0) -> np.ndarray:
    """Expression track recovered from audio alone via :func:`classify_phoneme`."""
    seg = int(round(PHONEME_SECONDS * clip.sample_rate))
    n = clip.samples.shape[0] // seg
    table = {d.symbol: d for d in defs}
    margin = seg // 8
    syms = [
        classify_phoneme(clip.samples[k * seg + margin : (k + 1) * seg - margin], clip.sample_rate, profile, defs)
        for k in range(n)
    ]
    targets = np.stack([table[s].expression for s in syms])
    return expression_track(targets, int(round(PHONEME_SECONDS * fps)))


# ---------------------------------------------------------------------------
# rendering


def _background(h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    bg = np.empty((h, w, 3))
    bg[..., 0] = 0.30 + 0.25 * yy
    bg[..., 1] = 0.38 + 0.15 * xx
    bg[..., 2] = 0.52 - 0.2 * yy
    return bg


def render_frame(basis: FaceBasis, params: FaceParams, blink: float, dims: tuple[int, int], neutral_area: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat-shaded frame (H, W, 3) and its exact projected landmarks (L, 2)."""
    h, w = dims
    p = params.p
    img = _background(h, w)
    lm = landmarks_for(basis, params).points
    scale = p[5]
    head = fill_ellipse(p[3:5] + np.array([0, 0.05 * scale]), (0.8 * scale * abs(np.cos(p[1])) + 0.1 * scale, 1.0 * scale), p[2], h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    shade = 0.06 * np.sin(xx / 5.0 + p[1] * 3) * np.cos(yy / 7.0)
    img[head] = SKIN + shade[head, None]
    if blink < 0.5 and basis.n_landmarks >= 21 + 7:
        r = max(1.0, 0.07 * scale)
        eye_pos = basis.jaw[-1] + 1 if basis.jaw.size else basis.mouth[-1] + 1
        for k in (eye_pos, eye_pos + 1):
            img[fill_ellipse(lm[k], (1.6 * r, r), p[2], h, w)] = EYE
    mouth_pts = lm[basis.mouth]
    inner = fill_polygon(mouth_pts, h, w)
    openness = np.clip(polygon_area(mouth_pts) / max(neutral_area, 1e-6) - 0.8, 0.0, 1.0)
    img[inner] = (1 - openness) * LIP + openness * MOUTH_DARK
    return np.clip(img, 0, 1).astype(np.float32), lm


def neutral_mouth_area(basis: FaceBasis, identity: np.ndarray, pose: np.ndarray) -> float:
    params = FaceParams(identity, np.zeros(basis.dim_e), pose)
    return polygon_area(landmarks_for(basis, params, "mouth").points)


def render_footage(basis: FaceBasis, utt: Utterance, dims: tuple[int, int] = (96, 96)):
    """Frames (T, H, W, 3), landmarks (T, L, 2) and per-frame FaceParams."""
    if dims[0] < 64 or dims[1] < 64:
        raise ValueError("footage must be at least 64×64")
    frames, lms, params = [], [], []
    for t in range(utt.n_frames):
        prm = utt.params(t)
        area = neutral_mouth_area(basis, utt.identity, prm.p)
        img, lm = render_frame(basis, prm, utt.blink[t], dims, area)
        frames.append(img)
        lms.append(lm)
        params.append(prm)
    return np.stack(frames), np.stack(lms), params


def mesh_mouth_area(basis: FaceBasis, identity, pose) -> float:
    """Area of the mean-shape mouth (no expression) under ``pose``."""
    verts = reconstruct_mesh(basis, identity, np.zeros(basis.dim_e))
    from .face_model import project_points

    return polygon_area(project_points(verts, pose, basis.landmark_indices[basis.mouth]))
