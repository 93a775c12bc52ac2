"""Procedural action generator producing paired/solitary skeleton datasets.

Every action is a family of joint-angle trajectories on a simple kinematic
body. A class signature fixes which body parts move, how (base posture,
amplitude, frequency, phase) and is derived from ``class_seed`` only, so
train and test sets drawn with different ``seed`` values share classes.
Per-instance variation (tempo, amplitude, phase, view yaw, body size,
position, length) comes from ``seed``.

One instance is rendered twice: on the teacher schema as the high-quality
sequence and on the student schema as the low-quality one (3D schemas keep
x, y, z; 2D schemas get an orthographic front projection with a confidence
channel), the latter with additive coordinate noise and per-frame joint
dropout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .skeleton import Dataset, SkeletonSequence, build_graph

# body part -> degrees of freedom driven by the class signature
PART_DOFS = {
    0: ("lean", "nod", "bob"),
    1: ("l_flex", "l_abd", "l_elbow"),
    2: ("r_flex", "r_abd", "r_elbow"),
    3: ("lh_flex", "lh_abd", "l_knee"),
    4: ("rh_flex", "rh_abd", "r_knee"),
}
ALL_DOFS = tuple(d for dofs in PART_DOFS.values() for d in dofs)

# movement repertoires: name -> per-DOF (base, amplitude) ranges in radians (bob in metres)
ARM_STYLES = (
    # (flex base, flex amp), (abd base, abd amp), (elbow base, elbow amp)
    (((0.2, 0.0), (2.4, 0.0), (0.6, 0.6))),   # overhead wave
    (((1.4, 0.3), (0.2, 0.0), (0.8, 0.8))),   # punch / reach forward
    (((0.0, 0.9), (0.1, 0.0), (0.3, 0.2))),   # pendulum swing
    (((0.3, 0.0), (0.8, 0.7), (0.2, 0.1))),   # flap sideways
    (((1.0, 0.0), (0.4, 0.0), (1.6, 0.7))),   # drink / hand-to-mouth
)
LEG_STYLES = (
    (((0.2, 0.9), (0.0, 0.0), (0.5, 0.5))),   # kick forward
    (((0.0, 0.0), (0.3, 0.4), (0.1, 0.1))),   # side step
    (((0.6, 0.5), (0.0, 0.0), (1.2, 0.6))),   # knee raise / march
)
TORSO_STYLES = (
    (((0.3, 0.4), (0.0, 0.3), (0.0, 0.0))),   # bow
    (((0.0, 0.1), (0.0, 0.5), (0.0, 0.1))),   # nod / shake
    (((0.2, 0.2), (0.0, 0.1), (0.0, 0.12))),  # bounce / squat
)

# aliases from schema joint names to generator landmarks
LANDMARK_ALIASES = {
    "spine_base": "pelvis", "hip_center": "pelvis", "spine_mid": "spine",
    "shoulder_center": "spine_shoulder",
}


@dataclass
class SynthConfig:
    num_actions: int = 6
    samples_per_action: int = 100
    frame_length: int = 60
    teacher_schema: str = "synth16"
    student_schema: str = "coco17"
    lowq_noise_std: float = 0.05
    lowq_joint_drop: float = 0.1
    solitary_fraction: float = 0.0
    seed: int = 0
    class_seed: int = 0
    length_jitter: float = 0.2
    yaw_range: float = 0.5
    amplitude_jitter: float = 0.25
    tempo_jitter: float = 0.1
    phase_jitter: float = 0.4
    position_jitter: float = 0.1
    scale_jitter: float = 0.05

    def validate(self) -> None:
        if self.num_actions < 2:
            raise ConfigError("num_actions must be >= 2")
        if self.samples_per_action < 1 or self.frame_length < 1:
            raise ConfigError("samples_per_action and frame_length must be positive")
        if not 0.0 <= self.solitary_fraction <= 1.0:
            raise ConfigError("solitary_fraction must lie in [0, 1]")
        if self.lowq_noise_std < 0:
            raise ConfigError("lowq_noise_std must be non-negative")
        if not 0.0 <= self.lowq_joint_drop <= 1.0:
            raise ConfigError("lowq_joint_drop must lie in [0, 1]")
        if self.length_jitter < 0:
            raise ConfigError("length_jitter must be non-negative")
        if self.paired_per_action < 1:
            raise ConfigError("solitary_fraction leaves an action without paired instances")
        build_graph(self.teacher_schema)
        build_graph(self.student_schema)

    @property
    def solitary_per_action(self) -> int:
        return int(round(self.solitary_fraction * self.samples_per_action))

    @property
    def paired_per_action(self) -> int:
        return self.samples_per_action - self.solitary_per_action

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def class_signatures(num_actions: int, class_seed: int = 0) -> list:
    """Per-class dict DOF -> (base, amp, cycles, phase) plus the active part set.

    Classes 0..4 each move one body part; later classes combine a primary part
    with a second one, so they are confusable when that second part is missing.
    """
    sigs = []
    for c in range(num_actions):
        rng = np.random.default_rng([class_seed, 7919, c])
        active = {c % 5}
        if c >= 5:
            active.add((c // 5 + c + 1) % 5)
        dofs = {}
        for part, names in PART_DOFS.items():
            if part in active:
                styles = TORSO_STYLES if part == 0 else ARM_STYLES if part in (1, 2) else LEG_STYLES
                style = styles[int(rng.integers(len(styles)))]
                cycles = float(rng.choice([1.0, 1.5, 2.0, 3.0]))
                phase = float(rng.uniform(0, 2 * np.pi))
                for name, (base, amp) in zip(names, style):
                    dofs[name] = (base, amp * rng.uniform(0.85, 1.15), cycles, phase)
            else:
                for name in names:
                    dofs[name] = (0.0, 0.05 if name != "bob" else 0.0,
                                  float(rng.uniform(0.5, 1.5)), float(rng.uniform(0, 2 * np.pi)))
        sigs.append({"active": sorted(active), "dofs": dofs})
    return sigs


def _sample_angles(sig: dict, t: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> dict:
    amp_scale = 1.0 + rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter)
    tempo = 1.0 + rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter)
    dphase = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter)
    out = {}
    for name, (base, amp, cycles, phase) in sig["dofs"].items():
        out[name] = base + amp * amp_scale * np.sin(2 * np.pi * cycles * tempo * t + phase + dphase)
    return out


def _limb_dir(flex, abd, side):
    """Unit vector for a limb segment hanging down, raised forward by flex and sideways by abd."""
    return np.stack([side * np.sin(abd) * np.cos(flex), -np.cos(abd) * np.cos(flex), np.sin(flex)], axis=-1)


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def body_landmarks(ang: dict, scale: float = 1.0) -> dict:
    """Forward kinematics: landmark name -> (T, 3) body-frame positions (subject faces +z, left is +x)."""
    T = len(ang["lean"])
    lean = _rot_x(-ang["lean"])             # positive lean bends forward
    nod = _rot_x(-ang["lean"] - ang["nod"])
    pelvis = np.zeros((T, 3))
    pelvis[:, 1] = 1.0 * scale + ang["bob"]

    def torso(offset, rot=lean):
        return pelvis + np.einsum("tij,j->ti", rot, np.asarray(offset) * scale)

    lm = {"pelvis": pelvis, "spine": torso([0, 0.25, 0]), "spine_shoulder": torso([0, 0.47, 0]),
          "neck": torso([0, 0.53, 0])}
    head_base = lm["neck"]

    def head(offset):
        return head_base + np.einsum("tij,j->ti", nod, np.asarray(offset) * scale)

    lm["head"] = head([0, 0.15, 0])
    lm["nose"] = head([0, 0.12, 0.09])
    for side, tag in ((1.0, "left"), (-1.0, "right")):
        lm[f"{tag}_eye"] = head([side * 0.035, 0.15, 0.08])
        lm[f"{tag}_ear"] = head([side * 0.075, 0.13, 0.0])

    for side, tag, pre in ((1.0, "left", "l"), (-1.0, "right", "r")):
        sh = torso([side * 0.18, 0.47, 0])
        flex, abd, elb = ang[f"{pre}_flex"], ang[f"{pre}_abd"], ang[f"{pre}_elbow"]
        upper = np.einsum("tij,tj->ti", lean, _limb_dir(flex, abd, side))
        fore = np.einsum("tij,tj->ti", lean, _limb_dir(flex + elb, abd, side))
        elbow = sh + 0.28 * scale * upper
        wrist = elbow + 0.25 * scale * fore
        hand = wrist + 0.08 * scale * fore
        lm.update({f"{tag}_shoulder": sh, f"{tag}_elbow": elbow, f"{tag}_wrist": wrist, f"{tag}_hand": hand,
                   f"{tag}_hand_tip": hand + 0.06 * scale * fore,
                   f"{tag}_thumb": hand + 0.04 * scale * np.array([side * 0.7, 0.0, 0.7])})

        hip = pelvis + np.array([side * 0.1, -0.05, 0.0]) * scale
        hflex, habd, knee = ang[f"{pre}h_flex"], ang[f"{pre}h_abd"], ang[f"{pre}_knee"]
        thigh = _limb_dir(hflex, habd, side)
        shin = _limb_dir(hflex - knee, habd, side)
        kn = hip + 0.42 * scale * thigh
        an = kn + 0.40 * scale * shin
        lm.update({f"{tag}_hip": hip, f"{tag}_knee": kn, f"{tag}_ankle": an,
                   f"{tag}_foot": an + np.array([0.0, -0.05, 0.12]) * scale})
    return lm


def render(landmarks: dict, schema_id: str, yaw: float, offset: np.ndarray) -> np.ndarray:
    """Place landmarks in the world and render them on ``schema_id`` as (3, T, V, 1) float32."""
    graph = build_graph(schema_id)
    R = _rot_y(np.asarray(yaw))
    pts = np.stack([landmarks[LANDMARK_ALIASES.get(j, j)] for j in graph.joints], axis=1)  # (T,V,3)
    pts = pts @ R.T + offset
    if graph.dims == 2:
        pts = np.concatenate([pts[..., :2], np.ones_like(pts[..., :1])], axis=-1)
    return np.ascontiguousarray(pts.transpose(2, 0, 1)[..., None], dtype=np.float32)


def degrade(coords: np.ndarray, dims: int, noise_std: float, drop: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise on spatial channels plus per-frame joint dropout."""
    out = coords.copy()
    if noise_std > 0:
        out[:dims] += rng.normal(0.0, noise_std, size=out[:dims].shape).astype(np.float32)
    if drop > 0:
        lost = rng.random(out.shape[1:]) < drop
        out[:, lost] = 0
    return out


def synth_generate(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    sigs = class_signatures(cfg.num_actions, cfg.class_seed)
    student_dims = build_graph(cfg.student_schema).dims
    rng = np.random.default_rng([cfg.seed, 104729])
    paired, solitary = [], []
    for c in range(cfg.num_actions):
        for k in range(cfg.samples_per_action):
            iid = f"a{c:03d}_n{k:05d}"
            inst_rng = np.random.default_rng(rng.integers(2**63))
            T = int(round(cfg.frame_length * (1 + inst_rng.uniform(0, cfg.length_jitter))))
            t = np.arange(T) / cfg.frame_length
            ang = _sample_angles(sigs[c], t, inst_rng, cfg)
            scale = 1.0 + inst_rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
            yaw = inst_rng.uniform(-cfg.yaw_range, cfg.yaw_range)
            offset = np.array([inst_rng.uniform(-1, 1), 0.0, inst_rng.uniform(-1, 1)]) * cfg.position_jitter
            lm = body_landmarks(ang, scale)
            low = degrade(render(lm, cfg.student_schema, yaw, offset), student_dims,
                          cfg.lowq_noise_std, cfg.lowq_joint_drop, inst_rng)
            low_seq = SkeletonSequence(iid, cfg.student_schema, c, "low", low)
            if k < cfg.solitary_per_action:
                solitary.append(low_seq)
            else:
                high = render(lm, cfg.teacher_schema, yaw, offset)
                paired.append((SkeletonSequence(iid, cfg.teacher_schema, c, "high", high), low_seq))
    return Dataset(paired, solitary, cfg.num_actions)


def nearest_centroid_accuracy(seqs, frames: int) -> float:
    """Train accuracy of a nearest-centroid classifier on flattened, padded coordinates."""
    from .data import pad_or_truncate

    X = np.stack([pad_or_truncate(s, frames, 1).coords.ravel() for s in seqs]).astype(np.float64)
    y = np.array([s.label for s in seqs])
    labels = np.unique(y)
    centroids = np.stack([X[y == c].mean(0) for c in labels])
    d = ((X[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((labels[d.argmin(1)] == y).mean())
