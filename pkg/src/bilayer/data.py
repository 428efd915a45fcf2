"""Dataset layout, ingestion, pair sampling and the procedural head generator.

On-disk layout::

    <root>/dataset.cfg                      key = value schema (n_keypoints, image_size, fps)
    <root>/<video_id>/frames/%05d.png       RGB frames
    <root>/<video_id>/keypoints.jsonl       {"frame": i, "points": [[x, y], ...]} per frame
    <root>/<video_id>/masks/%05d.png        optional 8-bit grayscale masks

Keypoints are stored normalized to [0, 1] relative to the frame size.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IntegrityError, ParseError


@dataclass(frozen=True)
class KeypointSet:
    """Ordered 2D landmarks for one frame, normalized to [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise IntegrityError(f"keypoints must be (N, 2), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise IntegrityError("keypoints contain non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def as_vector(self) -> np.ndarray:
        return self.points.reshape(-1)


@dataclass(frozen=True)
class HeadPose:
    """Rigid pose of the procedural head plus mouth opening."""

    tx: float = 0.0
    ty: float = 0.0
    rot: float = 0.0
    mouth: float = 0.0
    scale: float = 1.0


@dataclass
class VideoSample:
    """One annotated video: frames, keypoints and optional masks.

    Immutable after construction; loaders fan out across workers and share
    samples read-only.
    """

    video_id: str
    frames: np.ndarray          # (T, H, W, 3) float32 in [0, 1]
    keypoints: list[KeypointSet]
    masks: np.ndarray | None = None  # (T, H, W) float32 in [0, 1]
    fps: float = 25.0
    poses: list[HeadPose] | None = None  # synthetic ground truth, when known
    identity: dict | None = None

    def __post_init__(self):
        t = self.frames.shape[0]
        if len(self.keypoints) != t:
            raise IntegrityError(
                f"{self.video_id}: {t} frames but {len(self.keypoints)} keypoint sets"
            )
        if self.masks is not None and self.masks.shape[0] != t:
            raise IntegrityError(f"{self.video_id}: frame/mask count mismatch")
        ns = {k.n for k in self.keypoints}
        if len(ns) > 1:
            raise IntegrityError(f"{self.video_id}: inconsistent keypoint counts {ns}")
        if self.fps <= 0:
            raise IntegrityError("fps must be positive")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class FrameRecord:
    frame: np.ndarray
    keypoints: KeypointSet
    mask: np.ndarray | None


@dataclass(frozen=True)
class PairSample:
    source: FrameRecord
    target: FrameRecord
    video_id: str


def parse_schema(text: str, path=None) -> dict:
    """Parse the key = value schema format. Values are ints or floats."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", path, lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


def load_schema(root: Path) -> dict:
    path = Path(root) / "dataset.cfg"
    if not path.exists():
        raise ParseError("missing dataset.cfg schema file", path)
    schema = parse_schema(path.read_text(), path)
    for key in ("n_keypoints", "image_size"):
        if key not in schema:
            raise ParseError(f"schema missing required key {key!r}", path)
    return schema


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _load_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def _read_keypoints_jsonl(path: Path, n_expected: int) -> list[KeypointSet]:
    sets = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON: {exc.msg}", path, lineno) from exc
            if not isinstance(rec, dict) or "frame" not in rec or "points" not in rec:
                raise ParseError("record needs 'frame' and 'points'", path, lineno)
            if rec["frame"] != len(sets):
                raise ParseError(
                    f"frame index {rec['frame']} out of order (expected {len(sets)})",
                    path, lineno,
                )
            pts = np.asarray(rec["points"], dtype=np.float64)
            if pts.ndim != 2 or pts.shape != (n_expected, 2):
                raise ParseError(
                    f"expected {n_expected} [x, y] pairs, got shape {pts.shape}",
                    path, lineno,
                )
            try:
                sets.append(KeypointSet(pts))
            except IntegrityError as exc:
                raise ParseError(str(exc), path, lineno) from exc
    return sets


def load_dataset(root, schema: dict | None = None) -> list[VideoSample]:
    """Load every video directory under root. Videos without a keypoints
    file are rejected; missing masks are allowed."""
    root = Path(root)
    if schema is None:
        schema = load_schema(root)
    n_kp = int(schema["n_keypoints"])
    size = int(schema["image_size"])
    fps = float(schema.get("fps", 25.0))

    samples = []
    for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        kp_path = video_dir / "keypoints.jsonl"
        frames_dir = video_dir / "frames"
        if not kp_path.exists() or not frames_dir.is_dir():
            continue
        frame_paths = sorted(frames_dir.glob("*.png"))
        keypoints = _read_keypoints_jsonl(kp_path, n_kp)
        if len(frame_paths) != len(keypoints):
            raise IntegrityError(
                f"{video_dir.name}: {len(frame_paths)} frames but "
                f"{len(keypoints)} keypoint records"
            )
        frames = np.stack([_load_png(p) for p in frame_paths])
        if frames.shape[1] != size or frames.shape[2] != size:
            raise IntegrityError(
                f"{video_dir.name}: frames are {frames.shape[1]}x{frames.shape[2]}, "
                f"schema says {size}x{size}"
            )
        masks = None
        masks_dir = video_dir / "masks"
        if masks_dir.is_dir():
            mask_paths = sorted(masks_dir.glob("*.png"))
            if len(mask_paths) != len(frame_paths):
                raise IntegrityError(f"{video_dir.name}: frame/mask count mismatch")
            masks = np.stack([_load_mask_png(p) for p in mask_paths])
        samples.append(VideoSample(video_dir.name, frames, keypoints, masks, fps))
    return samples


def write_dataset(samples: list[VideoSample], root, schema: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if samples:
        first = samples[0]
        schema = schema or {
            "n_keypoints": first.keypoints[0].n,
            "image_size": first.frame_size[0],
            "fps": first.fps,
        }
        lines = [f"{k} = {v}" for k, v in schema.items()]
        (root / "dataset.cfg").write_text("\n".join(lines) + "\n")
    for sample in samples:
        vdir = root / sample.video_id
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        with open(vdir / "keypoints.jsonl", "w") as fh:
            for i, kps in enumerate(sample.keypoints):
                rec = {"frame": i, "points": [[float(x), float(y)] for x, y in kps.points]}
                fh.write(json.dumps(rec) + "\n")
        for i in range(len(sample)):
            img = Image.fromarray(
                np.rint(np.clip(sample.frames[i], 0, 1) * 255).astype(np.uint8)
            )
            img.save(vdir / "frames" / f"{i:05d}.png")
        if sample.masks is not None:
            (vdir / "masks").mkdir(exist_ok=True)
            for i in range(len(sample)):
                img = Image.fromarray(
                    np.rint(np.clip(sample.masks[i], 0, 1) * 255).astype(np.uint8)
                )
                img.save(vdir / "masks" / f"{i:05d}.png")


def sample_pair(video: VideoSample, rng: np.random.Generator) -> PairSample:
    """Uniform draw of an ordered (source, target) index pair, distinct
    whenever the video has more than one frame."""
    t = len(video)
    if t < 1:
        raise IntegrityError("cannot sample from an empty video")
    if t == 1:
        s_idx = t_idx = 0
    else:
        s_idx = int(rng.integers(t))
        t_idx = int(rng.integers(t - 1))
        if t_idx >= s_idx:
            t_idx += 1

    def record(i):
        mask = video.masks[i] if video.masks is not None else None
        return FrameRecord(video.frames[i], video.keypoints[i], mask)

    return PairSample(record(s_idx), record(t_idx), video.video_id)


# ---------------------------------------------------------------------------
# Procedural head generator
# ---------------------------------------------------------------------------

HEAD_AX, HEAD_AY = 0.62, 0.80
EYE_Y, EYE_X = -0.22, 0.26
EYE_AX, EYE_AY = 0.11, 0.07
BROW_Y = -0.40
MOUTH_Y = 0.42
MOUTH_AX = 0.22
MOUTH_BASE, MOUTH_GAIN = 0.03, 0.15
HAIR_Y = -0.50


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 4
    frames_per_video: int = 16
    image_size: int = 64
    n_keypoints: int = 68
    translate_amp: float = 0.12
    rotate_amp: float = 0.25
    mouth_amp: float = 1.0
    pattern_amp: float = 0.15
    pattern_cells: int = 12
    with_masks: bool = True
    fps: float = 25.0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.n_keypoints != 68:
            raise ConfigError("the procedural head only supports the 68-point schema")
        if self.identities < 1 or self.frames_per_video < 1:
            raise ConfigError("need at least one identity and one frame")


@dataclass(frozen=True)
class Identity:
    skin: np.ndarray        # base RGB
    hair: np.ndarray
    lip: np.ndarray
    head_scale: float
    pattern: np.ndarray     # (cells, cells) luminance detail field


def _make_identity(rng: np.random.Generator, cfg: SynthConfig) -> Identity:
    skin = np.array([0.55, 0.45, 0.38]) + rng.uniform(-0.08, 0.12, size=3)
    hair = np.array([0.16, 0.12, 0.10]) + rng.uniform(0.0, 0.15, size=3)
    lip = np.array([0.45, 0.20, 0.22]) + rng.uniform(-0.05, 0.05, size=3)
    scale = float(rng.uniform(0.82, 0.98))
    pattern = rng.uniform(-1.0, 1.0, size=(cfg.pattern_cells, cfg.pattern_cells))
    return Identity(skin, hair, lip, scale, pattern * cfg.pattern_amp)


def _sample_pattern(pattern: np.ndarray, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of the identity detail field at head coordinates."""
    cells = pattern.shape[0]
    gx = np.clip((ux + 1.0) * 0.5 * (cells - 1), 0, cells - 1)
    gy = np.clip((uy + 1.0) * 0.5 * (cells - 1), 0, cells - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, cells - 1)
    y1 = np.minimum(y0 + 1, cells - 1)
    fx = gx - x0
    fy = gy - y0
    return (
        pattern[y0, x0] * (1 - fx) * (1 - fy)
        + pattern[y0, x1] * fx * (1 - fy)
        + pattern[y1, x0] * (1 - fx) * fy
        + pattern[y1, x1] * fx * fy
    )


def _in_ellipse(ux, uy, cx, cy, ax, ay):
    return ((ux - cx) / ax) ** 2 + ((uy - cy) / ay) ** 2 <= 1.0


def render_head(pose: HeadPose, identity: Identity, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the head model per pixel. Returns (frame, mask), frame
    (H, W, 3) float32 in [0, 1], mask (H, W) float32 in {0, 1}."""
    coords = (np.arange(size, dtype=np.float64) + 0.0) / max(size - 1, 1) * 2.0 - 1.0
    px, py = np.meshgrid(coords, coords)
    s = pose.scale * identity.head_scale
    cos_t, sin_t = math.cos(pose.rot), math.sin(pose.rot)
    dx = (px - pose.tx) / s
    dy = (py - pose.ty) / s
    # Inverse rotation into head coordinates.
    ux = cos_t * dx + sin_t * dy
    uy = -sin_t * dx + cos_t * dy

    head = _in_ellipse(ux, uy, 0.0, 0.0, HEAD_AX, HEAD_AY)
    frame = np.zeros((size, size, 3), dtype=np.float64)
    detail = _sample_pattern(identity.pattern, ux, uy) * (
        0.7 + 0.3 * _sample_pattern(identity.pattern[::-1], ux * 2.3, uy * 2.3)
    )
    detail = detail[..., None]
    frame[head] = (identity.skin + detail)[head]

    hair = head & (uy < HAIR_Y)
    frame[hair] = (identity.hair + detail * 0.4)[hair]
    for ex in (-EYE_X, EYE_X):
        eye = _in_ellipse(ux, uy, ex, EYE_Y, EYE_AX, EYE_AY)
        frame[eye] = 0.10
        brow = _in_ellipse(ux, uy, ex, BROW_Y, EYE_AX + 0.03, 0.035)
        frame[head & brow] = identity.hair * 1.2
    nose = _in_ellipse(ux, uy, 0.0, 0.10, 0.05, 0.16)
    frame[head & nose] = identity.skin * 0.82
    mouth_ay = MOUTH_BASE + MOUTH_GAIN * pose.mouth
    mouth = _in_ellipse(ux, uy, 0.0, MOUTH_Y, MOUTH_AX, mouth_ay)
    frame[mouth & head] = identity.lip * (1.0 - 0.6 * pose.mouth)

    frame = np.clip(frame, 0.02, 1.0) * head[..., None]
    return frame.astype(np.float32), head.astype(np.float32)


def canonical_landmarks(mouth: float) -> np.ndarray:
    """68 landmarks of the canonical head in head coordinates."""
    pts = np.zeros((68, 2), dtype=np.float64)
    alphas = np.pi * (1.0 - np.arange(17) / 16.0)
    pts[0:17, 0] = HEAD_AX * np.cos(alphas)
    pts[0:17, 1] = HEAD_AY * np.sin(alphas)
    for base, sign in ((17, -1.0), (22, 1.0)):
        xs = sign * np.linspace(0.40, 0.12, 5) if sign < 0 else sign * np.linspace(0.12, 0.40, 5)
        curve = -0.03 * np.sin(np.linspace(0, np.pi, 5))
        pts[base:base + 5, 0] = xs
        pts[base:base + 5, 1] = BROW_Y + curve
    pts[27:31, 0] = 0.0
    pts[27:31, 1] = np.linspace(-0.26, 0.06, 4)
    pts[31:36, 0] = np.linspace(-0.10, 0.10, 5)
    pts[31:36, 1] = 0.16
    hexa = np.array([
        (-1.0, 0.0), (-0.45, -0.7), (0.45, -0.7), (1.0, 0.0), (0.45, 0.7), (-0.45, 0.7)
    ])
    for base, ex in ((36, -EYE_X), (42, EYE_X)):
        pts[base:base + 6, 0] = ex + hexa[:, 0] * EYE_AX
        pts[base:base + 6, 1] = EYE_Y + hexa[:, 1] * EYE_AY
    mouth_ay = MOUTH_BASE + MOUTH_GAIN * mouth
    outer = 2 * np.pi * np.arange(12) / 12.0
    pts[48:60, 0] = MOUTH_AX * np.cos(outer)
    pts[48:60, 1] = MOUTH_Y + (mouth_ay + 0.025) * np.sin(outer)
    inner = 2 * np.pi * np.arange(8) / 8.0
    pts[60:68, 0] = 0.8 * MOUTH_AX * np.cos(inner)
    pts[60:68, 1] = MOUTH_Y + mouth_ay * 0.8 * np.sin(inner)
    return pts


def pose_landmarks(pose: HeadPose, identity_scale: float = 1.0, mouth: float | None = None) -> KeypointSet:
    """Canonical landmarks under a pose, normalized to [0, 1]."""
    u = canonical_landmarks(pose.mouth if mouth is None else mouth)
    s = pose.scale * identity_scale
    cos_t, sin_t = math.cos(pose.rot), math.sin(pose.rot)
    x = (cos_t * u[:, 0] - sin_t * u[:, 1]) * s + pose.tx
    y = (sin_t * u[:, 0] + cos_t * u[:, 1]) * s + pose.ty
    return KeypointSet(np.stack([(x + 1) / 2, (y + 1) / 2], axis=1))


def _pose_trajectory(rng: np.random.Generator, cfg: SynthConfig, n: int) -> list[HeadPose]:
    phases = rng.uniform(0, 2 * np.pi, size=4)
    freqs = rng.uniform(0.5, 1.5, size=4)
    t = np.arange(n) / max(n, 1)
    tx = cfg.translate_amp * np.sin(2 * np.pi * freqs[0] * t + phases[0])
    ty = cfg.translate_amp * np.sin(2 * np.pi * freqs[1] * t + phases[1])
    rot = cfg.rotate_amp * np.sin(2 * np.pi * freqs[2] * t + phases[2])
    mouth = cfg.mouth_amp * (0.5 + 0.5 * np.sin(2 * np.pi * freqs[3] * t + phases[3]))
    return [HeadPose(float(tx[i]), float(ty[i]), float(rot[i]), float(mouth[i])) for i in range(n)]


def generate_synthetic_dataset(cfg: SynthConfig, rng: np.random.Generator) -> list[VideoSample]:
    """Deterministic procedural dataset: same generator state, same bits."""
    samples = []
    for ident_idx in range(cfg.identities):
        identity = _make_identity(rng, cfg)
        poses = _pose_trajectory(rng, cfg, cfg.frames_per_video)
        frames = np.zeros((cfg.frames_per_video, cfg.image_size, cfg.image_size, 3), np.float32)
        masks = np.zeros((cfg.frames_per_video, cfg.image_size, cfg.image_size), np.float32)
        keypoints = []
        for i, pose in enumerate(poses):
            frames[i], masks[i] = render_head(pose, identity, cfg.image_size)
            keypoints.append(pose_landmarks(pose, identity.head_scale))
        samples.append(VideoSample(
            video_id=f"id{ident_idx:04d}",
            frames=frames,
            keypoints=keypoints,
            masks=masks if cfg.with_masks else None,
            fps=cfg.fps,
            poses=poses,
            identity={"head_scale": identity.head_scale},
        ))
    return samples


def resample_to_pose(frame: np.ndarray, from_pose: HeadPose, to_pose: HeadPose,
                     from_scale: float = 1.0, to_scale: float = 1.0) -> np.ndarray:
    """Resample a frame rendered under from_pose as if seen under to_pose,
    using the generator's own rigid motion model (bilinear, zero padding)."""
    import torch

    from .geometry import bilinear_sample, identity_grid_tensor

    size = frame.shape[0]
    base = identity_grid_tensor(size, size, dtype=torch.float64)
    px, py = base[..., 0].numpy(), base[..., 1].numpy()
    s_to = to_pose.scale * to_scale
    s_from = from_pose.scale * from_scale
    cos_a, sin_a = math.cos(to_pose.rot), math.sin(to_pose.rot)
    dx = (px - to_pose.tx) / s_to
    dy = (py - to_pose.ty) / s_to
    ux = cos_a * dx + sin_a * dy
    uy = -sin_a * dx + cos_a * dy
    cos_b, sin_b = math.cos(from_pose.rot), math.sin(from_pose.rot)
    qx = (cos_b * ux - sin_b * uy) * s_from + from_pose.tx
    qy = (sin_b * ux + cos_b * uy) * s_from + from_pose.ty
    grid = torch.from_numpy(np.stack([qx, qy], axis=-1)).unsqueeze(0)
    tex = torch.from_numpy(frame.astype(np.float64)).permute(2, 0, 1).unsqueeze(0)
    out = bilinear_sample(tex, grid)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


class SyntheticPoseDetector:
    """Recovers head pose from a rendered frame by image moments, then emits
    the canonical landmarks under the fitted pose.

    This is the annotation model for evaluation: generated and reference
    frames go through the same fit so systematic errors cancel.
    """

    def __init__(self, dark_threshold: float = 0.33):
        self.dark_threshold = dark_threshold

    def fit_pose(self, frame: np.ndarray) -> HeadPose:
        size = frame.shape[0]
        coords = np.arange(size, dtype=np.float64) / max(size - 1, 1) * 2.0 - 1.0
        px, py = np.meshgrid(coords, coords)
        luma = frame.mean(axis=2)
        head = luma > 0.01
        weight = head.astype(np.float64)
        total = weight.sum()
        if total < 4:
            return HeadPose()
        tx = float((px * weight).sum() / total)
        ty = float((py * weight).sum() / total)
        cx, cy = px - tx, py - ty
        cov_xx = (cx * cx * weight).sum() / total
        cov_yy = (cy * cy * weight).sum() / total
        cov_xy = (cx * cy * weight).sum() / total
        # Major principal axis of the head ellipse is the head's own y axis,
        # whose image-space angle is rot + pi/2.
        major = 0.5 * math.atan2(2 * cov_xy, cov_xx - cov_yy)
        evals = np.linalg.eigvalsh(np.array([[cov_xx, cov_xy], [cov_xy, cov_yy]]))
        # Solid-ellipse second moments: cov = R diag(ax^2, ay^2) R^T s^2 / 4.
        s_fit = 2.0 * math.sqrt(math.sqrt(max(evals[0], 1e-12) * max(evals[1], 1e-12))
                                / (HEAD_AX * HEAD_AY))
        # The axis fixes the rotation modulo pi; the dark-feature centroid
        # (hair, brows, eyes sit above center) picks the sign.
        dark = head & (luma < self.dark_threshold)
        rot = major - math.pi / 2
        if dark.sum() > 0:
            dark_dx = px[dark].mean() - tx
            dark_dy = py[dark].mean() - ty
            for cand in (major - math.pi / 2, major + math.pi / 2):
                up_x, up_y = math.sin(cand), -math.cos(cand)
                if up_x * dark_dx + up_y * dark_dy > 0:
                    rot = cand
                    break
        rot = math.atan2(math.sin(rot), math.cos(rot))
        mouth = self._fit_mouth(frame, tx, ty, rot, s_fit)
        return HeadPose(tx=tx, ty=ty, rot=rot, mouth=mouth, scale=s_fit)

    def _fit_mouth(self, frame: np.ndarray, tx, ty, rot, s) -> float:
        size = frame.shape[0]
        coords = np.arange(size, dtype=np.float64) / max(size - 1, 1) * 2.0 - 1.0
        px, py = np.meshgrid(coords, coords)
        cos_t, sin_t = math.cos(rot), math.sin(rot)
        dx = (px - tx) / max(s, 1e-6)
        dy = (py - ty) / max(s, 1e-6)
        ux = cos_t * dx + sin_t * dy
        uy = -sin_t * dx + cos_t * dy
        window = _in_ellipse(ux, uy, 0.0, MOUTH_Y, MOUTH_AX + 0.05, MOUTH_BASE + MOUTH_GAIN + 0.05)
        if window.sum() == 0:
            return 0.0
        luma = frame.mean(axis=2)
        lips = window & (luma > 0.01) & (luma < 0.30)
        cell = (coords[1] - coords[0]) ** 2 if size > 1 else 1.0
        area_u = lips.sum() * cell / max(s, 1e-6) ** 2
        mouth_ay = area_u / (math.pi * MOUTH_AX) if area_u > 0 else 0.0
        return float(np.clip((mouth_ay - MOUTH_BASE) / MOUTH_GAIN, 0.0, 1.0))

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        pose = self.fit_pose(frame)
        return pose_landmarks(pose, identity_scale=1.0).points
