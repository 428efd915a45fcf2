import json

import numpy as np
import pytest

from bilayer.data import (
    HeadPose,
    KeypointSet,
    SynthConfig,
    SyntheticPoseDetector,
    VideoSample,
    generate_synthetic_dataset,
    load_dataset,
    pose_landmarks,
    resample_to_pose,
    sample_pair,
    write_dataset,
)
from bilayer.errors import ConfigError, IntegrityError, ParseError


def small_dataset(identities=2, frames=4, size=32, seed=0, **kw):
    cfg = SynthConfig(identities=identities, frames_per_video=frames, image_size=size, **kw)
    return generate_synthetic_dataset(cfg, np.random.default_rng(seed))


class TestLoadDataset:
    def test_empty_root(self, tmp_path):
        (tmp_path / "dataset.cfg").write_text("n_keypoints = 68\nimage_size = 32\n")
        assert load_dataset(tmp_path) == []

    def test_roundtrip_one_video(self, tmp_path):
        samples = small_dataset(identities=1, frames=3)
        write_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 1
        assert len(loaded[0]) == 3
        assert loaded[0].video_id == samples[0].video_id
        assert loaded[0].masks is not None

    def test_keypoint_bytes_roundtrip(self, tmp_path):
        samples = small_dataset(identities=1, frames=3)
        write_dataset(samples, tmp_path / "a")
        first = (tmp_path / "a" / samples[0].video_id / "keypoints.jsonl").read_bytes()
        write_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
        second = (tmp_path / "b" / samples[0].video_id / "keypoints.jsonl").read_bytes()
        assert first == second

    def test_count_mismatch_is_integrity_error(self, tmp_path):
        samples = small_dataset(identities=1, frames=3)
        write_dataset(samples, tmp_path)
        kp_path = tmp_path / samples[0].video_id / "keypoints.jsonl"
        lines = kp_path.read_text().splitlines()
        kp_path.write_text("\n".join(lines[:2]) + "\n")
        with pytest.raises(IntegrityError):
            load_dataset(tmp_path)

    def test_malformed_record_names_file_and_line(self, tmp_path):
        samples = small_dataset(identities=1, frames=2)
        write_dataset(samples, tmp_path)
        kp_path = tmp_path / samples[0].video_id / "keypoints.jsonl"
        lines = kp_path.read_text().splitlines()
        lines[1] = "{not json"
        kp_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            load_dataset(tmp_path)
        assert "keypoints.jsonl" in str(err.value)
        assert ":2" in str(err.value)

    def test_video_without_keypoints_rejected(self, tmp_path):
        samples = small_dataset(identities=2, frames=2)
        write_dataset(samples, tmp_path)
        (tmp_path / samples[0].video_id / "keypoints.jsonl").unlink()
        loaded = load_dataset(tmp_path)
        assert [v.video_id for v in loaded] == [samples[1].video_id]

    def test_missing_masks_allowed(self, tmp_path):
        samples = small_dataset(identities=1, frames=2, with_masks=False)
        write_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert loaded[0].masks is None


class TestSamplePair:
    def test_single_frame_video(self):
        video = small_dataset(identities=1, frames=1)[0]
        pair = sample_pair(video, np.random.default_rng(0))
        assert np.array_equal(pair.source.frame, pair.target.frame)

    def test_deterministic_under_seed(self):
        video = small_dataset(identities=1, frames=2)[0]
        a = sample_pair(video, np.random.default_rng(42))
        b = sample_pair(video, np.random.default_rng(42))
        assert np.array_equal(a.source.frame, b.source.frame)
        assert np.array_equal(a.target.frame, b.target.frame)
        assert not np.array_equal(a.source.frame, a.target.frame)

    def test_uniform_over_ordered_pairs(self):
        # 10^4 draws over the 20 ordered pairs of a length-5 video: every
        # count stays within 3 sigma of the uniform expectation.
        video = small_dataset(identities=1, frames=5)[0]
        rng = np.random.default_rng(123)
        counts = {}
        draws = 10_000
        for _ in range(draws):
            pair = sample_pair(video, rng)
            s = next(i for i in range(5) if np.array_equal(video.frames[i], pair.source.frame))
            t = next(i for i in range(5) if np.array_equal(video.frames[i], pair.target.frame))
            assert s != t
            counts[(s, t)] = counts.get((s, t), 0) + 1
        assert len(counts) == 20
        p = 1 / 20
        sigma = np.sqrt(draws * p * (1 - p))
        for count in counts.values():
            assert abs(count - draws * p) <= 3 * sigma

    def test_empty_video_rejected(self):
        video = small_dataset(identities=1, frames=1)[0]
        empty = VideoSample(
            "empty", video.frames[:0], [], None, fps=video.fps
        )
        with pytest.raises(IntegrityError):
            sample_pair(empty, np.random.default_rng(0))


class TestSyntheticGenerator:
    def test_size_below_minimum(self):
        with pytest.raises(ConfigError):
            SynthConfig(image_size=8)

    def test_single_frame_mask_covers_head(self):
        sample = small_dataset(identities=1, frames=1)[0]
        rendered = sample.frames[0].sum(axis=2) > 0
        assert np.array_equal(sample.masks[0] > 0, rendered)

    def test_seed_determinism(self):
        a = small_dataset(identities=2, frames=3, seed=9)
        b = small_dataset(identities=2, frames=3, seed=9)
        for va, vb in zip(a, b):
            assert np.array_equal(va.frames, vb.frames)
            assert np.array_equal(va.masks, vb.masks)
            for ka, kb in zip(va.keypoints, vb.keypoints):
                assert np.array_equal(ka.points, kb.points)

    def test_translation_shifts_keypoints_exactly(self):
        base = HeadPose(tx=0.05, ty=-0.02, rot=0.1, mouth=0.3)
        shifted = HeadPose(tx=0.05 + 0.2, ty=-0.02, rot=0.1, mouth=0.3)
        a = pose_landmarks(base, 0.9).points
        b = pose_landmarks(shifted, 0.9).points
        delta = b - a
        assert np.allclose(delta[:, 0], 0.1, atol=1e-12)  # 0.2 in [-1,1] = 0.1 in [0,1]
        assert np.allclose(delta[:, 1], 0.0, atol=1e-12)

    def test_inverse_motion_identity_pattern(self):
        # Frames of one identity, unwarped by the generator's own rigid
        # motion, must agree on the (eroded) head interior.
        samples = small_dataset(identities=1, frames=6, size=64, seed=4, mouth_amp=0.0)
        video = samples[0]
        scale = video.identity["head_scale"]
        a, b = 0, 3
        unwarped = resample_to_pose(
            video.frames[b], video.poses[b], video.poses[a], scale, scale
        )
        interior = video.masks[a] > 0
        eroded = interior.copy()
        for shift in (-2, -1, 1, 2):
            eroded &= np.roll(interior, shift, axis=0) & np.roll(interior, shift, axis=1)
        diff = np.abs(unwarped - video.frames[a]).sum(axis=2)
        l1 = diff[eroded].mean() / 3.0
        assert l1 <= 0.02

    def test_detector_recovers_pose(self):
        samples = small_dataset(identities=3, frames=4, size=64, seed=11)
        det = SyntheticPoseDetector()
        errs = []
        for video in samples:
            scale = video.identity["head_scale"]
            for i in range(len(video)):
                fit = det.fit_pose(video.frames[i])
                true = video.poses[i]
                errs.append(abs(fit.tx - true.tx))
                errs.append(abs(fit.ty - true.ty))
                rot_err = abs(np.arctan2(np.sin(fit.rot - true.rot), np.cos(fit.rot - true.rot)))
                errs.append(rot_err * 0.3)
                errs.append(abs(fit.scale - true.scale * scale) * 0.5)
        assert float(np.mean(errs)) < 0.03

    def test_detected_landmarks_close_to_annotation(self):
        samples = small_dataset(identities=2, frames=3, size=64, seed=2)
        det = SyntheticPoseDetector()
        for video in samples:
            for i in range(len(video)):
                pts = det(video.frames[i])
                gt = video.keypoints[i].points
                err = np.linalg.norm(pts - gt, axis=1).mean()
                assert err < 0.05


class TestKeypointSet:
    def test_rejects_nonfinite(self):
        pts = np.zeros((68, 2))
        pts[0, 0] = np.nan
        with pytest.raises(IntegrityError):
            KeypointSet(pts)

    def test_vector_layout(self):
        pts = np.arange(8, dtype=float).reshape(4, 2) / 10
        assert np.array_equal(KeypointSet(pts).as_vector(), pts.reshape(-1))
