import math

import numpy as np
import pytest

from comap.expansion import (
    DegenerateCorrespondencesError,
    Keyframe,
    RigidTransform,
    build_response,
    estimate_alignment,
    inject_redundancy,
    integrate_upload,
    on_session_end,
    partition_keyframe,
)
from comap.geometry import Pose, cone_from_fov, sample_cone
from comap.mapstore import GlobalMap, state_digest
from comap.overlap import OverlapVerdict
from comap.sim import landmark_descriptor
from comap.wire import KeyframeUploadMsg, OverlapResponseMsg, PointRecord

from conftest import insert_point_cloud


def make_keyframe(rng, n=40, pose=None, counts=None, spread=10.0):
    pose = pose or Pose(0, 0, 0)
    ids = np.arange(1, n + 1, dtype=np.int64)
    positions = pose.position + rng.uniform(-spread, spread, (n, 3))
    descs = np.frombuffer(
        b"".join(landmark_descriptor(int(i)) for i in ids), dtype=np.uint8
    ).reshape(n, 32)
    if counts is None:
        counts = rng.integers(1, 10, n)
    return Keyframe(0, pose, 1.38, ids, positions, descs, np.asarray(counts))


def verdict_from(redundant, fresh, r=2.0, t_seen=0.9):
    redundant = np.asarray(redundant, dtype=np.float64).reshape(-1, 3)
    fresh = np.asarray(fresh, dtype=np.float64).reshape(-1, 3)
    k = len(redundant) + len(fresh)
    degree = len(redundant) / k
    return OverlapVerdict(degree, degree > t_seen, redundant, fresh, r, k)


def rand_rigid(rng):
    a, b, c = rng.uniform(-math.pi, math.pi, 3)
    R = Pose(0, 0, 0, a, b, c).rotation_matrix()
    return RigidTransform(R, rng.uniform(-20, 20, 3))


class TestBuildResponse:
    def test_redundant_minority(self, rng):
        v = verdict_from(rng.uniform(0, 1, (10, 3)), rng.uniform(0, 1, (290, 3)))
        resp = build_response(v)
        assert resp.status == 0
        assert len(resp.samples) == 10

    def test_fresh_minority(self, rng):
        v = verdict_from(rng.uniform(0, 1, (290, 3)), rng.uniform(0, 1, (10, 3)))
        resp = build_response(v)
        assert resp.status == 1
        assert len(resp.samples) == 10

    def test_tie_sends_redundant(self, rng):
        v = verdict_from(rng.uniform(0, 1, (150, 3)), rng.uniform(0, 1, (150, 3)))
        resp = build_response(v)
        assert resp.status == 0
        assert len(resp.samples) == 150
        np.testing.assert_allclose(resp.samples, v.redundant_samples.astype(np.float32))

    def test_carries_spacing(self, rng):
        v = verdict_from(rng.uniform(0, 1, (1, 3)), rng.uniform(0, 1, (5, 3)), r=1.789)
        assert build_response(v).r == pytest.approx(1.789, abs=1e-6)


class TestPartitionKeyframe:
    def test_empty_redundant_list_keeps_everything(self, rng):
        kf = make_keyframe(rng)
        resp = OverlapResponseMsg(0, 2.0, np.empty((0, 3)))
        out = partition_keyframe(kf, resp)
        np.testing.assert_array_equal(out.landmark_ids, kf.landmark_ids)
        assert out.pose == kf.pose and out.fov == kf.fov

    def test_full_redundant_cover_removes_everything(self, rng):
        kf = make_keyframe(rng, spread=3.0)
        resp = OverlapResponseMsg(0, 10.0, kf.positions[:5])
        assert len(partition_keyframe(kf, resp)) == 0

    def test_empty_fresh_list_keeps_nothing(self, rng):
        kf = make_keyframe(rng)
        resp = OverlapResponseMsg(1, 2.0, np.empty((0, 3)))
        assert len(partition_keyframe(kf, resp)) == 0

    def test_status_paths_are_complements(self, rng):
        # Partition under S=0 with the redundant list and under S=1 with the
        # fresh list of the same verdict: surviving sets must partition the
        # keyframe when every point is near exactly one class.
        kf = make_keyframe(rng, n=60)
        cone = cone_from_fov(kf.pose, kf.fov, 20.0)
        samples, r = sample_cone(cone, 200, seed=4)
        redundant_mask = np.zeros(200, dtype=bool)
        redundant_mask[:90] = True
        v = verdict_from(samples[redundant_mask], samples[~redundant_mask], r=r)
        kept_s0 = partition_keyframe(kf, OverlapResponseMsg(0, r, v.redundant_samples))
        kept_s1 = partition_keyframe(kf, OverlapResponseMsg(1, r, v.fresh_samples))
        ids0 = set(kept_s0.landmark_ids.tolist())
        ids1 = set(kept_s1.landmark_ids.tolist())
        # s0 removes near-redundant; s1 keeps near-fresh. A point far from
        # all samples survives s0 but not s1; points near both lists differ.
        near_redundant = np.any(
            np.sum((kf.positions[:, None, :] - v.redundant_samples[None, :, :]) ** 2, axis=2)
            <= r * r, axis=1,
        )
        near_fresh = np.any(
            np.sum((kf.positions[:, None, :] - v.fresh_samples[None, :, :]) ** 2, axis=2)
            <= r * r, axis=1,
        )
        assert ids0 == set(kf.landmark_ids[~near_redundant].tolist())
        assert ids1 == set(kf.landmark_ids[near_fresh].tolist())

    def test_output_subset_of_input(self, rng):
        kf = make_keyframe(rng)
        resp = OverlapResponseMsg(0, 3.0, rng.uniform(-10, 10, (30, 3)))
        out = partition_keyframe(kf, resp)
        assert set(out.landmark_ids.tolist()) <= set(kf.landmark_ids.tolist())

    def test_invalid_spacing_rejected(self, rng):
        kf = make_keyframe(rng)
        with pytest.raises(ValueError):
            partition_keyframe(kf, OverlapResponseMsg(0, 0.0, np.empty((0, 3))))


class TestInjectRedundancy:
    def test_equal_counts_inject_nothing(self, rng):
        kf = make_keyframe(rng, n=20, counts=np.full(20, 3))
        pruned = kf.subset(np.arange(20) < 5)
        out = inject_redundancy(pruned, kf)
        np.testing.assert_array_equal(out.landmark_ids, pruned.landmark_ids)

    def test_heavily_observed_point_comes_back(self, rng):
        kf = make_keyframe(rng, n=3, counts=[1, 1, 10])
        pruned = kf.subset(np.array([True, True, False]))  # the 10-count point pruned
        out = inject_redundancy(pruned, kf)
        assert set(out.landmark_ids.tolist()) == set(kf.landmark_ids.tolist())

    def test_injected_points_strictly_above_mean(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 80))
            kf = make_keyframe(rng, n=n, counts=rng.integers(1, 12, n))
            keep = rng.uniform(0, 1, n) < 0.5
            pruned = kf.subset(keep)
            out = inject_redundancy(pruned, kf)
            mean = kf.observation_counts.mean()
            injected = set(out.landmark_ids.tolist()) - set(pruned.landmark_ids.tolist())
            for lid in injected:
                idx = int(np.nonzero(kf.landmark_ids == lid)[0][0])
                assert kf.observation_counts[idx] > mean
            # Conservation: pruned + removed partitions the original; the
            # output never exceeds the original.
            assert set(out.landmark_ids.tolist()) <= set(kf.landmark_ids.tolist())
            assert len(out) >= len(pruned)

    def test_preserves_original_order(self, rng):
        kf = make_keyframe(rng, n=10, counts=[9, 1, 9, 1, 9, 1, 9, 1, 9, 1])
        pruned = kf.subset(np.zeros(10, dtype=bool))
        out = inject_redundancy(pruned, kf)
        np.testing.assert_array_equal(out.landmark_ids, kf.landmark_ids[::2])


class TestIntegrateUpload:
    def upload_msg(self, rng, n=15, client=4):
        points = [
            PointRecord(id=100 + i, position=rng.uniform(-5, 5, 3),
                        descriptor=landmark_descriptor(100 + i), observation_count=2)
            for i in range(n)
        ]
        return KeyframeUploadMsg(client, 7, Pose(1, 2, 0.5, yaw=0.3), 1.38, points)

    def test_identity_transform_stores_positions_verbatim(self, rng):
        gmap = GlobalMap()
        msg = self.upload_msg(rng)
        fid = integrate_upload(gmap, msg, RigidTransform.identity())
        frame = gmap.frames[fid]
        assert frame.client_id == 4 and frame.keyframe_id == 7
        for p in msg.points:
            np.testing.assert_allclose(
                gmap.points[p.id].position, np.asarray(p.position, dtype=np.float64)
            )

    def test_pure_translation(self, rng):
        gmap = GlobalMap()
        msg = self.upload_msg(rng)
        t = np.array([10.0, -4.0, 2.0])
        fid = integrate_upload(gmap, msg, RigidTransform(np.eye(3), t))
        for p in msg.points:
            np.testing.assert_allclose(
                gmap.points[p.id].position, np.asarray(p.position, dtype=np.float64) + t
            )
        np.testing.assert_allclose(
            gmap.frames[fid].pose.position, msg.pose.position + t
        )

    def test_pipeline_matches_hash_set_oracle(self, rng):
        gmap = GlobalMap()
        oracle = {}
        for kf_id in range(12):
            ids = rng.choice(np.arange(200, 400), size=30, replace=False)
            points = [PointRecord(id=int(i), position=rng.uniform(-8, 8, 3)) for i in ids]
            msg = KeyframeUploadMsg(1, kf_id, Pose(0, 0, 0), 1.38, points)
            integrate_upload(gmap, msg, RigidTransform.identity())
            for i in ids:
                oracle[int(i)] = oracle.get(int(i), 0) + 1
        assert set(gmap.points) == set(oracle)
        for pid, n in oracle.items():
            assert gmap.points[pid].observation_count == n

    def test_rotation_maps_pose_axis(self, rng):
        gmap = GlobalMap()
        msg = self.upload_msg(rng)
        T = rand_rigid(rng)
        fid = integrate_upload(gmap, msg, T)
        from comap.geometry import optical_axis

        np.testing.assert_allclose(
            optical_axis(gmap.frames[fid].pose),
            T.rotation @ optical_axis(msg.pose),
            atol=1e-9,
        )

    def test_partition_then_integrate_respects_redundant_zones(self, rng):
        # No stored point from a partitioned upload may fall within r of a
        # REDUNDANT sample of its own response (before injection).
        for _ in range(20):
            kf = make_keyframe(rng, n=50)
            samples = rng.uniform(-10, 10, (40, 3))
            r = float(rng.uniform(0.5, 3.0))
            resp = OverlapResponseMsg(0, r, samples)
            pruned = partition_keyframe(kf, resp)
            gmap = GlobalMap()
            fid = integrate_upload(
                gmap, pruned.to_upload_msg(1), RigidTransform.identity()
            )
            stored = np.array(
                [gmap.points[int(i)].position for i in gmap.frames[fid].ids]
            ).reshape(-1, 3)
            if len(stored):
                d2 = np.sum(
                    (stored[:, None, :] - resp.samples.astype(np.float64)[None, :, :]) ** 2,
                    axis=2,
                )
                # float32 wire quantization of the sample list shifts
                # distances by well under a millimeter
                assert d2.min() > (float(resp.r) - 1e-3) ** 2


class TestEstimateAlignment:
    def test_already_aligned_pairs_give_identity(self, rng):
        pts = rng.uniform(-10, 10, (40, 3))
        est = estimate_alignment(list(zip(pts, pts)))
        np.testing.assert_allclose(est.transform.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(est.transform.translation, 0, atol=1e-9)
        assert est.residual_rms < 1e-12

    def test_recovers_random_rigid_transform(self, rng):
        for _ in range(25):
            T = rand_rigid(rng)
            local = rng.uniform(-10, 10, (int(rng.integers(4, 60)), 3))
            est = estimate_alignment(list(zip(local, T.apply(local))))
            np.testing.assert_allclose(est.transform.rotation, T.rotation, atol=1e-9)
            np.testing.assert_allclose(est.transform.translation, T.translation, atol=1e-8)
            assert est.residual_rms < 1e-9

    def test_noise_accuracy_monte_carlo(self, rng):
        errors = []
        for _ in range(100):
            T = rand_rigid(rng)
            local = rng.uniform(-10, 10, (100, 3))
            noisy = T.apply(local) + rng.normal(0, 0.01, (100, 3))
            est = estimate_alignment(list(zip(local, noisy)))
            errors.append(np.linalg.norm(est.transform.translation - T.translation))
        assert float(np.mean(errors)) < 0.01

    def test_too_few_pairs(self, rng):
        pts = rng.uniform(-1, 1, (2, 3))
        with pytest.raises(DegenerateCorrespondencesError):
            estimate_alignment(list(zip(pts, pts)))

    def test_collinear_pairs(self):
        local = np.array([[float(i), 0.0, 0.0] for i in range(10)])
        with pytest.raises(DegenerateCorrespondencesError):
            estimate_alignment(list(zip(local, local)))

    def test_equivariance_under_precomposition(self, rng):
        # Pre-composing the local side with G recovers transform o G^-1.
        T = rand_rigid(rng)
        G = rand_rigid(rng)
        local = rng.uniform(-10, 10, (50, 3))
        glob = T.apply(local)
        est = estimate_alignment(list(zip(G.apply(local), glob)))
        expect = T.compose(G.inverse())
        np.testing.assert_allclose(est.transform.rotation, expect.rotation, atol=1e-9)
        np.testing.assert_allclose(est.transform.translation, expect.translation, atol=1e-8)

    def test_rigid_transform_validation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        reflect = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidTransform(reflect, np.zeros(3))


class TestSessionEnd:
    def test_default_hook_leaves_map_unchanged(self, rng):
        gmap = GlobalMap()
        insert_point_cloud(gmap, rng.uniform(-10, 10, (100, 3)))
        before = state_digest(gmap)
        report = on_session_end(gmap, client_id=1)
        assert state_digest(gmap) == before
        assert not report.map_changed
        assert report.hook_name == "noop"

    def test_counts_cover_all_clients(self, rng):
        gmap = GlobalMap()
        insert_point_cloud(gmap, rng.uniform(-10, 10, (60, 3)), client_id=1)
        insert_point_cloud(gmap, rng.uniform(-10, 10, (60, 3)), client_id=2, start_id=1000)
        report = on_session_end(gmap, client_id=1)
        assert report.frame_count == len(gmap.frames)
        assert report.point_count == len(gmap.points)

    def test_perturbing_hook_reflected_in_report(self, rng):
        gmap = GlobalMap()
        insert_point_cloud(gmap, rng.uniform(-10, 10, (50, 3)))

        def jiggle_poses(m):
            for f in m.frames.values():
                f.pose = Pose(f.pose.x + 0.5, f.pose.y, f.pose.z)

        report = on_session_end(gmap, client_id=1, hook=jiggle_poses)
        assert report.map_changed
        assert report.hook_name == "jiggle_poses"
