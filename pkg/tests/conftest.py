import numpy as np
import pytest

from cvloc.geometry import CameraIntrinsics, CanvasSpec, FeatureMap, RigidPose


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return CameraIntrinsics.from_fov(256, 64, 90.0)


@pytest.fixture
def small_canvas():
    return CanvasSpec(64, 0.8)


@pytest.fixture
def level_pose():
    return RigidPose.from_heading([0.0, 0.0], 0.0)


def random_map(rng, S=16, C=2, p_masked=0.0):
    mask = rng.random((S, S)) >= p_masked
    return FeatureMap(rng.standard_normal((S, S, C)), mask)


def brute_force_ncc(F_s, F_q, R):
    """Plain double loop over displacements and pixels."""
    H, W = F_s.height, F_s.width
    out = np.zeros((2 * R + 1, 2 * R + 1))
    for i, m in enumerate(range(-R, R + 1)):
        for j, n in enumerate(range(-R, R + 1)):
            num = na = nb = 0.0
            for r in range(H):
                rs = r + m
                if not 0 <= rs < H:
                    continue
                for c in range(W):
                    cs = c + n
                    if not 0 <= cs < W or not (F_s.mask[rs, cs] and F_q.mask[r, c]):
                        continue
                    a = F_s.data[rs, cs]
                    b = F_q.data[r, c]
                    num += float(a @ b)
                    na += float(a @ a)
                    nb += float(b @ b)
            out[i, j] = num / np.sqrt(na * nb) if na > 0 and nb > 0 else 0.0
    return out
