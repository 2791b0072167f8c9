"""Independent reference solvers used only by the tests."""

import numpy as np


def dlt_pose(pixels, points, K):
    """Linear 12-unknown DLT on normalized coordinates, then projection of
    the 3x3 block onto SO(3) with the scale taken from its singular values."""
    xy = np.column_stack(
        [(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy]
    )
    n = len(points)
    Xh = np.column_stack([points, np.ones(n)])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xy[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xy[:, 1:] * Xh
    P = np.linalg.svd(A)[2][-1].reshape(3, 4)
    M, b = P[:, :3], P[:, 3]
    if np.linalg.det(M) < 0:
        M, b = -M, -b
    U, s, Vt = np.linalg.svd(M)
    R = U @ Vt
    t = b / s.mean()
    return R, t
