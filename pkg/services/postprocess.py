"""
细化点云的后处理链：还原尺度 -> MLS 平滑 -> 加密 -> 去离群点。

所有阶段都是纯函数（不使用随机数），在毫米世界坐标系下工作；邻域查询统一用 cKDTree。
`postprocess()` 按固定顺序串联各阶段，任一阶段失败都以 StageError 抛出并带上阶段名。
"""
import logging

import numpy as np
from scipy.spatial import cKDTree

from .config import PostprocessSection
from .errors import FrameMismatchError, RefineError, StageError
from .geometry import Frame, PointCloud, StandardizationStats, destandardize

logger = logging.getLogger(__name__)

MIN_MLS_NEIGHBORS = 3
# 距离不超过该值的点视为重合（mm）
DUPLICATE_TOL_MM = 1e-6


def _require_world(cloud: PointCloud, op: str):
    if cloud.frame != Frame.WORLD_MM:
        raise FrameMismatchError(f"{op} 需要 WorldMM 坐标系的点云，当前 {cloud.frame.value}")


def mls_smooth(cloud: PointCloud, radius_mm: float) -> PointCloud:
    """一阶移动最小二乘：把每个点投影到其半径邻域的高斯加权拟合平面上。

    邻域包含点自身，少于 3 个点时保持不动；所有投影都基于输入坐标计算。
    """
    _require_world(cloud, "mls_smooth")
    if cloud.n == 0:
        raise RefineError("mls_smooth 需要非空点云")
    if radius_mm <= 0:
        raise RefineError(f"MLS 半径必须为正: {radius_mm}")
    points = cloud.points
    neighborhoods = cKDTree(points).query_ball_point(points, radius_mm)
    smoothed = points.copy()
    for i, idx in enumerate(neighborhoods):
        if len(idx) < MIN_MLS_NEIGHBORS:
            continue
        nbrs = points[idx]
        weights = np.exp(-np.sum((nbrs - points[i]) ** 2, axis=1) / radius_mm ** 2)
        centroid = weights @ nbrs / weights.sum()
        centered = nbrs - centroid
        cov = (centered * weights[:, None]).T @ centered
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        smoothed[i] = points[i] - np.dot(points[i] - centroid, normal) * normal
    return PointCloud(smoothed, cloud.frame)


def densify(cloud: PointCloud, section: PostprocessSection) -> PointCloud:
    """在每个点的 k 近邻（不含自身）中，对距离超过 densify_gap_mm 的点对插入中点。

    同一无序点对只插入一次，与原有点或其他中点重合的中点会被去掉；
    原有点全部保留在输出的前 n 行。
    """
    _require_world(cloud, "densify")
    if cloud.n < 2:
        raise RefineError(f"densify 至少需要 2 个点，当前 {cloud.n}")
    points = cloud.points
    k = min(section.densify_neighborhood, cloud.n - 1)
    dists, idx = cKDTree(points).query(points, k=k + 1)
    rows = np.repeat(np.arange(cloud.n)[:, None], k + 1, axis=1)

    # 重复点时自身不一定排在第 0 列，逐行剔除自身后保留前 k 个
    not_self = idx != rows
    keep = not_self & (np.cumsum(not_self, axis=1) <= k)
    far = keep & (dists > section.densify_gap_mm)
    if not far.any():
        return PointCloud(points.copy(), cloud.frame)

    pairs = np.sort(np.stack([rows[far], idx[far]], axis=1), axis=1)
    pairs = np.unique(pairs, axis=0)
    midpoints = np.unique(0.5 * (points[pairs[:, 0]] + points[pairs[:, 1]]), axis=0)
    # 与原有点或其他中点重合的中点只保留一份
    midpoints = midpoints[cKDTree(points).query(midpoints, k=1)[0] > DUPLICATE_TOL_MM]
    if len(midpoints) > 1:
        close = cKDTree(midpoints).query_pairs(DUPLICATE_TOL_MM, output_type="ndarray")
        midpoints = np.delete(midpoints, np.unique(close[:, 1]), axis=0)
    logger.debug(f"densify: {cloud.n} 个点插入 {len(midpoints)} 个中点")
    return PointCloud(np.vstack([points, midpoints]), cloud.frame)


def neighbor_counts(points: np.ndarray, radius_mm: float) -> np.ndarray:
    """半径内其他点的数量（不含自身）。"""
    return cKDTree(points).query_ball_point(points, radius_mm, return_length=True) - 1


def remove_outliers(cloud: PointCloud, section: PostprocessSection) -> PointCloud:
    """单遍删除半径 outlier_radius_mm 内少于 outlier_min_neighbors 个其他点的点。"""
    _require_world(cloud, "remove_outliers")
    if cloud.n == 0:
        raise RefineError("remove_outliers 需要非空点云")
    keep = neighbor_counts(cloud.points, section.outlier_radius_mm) >= section.outlier_min_neighbors
    if not keep.all():
        logger.debug(f"remove_outliers: 删除 {int((~keep).sum())} / {cloud.n} 个点")
    return PointCloud(cloud.points[keep], cloud.frame)


def postprocess(cloud: PointCloud, stats: StandardizationStats, section: PostprocessSection) -> PointCloud:
    stages = [
        ("destandardize", lambda c: destandardize(c, stats)),
        ("mls_smooth", lambda c: mls_smooth(c, section.mls_radius_mm)),
        ("densify", lambda c: densify(c, section)),
        ("remove_outliers", lambda c: remove_outliers(c, section)),
    ]
    for name, stage in stages:
        try:
            result = stage(cloud)
        except RefineError as e:
            raise StageError(name, e) from e
        if result.n == 0:
            # 全部被判为离群点时保留上一阶段的结果，下游度量要求非空
            logger.warning(f"{name} 删除了全部 {cloud.n} 个点，保留上一阶段结果")
            return cloud
        cloud = result
    return cloud
