"""
体素形态学、等值面提取、表面采样与坐标标准化。

职责定位：
1. `VoxelGrid` / `TriangleMesh` / `PointCloud` / `StandardizationStats` 四个核心数据类型。
2. 数据整理算子：`binary_closing()`、`connected_components()`。
3. 提取链路：`marching_cubes()` -> `poisson_disk_sample()`。
4. 全局标准化：`compute_standardization()` / `standardize()` / `destandardize()`。

调用关系：
- 上游：`synthdata.py`（生成数据集）、`postprocess.py`（反标准化）、`pipeline.py`
- 下游：scipy.ndimage / scipy.spatial / skimage.measure

排查建议：
- 网格为空：先确认占据网格既不是全空也不是全满。
- 采样点数不对：看 `poisson_disk_sample()` 中候选集大小与淘汰循环。
"""
import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from .errors import FrameMismatchError, RefineError, ShapeMismatchError

logger = logging.getLogger(__name__)

# 提取等值面前对占据场做高斯平滑的尺度（体素）
MC_SMOOTH_SIGMA = 1.0


class Frame(str, Enum):
    WORLD_MM = "WorldMM"
    STANDARDIZED = "Standardized"


@dataclass
class VoxelGrid:
    """带物理间距的二值占据网格，体素 (i, j, k) 的中心位于 origin + (i, j, k) * spacing。"""
    occupancy: np.ndarray
    spacing_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 1:
            raise ShapeMismatchError(f"占据网格必须是三维且各维 >= 1，当前 shape={self.occupancy.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise RefineError(f"体素间距必须为正: {self.spacing_mm}")
        if len(self.origin_mm) != 3:
            raise ShapeMismatchError(f"原点必须是三维向量: {self.origin_mm}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def voxel_count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def volume_ml(self) -> float:
        return self.voxel_count * float(np.prod(self.spacing_mm)) / 1000.0

    def with_occupancy(self, occupancy: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(occupancy, self.spacing_mm, self.origin_mm)

    def index_to_world(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin_mm) + np.asarray(indices, dtype=np.float64) * np.asarray(self.spacing_mm)


@dataclass
class TriangleMesh:
    """三角网格，顶点单位为 mm。"""
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ShapeMismatchError("面索引越界")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise RefineError("网格包含退化面（重复顶点索引）")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edge_face_counts(self) -> np.ndarray:
        """每条无向边被多少个面共享。"""
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edge_face_counts()) + len(self.faces))


@dataclass
class PointCloud:
    """N×3 点集及其坐标系标记。"""
    points: np.ndarray
    frame: Frame = Frame.WORLD_MM

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatchError(f"点云必须是 N×3，当前 shape={self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise RefineError("点云坐标包含非有限值")
        self.frame = Frame(self.frame)

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    def bbox_diagonal(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


@dataclass
class StandardizationStats:
    """全局标准化统计量：三维均值 + 标量标准差（保持长宽比）。"""
    mean: np.ndarray
    std: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = float(self.std)
        if not np.isfinite(self.std) or self.std <= 0:
            raise RefineError(f"标准差必须为正: {self.std}")


# ========== 形态学 ==========

def ball_structure(radius_voxels: int) -> np.ndarray:
    """半径 r 的欧氏球：到中心体素的距离不超过 r 的体素。"""
    r = int(radius_voxels)
    offsets = np.indices((2 * r + 1,) * 3) - r
    return (offsets ** 2).sum(axis=0) <= r * r


def binary_closing(grid: VoxelGrid, radius_voxels: int = 1) -> VoxelGrid:
    """先膨胀后腐蚀；先补零边再做，避免网格边界把实心体腐蚀掉。"""
    if int(radius_voxels) < 1:
        raise RefineError(f"闭运算半径必须 >= 1，当前 {radius_voxels}")
    r = int(radius_voxels)
    structure = ball_structure(r)
    padded = np.pad(grid.occupancy, r)
    dilated = ndimage.binary_dilation(padded, structure=structure)
    closed = ndimage.binary_erosion(dilated, structure=structure, border_value=0)
    return grid.with_occupancy(closed[r:-r, r:-r, r:-r])


def connected_components(grid: VoxelGrid) -> Tuple[int, np.ndarray]:
    """26 连通标记，返回 (前景连通块数, 标签数组)，背景标签为 0。"""
    labels, count = ndimage.label(grid.occupancy, structure=np.ones((3, 3, 3), dtype=bool))
    return int(count), labels


def largest_component(grid: VoxelGrid) -> VoxelGrid:
    count, labels = connected_components(grid)
    if count <= 1:
        return grid
    sizes = np.bincount(labels.ravel())[1:]
    return grid.with_occupancy(labels == (int(np.argmax(sizes)) + 1))


# ========== 等值面与采样 ==========

def marching_cubes(grid: VoxelGrid, iso: float = 0.5, smooth_sigma: float = MC_SMOOTH_SIGMA) -> TriangleMesh:
    """占据网格上的 marching cubes，输出世界坐标网格。

    先在补了空边的占据场上做 σ = smooth_sigma（体素）的高斯平滑，去掉二值场的台阶；smooth_sigma=0 时直接在二值场上提取。
    平滑后不再跨越阈值的细小结构退回二值场提取并打警告。外圈空边保证结果是闭合曲面；全空或全满的网格返回空网格并打警告。
    """
    if not 0.0 < iso < 1.0:
        raise RefineError(f"二值占据的等值面阈值必须在 (0, 1) 内，当前 {iso}")
    if smooth_sigma < 0:
        raise RefineError(f"平滑尺度必须非负: {smooth_sigma}")
    occ = grid.occupancy
    if not occ.any() or occ.all():
        logger.warning(f"占据网格{'全空' if not occ.any() else '全满'}，返回空网格 dims={grid.dims}")
        return TriangleMesh()

    pad = 1 + int(np.ceil(3.0 * smooth_sigma))
    volume = np.pad(occ.astype(np.float64), pad)
    if smooth_sigma > 0:
        smoothed = ndimage.gaussian_filter(volume, smooth_sigma, mode="constant")
        if smoothed.max() > iso:
            volume = smoothed
        else:
            logger.warning(f"平滑后的占据场不跨越阈值 {iso}（结构过细），改用二值场 dims={grid.dims}")
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso, spacing=grid.spacing_mm, method="lewiner")
    verts = verts - pad * np.asarray(grid.spacing_mm) + np.asarray(grid.origin_mm)
    faces = np.asarray(faces, dtype=np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    if not keep.all():
        logger.debug(f"丢弃 {int((~keep).sum())} 个退化面")
    return TriangleMesh(verts, faces[keep])


def uniform_area_sample(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """按面积加权均匀采样 n 个表面点（重心坐标）。"""
    if mesh.is_empty:
        raise RefineError("空网格无法采样")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise RefineError("网格总面积为 0")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face_idx]]
    return ((1.0 - r1)[:, None] * tri[:, 0]
            + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])


def poisson_disk_sample(mesh: TriangleMesh, n: int, rng: np.random.Generator,
                        oversample: int = 4, alpha: float = 8.0) -> PointCloud:
    """加权样本淘汰式泊松盘采样。

    先按面积过采样 oversample×n 个候选点，再反复淘汰邻域权重最大的候选，直到剩 n 个。
    权重 w_ij = (1 - d_ij / 2r_max)^alpha，r_max 按曲面面积与目标点数估计。
    """
    if n < 1:
        raise RefineError(f"采样点数必须 >= 1，当前 {n}")
    candidates = uniform_area_sample(mesh, int(oversample) * n, rng)
    if len(candidates) == n:
        return PointCloud(candidates, Frame.WORLD_MM)

    r_max = np.sqrt(mesh.area() / (2.0 * np.sqrt(3.0) * n))
    support = 2.0 * r_max
    pairs = cKDTree(candidates).query_pairs(support, output_type="ndarray")
    m = len(candidates)
    weights = np.zeros(m)
    if len(pairs):
        d = np.linalg.norm(candidates[pairs[:, 0]] - candidates[pairs[:, 1]], axis=1)
        w = (1.0 - d / support) ** alpha
        np.add.at(weights, pairs[:, 0], w)
        np.add.at(weights, pairs[:, 1], w)
        # 邻接表（CSR）
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        ww = np.concatenate([w, w])
        order = np.argsort(src, kind="stable")
        src, dst, ww = src[order], dst[order], ww[order]
        offsets = np.searchsorted(src, np.arange(m + 1))
    else:
        dst = ww = np.zeros(0)
        offsets = np.zeros(m + 1, dtype=np.int64)

    alive = np.ones(m, dtype=bool)
    heap = [(-weights[i], i) for i in range(m)]
    heapq.heapify(heap)
    remaining = m
    while remaining > n:
        neg_w, i = heapq.heappop(heap)
        if not alive[i] or -neg_w != weights[i]:
            continue
        alive[i] = False
        remaining -= 1
        for k in range(offsets[i], offsets[i + 1]):
            j = int(dst[k])
            if alive[j]:
                weights[j] -= ww[k]
                heapq.heappush(heap, (-weights[j], j))
    return PointCloud(candidates[alive], Frame.WORLD_MM)


# ========== 标准化 ==========

def compute_standardization(clouds: Sequence[PointCloud]) -> StandardizationStats:
    """对所有云的全部点做合并统计：三维均值 + 三轴合并的标量标准差。"""
    if not clouds:
        raise RefineError("计算标准化统计量至少需要一个点云")
    for c in clouds:
        if c.frame != Frame.WORLD_MM:
            raise FrameMismatchError("标准化统计量只能在 WorldMM 坐标系的点云上计算")
    pts = np.concatenate([c.points for c in clouds], axis=0)
    if len(pts) == 0:
        raise RefineError("点云全部为空")
    mean = pts.mean(axis=0)
    std = float(np.sqrt(np.mean((pts - mean) ** 2)))
    if std <= 0:
        raise RefineError("点云零方差，无法标准化")
    return StandardizationStats(mean, std)


def standardize(cloud: PointCloud, stats: StandardizationStats) -> PointCloud:
    if cloud.frame != Frame.WORLD_MM:
        raise FrameMismatchError(f"standardize 需要 WorldMM 点云，当前 {cloud.frame.value}")
    return PointCloud((cloud.points - stats.mean) / stats.std, Frame.STANDARDIZED)


def destandardize(cloud: PointCloud, stats: StandardizationStats) -> PointCloud:
    if cloud.frame != Frame.STANDARDIZED:
        raise FrameMismatchError(f"destandardize 需要 Standardized 点云，当前 {cloud.frame.value}")
    return PointCloud(cloud.points * stats.std + stats.mean, Frame.WORLD_MM)
