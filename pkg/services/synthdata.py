"""
合成配对数据集：管状体模（参考形状）+ 参数化损坏（次优形状）。

职责定位：
1. `TubeSpec` / `random_tube_spec()` / `gen_tube()`：样条中心线上扫掠球体并集得到弯曲变半径的管。
2. `CorruptionSpec` / `sample_corruption()` / `corrupt()`：删除中心线片段（欠分割）、
   在表面外侧并入椭球团块（过分割）、按概率翻转边界体素（边界抖动）。
3. `make_dataset()`：逐病例生成 -> 参考形状筛选 -> 网格 -> 泊松盘采样 -> 行配对（重度病例保证初始 CD 达到下限），
   再按 405:61:112 比例划分并只用训练集计算标准化统计量。
4. `save_case()` / `save_dataset_index()` / `load_dataset()`：目录布局 `cases/<id>/...`、`splits.csv`、`stats.bin`。

调用关系：
- 上游：`pipeline.RefinementService.synth()`
- 下游：`geometry`、`metrics`、`storage`、scipy.interpolate / scipy.optimize

排查建议：
- 频繁 "参考形状被拒绝"：检查 box_mm 与体积范围是否匹配（日志里有实际体积）。
- 困难/简单病例比例失衡：调整 mild/moderate/severe 权重与 severe_min_cd_mm；
  日志里 "重度损坏连续 N 次未达到" 说明损坏幅度相对体模尺寸太小。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import storage
from .config import DataSection
from .errors import RefineError
from .geometry import (
    Frame,
    PointCloud,
    StandardizationStats,
    TriangleMesh,
    VoxelGrid,
    binary_closing,
    compute_standardization,
    connected_components,
    marching_cubes,
    poisson_disk_sample,
    standardize,
)
from .metrics import chamfer

logger = logging.getLogger(__name__)

SEVERITIES = ("mild", "moderate", "severe")
SPLITS = ("train", "val", "test")
SPLIT_RATIO = (405, 61, 112)


# ========== 管状体模 ==========

@dataclass
class TubeSpec:
    """开放样条中心线（控制点，毫米）+ 控制点处的半径。"""
    control_points: np.ndarray
    radii_mm: np.ndarray
    spacing_mm: float = 2.0
    margin_mm: float = 40.0
    seed: int = 0

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float64)
        self.radii_mm = np.asarray(self.radii_mm, dtype=np.float64)
        if self.control_points.ndim != 2 or self.control_points.shape[1] != 3 or len(self.control_points) < 2:
            raise RefineError("中心线至少需要 2 个三维控制点")
        if self.radii_mm.shape != (len(self.control_points),) or np.any(self.radii_mm <= 0):
            raise RefineError("每个控制点都需要一个正半径")
        steps = np.linalg.norm(np.diff(self.control_points, axis=0), axis=1)
        if np.any(steps <= 1e-9):
            raise RefineError("相邻控制点重合，中心线退化")
        if self.spacing_mm <= 0:
            raise RefineError(f"体素间距必须为正: {self.spacing_mm}")


@dataclass
class Centerline:
    """按弧长等距采样的中心线。"""
    points: np.ndarray
    radii_mm: np.ndarray
    arclength_mm: np.ndarray

    @property
    def length_mm(self) -> float:
        return float(self.arclength_mm[-1])


def random_tube_spec(rng: np.random.Generator, section: DataSection, seed: int = 0) -> TubeSpec:
    """盒内带惯性的随机游走：8-16 个控制点，半径 15-30 mm 平滑变化。"""
    n_ctrl = int(rng.integers(8, 17))
    r_min, r_max = 15.0, 30.0
    lo, hi = r_max, section.box_mm - r_max
    point = rng.uniform(lo, hi, size=3)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    points = [point]
    for _ in range(n_ctrl - 1):
        direction = direction + 0.8 * rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        step = rng.uniform(35.0, 55.0)
        nxt = points[-1] + step * direction
        out = (nxt < lo) | (nxt > hi)
        direction[out] *= -1.0
        points.append(np.clip(points[-1] + step * direction, lo, hi))
    # 半径在少数锚点上随机取值再插值，保证沿管平滑变化
    anchors = rng.uniform(r_min, r_max, size=4)
    radii = np.interp(np.linspace(0, 3, n_ctrl), np.arange(4), anchors)
    return TubeSpec(np.array(points), radii, section.spacing_mm, seed=seed)


def tube_centerline(spec: TubeSpec) -> Centerline:
    """过控制点的三次样条（弦长参数化），按半个体素间距的弧长步长重采样。"""
    chords = np.linalg.norm(np.diff(spec.control_points, axis=0), axis=1)
    params = np.concatenate([[0.0], np.cumsum(chords)])
    path = CubicSpline(params, spec.control_points, axis=0)
    radius = CubicSpline(params, spec.radii_mm)

    dense_u = np.linspace(0.0, params[-1], 200 * len(params))
    dense = path(dense_u)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    if arc[-1] <= 0:
        raise RefineError("中心线长度为 0")
    step = spec.spacing_mm / 2.0
    targets = np.linspace(0.0, arc[-1], int(np.ceil(arc[-1] / step)) + 1)
    u = np.interp(targets, arc, dense_u)
    radii = np.clip(radius(u), spec.radii_mm.min(), spec.radii_mm.max())
    return Centerline(path(u), radii, targets)


def _lattice_grid(lo_mm: np.ndarray, hi_mm: np.ndarray, spacing: float) -> VoxelGrid:
    """在以 0 为原点、间距为 spacing 的格点上取覆盖 [lo, hi] 的空网格。"""
    lo_idx = np.floor(lo_mm / spacing).astype(int)
    hi_idx = np.ceil(hi_mm / spacing).astype(int)
    dims = tuple(int(d) for d in hi_idx - lo_idx + 1)
    return VoxelGrid(np.zeros(dims, dtype=bool), (spacing,) * 3, tuple(lo_idx * spacing))


def _stamp_ellipsoid(occ: np.ndarray, grid: VoxelGrid, center: np.ndarray, semi_axes: np.ndarray,
                     rotation: Optional[np.ndarray] = None):
    """把椭球（rotation 为 None 时为轴对齐）内的体素置 1，超出网格的部分裁掉。"""
    spacing = np.asarray(grid.spacing_mm)
    origin = np.asarray(grid.origin_mm)
    reach = semi_axes.max()
    lo = np.maximum(np.floor((center - reach - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((center + reach - origin) / spacing).astype(int) + 1, grid.dims)
    if np.any(hi <= lo):
        return
    axes = [origin[a] + spacing[a] * np.arange(lo[a], hi[a]) - center[a] for a in range(3)]
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if rotation is not None:
        offsets = offsets @ rotation
    inside = np.sum((offsets / semi_axes) ** 2, axis=-1) <= 1.0
    occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside


def gen_tube(spec: TubeSpec, centerline: Optional[Centerline] = None) -> VoxelGrid:
    """中心线上球体并集的占据网格，网格裁剪到管的包围盒外扩 margin_mm。"""
    line = centerline or tube_centerline(spec)
    reach = line.radii_mm.max() + spec.margin_mm
    grid = _lattice_grid(line.points.min(axis=0) - reach, line.points.max(axis=0) + reach, spec.spacing_mm)
    occ = grid.occupancy.copy()
    for center, r in zip(line.points, line.radii_mm):
        _stamp_ellipsoid(occ, grid, center, np.full(3, r))
    return grid.with_occupancy(occ)


# ========== 损坏 ==========

@dataclass
class CorruptionSpec:
    deleted_fractions: List[float] = field(default_factory=list)
    n_spurious_blobs: int = 0
    blob_radius_mm: Tuple[float, float] = (6.0, 15.0)
    blob_offset_mm: Tuple[float, float] = (2.0, 15.0)
    jitter_sigma_mm: float = 0.0

    def __post_init__(self):
        self.deleted_fractions = [float(f) for f in self.deleted_fractions]
        if any(not 0.0 < f < 0.5 for f in self.deleted_fractions):
            raise RefineError(f"删除片段比例必须在 (0, 0.5) 内: {self.deleted_fractions}")
        if self.n_spurious_blobs < 0 or self.jitter_sigma_mm < 0:
            raise RefineError("团块数与抖动幅度必须非负")
        if not 0 < self.blob_radius_mm[0] <= self.blob_radius_mm[1]:
            raise RefineError(f"团块半径范围不合法: {self.blob_radius_mm}")
        if not 0 <= self.blob_offset_mm[0] <= self.blob_offset_mm[1]:
            raise RefineError(f"团块偏移范围不合法: {self.blob_offset_mm}")

    @property
    def n_deleted_segments(self) -> int:
        return len(self.deleted_fractions)

    @property
    def is_identity(self) -> bool:
        return not self.deleted_fractions and self.n_spurious_blobs == 0 and self.jitter_sigma_mm == 0


def sample_corruption(severity: str, rng: np.random.Generator) -> CorruptionSpec:
    if severity == "mild":
        return CorruptionSpec(list(rng.uniform(0.03, 0.08, size=int(rng.integers(0, 2)))),
                              int(rng.integers(0, 2)), (5.0, 10.0), (0.0, 5.0), float(rng.uniform(0.5, 1.0)))
    if severity == "moderate":
        return CorruptionSpec(list(rng.uniform(0.08, 0.18, size=1)),
                              int(rng.integers(1, 3)), (8.0, 15.0), (3.0, 12.0), 1.0)
    if severity == "severe":
        return CorruptionSpec(list(rng.uniform(0.18, 0.32, size=int(rng.integers(1, 3)))),
                              int(rng.integers(2, 4)), (14.0, 24.0), (8.0, 22.0), 2.0)
    raise RefineError(f"未知严重程度: {severity}")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def jitter_probability(sigma_mm: float, spacing_mm: float) -> float:
    return float(min(0.5, 1.0 - np.exp(-sigma_mm / spacing_mm)))


def corrupt(grid: VoxelGrid, spec: CorruptionSpec, rng: np.random.Generator,
            centerline: Optional[Centerline] = None) -> VoxelGrid:
    """按 spec 依次删除片段、并入团块、抖动边界。

    删除片段和团块定位都依赖中心线；未提供中心线时只能做边界抖动。
    """
    if spec.is_identity:
        return grid.with_occupancy(grid.occupancy.copy())
    if (spec.deleted_fractions or spec.n_spurious_blobs) and centerline is None:
        raise RefineError("删除片段或添加团块需要提供中心线")
    occ = grid.occupancy.copy()

    if spec.deleted_fractions:
        filled = np.argwhere(occ)
        owner = cKDTree(centerline.points).query(grid.index_to_world(filled), k=1)[1]
        owner_arc = centerline.arclength_mm[owner]
        length = centerline.length_mm
        for frac in spec.deleted_fractions:
            span = frac * length
            # 只删中段，两端各留 10% 长度
            start = rng.uniform(0.1 * length, max(0.1 * length, 0.9 * length - span))
            hit = (owner_arc >= start) & (owner_arc <= start + span)
            occ[tuple(filled[hit].T)] = False

    for _ in range(spec.n_spurious_blobs):
        k = int(rng.integers(len(centerline.points)))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        semi_axes = rng.uniform(*spec.blob_radius_mm, size=3)
        offset = rng.uniform(*spec.blob_offset_mm)
        center = centerline.points[k] + direction * (centerline.radii_mm[k] + offset + semi_axes.min())
        _stamp_ellipsoid(occ, grid, center, semi_axes, _random_rotation(rng))

    if spec.jitter_sigma_mm > 0:
        p = jitter_probability(spec.jitter_sigma_mm, min(grid.spacing_mm))
        boundary = (occ & ~ndimage.binary_erosion(occ)) | (ndimage.binary_dilation(occ) & ~occ)
        occ ^= boundary & (rng.random(occ.shape) < p)
    return grid.with_occupancy(occ)


# ========== 数据集 ==========

@dataclass
class CaseRecord:
    case_id: str
    severity: str
    ref: PointCloud
    sub: PointCloud
    split: str = ""


@dataclass
class CaseArtifacts:
    """单个病例的全部中间产物，写盘后即可丢弃。"""
    record: CaseRecord
    ref_grid: VoxelGrid
    sub_grid: VoxelGrid
    ref_mesh: TriangleMesh
    sub_mesh: TriangleMesh
    attempts: int


@dataclass
class SynthDataset:
    cases: List[CaseRecord]
    stats: StandardizationStats

    def split(self, name: str) -> List[CaseRecord]:
        if name not in SPLITS:
            raise RefineError(f"未知划分: {name}")
        return [c for c in self.cases if c.split == name]

    def stacked(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """标准化后的 (参考, 次优) 点云数组，形状 (M, N, 3)。"""
        cases = self.split(name)
        if not cases:
            raise RefineError(f"划分 {name} 为空")
        refs = np.stack([standardize(c.ref, self.stats).points for c in cases])
        subs = np.stack([standardize(c.sub, self.stats).points for c in cases])
        return refs, subs


def split_sizes(n_cases: int) -> Tuple[int, int, int]:
    """训练 = ⌊n·405/578⌋，验证 = ⌊n·61/578⌋，测试取余数。"""
    if n_cases < 10:
        raise RefineError(f"病例数太少，无法划分: {n_cases}")
    total = sum(SPLIT_RATIO)
    train = n_cases * SPLIT_RATIO[0] // total
    val = n_cases * SPLIT_RATIO[1] // total
    return train, val, n_cases - train - val


def assign_splits(n_cases: int) -> List[str]:
    train, val, test = split_sizes(n_cases)
    return ["train"] * train + ["val"] * val + ["test"] * test


def pair_rows(ref: np.ndarray, sub: np.ndarray) -> np.ndarray:
    """一一最小距离指派：返回行序与 sub 对齐的 ref（点集不变）。"""
    cost = np.linalg.norm(sub[:, None, :] - ref[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return ref[cols[np.argsort(rows)]]


def _case_id(index: int) -> str:
    return f"case{index:04d}"


def _accept_reference(grid: VoxelGrid, section: DataSection) -> Tuple[bool, str]:
    count, _ = connected_components(grid)
    if count != 1:
        return False, f"{count} 个连通块"
    volume = grid.volume_ml
    if not section.volume_min_ml <= volume <= section.volume_max_ml:
        return False, f"体积 {volume:.0f} ml 超出范围"
    return True, ""


def generate_case(index: int, seed: int, section: DataSection, severity: Optional[str] = None) -> CaseArtifacts:
    """生成单个病例，随机流由 (seed, index) 派生，与其他病例互不影响。"""
    rng = np.random.default_rng([seed, index])
    for attempt in range(1, section.max_retries + 1):
        spec = random_tube_spec(rng, section, seed=seed)
        line = tube_centerline(spec)
        ref_grid = binary_closing(gen_tube(spec, line), section.closing_radius)
        ok, reason = _accept_reference(ref_grid, section)
        if ok:
            break
        logger.info(f"{_case_id(index)} 参考形状被拒绝（第 {attempt} 次）: {reason}")
    else:
        raise RefineError(f"{_case_id(index)} 连续 {section.max_retries} 次未生成合格的参考形状")

    weights = np.array([section.mild_weight, section.moderate_weight, section.severe_weight])
    chosen = rng.choice(SEVERITIES, p=weights / weights.sum())
    severity = severity or str(chosen)
    ref_mesh = marching_cubes(ref_grid)
    ref_cloud = poisson_disk_sample(ref_mesh, section.n_points, rng, section.oversample)

    # 重度病例重抽损坏参数，直到初始 CD 达到下限；用尽次数时保留最后一次
    kept = None
    for _ in range(section.max_retries):
        grid = corrupt(ref_grid, sample_corruption(severity, rng), rng, line)
        mesh = marching_cubes(grid)
        if mesh.is_empty:
            continue
        cloud = poisson_disk_sample(mesh, section.n_points, rng, section.oversample)
        kept = (grid, mesh, cloud, chamfer(cloud, ref_cloud))
        if severity != "severe" or kept[3] >= section.severe_min_cd_mm:
            break
        logger.debug(f"{_case_id(index)} 重度损坏 CD={kept[3]:.2f} mm 低于下限，重新抽取")
    else:
        if kept is not None:
            logger.warning(f"{_case_id(index)} 重度损坏连续 {section.max_retries} 次未达到 "
                           f"{section.severe_min_cd_mm} mm，保留最后一次 (CD={kept[3]:.2f} mm)")
    if kept is None:
        raise RefineError(f"{_case_id(index)} 损坏后网格为空")
    sub_grid, sub_mesh, sub_cloud, init_cd = kept
    ref_cloud = PointCloud(pair_rows(ref_cloud.points, sub_cloud.points), Frame.WORLD_MM)
    logger.debug(f"{_case_id(index)} 生成完成: {severity}, 体积 {ref_grid.volume_ml:.0f} ml, 初始 CD {init_cd:.2f} mm")
    record = CaseRecord(_case_id(index), severity, ref_cloud, sub_cloud)
    return CaseArtifacts(record, ref_grid, sub_grid, ref_mesh, sub_mesh, attempt)


def save_case(artifacts: CaseArtifacts, root: Path):
    case_dir = Path(root) / "cases" / artifacts.record.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    storage.save_voxel_grid(artifacts.ref_grid, case_dir / "ref.vgrd")
    storage.save_voxel_grid(artifacts.sub_grid, case_dir / "sub.vgrd")
    storage.save_point_cloud(artifacts.record.ref, case_dir / "ref.pcld")
    storage.save_point_cloud(artifacts.record.sub, case_dir / "sub.pcld")
    storage.save_mesh_obj(artifacts.ref_mesh, case_dir / "ref.obj")
    storage.save_mesh_obj(artifacts.sub_mesh, case_dir / "sub.obj")


def make_dataset(section: DataSection, seed: int, out_dir: Optional[Path] = None,
                 threads: int = 1) -> SynthDataset:
    """生成 n_cases 个配对病例并划分；给定 out_dir 时逐病例写盘。

    结果只取决于 (section, seed)，与线程数无关；标准化统计量只来自训练集的参考与次优点云。
    """
    splits = assign_splits(section.n_cases)

    def build(index: int) -> CaseRecord:
        artifacts = generate_case(index, seed, section)
        artifacts.record.split = splits[index]
        if out_dir is not None:
            save_case(artifacts, out_dir)
        return artifacts.record

    logger.info(f"开始生成数据集: {section.n_cases} 个病例, N={section.n_points}, seed={seed}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cases = list(pool.map(build, range(section.n_cases)))
    else:
        cases = [build(i) for i in range(section.n_cases)]

    train = [c for c in cases if c.split == "train"]
    stats = compute_standardization([c.ref for c in train] + [c.sub for c in train])
    dataset = SynthDataset(cases, stats)
    if out_dir is not None:
        save_dataset_index(dataset, out_dir)
    counts = {name: len(dataset.split(name)) for name in SPLITS}
    logger.info(f"数据集生成完成: 划分 {counts}, 严重程度 {severity_counts(cases)}")
    return dataset


def save_dataset_index(dataset: SynthDataset, root: Path):
    root = Path(root)
    storage.write_csv(root / "splits.csv", ["case_id", "split", "severity"],
                      [{"case_id": c.case_id, "split": c.split, "severity": c.severity} for c in dataset.cases])
    storage.save_stats(dataset.stats, root / "stats.bin")


def load_dataset(root: Path) -> SynthDataset:
    root = Path(root)
    index = root / "splits.csv"
    if not index.exists():
        raise RefineError(f"数据集目录缺少 splits.csv: {root}")
    cases = []
    for row in storage.read_csv(index):
        case_dir = root / "cases" / row["case_id"]
        cases.append(CaseRecord(row["case_id"], row["severity"],
                                storage.load_point_cloud(case_dir / "ref.pcld"),
                                storage.load_point_cloud(case_dir / "sub.pcld"),
                                row["split"]))
    return SynthDataset(cases, storage.load_stats(root / "stats.bin"))


def severity_counts(cases: Sequence[CaseRecord]) -> Dict[str, int]:
    return {s: sum(c.severity == s for c in cases) for s in SEVERITIES}
