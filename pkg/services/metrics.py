"""
形状差异度量与配对统计检验。

- `chamfer()`：非平方欧氏 Chamfer，两个方向平均最近距离再取 0.5 倍和。
- `hausdorff()`：两个有向 Hausdorff 距离的较大者。
- `f1_at_tau()`：阈值 tau 下的精确率/召回率调和平均（百分比）。
- `measure()`：把单个点云的三项指标打包成 `MetricReport`。
- `wilcoxon_signed_rank()`：双侧 Wilcoxon 符号秩检验。

最近邻查询统一走 `nearest_distances()`（cKDTree），结果与暴力 O(n²) 一致。
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats as sp_stats
from scipy.spatial import cKDTree

from .errors import FrameMismatchError, RefineError
from .geometry import PointCloud

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 15


@dataclass
class MetricReport:
    """单个病例的度量结果。"""
    case_id: str
    chamfer_mm: float
    hausdorff_mm: float
    f1_percent: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.chamfer_mm < 0 or self.hausdorff_mm < 0:
            raise RefineError("距离度量不能为负")
        if self.f1_percent is not None and not 0.0 <= self.f1_percent <= 100.0:
            raise RefineError(f"F1 必须在 [0, 100] 内: {self.f1_percent}")


def _check_pair(a: PointCloud, b: PointCloud):
    if a.n == 0 or b.n == 0:
        raise RefineError("度量计算要求两个点云都非空")
    if a.frame != b.frame:
        raise FrameMismatchError(f"坐标系不一致: {a.frame.value} vs {b.frame.value}")


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """query 中每个点到 reference 的最近欧氏距离。"""
    distances, _ = cKDTree(reference).query(query, k=1)
    return np.asarray(distances, dtype=np.float64)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    _check_pair(a, b)
    d_ab = nearest_distances(a.points, b.points)
    d_ba = nearest_distances(b.points, a.points)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def directed_hausdorff(a: PointCloud, b: PointCloud) -> float:
    _check_pair(a, b)
    return float(nearest_distances(a.points, b.points).max())


def hausdorff(a: PointCloud, b: PointCloud) -> float:
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def f1_at_tau(pred: PointCloud, gt: PointCloud, tau_mm: float) -> float:
    """precision = pred 中距 gt 不超过 tau 的比例，recall 反之，返回百分比 F1。"""
    if tau_mm <= 0:
        raise RefineError(f"tau 必须为正: {tau_mm}")
    _check_pair(pred, gt)
    precision = float(np.mean(nearest_distances(pred.points, gt.points) <= tau_mm)) * 100.0
    recall = float(np.mean(nearest_distances(gt.points, pred.points) <= tau_mm)) * 100.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def default_tau(reference: PointCloud, fraction: float = 0.01) -> float:
    """默认 tau：参考点云包围盒对角线的 1%。"""
    return fraction * reference.bbox_diagonal()


def measure(case_id: str, cloud: PointCloud, reference: PointCloud, tau_mm: Optional[float] = None) -> MetricReport:
    """一个点云相对参考形状的 CD / HD，给出 tau 时附带 F1。"""
    f1 = f1_at_tau(cloud, reference, tau_mm) if tau_mm is not None else None
    return MetricReport(case_id, chamfer(cloud, reference), hausdorff(cloud, reference), f1)


# ========== Wilcoxon ==========

def _exact_upper_tail(doubled_ranks: np.ndarray, w_doubled: int) -> Dict[str, float]:
    """对 2^n 种符号组合做动态规划，得到 W+ 的精确分布（秩已乘 2 以支持并列半秩）。"""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    return {
        "le": float(probs[:w_doubled + 1].sum()),
        "ge": float(probs[w_doubled:].sum()),
    }


def wilcoxon_signed_rank(diffs: Sequence[float], method: str = "auto") -> float:
    """双侧 Wilcoxon 符号秩检验，返回 p 值。

    零差值先剔除；n <= 15 用精确枚举，否则用带并列校正的正态近似（无连续性校正）。
    method 可取 "auto" / "exact" / "approx"。
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise RefineError("所有配对差值均为 0，Wilcoxon 检验退化")
    if n < 6:
        logger.warning(f"非零差值只有 {n} 个，p 值不可能很小")
    if method not in {"auto", "exact", "approx"}:
        raise RefineError(f"未知的 Wilcoxon 方法: {method}")

    ranks = sp_stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    use_exact = method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N)
    if use_exact:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        tails = _exact_upper_tail(doubled, int(round(2.0 * w_plus)))
        return float(min(1.0, 2.0 * min(tails["le"], tails["ge"])))

    mean_w = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var_w = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var_w <= 0:
        raise RefineError("Wilcoxon 方差为 0，检验退化")
    z = (w_plus - mean_w) / np.sqrt(var_w)
    return float(min(1.0, 2.0 * sp_stats.norm.sf(abs(z))))


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """均值与总体标准差，空序列返回 NaN。"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def pairwise_brute_force(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """O(n·m) 距离矩阵，用作近邻加速结构的对照。"""
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)

