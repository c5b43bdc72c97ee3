"""
形状细化流水线的业务编排层。

职责定位：
1. `RefinementService`：每个子命令对应一个方法（synth / train_vae / train_ddpm / refine /
   eval / ablate_kl / bench），负责读写输出目录里的产物并串联各领域模块。
2. `stratify()` / `summarize_cases()`：按初始 CD 分层，汇总均值±标准差、改善百分比与 Wilcoxon p 值。
3. 运行目录布局：
   - `config.resolved`：本次实际生效的配置
   - `dataset/`：合成数据集（可用 run.dataset_dir 指向别处）
   - `vae.ckpt`、`vae_epoch<E>.ckpt`、`global_ddpm.ckpt`、`local_ddpm.ckpt`
   - `refined/<case_id>/{refined_raw.pcld, refined.pcld}`
   - `per_case.csv`、`summary.csv`、`ablate_kl.csv`、`bench.csv`、可选 `cd_scatter.svg`

调用关系：
- 上游：`Api`
- 下游：`synthdata` / `vae` / `diffusion` / `postprocess` / `metrics` / `storage`

排查建议：
- 报 "检查点与配置不一致"：对比 `config.resolved` 与检查点里回显的 model 段。
- 两次运行结果不一致：先确认 seed 与配置完全相同；台账 runs.db 不在确定性范围内。
"""
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import storage
from .config import RunConfig, dump_config, save_config
from .diffusion import (
    DdpmModels,
    GlobalDenoiser,
    LocalDenoiser,
    refine as refine_clouds,
    schedule_from_section,
    train_ddpms,
)
from .errors import CheckpointError, RefineError
from .geometry import Frame, PointCloud, destandardize, marching_cubes, poisson_disk_sample, standardize
from .metrics import default_tau, measure, summarize, wilcoxon_signed_rank
from .postprocess import postprocess
from .synthdata import CaseRecord, SynthDataset, load_dataset, make_dataset
from .vae import HierarchicalVAE, train_vae

logger = logging.getLogger(__name__)

STRATA = ("all", "easy", "hard")
PER_CASE_COLUMNS = ["case_id", "split", "severity", "init_cd", "refined_cd", "init_hd", "refined_hd",
                    "raw_cd", "raw_hd", "stratum"]
SUMMARY_COLUMNS = ["stratum", "n",
                   "init_cd_mean", "init_cd_std", "refined_cd_mean", "refined_cd_std",
                   "init_hd_mean", "init_hd_std", "refined_hd_mean", "refined_hd_std",
                   "cd_improvement_pct", "hd_improvement_pct", "cd_p_value", "hd_p_value",
                   "raw_hd_mean", "raw_hd_std", "hd_not_increased_fraction", "note"]
ABLATION_COLUMNS = ["label", "n", "f1_mean", "f1_std", "cd_mean", "cd_std", "hd_mean", "hd_std"]

# 各阶段随机流编号，与 seed 一起派生生成器
_STREAM_VAE = 1
_STREAM_DDPM = 2
_STREAM_REFINE = 3
_STREAM_BENCH = 4


# ========== 评估汇总 ==========

@dataclass
class CaseEval:
    case_id: str
    split: str
    severity: str
    init_cd: float
    refined_cd: float
    init_hd: float
    refined_hd: float
    raw_cd: float = float("nan")
    raw_hd: float = float("nan")
    stratum: str = ""

    def to_row(self) -> Dict[str, object]:
        return {col: getattr(self, col) for col in PER_CASE_COLUMNS}


@dataclass
class EvalSummary:
    """按层（all / easy / hard）汇总的评估结果。"""
    rows: Dict[str, Dict[str, object]] = field(default_factory=dict)

    @property
    def counts(self) -> Dict[str, int]:
        return {name: int(row["n"]) for name, row in self.rows.items()}

    def to_rows(self) -> List[Dict[str, object]]:
        return [self.rows[name] for name in STRATA if name in self.rows]


def stratify(init_cds: Sequence[float], threshold_mm: float = 10.0) -> List[str]:
    """初始 CD < threshold 为 easy，否则（含恰好等于）为 hard。"""
    return ["easy" if cd < threshold_mm else "hard" for cd in init_cds]


def _paired_p_value(before: np.ndarray, after: np.ndarray) -> Tuple[float, str]:
    try:
        return wilcoxon_signed_rank(before - after), ""
    except RefineError as e:
        logger.warning(f"Wilcoxon 检验退化: {e}")
        return float("nan"), "degenerate"


def _improvement(before: float, after: float) -> float:
    if not np.isfinite(before) or before == 0:
        return float("nan")
    return 100.0 * (before - after) / before


def _summarize_stratum(name: str, cases: Sequence[CaseEval]) -> Dict[str, object]:
    row: Dict[str, object] = {"stratum": name, "n": len(cases)}
    columns = {key: np.array([getattr(c, key) for c in cases], dtype=np.float64)
               for key in ("init_cd", "refined_cd", "init_hd", "refined_hd", "raw_hd")}
    for key in ("init_cd", "refined_cd", "init_hd", "refined_hd", "raw_hd"):
        stats = summarize(columns[key])
        row[f"{key}_mean"], row[f"{key}_std"] = stats["mean"], stats["std"]
    row["cd_improvement_pct"] = _improvement(row["init_cd_mean"], row["refined_cd_mean"])
    row["hd_improvement_pct"] = _improvement(row["init_hd_mean"], row["refined_hd_mean"])

    notes = []
    if not cases:
        row["cd_p_value"] = row["hd_p_value"] = float("nan")
        notes.append("empty")
    else:
        row["cd_p_value"], cd_note = _paired_p_value(columns["init_cd"], columns["refined_cd"])
        row["hd_p_value"], hd_note = _paired_p_value(columns["init_hd"], columns["refined_hd"])
        notes += [f"cd_{cd_note}"] if cd_note else []
        notes += [f"hd_{hd_note}"] if hd_note else []

    raw = columns["raw_hd"]
    valid = np.isfinite(raw)
    row["hd_not_increased_fraction"] = (float(np.mean(columns["refined_hd"][valid] <= raw[valid]))
                                        if valid.any() else float("nan"))
    row["note"] = ";".join(notes)
    return row


def summarize_cases(cases: Sequence[CaseEval], threshold_mm: float = 10.0) -> EvalSummary:
    """给每个病例打分层标签并汇总；返回的各层计数满足 easy + hard = all。"""
    for case, label in zip(cases, stratify([c.init_cd for c in cases], threshold_mm)):
        case.stratum = label
    summary = EvalSummary()
    summary.rows["all"] = _summarize_stratum("all", cases)
    for name in ("easy", "hard"):
        summary.rows[name] = _summarize_stratum(name, [c for c in cases if c.stratum == name])
    return summary


def score_case(case: CaseRecord, refined: PointCloud, raw: Optional[PointCloud] = None) -> CaseEval:
    """初始（次优）与细化结果分别相对参考形状的 CD / HD，单位毫米。"""
    init = measure(case.case_id, case.sub, case.ref)
    final = measure(case.case_id, refined, case.ref)
    result = CaseEval(case.case_id, case.split, case.severity, init.chamfer_mm, final.chamfer_mm,
                      init.hausdorff_mm, final.hausdorff_mm)
    if raw is not None:
        before = measure(case.case_id, raw, case.ref)
        result.raw_cd, result.raw_hd = before.chamfer_mm, before.hausdorff_mm
    return result


def write_scatter_svg(cases: Sequence[CaseEval], path: Path):
    """初始 CD 与细化后 CD 的散点图（静态 SVG）。"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cd-scatter"
    init = np.array([c.init_cd for c in cases])
    refined = np.array([c.refined_cd for c in cases])
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = ["tab:blue" if c.stratum == "easy" else "tab:red" for c in cases]
    ax.scatter(init, refined, c=colors, s=14)
    upper = float(max(init.max(initial=1.0), refined.max(initial=1.0))) * 1.05
    ax.plot([0, upper], [0, upper], "k--", linewidth=0.8)
    ax.set_xlim(0, upper)
    ax.set_ylim(0, upper)
    ax.set_xlabel("initial CD (mm)")
    ax.set_ylabel("refined CD (mm)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ========== 业务服务 ==========

class RefinementService:
    """流水线各子命令的实现，所有产物都写在 config.out_path 下。"""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        self.out = config.out_path
        self._dataset: Optional[SynthDataset] = None

    # ---------- 通用 ----------

    def prepare(self, command: str):
        """创建输出目录，写出 config.resolved 并把配置与 seed 记入日志。"""
        self.out.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.out / "config.resolved")
        logger.info(f"[{command}] seed={self.config.run.seed} 输出目录={self.out}\n{dump_config(self.config)}")

    def _rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.run.seed, *stream])

    def config_echo(self) -> Dict[str, object]:
        """写进检查点的配置回显，不含路径与线程数，保证换目录重跑时检查点逐字节一致。"""
        full = self.config.to_dict()
        return {"data": full["data"], "vae": full["vae"], "diffusion": full["diffusion"],
                "seed": self.config.run.seed}

    @property
    def dataset(self) -> SynthDataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.config.dataset_path)
        return self._dataset

    def _case_index(self) -> Dict[str, int]:
        return {c.case_id: i for i, c in enumerate(self.dataset.cases)}

    # ---------- synth ----------

    def synth(self) -> Dict[str, object]:
        self.prepare("synth")
        target = self.config.dataset_path
        self._dataset = make_dataset(self.config.data, self.config.run.seed, target, self.config.run.threads)
        counts = {name: len(self._dataset.split(name)) for name in ("train", "val", "test")}
        return {"dataset_dir": str(target), "cases": len(self._dataset.cases), "splits": counts}

    # ---------- VAE ----------

    def _save_vae(self, vae: HierarchicalVAE, path: Path, epochs: int, history) -> Path:
        metadata = {"epochs": epochs, "final_losses": history.last(), "history": history.losses}
        storage.save_checkpoint(vae.to_checkpoint(self.config_echo(), metadata), path)
        return path

    def train_vae(self) -> Dict[str, object]:
        self.prepare("train-vae")
        refs, subs = self.dataset.stacked("train")
        shapes = np.concatenate([refs, subs], axis=0)
        saved: List[str] = []

        def on_checkpoint(epoch, vae, history):
            saved.append(str(self._save_vae(vae, self.out / f"vae_epoch{epoch}.ckpt", epoch, history)))

        vae, history = train_vae(shapes, self.config.vae, self._rng(_STREAM_VAE), on_checkpoint=on_checkpoint)
        final = self._save_vae(vae, self.out / "vae.ckpt", self.config.vae.epochs, history)
        first, last = history.smoothed("total")
        return {"checkpoint": str(final), "periodic": saved, "loss_start": first, "loss_end": last}

    def load_vae(self, path: Optional[Path] = None) -> HierarchicalVAE:
        ckpt = storage.load_checkpoint(path or self.out / "vae.ckpt", "VAE")
        model = ckpt.config.get("model", {})
        expected = {"d_z": self.config.vae.d_z, "d_h": self.config.vae.d_h, "n_points": self.config.data.n_points}
        mismatched = {k: (model.get(k), v) for k, v in expected.items() if model.get(k) != v}
        if mismatched:
            raise CheckpointError(f"VAE 检查点与配置不一致（检查点, 配置）: {mismatched}")
        return HierarchicalVAE.from_checkpoint(ckpt)

    # ---------- DDPM ----------

    def train_ddpm(self) -> Dict[str, object]:
        self.prepare("train-ddpm")
        vae = self.load_vae()
        refs, subs = self.dataset.stacked("train")
        models, histories = train_ddpms(vae, refs, subs, self.config.diffusion, self._rng(_STREAM_DDPM),
                                        threads=self.config.run.threads)
        paths = {}
        for kind, model, name in (("GLOBAL_DDPM", models.global_model, "global_ddpm.ckpt"),
                                  ("LOCAL_DDPM", models.local_model, "local_ddpm.ckpt")):
            history = histories[kind]
            metadata = {"epochs": self.config.diffusion.epochs, "final_losses": history.last(),
                        "history": history.losses}
            path = self.out / name
            storage.save_checkpoint(model.to_checkpoint(self.config_echo(), models.schedule, metadata), path)
            paths[kind] = str(path)
        return {"checkpoints": paths,
                "loss_end": {kind: h.smoothed("loss")[1] for kind, h in histories.items()}}

    def load_ddpms(self) -> DdpmModels:
        section = self.config.diffusion
        global_ckpt = storage.load_checkpoint(self.out / "global_ddpm.ckpt", "GLOBAL_DDPM")
        local_ckpt = storage.load_checkpoint(self.out / "local_ddpm.ckpt", "LOCAL_DDPM")
        for ckpt in (global_ckpt, local_ckpt):
            model = ckpt.config.get("model", {})
            if model.get("d_z") != self.config.vae.d_z:
                raise CheckpointError(f"{ckpt.kind} 检查点 D_z={model.get('d_z')} 与配置 D_z={self.config.vae.d_z} 不一致")
            if ckpt.config.get("schedule", {}).get("steps") != section.steps:
                raise CheckpointError(f"{ckpt.kind} 检查点的扩散步数与配置 steps={section.steps} 不一致")
        return DdpmModels(GlobalDenoiser.from_checkpoint(global_ckpt), LocalDenoiser.from_checkpoint(local_ckpt),
                          schedule_from_section(section))

    # ---------- refine ----------

    def _refine_dir(self, case_id: str) -> Path:
        return self.out / "refined" / case_id

    def refine(self, split: str = "test") -> Dict[str, object]:
        self.prepare("refine")
        vae, models = self.load_vae(), self.load_ddpms()
        cases = self.dataset.split(split)
        stats = self.dataset.stats
        index = self._case_index()
        inputs = [standardize(c.sub, stats) for c in cases]
        rngs = [self._rng(_STREAM_REFINE, index[c.case_id]) for c in cases]
        started = time.perf_counter()
        refined = refine_clouds(inputs, vae, models, rngs)
        for case, cloud in zip(cases, refined):
            target = self._refine_dir(case.case_id)
            target.mkdir(parents=True, exist_ok=True)
            storage.save_point_cloud(destandardize(cloud, stats), target / "refined_raw.pcld")
            storage.save_point_cloud(postprocess(cloud, stats, self.config.postprocess), target / "refined.pcld")
        logger.info(f"细化完成: {len(cases)} 个病例, 用时 {time.perf_counter() - started:.1f}s")
        return {"split": split, "cases": len(cases), "output_dir": str(self.out / "refined")}

    # ---------- eval ----------

    def evaluate(self, split: str = "test", svg: bool = False) -> Tuple[EvalSummary, List[CaseEval]]:
        self.prepare("eval")
        cases = sorted(self.dataset.split(split), key=lambda c: c.case_id)
        if not cases:
            raise RefineError(f"划分 {split} 中没有病例")
        scored = []
        for case in cases:
            target = self._refine_dir(case.case_id)
            if not (target / "refined.pcld").exists():
                raise RefineError(f"缺少 {case.case_id} 的细化结果，请先运行 refine")
            raw_path = target / "refined_raw.pcld"
            raw = storage.load_point_cloud(raw_path) if raw_path.exists() else None
            scored.append(score_case(case, storage.load_point_cloud(target / "refined.pcld"), raw))

        summary = summarize_cases(scored, self.config.eval.stratum_threshold_mm)
        storage.write_csv(self.out / "per_case.csv", PER_CASE_COLUMNS, [c.to_row() for c in scored])
        storage.write_csv(self.out / "summary.csv", SUMMARY_COLUMNS, summary.to_rows())
        if svg:
            write_scatter_svg(scored, self.out / "cd_scatter.svg")
        overall = summary.rows["all"]
        logger.info(f"评估完成: n={overall['n']}, CD 改善 {overall['cd_improvement_pct']:.1f}%, "
                    f"HD 改善 {overall['hd_improvement_pct']:.1f}%, p(CD)={overall['cd_p_value']:.3g}")
        return summary, scored

    # ---------- ablate-kl ----------

    def _reconstruction_row(self, label: str, vae: HierarchicalVAE, cases: Sequence[CaseRecord]) -> Dict[str, object]:
        stats = self.dataset.stats
        points = np.stack([standardize(c.ref, stats).points for c in cases])
        recon = vae.reconstruct(points)
        f1s, cds, hds = [], [], []
        for case, rec in zip(cases, recon):
            cloud = destandardize(PointCloud(rec, Frame.STANDARDIZED), stats)
            report = measure(case.case_id, cloud, case.ref, default_tau(case.ref, self.config.eval.f1_tau_fraction))
            f1s.append(report.f1_percent)
            cds.append(report.chamfer_mm)
            hds.append(report.hausdorff_mm)
        row: Dict[str, object] = {"label": label, "n": len(cases)}
        for key, values in (("f1", f1s), ("cd", cds), ("hd", hds)):
            s = summarize(values)
            row[f"{key}_mean"], row[f"{key}_std"] = s["mean"], s["std"]
        return row

    def periodic_checkpoints(self) -> List[Tuple[int, Path]]:
        found = []
        for path in self.out.glob("vae_epoch*.ckpt"):
            match = re.fullmatch(r"vae_epoch(\d+)\.ckpt", path.name)
            if match:
                found.append((int(match.group(1)), path))
        return sorted(found)

    def ablate_kl(self, lambdas: Optional[Sequence[float]] = None, split: str = "test") -> List[Dict[str, object]]:
        """KL 相关消融：默认按周期检查点（训练轮数）扫描；给出 lambdas 时为每个 KL 上限各训练一个 VAE。"""
        self.prepare("ablate-kl")
        cases = self.dataset.split(split)
        rows = []
        if lambdas:
            refs, subs = self.dataset.stacked("train")
            shapes = np.concatenate([refs, subs], axis=0)
            for lam in lambdas:
                if lam <= 0:
                    raise RefineError(f"KL 上限必须为正: {lam}")
                section = replace(self.config.vae, lambda_z_max=float(lam), lambda_h_max=float(lam),
                                  checkpoint_every=0)
                vae, _ = train_vae(shapes, section, self._rng(_STREAM_VAE))
                rows.append(self._reconstruction_row(f"lambda={lam!r}", vae, cases))
        else:
            checkpoints = self.periodic_checkpoints()
            if not checkpoints:
                raise RefineError("没有找到 vae_epoch<E>.ckpt，请设置 vae.checkpoint_every 后重新训练 VAE")
            for epoch, path in checkpoints:
                rows.append(self._reconstruction_row(f"epoch={epoch}", self.load_vae(path), cases))
        storage.write_csv(self.out / "ablate_kl.csv", ABLATION_COLUMNS, rows)
        return rows

    # ---------- bench ----------

    def bench(self) -> List[Dict[str, object]]:
        """各阶段耗时（秒），只做记录，不设阈值。"""
        self.prepare("bench")
        vae, models = self.load_vae(), self.load_ddpms()
        stats = self.dataset.stats
        cases = self.dataset.split("test")[: self.config.eval.bench_cases]
        if not cases:
            raise RefineError("测试集为空，无法计时")
        rng = self._rng(_STREAM_BENCH)
        timings: Dict[str, List[float]] = {"marching_cubes": [], "poisson_disk_sampling": [],
                                           "inference": [], "postprocess": []}
        for case in cases:
            grid = storage.load_voxel_grid(self.config.dataset_path / "cases" / case.case_id / "sub.vgrd")
            t0 = time.perf_counter()
            mesh = marching_cubes(grid)
            t1 = time.perf_counter()
            poisson_disk_sample(mesh, self.config.data.n_points, rng, self.config.data.oversample)
            t2 = time.perf_counter()
            (refined,) = refine_clouds([standardize(case.sub, stats)], vae, models, [rng])
            t3 = time.perf_counter()
            postprocess(refined, stats, self.config.postprocess)
            t4 = time.perf_counter()
            for key, seconds in zip(timings, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
                timings[key].append(seconds)
        rows = [{"stage": stage, "n": len(values), "mean_s": summarize(values)["mean"],
                 "std_s": summarize(values)["std"]} for stage, values in timings.items()]
        storage.write_csv(self.out / "bench.csv", ["stage", "n", "mean_s", "std_s"], rows)
        return rows
