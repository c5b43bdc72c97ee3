"""
运行配置：所有模块的超参数集中在 `RunConfig`。

文件格式是带 `[section]` 头的 `key = value` 文本（configparser），浮点数用 repr 写出，
保证 dump -> load 无损。解析顺序：dataclass 默认值 -> 配置文件 -> 命令行覆盖。

排查建议：
- 报 "未知配置项"：多半是拼写错误或旧版本配置，对照本文件的字段名。
- 结果不可复现：先比较两次运行输出目录里的 `config.resolved`。
"""
import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, get_type_hints

from .errors import ConfigError


@dataclass
class DataSection:
    n_cases: int = 150
    n_points: int = 256
    spacing_mm: float = 2.0
    box_mm: float = 300.0
    closing_radius: int = 1
    volume_min_ml: float = 400.0
    volume_max_ml: float = 1500.0
    max_retries: int = 20
    oversample: int = 4
    # 严重程度混合比例：轻度 / 中度 / 重度
    mild_weight: float = 0.30
    moderate_weight: float = 0.30
    severe_weight: float = 0.40
    # 重度病例初始 CD 的下限（mm），0 表示不限制
    severe_min_cd_mm: float = 10.0


@dataclass
class VaeSection:
    d_z: int = 32
    d_h: int = 4
    hidden: int = 128
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lambda_z_max: float = 0.4
    lambda_h_max: float = 0.4
    warmup_fraction: float = 0.5
    checkpoint_every: int = 0
    log_every: int = 10


@dataclass
class DiffusionSection:
    steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    time_dim: int = 64
    hidden: int = 128
    se_blocks: int = 4
    epochs: int = 1000
    batch_size: int = 10
    lr: float = 2e-4
    log_every: int = 50


@dataclass
class PostprocessSection:
    mls_radius_mm: float = 10.0
    densify_gap_mm: float = 10.0
    densify_neighborhood: int = 10
    outlier_min_neighbors: int = 5
    outlier_radius_mm: float = 15.0


@dataclass
class EvalSection:
    stratum_threshold_mm: float = 10.0
    f1_tau_fraction: float = 0.01
    bench_cases: int = 5


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset_dir: str = ""
    threads: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    @property
    def out_path(self) -> Path:
        return Path(self.run.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.run.dataset_dir) if self.run.dataset_dir else self.out_path / "dataset"

    def validate(self) -> "RunConfig":
        """检查取值范围，失败抛 ConfigError。"""
        d, v, f, p = self.data, self.vae, self.diffusion, self.postprocess
        checks = [
            (d.n_cases >= 10, "data.n_cases 必须 >= 10"),
            (d.n_points >= 2, "data.n_points 必须 >= 2"),
            (d.spacing_mm > 0 and d.box_mm > 0, "data.spacing_mm / box_mm 必须为正"),
            (d.closing_radius >= 1, "data.closing_radius 必须 >= 1"),
            (0 < d.volume_min_ml < d.volume_max_ml, "data.volume_min_ml 必须小于 volume_max_ml"),
            (min(d.mild_weight, d.moderate_weight, d.severe_weight) >= 0
             and d.mild_weight + d.moderate_weight + d.severe_weight > 0, "严重程度权重必须非负且不全为 0"),
            (d.severe_min_cd_mm >= 0, "data.severe_min_cd_mm 必须非负"),
            (v.d_z >= 1 and v.d_h >= 0 and v.hidden >= 1, "VAE 维度必须为正"),
            (v.epochs >= 1 and v.batch_size >= 1 and v.lr > 0, "VAE 训练参数必须为正"),
            (v.lambda_z_max > 0 and v.lambda_h_max > 0, "KL 权重最大值必须为正"),
            (0 < v.warmup_fraction <= 1, "vae.warmup_fraction 必须在 (0, 1] 内"),
            (f.steps >= 1, "diffusion.steps 必须 >= 1"),
            (0 < f.beta_start <= f.beta_end < 1, "必须满足 0 < beta_start <= beta_end < 1"),
            (f.time_dim >= 2 and f.time_dim % 2 == 0, "diffusion.time_dim 必须是正偶数"),
            (f.se_blocks >= 1 and f.hidden >= 1, "去噪网络结构参数必须为正"),
            (f.epochs >= 1 and f.batch_size >= 1 and f.lr > 0, "DDPM 训练参数必须为正"),
            (min(p.mls_radius_mm, p.densify_gap_mm, p.outlier_radius_mm) > 0
             and p.densify_neighborhood >= 1 and p.outlier_min_neighbors >= 1, "后处理参数必须为正"),
            (self.eval.stratum_threshold_mm > 0 and self.eval.f1_tau_fraction > 0, "评估阈值必须为正"),
            (self.run.threads >= 1 and self.run.seed >= 0, "run.threads 必须 >= 1，seed 必须非负"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


def _parse_value(raw: str, target: type, key: str) -> Any:
    try:
        if target is bool:
            lowered = raw.strip().lower()
            if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(raw)
            return lowered in {"true", "1", "yes"}
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"配置项 {key} 的值无法解析为 {target.__name__}: {raw!r}") from e


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """序列化为带 section 的 key = value 文本，字段顺序固定。"""
    lines = []
    for section in fields(config):
        lines.append(f"[{section.name}]")
        for item in fields(getattr(config, section.name)):
            lines.append(f"{item.name} = {_format_value(getattr(getattr(config, section.name), item.name))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """在 base（默认值）之上叠加文本中的配置项；未知 section/key 直接报错。"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as e:
        raise ConfigError(f"配置文件格式错误: {e}") from e

    config = base or RunConfig()
    section_names = {s.name for s in fields(config)}
    for name in parser.sections():
        if name not in section_names:
            raise ConfigError(f"未知配置段: [{name}]")
        section = getattr(config, name)
        hints = get_type_hints(type(section))
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"未知配置项: {name}.{key}")
            setattr(section, key, _parse_value(raw, hints[key], f"{name}.{key}"))
    return config


def load_config(path: Optional[Path] = None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    return parse_config(path.read_text(encoding="utf-8")).validate()


def save_config(config: RunConfig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")


def apply_overrides(config: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
                    cases: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    """命令行参数覆盖配置文件。"""
    if seed is not None:
        config.run.seed = int(seed)
    if out_dir is not None:
        config.run.out_dir = str(out_dir)
    if cases is not None:
        config.data.n_cases = int(cases)
    if threads is not None:
        config.run.threads = int(threads)
    return config.validate()
