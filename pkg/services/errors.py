"""
领域异常定义。

所有异常都继承自 `ValueError`，这样 `api.py` 里的 `api_error_handler` 不需要额外分支，
就能把它们转换成 `{"success": False, "error": ...}` 结构。
"""
from typing import Dict, Optional


class RefineError(ValueError):
    """本项目所有可预期错误的基类。"""


class NonFiniteError(RefineError):
    """张量或梯度出现 NaN/Inf。"""


class ShapeMismatchError(RefineError):
    """张量、点云或参数形状不一致。"""


class FrameMismatchError(RefineError):
    """点云坐标系标记不符合操作要求（WorldMM / Standardized）。"""


class ConfigError(RefineError):
    """配置文件或命令行参数不合法。"""


class CheckpointError(RefineError):
    """检查点文件损坏、类型不符或与当前配置不一致。"""


class TrainingDivergedError(RefineError):
    """训练损失变成非有限值，训练中止。"""

    def __init__(self, model_kind: str, epoch: int, last_losses: Optional[Dict[str, float]] = None):
        self.model_kind = model_kind
        self.epoch = epoch
        self.last_losses = dict(last_losses or {})
        super().__init__(
            f"{model_kind} 训练在第 {epoch} 轮发散，最近一次有限损失: {self.last_losses}"
        )


class StageError(RefineError):
    """流水线某个阶段失败，携带阶段标记方便定位。"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
