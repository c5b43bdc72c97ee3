"""
命令行与业务层之间的薄门面。

职责定位：
1. 每个子命令对应一个 `Api` 方法，参数原样转交给 `RefinementService`。
2. 统一异常拦截：领域异常（ValueError 子类）与意外异常都转换成
   `{"success": False, "error": "..."}`，`main.py` 只需要看 success 字段决定退出码。
3. 每次调用都记入输出目录下的运行台账 `runs.db`（开始、结束、产物、错误）。

真实调用链：
- `main.py` 解析参数
- `Api.<command>()`
- `RefinementService` -> synthdata / vae / diffusion / postprocess / metrics
- `RunRegistry`（台账）

排查建议：
- 命令返回 success=False：错误信息里带 `[stage]` 前缀时去对应阶段找原因。
- 台账里状态是 running：进程在命令中途被杀掉。
"""
import logging
from dataclasses import asdict
from functools import wraps
from typing import Callable, Optional, Sequence

from services.config import RunConfig
from services.pipeline import RefinementService
from services.run_registry import RunRegistry

logger = logging.getLogger(__name__)


def api_error_handler(func):
    """错误处理装饰器：成功时返回 `{"success": True, "data": ...}`。"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return {"success": True, "data": func(*args, **kwargs)}
        except ValueError as e:
            logger.error(f"{func.__name__} 失败: {e}")
            return {"success": False, "error": str(e)}
        except Exception as e:
            logger.exception(f"{func.__name__} 出现意外错误")
            return {"success": False, "error": f"操作失败: {str(e)}"}
    return wrapper


class Api:
    """命令行唯一可见的 Python API 门面，保持薄桥接：参数透传 + 台账 + 错误格式统一。"""

    def __init__(self, config: RunConfig):
        self._config = config
        self._service = RefinementService(config)
        self._registry_instance: Optional[RunRegistry] = None

    @property
    def _registry(self) -> RunRegistry:
        """延迟创建台账，避免只读命令以外的场景提前建目录。"""
        if self._registry_instance is None:
            self._registry_instance = RunRegistry(self._config.out_path / "runs.db")
        return self._registry_instance

    @property
    def service(self) -> RefinementService:
        return self._service

    def _tracked(self, command: str, action: Callable[[], dict], on_success: Callable[[str, dict], None] = None):
        run_id = self._registry.start_run(command, self._config.run.seed, self._config.to_dict())
        try:
            result = action()
        except Exception as e:
            self._registry.finish_run(run_id, False, error=str(e))
            raise
        if on_success:
            on_success(run_id, result)
        self._registry.finish_run(run_id, True, artifacts=result)
        result["run_id"] = run_id
        return result

    # ===== 数据 =====

    @api_error_handler
    def synth(self):
        return self._tracked("synth", self._service.synth)

    # ===== 训练 =====

    @api_error_handler
    def train_vae(self):
        return self._tracked("train-vae", self._service.train_vae)

    @api_error_handler
    def train_ddpm(self):
        return self._tracked("train-ddpm", self._service.train_ddpm)

    # ===== 推理与评估 =====

    @api_error_handler
    def refine(self, split: str = "test"):
        return self._tracked("refine", lambda: self._service.refine(split))

    @api_error_handler
    def eval(self, split: str = "test", svg: bool = False):
        def action():
            summary, cases = self._service.evaluate(split, svg)
            return {"summary": summary.to_rows(), "cases": [c.to_row() for c in cases]}

        def record(run_id, result):
            self._registry.record_case_metrics(run_id, result["cases"])

        result = self._tracked("eval", action, record)
        result.pop("cases")
        return result

    @api_error_handler
    def ablate_kl(self, lambdas: Optional[Sequence[float]] = None):
        return self._tracked("ablate-kl", lambda: {"rows": self._service.ablate_kl(lambdas)})

    @api_error_handler
    def bench(self):
        return self._tracked("bench", lambda: {"rows": self._service.bench()})

    # ===== 台账 =====

    @api_error_handler
    def list_runs(self, command: str = "", limit: int = 50):
        return self._registry.list_runs(command, limit)

    @api_error_handler
    def get_config(self):
        return asdict(self._config)
