"""
形状细化流水线命令行入口。

职责定位：
1. 解析子命令与公共参数（--config / --seed / --out / --cases / --device-threads / -v）。
2. 按 "默认值 -> 配置文件 -> 命令行" 的顺序得到 RunConfig，再创建 `Api`。
3. 把 `Api` 返回的 `{"success": ...}` 映射成退出码：0 成功，1 领域错误，2 用法错误（argparse）。

调用关系：
- 上游：`python main.py <command> ...`
- 下游：`Api` -> `RefinementService`

示例：
    python main.py synth --cases 150 --seed 0 --out runs/demo
    python main.py train-vae --out runs/demo
    python main.py train-ddpm --out runs/demo --device-threads 2
    python main.py refine --out runs/demo
    python main.py eval --out runs/demo --svg
"""
import argparse
import json
import logging
import sys
from pathlib import Path

# 确保能导入本地模块
sys.path.insert(0, str(Path(__file__).parent))

from api import Api
from services.config import apply_overrides, load_config
from services.errors import RefineError

logger = logging.getLogger("shaperefine")

COMMANDS = ("synth", "train-vae", "train-ddpm", "refine", "eval", "ablate-kl", "bench")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="配置文件路径（[section] key = value）")
    common.add_argument("--seed", type=int, help="随机种子，覆盖配置文件")
    common.add_argument("--out", help="输出目录，覆盖配置文件")
    common.add_argument("--cases", type=int, help="合成病例数，覆盖配置文件")
    common.add_argument("--device-threads", type=int, dest="threads", help="工作线程数")
    common.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 日志")

    parser = argparse.ArgumentParser(prog="shaperefine", description="条件隐空间扩散的形状细化流水线")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="生成合成配对数据集")
    sub.add_parser("train-vae", parents=[common], help="训练分层 VAE")
    sub.add_parser("train-ddpm", parents=[common], help="在冻结 VAE 的隐空间上训练两个 DDPM")
    p_refine = sub.add_parser("refine", parents=[common], help="批量细化某个划分的次优形状")
    p_refine.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval = sub.add_parser("eval", parents=[common], help="计算指标、分层与 Wilcoxon 检验")
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--svg", action="store_true", help="额外输出 CD 前后对比散点图")
    p_ablate = sub.add_parser("ablate-kl", parents=[common], help="VAE 训练轮数 / KL 上限消融")
    p_ablate.add_argument("--lambdas", type=float, nargs="+", help="为每个 KL 上限各训练一个 VAE")
    sub.add_parser("bench", parents=[common], help="各阶段耗时统计")
    return parser


def dispatch(api: Api, args: argparse.Namespace) -> dict:
    if args.command == "synth":
        return api.synth()
    if args.command == "train-vae":
        return api.train_vae()
    if args.command == "train-ddpm":
        return api.train_ddpm()
    if args.command == "refine":
        return api.refine(args.split)
    if args.command == "eval":
        return api.eval(args.split, args.svg)
    if args.command == "ablate-kl":
        return api.ablate_kl(args.lambdas)
    return api.bench()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = apply_overrides(load_config(args.config), seed=args.seed, out_dir=args.out,
                                 cases=args.cases, threads=args.threads)
    except RefineError as e:
        logger.error(str(e))
        return 1

    result = dispatch(Api(config), args)
    if not result["success"]:
        logger.error(result["error"])
        return 1
    print(json.dumps(result["data"], ensure_ascii=False, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
