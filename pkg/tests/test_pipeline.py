"""
流水线编排、运行台账与命令行入口的单元测试
"""
import math
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from api import Api
from main import main
from services import storage
from services.config import DataSection, DiffusionSection, RunConfig, VaeSection, save_config
from services.geometry import PointCloud
from services.pipeline import CaseEval, RefinementService, score_case, stratify, summarize_cases, write_scatter_svg
from services.run_registry import RunRegistry
from services.synthdata import CaseRecord


def tiny_config(out_dir: Path) -> RunConfig:
    """只用于单元测试的极小配置：10 个粗体素病例，网络很窄，训练只跑两轮。"""
    config = RunConfig(
        data=DataSection(n_cases=10, n_points=32, spacing_mm=4.0, box_mm=200.0,
                         volume_min_ml=1.0, volume_max_ml=1e5),
        vae=VaeSection(d_z=4, d_h=2, hidden=16, epochs=2, batch_size=8, checkpoint_every=1, log_every=1),
        diffusion=DiffusionSection(steps=5, time_dim=8, hidden=16, se_blocks=1, epochs=2, batch_size=4,
                                   log_every=1),
    )
    config.run.out_dir = str(out_dir)
    config.eval.bench_cases = 1
    return config


def make_case(case_id: str, offset: float) -> CaseEval:
    return CaseEval(case_id, "test", "mild", init_cd=offset, refined_cd=offset / 2,
                    init_hd=2 * offset, refined_hd=offset)


class TestStratification(unittest.TestCase):
    """测试分层与汇总"""

    def test_threshold_is_exclusive(self):
        """测试恰好等于阈值归入 hard"""
        self.assertEqual(stratify([9.99, 10.0, 25.0]), ["easy", "hard", "hard"])
        self.assertEqual(stratify([3.0], threshold_mm=2.0), ["hard"])

    def test_identical_clouds_flag_degenerate(self):
        """测试细化结果与初始相同：改善 0%，Wilcoxon 退化被标记"""
        cases = [CaseEval(f"case{i:04d}", "test", "mild", 5.0 + i, 5.0 + i, 8.0 + i, 8.0 + i) for i in range(6)]
        summary = summarize_cases(cases)
        overall = summary.rows["all"]
        self.assertEqual(overall["cd_improvement_pct"], 0.0)
        self.assertEqual(overall["hd_improvement_pct"], 0.0)
        self.assertTrue(math.isnan(overall["cd_p_value"]))
        self.assertEqual(overall["note"], "cd_degenerate;hd_degenerate")

    def test_counts_add_up_and_empty_stratum(self):
        """测试 easy + hard = all，空层标记 empty"""
        summary = summarize_cases([make_case(f"case{i:04d}", 2.0 + i) for i in range(5)])
        self.assertEqual(summary.counts, {"all": 5, "easy": 5, "hard": 0})
        hard = summary.rows["hard"]
        self.assertEqual(hard["note"], "empty")
        self.assertTrue(math.isnan(hard["init_cd_mean"]))
        self.assertEqual([row["stratum"] for row in summary.to_rows()], ["all", "easy", "hard"])

        mixed = summarize_cases([make_case(f"case{i:04d}", 4.0 * i) for i in range(6)])
        self.assertEqual(mixed.counts["easy"] + mixed.counts["hard"], mixed.counts["all"])

    def test_improvement_and_p_value(self):
        """测试改善百分比与配对检验 p 值"""
        overall = summarize_cases([make_case(f"case{i:04d}", 1.0 + i) for i in range(5)]).rows["all"]
        self.assertAlmostEqual(overall["cd_improvement_pct"], 50.0)
        self.assertAlmostEqual(overall["cd_p_value"], 2.0 / 32.0)
        self.assertEqual(overall["note"], "")
        self.assertAlmostEqual(overall["init_cd_std"], float(np.std([1.0, 2.0, 3.0, 4.0, 5.0])))

    def test_not_increased_fraction(self):
        """测试后处理后 HD 不高于原始细化结果的比例"""
        cases = [make_case("case0000", 4.0), make_case("case0001", 6.0)]
        cases[0].raw_hd, cases[1].raw_hd = 5.0, 5.0
        row = summarize_cases(cases).rows["all"]
        self.assertEqual(row["hd_not_increased_fraction"], 0.5)


class TestScoring(unittest.TestCase):
    """测试单病例打分与散点图"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_score_case(self):
        """测试完美细化的 CD / HD 为 0，平移的次优形状按平移量计"""
        ref = PointCloud(np.random.default_rng(0).normal(size=(20, 3)) * 10.0)
        sub = PointCloud(ref.points + [0.0, 0.0, 100.0])
        record = CaseRecord("case0001", "severe", ref, sub, "test")
        result = score_case(record, ref, raw=sub)
        self.assertEqual(result.refined_cd, 0.0)
        self.assertEqual(result.refined_hd, 0.0)
        self.assertGreater(result.init_cd, 50.0)
        self.assertEqual(result.raw_hd, result.init_hd)
        self.assertEqual(result.to_row()["severity"], "severe")

    def test_scatter_svg_is_deterministic(self):
        """测试相同输入写出的 SVG 逐字节相同"""
        scored = [make_case(f"case{i:04d}", 3.0 * i + 1.0) for i in range(6)]
        summarize_cases(scored)
        first, second = self.test_dir / "a.svg", self.test_dir / "b.svg"
        write_scatter_svg(scored, first)
        write_scatter_svg(scored, second)
        self.assertIn("<svg", first.read_text(encoding="utf-8"))
        self.assertEqual(first.read_bytes(), second.read_bytes())


class TestRunRegistry(unittest.TestCase):
    """测试运行台账"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())
        self.registry = RunRegistry(self.test_dir / "runs.db")

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_run_lifecycle(self):
        """测试开始、结束与按命令筛选"""
        run_id = self.registry.start_run("synth", 3, {"run": {"seed": 3}})
        self.assertEqual(self.registry.get_run(run_id)["status"], "running")
        self.registry.finish_run(run_id, True, artifacts={"cases": 10})
        run = self.registry.get_run(run_id)
        self.assertEqual(run["status"], "succeeded")
        self.assertEqual(run["artifacts"], {"cases": 10})
        self.assertEqual(run["config"], {"run": {"seed": 3}})

        failed = self.registry.start_run("eval", 3, {})
        self.registry.finish_run(failed, False, error="boom")
        self.assertEqual(self.registry.get_run(failed)["error"], "boom")
        self.assertEqual([r["id"] for r in self.registry.list_runs("synth")], [run_id])
        self.assertEqual(len(self.registry.list_runs()), 2)
        self.assertIsNone(self.registry.get_run("missing"))

    def test_case_metrics(self):
        """测试病例指标写入与读取"""
        run_id = self.registry.start_run("eval", 0, {})
        rows = [make_case("case0002", 3.0).to_row(), make_case("case0001", 12.0).to_row()]
        self.assertEqual(self.registry.record_case_metrics(run_id, rows), 2)
        stored = self.registry.case_metrics(run_id)
        self.assertEqual([r["case_id"] for r in stored], ["case0001", "case0002"])
        self.assertEqual(stored[0]["refined_cd"], 6.0)

    def test_version(self):
        """测试版本号"""
        self.assertEqual(self.registry.get_version(), RunRegistry.VERSION)


class TestApiAndCli(unittest.TestCase):
    """测试门面错误格式与命令行退出码"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_domain_error_becomes_dict(self):
        """测试缺少检查点时返回 success=False，并记入台账"""
        api = Api(tiny_config(self.test_dir / "run"))
        result = api.refine()
        self.assertFalse(result["success"])
        self.assertIn("error", result)
        runs = api.list_runs("refine")
        self.assertTrue(runs["success"])
        self.assertEqual(runs["data"][0]["status"], "failed")

    def test_get_config(self):
        """测试配置回显"""
        result = Api(tiny_config(self.test_dir / "run")).get_config()
        self.assertTrue(result["success"])
        self.assertEqual(result["data"]["vae"]["d_z"], 4)

    def test_usage_error_exit_code(self):
        """测试未知子命令由 argparse 以 2 退出"""
        with self.assertRaises(SystemExit) as ctx:
            main(["bogus"])
        self.assertEqual(ctx.exception.code, 2)

    def test_missing_config_exit_code(self):
        """测试配置文件不存在返回 1"""
        self.assertEqual(main(["synth", "--config", str(self.test_dir / "nope.cfg")]), 1)

    def test_domain_error_exit_code(self):
        """测试领域错误返回 1"""
        path = self.test_dir / "tiny.cfg"
        save_config(tiny_config(self.test_dir / "run"), path)
        self.assertEqual(main(["train-vae", "--config", str(path)]), 1)


class TestEndToEnd(unittest.TestCase):
    """测试极小配置下的完整流水线：synth -> train -> refine -> eval"""

    @classmethod
    def setUpClass(cls):
        cls.test_dir = Path(tempfile.mkdtemp())
        cls.config = tiny_config(cls.test_dir / "run")
        cls.service = RefinementService(cls.config)
        cls.synth = cls.service.synth()
        cls.vae = cls.service.train_vae()
        cls.ddpm = cls.service.train_ddpm()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.test_dir)

    def test_artifacts(self):
        """测试各阶段产物齐全"""
        out = self.config.out_path
        self.assertEqual(self.synth["splits"], {"train": 7, "val": 1, "test": 2})
        for name in ("config.resolved", "vae.ckpt", "vae_epoch1.ckpt", "vae_epoch2.ckpt",
                     "global_ddpm.ckpt", "local_ddpm.ckpt"):
            self.assertTrue((out / name).exists(), name)
        self.assertEqual(storage.load_checkpoint(out / "vae.ckpt", "VAE").epochs, 2)
        self.assertEqual(set(self.ddpm["checkpoints"]), {"GLOBAL_DDPM", "LOCAL_DDPM"})

    def test_refine_and_eval(self):
        """测试细化结果可复现，评估写出分层汇总"""
        out = self.config.out_path
        self.service.refine("test")
        case_ids = [c.case_id for c in self.service.dataset.split("test")]
        first = {cid: (out / "refined" / cid / "refined.pcld").read_bytes() for cid in case_ids}
        self.service.refine("test")
        for cid in case_ids:
            self.assertEqual((out / "refined" / cid / "refined.pcld").read_bytes(), first[cid])
            self.assertGreater(storage.load_point_cloud(out / "refined" / cid / "refined.pcld").n, 0)

        summary, scored = self.service.evaluate("test", svg=True)
        self.assertEqual(len(scored), 2)
        self.assertEqual(summary.counts["easy"] + summary.counts["hard"], summary.counts["all"])
        self.assertEqual(len(storage.read_csv(out / "per_case.csv")), 2)
        self.assertEqual([r["stratum"] for r in storage.read_csv(out / "summary.csv")], ["all", "easy", "hard"])
        self.assertTrue((out / "cd_scatter.svg").exists())

    def test_ablate_kl_over_checkpoints(self):
        """测试按周期检查点做消融"""
        rows = self.service.ablate_kl()
        self.assertEqual([r["label"] for r in rows], ["epoch=1", "epoch=2"])
        for row in rows:
            self.assertGreaterEqual(row["f1_mean"], 0.0)
            self.assertLessEqual(row["f1_mean"], 100.0)
        self.assertTrue((self.config.out_path / "ablate_kl.csv").exists())

    def test_bench(self):
        """测试计时表包含四个阶段"""
        rows = self.service.bench()
        self.assertEqual([r["stage"] for r in rows],
                         ["marching_cubes", "poisson_disk_sampling", "inference", "postprocess"])
        self.assertTrue(all(r["n"] == 1 for r in rows))


if __name__ == "__main__":
    unittest.main()
