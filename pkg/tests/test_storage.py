"""
产物文件格式单元测试
"""
import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from services import storage
from services.errors import CheckpointError, RefineError
from services.geometry import Frame, PointCloud, StandardizationStats, TriangleMesh, VoxelGrid


class TestBinaryFormats(unittest.TestCase):
    """测试 VGRD / PCLD 编解码"""

    def test_voxel_grid_layout(self):
        """测试体素网格头部布局与位打包长度"""
        occ = np.random.default_rng(0).random((3, 5, 7)) > 0.5
        grid = VoxelGrid(occ, (1.5, 2.0, 2.5), (-10.0, 0.0, 4.0))
        data = storage.encode_voxel_grid(grid)
        self.assertEqual(data[:4], b"VGRD")
        self.assertEqual(struct.unpack("<H", data[4:6])[0], storage.FORMAT_VERSION)
        self.assertEqual(struct.unpack("<3I", data[6:18]), (3, 5, 7))
        self.assertEqual(len(data), 4 + 2 + 12 + 24 + 24 + (105 + 7) // 8)
        decoded = storage.decode_voxel_grid(data)
        np.testing.assert_array_equal(decoded.occupancy, occ)
        self.assertEqual(decoded.spacing_mm, (1.5, 2.0, 2.5))
        self.assertEqual(decoded.origin_mm, (-10.0, 0.0, 4.0))

    def test_point_cloud_keeps_frame(self):
        """测试点云坐标系标记随文件保存"""
        cloud = PointCloud(np.arange(12, dtype=float).reshape(4, 3), Frame.STANDARDIZED)
        decoded = storage.decode_point_cloud(storage.encode_point_cloud(cloud))
        self.assertEqual(decoded.frame, Frame.STANDARDIZED)
        np.testing.assert_array_equal(decoded.points, cloud.points)

    def test_corrupted_inputs(self):
        """测试魔数错误、版本错误与截断"""
        data = storage.encode_point_cloud(PointCloud(np.ones((2, 3))))
        with self.assertRaises(RefineError):
            storage.decode_point_cloud(b"XXXX" + data[4:])
        with self.assertRaises(RefineError):
            storage.decode_point_cloud(data[:4] + struct.pack("<H", 99) + data[6:])
        with self.assertRaises(RefineError):
            storage.decode_point_cloud(data[:-8])


class TestCheckpointFormat(unittest.TestCase):
    """测试检查点编解码"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.ckpt = storage.ModelCheckpoint(
            "GLOBAL_DDPM", {"seed": 3, "schedule": {"steps": 10}},
            {"in.w": np.arange(6, dtype=float).reshape(2, 3), "in.b": np.zeros(3)},
            {"epochs": 5, "loss": 0.25},
        )

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_round_trip_and_bytes_stable(self):
        """测试读回内容一致，且同一输入编码逐字节相同"""
        data = storage.encode_checkpoint(self.ckpt)
        self.assertEqual(data, storage.encode_checkpoint(self.ckpt))
        decoded = storage.decode_checkpoint(data)
        self.assertEqual(decoded.kind, "GLOBAL_DDPM")
        self.assertEqual(decoded.config, self.ckpt.config)
        self.assertEqual(decoded.epochs, 5)
        self.assertEqual(list(decoded.params), ["in.w", "in.b"])
        np.testing.assert_array_equal(decoded.params["in.w"], self.ckpt.params["in.w"])

    def test_kind_checks(self):
        """测试未知类型与类型不符"""
        with self.assertRaises(CheckpointError):
            storage.encode_checkpoint(storage.ModelCheckpoint("GAN", {}, {}))
        path = Path(self.test_dir) / "global.ckpt"
        storage.save_checkpoint(self.ckpt, path)
        self.assertEqual(storage.load_checkpoint(path, "GLOBAL_DDPM").kind, "GLOBAL_DDPM")
        with self.assertRaises(CheckpointError):
            storage.load_checkpoint(path, "VAE")

    def test_missing_and_truncated(self):
        """测试文件不存在与内容截断"""
        with self.assertRaises(CheckpointError):
            storage.load_checkpoint(Path(self.test_dir) / "missing.ckpt")
        data = storage.encode_checkpoint(self.ckpt)
        with self.assertRaises(CheckpointError):
            storage.decode_checkpoint(data[:-10])


class TestTextFormats(unittest.TestCase):
    """测试 OBJ / stats.bin / CSV"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_mesh_obj_round_trip(self):
        """测试 OBJ 读回顶点与面（索引从 1 开始写出）"""
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.5]], [[0, 1, 2], [0, 2, 3]])
        path = self.test_dir / "mesh.obj"
        storage.save_mesh_obj(mesh, path)
        self.assertIn("f 1 2 3", path.read_text(encoding="utf-8"))
        loaded = storage.load_mesh_obj(path)
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)

    def test_stats_round_trip(self):
        """测试统计量文件为 4 个小端 f64"""
        stats = StandardizationStats(np.array([1.0, -2.0, 3.5]), 42.0)
        path = self.test_dir / "stats.bin"
        storage.save_stats(stats, path)
        self.assertEqual(path.stat().st_size, 32)
        loaded = storage.load_stats(path)
        np.testing.assert_array_equal(loaded.mean, stats.mean)
        self.assertEqual(loaded.std, 42.0)

    def test_csv_cells(self):
        """测试 NaN 写为空、浮点数用 repr、numpy 标量按 Python 值写出"""
        path = self.test_dir / "out.csv"
        storage.write_csv(path, ["a", "b", "c", "d"],
                          [{"a": 0.1, "b": float("nan"), "c": np.int64(3), "d": np.float64(2.5)}])
        self.assertEqual(path.read_text(encoding="utf-8"), "a,b,c,d\n0.1,,3,2.5\n")
        self.assertEqual(storage.read_csv(path), [{"a": "0.1", "b": "", "c": "3", "d": "2.5"}])


if __name__ == "__main__":
    unittest.main()
