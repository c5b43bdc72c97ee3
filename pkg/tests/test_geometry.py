"""
几何模块单元测试：形态学、等值面、采样与标准化
"""
import unittest
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from services.errors import FrameMismatchError, RefineError
from services.geometry import (
    Frame, PointCloud, TriangleMesh, VoxelGrid, ball_structure, binary_closing, compute_standardization,
    connected_components, destandardize, largest_component, marching_cubes, poisson_disk_sample,
    standardize,
)


def sphere_grid(radius: float, size: int = 30, spacing: float = 1.0) -> VoxelGrid:
    idx = np.indices((size, size, size)).astype(float)
    center = (size - 1) / 2.0
    occ = ((idx - center) ** 2).sum(axis=0) * spacing ** 2 <= radius ** 2
    return VoxelGrid(occ, (spacing,) * 3, (0.0, 0.0, 0.0))


class TestMorphology(unittest.TestCase):
    """测试闭运算与连通块"""

    def test_closing_bridges_one_voxel_gap(self):
        """测试闭运算能补上两块之间一个体素宽的缝"""
        occ = np.zeros((14, 8, 8), dtype=bool)
        occ[2:6, 2:6, 2:6] = True
        occ[7:11, 2:6, 2:6] = True
        grid = VoxelGrid(occ)
        self.assertEqual(connected_components(grid)[0], 2)
        closed = binary_closing(grid, 1)
        self.assertEqual(connected_components(closed)[0], 1)
        self.assertTrue(closed.occupancy[6, 3, 3])

    def test_closing_keeps_box_touching_border(self):
        """测试贴边的实心块闭运算后不被腐蚀"""
        occ = np.zeros((6, 6, 6), dtype=bool)
        occ[0:4, 0:4, 0:4] = True
        closed = binary_closing(VoxelGrid(occ), 2)
        np.testing.assert_array_equal(closed.occupancy, occ)

    def test_structure_is_euclidean_ball(self):
        """测试结构元是欧氏球而不是立方体"""
        self.assertEqual(int(ball_structure(1).sum()), 7)
        self.assertEqual(int(ball_structure(2).sum()), 33)
        self.assertFalse(ball_structure(2)[0, 0, 0])
        self.assertTrue(ball_structure(2)[2, 2, 0])

    def test_closing_radius_must_be_positive(self):
        """测试闭运算半径 < 1 报错"""
        with self.assertRaises(RefineError):
            binary_closing(VoxelGrid(np.ones((3, 3, 3))), 0)

    def test_diagonal_voxels_are_connected(self):
        """测试只共享顶点的两个体素按 26 连通算一个连通块"""
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1, 1, 1] = occ[2, 2, 2] = True
        count, labels = connected_components(VoxelGrid(occ))
        self.assertEqual(count, 1)
        self.assertEqual(labels[1, 1, 1], labels[2, 2, 2])

    def test_largest_component(self):
        """测试保留最大连通块"""
        occ = np.zeros((10, 10, 10), dtype=bool)
        occ[0:3, 0:3, 0:3] = True
        occ[6, 6, 6] = True
        kept = largest_component(VoxelGrid(occ))
        self.assertEqual(kept.voxel_count, 27)

    def test_volume_uses_spacing(self):
        """测试体积按体素间距换算为 mL"""
        grid = VoxelGrid(np.ones((5, 5, 5)), (2.0, 2.0, 2.0))
        self.assertAlmostEqual(grid.volume_ml, 1.0)


class TestMarchingCubes(unittest.TestCase):
    """测试等值面提取"""

    def test_sphere_area_and_closedness(self):
        """测试球体网格面积接近解析值且是闭合曲面"""
        radius = 10.0
        mesh = marching_cubes(sphere_grid(radius))
        expected = 4.0 * np.pi * radius ** 2
        self.assertLess(abs(mesh.area() - expected) / expected, 0.05)
        self.assertTrue(np.all(mesh.edge_face_counts() == 2))

    def test_vertices_in_world_frame(self):
        """测试网格顶点带上原点偏移与间距"""
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1:3, 1:3, 1:3] = True
        mesh = marching_cubes(VoxelGrid(occ, (2.0, 2.0, 2.0), (100.0, 0.0, -50.0)), smooth_sigma=0.0)
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        np.testing.assert_allclose(lo, [101.0, 1.0, -49.0])
        np.testing.assert_allclose(hi, [105.0, 5.0, -45.0])

    def test_smoothed_mesh_keeps_world_center(self):
        """测试平滑补边后球面顶点中心仍落在球心的世界坐标上"""
        grid = sphere_grid(6.0, size=16, spacing=2.0)
        shifted = VoxelGrid(grid.occupancy, grid.spacing_mm, (10.0, -20.0, 5.0))
        mesh = marching_cubes(shifted)
        center = 7.5 * 2.0 + np.array([10.0, -20.0, 5.0])
        np.testing.assert_allclose(mesh.vertices.mean(axis=0), center, atol=1e-6)

    def test_thin_structure_falls_back_to_binary_field(self):
        """测试单个体素平滑后不跨越阈值时退回二值场，得到 χ=2 的闭合曲面并打警告"""
        occ = np.zeros((5, 5, 5), dtype=bool)
        occ[2, 2, 2] = True
        with self.assertLogs("services.geometry", level="WARNING"):
            mesh = marching_cubes(VoxelGrid(occ))
        self.assertFalse(mesh.is_empty)
        self.assertEqual(mesh.euler_characteristic(), 2)
        self.assertTrue(np.all(mesh.edge_face_counts() == 2))
        binary = marching_cubes(VoxelGrid(occ), smooth_sigma=0.0)
        self.assertEqual(len(mesh.vertices), len(binary.vertices))
        self.assertAlmostEqual(mesh.area(), binary.area(), places=9)

    def test_negative_smoothing_rejected(self):
        """测试负的平滑尺度报错"""
        with self.assertRaises(RefineError):
            marching_cubes(sphere_grid(5.0, 12), smooth_sigma=-1.0)

    def test_empty_and_full_grids_give_empty_mesh(self):
        """测试全空 / 全满网格返回空网格"""
        self.assertTrue(marching_cubes(VoxelGrid(np.zeros((3, 3, 3)))).is_empty)
        self.assertTrue(marching_cubes(VoxelGrid(np.ones((3, 3, 3)))).is_empty)

    def test_iso_outside_open_interval(self):
        """测试等值面阈值越界报错"""
        with self.assertRaises(RefineError):
            marching_cubes(sphere_grid(5.0, 12), iso=1.0)

    def test_degenerate_face_rejected(self):
        """测试重复顶点索引的面被拒绝"""
        with self.assertRaises(RefineError):
            TriangleMesh(np.eye(3), [[0, 0, 1]])


class TestPoissonDiskSample(unittest.TestCase):
    """测试表面采样"""

    @classmethod
    def setUpClass(cls):
        cls.radius = 10.0
        cls.mesh = marching_cubes(sphere_grid(cls.radius))

    def test_exact_count_on_surface(self):
        """测试恰好返回 n 个点且都在球面附近"""
        cloud = poisson_disk_sample(self.mesh, 500, np.random.default_rng(0))
        self.assertEqual(cloud.n, 500)
        self.assertEqual(cloud.frame, Frame.WORLD_MM)
        dist = np.linalg.norm(cloud.points - 14.5, axis=1)
        self.assertLess(np.abs(dist - self.radius).max(), 1.5)

    def test_same_rng_same_points(self):
        """测试相同随机流得到相同点集"""
        a = poisson_disk_sample(self.mesh, 200, np.random.default_rng(3))
        b = poisson_disk_sample(self.mesh, 200, np.random.default_rng(3))
        np.testing.assert_array_equal(a.points, b.points)

    def test_more_even_than_uniform_sampling(self):
        """测试淘汰后最近邻距离的最小值大于同规模随机采样"""
        from scipy.spatial import cKDTree
        from services.geometry import uniform_area_sample

        rng = np.random.default_rng(5)
        even = poisson_disk_sample(self.mesh, 300, rng).points
        uniform = uniform_area_sample(self.mesh, 300, rng)
        nn_even = cKDTree(even).query(even, k=2)[0][:, 1]
        nn_uniform = cKDTree(uniform).query(uniform, k=2)[0][:, 1]
        self.assertGreater(nn_even.min(), nn_uniform.min())

    def test_empty_mesh_rejected(self):
        """测试空网格不能采样"""
        with self.assertRaises(RefineError):
            poisson_disk_sample(TriangleMesh(), 10, np.random.default_rng(0))


class TestStandardization(unittest.TestCase):
    """测试全局标准化"""

    def setUp(self):
        rng = np.random.default_rng(11)
        self.clouds = [PointCloud(rng.normal(50.0, 20.0, size=(100, 3))) for _ in range(3)]

    def test_zero_mean_unit_rms(self):
        """测试标准化后合并点集均值为 0、整体 RMS 为 1"""
        stats = compute_standardization(self.clouds)
        pts = np.concatenate([standardize(c, stats).points for c in self.clouds])
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-10)
        self.assertAlmostEqual(float(np.sqrt((pts ** 2).mean())), 1.0, places=10)

    def test_destandardize_inverts(self):
        """测试反标准化恢复原坐标"""
        stats = compute_standardization(self.clouds)
        back = destandardize(standardize(self.clouds[0], stats), stats)
        self.assertEqual(back.frame, Frame.WORLD_MM)
        np.testing.assert_allclose(back.points, self.clouds[0].points, atol=1e-10)

    def test_frame_checked(self):
        """测试坐标系标记不符时报 FrameMismatchError"""
        stats = compute_standardization(self.clouds)
        std_cloud = standardize(self.clouds[0], stats)
        with self.assertRaises(FrameMismatchError):
            standardize(std_cloud, stats)
        with self.assertRaises(FrameMismatchError):
            destandardize(self.clouds[0], stats)
        with self.assertRaises(FrameMismatchError):
            compute_standardization([std_cloud])

    def test_zero_variance_rejected(self):
        """测试所有点重合时无法标准化"""
        with self.assertRaises(RefineError):
            compute_standardization([PointCloud(np.ones((5, 3)))])


if __name__ == "__main__":
    unittest.main()
