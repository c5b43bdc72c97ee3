"""
分层 VAE 单元测试
"""
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from services.config import VaeSection
from services.errors import RefineError, ShapeMismatchError
from services.numerics import Tape, Tensor, backward, finite_difference
from services.storage import load_checkpoint, save_checkpoint
from services.vae import (
    HierarchicalVAE, KlAnnealSchedule, TrainHistory, anneal_kl, gaussian_kl, train_vae,
)


def toy_vae(seed: int = 0, n_points: int = 6) -> HierarchicalVAE:
    return HierarchicalVAE(n_points, d_z=3, d_h=2, hidden=8, rng=np.random.default_rng(seed))


class TestKlAnneal(unittest.TestCase):
    """测试 KL 权重退火"""

    def test_endpoints(self):
        """测试第 0 轮为 0，预热结束后保持最大值"""
        schedule = KlAnnealSchedule(warmup_epochs=100)
        self.assertEqual(anneal_kl(0, schedule), (0.0, 0.0))
        self.assertEqual(anneal_kl(100, schedule), (0.4, 0.4))
        self.assertEqual(anneal_kl(150, schedule), (0.4, 0.4))

    def test_linear_ramp(self):
        """测试预热期内线性增长"""
        schedule = KlAnnealSchedule(warmup_epochs=10, max_lambda_z=1.0, max_lambda_h=0.5)
        lz, lh = anneal_kl(5, schedule)
        self.assertAlmostEqual(lz, 0.5)
        self.assertAlmostEqual(lh, 0.25)

    def test_invalid_schedule(self):
        """测试非法预热轮数与负 epoch"""
        with self.assertRaises(RefineError):
            KlAnnealSchedule(warmup_epochs=0)
        with self.assertRaises(RefineError):
            anneal_kl(-1, KlAnnealSchedule(warmup_epochs=5))


class TestGaussianKl(unittest.TestCase):
    """测试闭式 KL"""

    def test_standard_normal_is_zero(self):
        """测试标准正态到自身 KL 为 0"""
        kl = gaussian_kl(Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(kl.data, 0.0)

    def test_known_value(self):
        """测试 μ=1、σ²=e 时的解析值"""
        kl = gaussian_kl(Tensor([1.0]), Tensor([1.0]))
        self.assertAlmostEqual(kl.item(), 0.5 * (1.0 + np.e - 1.0 - 1.0))

    def test_unit_mean_unit_variance(self):
        """测试 μ=1、logvar=0 时 KL 为 0.5"""
        self.assertAlmostEqual(gaussian_kl(Tensor([1.0]), Tensor([0.0])).item(), 0.5)

    def test_matches_monte_carlo(self):
        """测试闭式 KL 与蒙特卡洛估计相差不超过 1%"""
        mu = np.array([1.0, -0.5, 2.0])
        logvar = np.array([0.0, -1.0, 0.7])
        sigma = np.exp(0.5 * logvar)
        eps = np.random.default_rng(11).standard_normal((1_000_000, 3))
        x = mu + sigma * eps
        # log q(x) - log p(x)，常数项相消
        log_ratio = -0.5 * logvar - 0.5 * eps ** 2 + 0.5 * x ** 2
        estimate = log_ratio.mean(axis=0)
        closed = gaussian_kl(Tensor(mu), Tensor(logvar)).data
        np.testing.assert_allclose(closed, estimate, rtol=0.01)


class TestSymmetry(unittest.TestCase):
    """测试置换不变性与等变性"""

    def setUp(self):
        self.vae = toy_vae()
        rng = np.random.default_rng(1)
        self.points = rng.normal(size=(2, 6, 3))
        self.perm = rng.permutation(6)

    def test_global_encoder_invariant(self):
        """测试全局编码器对点的行置换不变"""
        a = self.vae.encode_global(self.points)
        b = self.vae.encode_global(self.points[:, self.perm])
        np.testing.assert_allclose(a.mu.data, b.mu.data, atol=1e-12)
        np.testing.assert_allclose(a.logvar.data, b.logvar.data, atol=1e-12)

    def test_local_encoder_and_decoder_equivariant(self):
        """测试局部编码器与解码器对点的行置换等变"""
        z = self.vae.encode_global(self.points).mu
        a = self.vae.encode_local(self.points, z)
        b = self.vae.encode_local(self.points[:, self.perm], z)
        np.testing.assert_allclose(a.mu.data[:, self.perm], b.mu.data, atol=1e-12)
        out_a = self.vae.decode(z, a.mu)
        out_b = self.vae.decode(z, b.mu)
        np.testing.assert_allclose(out_a.data[:, self.perm], out_b.data, atol=1e-12)

    def test_latent_shapes(self):
        """测试隐编码形状"""
        latents = self.vae.encode_means(self.points)
        self.assertEqual(latents.z.shape, (2, 3))
        self.assertEqual(latents.h.shape, (2, 6, 5))
        self.assertEqual(self.vae.reconstruct(self.points).shape, (2, 6, 3))

    def test_shape_checks(self):
        """测试点数与隐向量维度不符时报错"""
        with self.assertRaises(ShapeMismatchError):
            self.vae.encode_global(np.zeros((1, 5, 3)))
        with self.assertRaises(ShapeMismatchError):
            self.vae.decode(np.zeros((1, 4)), np.zeros((1, 6, 5)))

    def test_mean_encoding_is_deterministic(self):
        """测试 rng 为空时采样即均值"""
        post = self.vae.encode_global(self.points)
        np.testing.assert_array_equal(post.sample.data, post.mu.data)

    def test_local_encoder_depends_on_global_latent(self):
        """测试同一点集在不同全局隐变量下得到不同的局部均值"""
        rng = np.random.default_rng(12)
        for _ in range(20):
            z_a, z_b = rng.normal(size=(2, 1, 3))
            a = self.vae.encode_local(self.points[:1], z_a).mu.data
            b = self.vae.encode_local(self.points[:1], z_b).mu.data
            self.assertGreater(np.abs(a - b).max(), 1e-6)


class TestLogvarClamp(unittest.TestCase):
    """测试对数方差软截断"""

    def test_extreme_inputs_stay_in_range(self):
        """测试极端输入与放大权重下对数方差仍在 [-10, 10]"""
        vae = toy_vae(seed=13)
        vae.load_arrays({name: arr * 20.0 for name, arr in vae.arrays().items()})
        points = np.random.default_rng(14).normal(size=(3, 6, 3)) * 1e4
        post_z = vae.encode_global(points, np.random.default_rng(0))
        post_h = vae.encode_local(points, post_z.sample, np.random.default_rng(1))
        for post in (post_z, post_h):
            self.assertTrue(np.all(np.abs(post.logvar.data) <= 10.0))
            self.assertTrue(np.all(np.isfinite(post.sample.data)))
        self.assertGreater(np.abs(post_z.logvar.data).max(), 9.0)


class TestElboGradient(unittest.TestCase):
    """测试 ELBO 解析梯度与数值梯度一致"""

    def _loss_with(self, vae, name, value, points):
        arrays = dict(vae.arrays())
        arrays[name] = value
        other = toy_vae(n_points=points.shape[1])
        other.load_arrays(arrays)
        return other.elbo_loss(points, 0.3, 0.2, np.random.default_rng(9)).total.item()

    def test_parameter_gradients(self):
        """测试编码器与解码器参数的梯度"""
        vae = toy_vae(seed=2, n_points=5)
        points = np.random.default_rng(3).normal(size=(2, 5, 3))
        with Tape() as tape:
            terms = vae.elbo_loss(points, 0.3, 0.2, np.random.default_rng(9))
        grads = backward(tape, terms.total)
        for name in ("dec.fuse.1.w", "enc_g.head.1.b", "enc_l.fuse.1.b"):
            analytic = grads[vae.params[name]]
            numeric = finite_difference(lambda arr: self._loss_with(vae, name, arr, points),
                                        vae.params[name].data)
            scale = max(1.0, float(np.abs(numeric).max()))
            np.testing.assert_allclose(analytic, numeric, atol=1e-5 * scale, rtol=0)

    def test_total_is_recon_plus_weighted_kl(self):
        """测试 total = recon + λ_z·kl_z + λ_h·kl_h，且各项与手算一致"""
        vae = toy_vae(seed=15)
        points = np.random.default_rng(16).normal(size=(4, 6, 3))
        terms = vae.elbo_loss(points, 0.4, 0.25, np.random.default_rng(17))
        expected = terms.recon.item() + 0.4 * terms.kl_z.item() + 0.25 * terms.kl_h.item()
        self.assertAlmostEqual(terms.total.item(), expected, delta=1e-12 * max(1.0, abs(expected)))

        rng = np.random.default_rng(17)
        post_z = vae.encode_global(points, rng)
        post_h = vae.encode_local(points, post_z.sample, rng)
        recon = np.mean((vae.decode(post_z.sample, post_h.sample).data - points) ** 2)
        self.assertAlmostEqual(terms.recon.item(), recon, places=12)
        self.assertAlmostEqual(terms.kl_z.item(),
                               gaussian_kl(post_z.mu, post_z.logvar).data.mean(), places=12)

    def test_negative_kl_weight_rejected(self):
        """测试负的 KL 权重报错"""
        with self.assertRaises(RefineError):
            toy_vae().elbo_loss(np.zeros((1, 6, 3)), -0.1, 0.0, np.random.default_rng(0))


class TestCheckpoint(unittest.TestCase):
    """测试 VAE 检查点读写"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_round_trip_through_file(self):
        """测试保存后加载的模型输出完全一致"""
        vae = toy_vae(seed=4)
        path = Path(self.test_dir) / "vae.ckpt"
        save_checkpoint(vae.to_checkpoint({"seed": 0}, {"epochs": 3}), path)
        ckpt = load_checkpoint(path, "VAE")
        restored = HierarchicalVAE.from_checkpoint(ckpt)
        self.assertEqual(ckpt.epochs, 3)
        self.assertEqual(restored.model_config(), vae.model_config())
        points = np.random.default_rng(0).normal(size=(1, 6, 3))
        np.testing.assert_array_equal(restored.reconstruct(points), vae.reconstruct(points))


class TestTraining(unittest.TestCase):
    """测试训练循环"""

    def setUp(self):
        self.shapes = np.random.default_rng(5).normal(size=(6, 8, 3))
        self.section = VaeSection(d_z=3, d_h=1, hidden=8, epochs=4, batch_size=4, lr=1e-3,
                                  warmup_fraction=0.5, checkpoint_every=2, log_every=0)

    def test_history_and_checkpoints(self):
        """测试每轮记录损失、KL 权重按退火变化、按间隔回调"""
        seen = []
        vae, history = train_vae(self.shapes, self.section, np.random.default_rng(0),
                                 on_checkpoint=lambda epoch, model, hist: seen.append(epoch))
        self.assertEqual(len(history.losses["total"]), 4)
        self.assertEqual(history.losses["lambda_z"], [0.0, 0.2, 0.4, 0.4])
        self.assertEqual(seen, [2, 4])
        self.assertTrue(all(np.isfinite(v) for v in history.losses["recon"]))

    def test_same_seed_same_parameters(self):
        """测试相同种子训练结果逐位相同"""
        a, _ = train_vae(self.shapes, self.section, np.random.default_rng(7))
        b, _ = train_vae(self.shapes, self.section, np.random.default_rng(7))
        for name, arr in a.arrays().items():
            np.testing.assert_array_equal(arr, b.arrays()[name])

    def test_empty_training_set(self):
        """测试空训练集报错"""
        with self.assertRaises(RefineError):
            train_vae(np.zeros((0, 8, 3)), self.section, np.random.default_rng(0))

    def test_smoothed_loss_decreases(self):
        """测试训练后结尾窗口的平均损失低于开头窗口"""
        shapes = np.random.default_rng(18).normal(size=(12, 16, 3))
        section = VaeSection(d_z=4, d_h=2, hidden=16, epochs=60, batch_size=4, lr=1e-2,
                             warmup_fraction=0.02, log_every=0)
        _, history = train_vae(shapes, section, np.random.default_rng(19))
        start, end = history.smoothed("total")
        self.assertLess(end, start)
        start, end = history.smoothed("recon")
        self.assertLess(end, start)

    def test_larger_kl_weight_gives_smaller_kl(self):
        """测试 KL 权重越大，训练结束时 KL 越小"""
        shapes = np.random.default_rng(20).normal(size=(12, 16, 3))

        def final_kl(weight):
            section = VaeSection(d_z=4, d_h=2, hidden=16, epochs=40, batch_size=4, lr=1e-2,
                                 lambda_z_max=weight, lambda_h_max=weight,
                                 warmup_fraction=0.05, log_every=0)
            _, history = train_vae(shapes, section, np.random.default_rng(21))
            return history.smoothed("kl_z")[1] + history.smoothed("kl_h")[1]

        self.assertLess(final_kl(2.0), final_kl(0.05))

    def test_history_smoothing(self):
        """测试开头/结尾窗口均值"""
        history = TrainHistory()
        for value in [4.0, 3.0, 2.0, 1.0]:
            history.append(loss=value)
        self.assertEqual(history.smoothed("loss", window=2), (3.5, 1.5))
        self.assertEqual(history.last(), {"loss": 1.0})


if __name__ == "__main__":
    unittest.main()
