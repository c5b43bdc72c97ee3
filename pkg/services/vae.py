"""
分层 VAE：点云 <-> (全局隐向量 z, 局部隐点云 h)。

职责定位：
1. 全局编码器 θ_g：逐点 MLP + 最大池化 + 头部，输出 z 的均值/对数方差（置换不变）。
2. 局部编码器 θ_l：逐点 MLP，z 广播拼接到每个点，输出每点 3+D_h 通道的均值/对数方差（置换等变）。
3. 解码器 ψ：以 z 为条件逐点处理 h，输出 N×3，并把 h 的 3 个空间通道恒等跳连到输出。
4. `elbo_loss()`、`anneal_kl()`、`train_vae()`。

调用关系：
- 上游：`diffusion.py`（训练 DDPM 需要冻结的 VAE 编码）、`pipeline.py`
- 下游：`layers.Module`、`numerics`

排查建议：
- 重建误差降不下来：先看 KL 退火进度（日志里的 λ）与 lambda_h_max。
- KL 爆炸：对数方差被 10·tanh(x/10) 软截断在 [-10, 10]，若仍发散多半是学习率问题。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from . import numerics as nx
from .config import VaeSection
from .errors import NonFiniteError, RefineError, ShapeMismatchError, TrainingDivergedError
from .layers import Module, broadcast_rows
from .numerics import AdamState, Tape, Tensor, backward
from .storage import ModelCheckpoint

logger = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0


class Posterior(NamedTuple):
    mu: Tensor
    logvar: Tensor
    sample: Tensor


class ElboTerms(NamedTuple):
    total: Tensor
    recon: Tensor
    kl_z: Tensor
    kl_h: Tensor


@dataclass
class LatentPair:
    """分层隐编码：z 为 (B, D_z)，h 为 (B, N, 3 + D_h)。"""
    z: np.ndarray
    h: np.ndarray


@dataclass
class KlAnnealSchedule:
    warmup_epochs: int
    max_lambda_z: float = 0.4
    max_lambda_h: float = 0.4

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise RefineError("KL 退火预热轮数必须 >= 1")
        if self.max_lambda_z <= 0 or self.max_lambda_h <= 0:
            raise RefineError("KL 权重最大值必须为正")


def anneal_kl(epoch: int, schedule: KlAnnealSchedule) -> Tuple[float, float]:
    """线性从 0 升到最大值，预热结束后保持不变。"""
    if epoch < 0:
        raise RefineError(f"epoch 必须非负: {epoch}")
    if epoch >= schedule.warmup_epochs:
        return schedule.max_lambda_z, schedule.max_lambda_h
    frac = epoch / schedule.warmup_epochs
    return schedule.max_lambda_z * frac, schedule.max_lambda_h * frac


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """对角高斯到标准正态的逐元素闭式 KL：0.5(μ² + σ² − 1 − ln σ²)。"""
    return nx.mul(nx.sub(nx.add(nx.mul(mu, mu), nx.exp(logvar)), nx.add(logvar, 1.0)), 0.5)


def _clamp_logvar(raw: Tensor) -> Tensor:
    return nx.mul(nx.tanh(nx.mul(raw, 1.0 / LOGVAR_LIMIT)), LOGVAR_LIMIT)


def _reparameterize(mu: Tensor, logvar: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None:
        return mu
    eps = rng.standard_normal(mu.shape)
    return nx.add(mu, nx.mul(nx.exp(nx.mul(logvar, 0.5)), eps))


def _as_batch(points) -> Tensor:
    x = nx.as_tensor(points)
    if x.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeMismatchError(f"输入点云必须是 (B, N, 3) 或 (N, 3)，当前 {x.shape}")
    return x


class HierarchicalVAE(Module):
    """两编码器一解码器的分层 VAE，参数表同时包含 θ（enc_g.*, enc_l.*）与 ψ（dec.*）。"""

    def __init__(self, n_points: int, d_z: int, d_h: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_points = int(n_points)
        self.d_z = int(d_z)
        self.d_h = int(d_h)
        self.hidden = int(hidden)
        c, h = self.latent_channels, self.hidden
        self.add_mlp(rng, "enc_g.point", [3, h, h])
        self.add_mlp(rng, "enc_g.head", [h, h, 2 * self.d_z], last_scale=0.1)
        self.add_mlp(rng, "enc_l.point", [3 + self.d_z, h, h])
        self.add_mlp(rng, "enc_l.fuse", [2 * h, h, 2 * c], last_scale=0.1)
        self.add_mlp(rng, "dec.point", [c + self.d_z, h, h])
        self.add_mlp(rng, "dec.fuse", [2 * h, h, 3], last_scale=0.1)

    @classmethod
    def from_section(cls, n_points: int, section: VaeSection, rng: np.random.Generator) -> "HierarchicalVAE":
        return cls(n_points, section.d_z, section.d_h, section.hidden, rng)

    @property
    def latent_channels(self) -> int:
        return 3 + self.d_h

    def model_config(self) -> Dict[str, int]:
        return {"n_points": self.n_points, "d_z": self.d_z, "d_h": self.d_h, "hidden": self.hidden}

    # ========== 前向 ==========

    def _check_points(self, x: Tensor):
        if x.shape[1] != self.n_points:
            raise ShapeMismatchError(f"点数必须为 {self.n_points}，当前 {x.shape[1]}")

    def encode_global(self, points, rng: Optional[np.random.Generator] = None) -> Posterior:
        """rng 为 None 时 sample 即均值。"""
        x = _as_batch(points)
        self._check_points(x)
        feats = self.mlp("enc_g.point", x, depth=2, final_activation=True)
        out = self.mlp("enc_g.head", nx.max_pool(feats, axis=-2), depth=2)
        mu = nx.gather(out, np.arange(self.d_z), axis=-1)
        logvar = _clamp_logvar(nx.gather(out, np.arange(self.d_z, 2 * self.d_z), axis=-1))
        return Posterior(mu, logvar, _reparameterize(mu, logvar, rng))

    def encode_local(self, points, z, rng: Optional[np.random.Generator] = None) -> Posterior:
        x = _as_batch(points)
        self._check_points(x)
        z = nx.as_tensor(z)
        if z.ndim == 1:
            z = nx.reshape(z, (1, -1))
        if z.shape[-1] != self.d_z or z.shape[0] != x.shape[0]:
            raise ShapeMismatchError(f"全局隐向量形状 {z.shape} 与配置 D_z={self.d_z}、批大小 {x.shape[0]} 不符")
        b, n, _ = x.shape
        c = self.latent_channels
        feats = self.mlp("enc_l.point", nx.concat([x, broadcast_rows(z, n)], axis=-1), depth=2,
                         final_activation=True)
        context = broadcast_rows(nx.max_pool(feats, axis=-2), n)
        out = self.mlp("enc_l.fuse", nx.concat([feats, context], axis=-1), depth=2)
        anchor = np.concatenate([x.data, np.zeros((b, n, self.d_h))], axis=-1)
        mu = nx.add(nx.gather(out, np.arange(c), axis=-1), anchor)
        logvar = _clamp_logvar(nx.gather(out, np.arange(c, 2 * c), axis=-1))
        return Posterior(mu, logvar, _reparameterize(mu, logvar, rng))

    def decode(self, z, h) -> Tensor:
        """(B, D_z) + (B, N, 3+D_h) -> (B, N, 3)，标准化坐标。"""
        z, h = nx.as_tensor(z), nx.as_tensor(h)
        if h.ndim == 2:
            h = nx.reshape(h, (1,) + h.shape)
        if z.ndim == 1:
            z = nx.reshape(z, (1, -1))
        if h.shape[-1] != self.latent_channels or z.shape[-1] != self.d_z or z.shape[0] != h.shape[0]:
            raise ShapeMismatchError(f"解码输入形状不符: z={z.shape}, h={h.shape}")
        n = h.shape[1]
        feats = self.mlp("dec.point", nx.concat([h, broadcast_rows(z, n)], axis=-1), depth=2,
                         final_activation=True)
        context = broadcast_rows(nx.max_pool(feats, axis=-2), n)
        offset = self.mlp("dec.fuse", nx.concat([feats, context], axis=-1), depth=2)
        return nx.add(nx.gather(h, np.arange(3), axis=-1), offset)

    def elbo_loss(self, points, lambda_z: float, lambda_h: float,
                  rng: np.random.Generator) -> ElboTerms:
        """最小化形式的修正 ELBO：total = recon + λ_z·kl_z + λ_h·kl_h。

        recon 是逐坐标均方误差；两个 KL 都是逐隐变量坐标的平均，与 recon 同一量纲。
        """
        if lambda_z < 0 or lambda_h < 0:
            raise RefineError("KL 权重必须非负")
        x = _as_batch(points)
        post_z = self.encode_global(x, rng)
        post_h = self.encode_local(x, post_z.sample, rng)
        diff = nx.sub(self.decode(post_z.sample, post_h.sample), x)
        recon = nx.mean(nx.mul(diff, diff))
        kl_z = nx.mean(gaussian_kl(post_z.mu, post_z.logvar))
        kl_h = nx.mean(gaussian_kl(post_h.mu, post_h.logvar))
        total = nx.add(recon, nx.add(nx.mul(kl_z, float(lambda_z)), nx.mul(kl_h, float(lambda_h))))
        return ElboTerms(total, recon, kl_z, kl_h)

    # ========== 推理辅助（不记录 tape） ==========

    def encode_means(self, points) -> LatentPair:
        """用后验均值编码：z = μ_z，h = μ_h(s, μ_z)。"""
        post_z = self.encode_global(points)
        post_h = self.encode_local(points, post_z.mu)
        return LatentPair(post_z.mu.data, post_h.mu.data)

    def encode_sample(self, points, rng: np.random.Generator) -> LatentPair:
        """重参数化采样编码，h 以采样得到的 z 为条件。"""
        post_z = self.encode_global(points, rng)
        post_h = self.encode_local(points, post_z.sample, rng)
        return LatentPair(post_z.sample.data, post_h.sample.data)

    def reconstruct(self, points) -> np.ndarray:
        latents = self.encode_means(points)
        return self.decode(latents.z, latents.h).data

    # ========== 检查点 ==========

    def to_checkpoint(self, config_echo: Dict, metadata: Dict) -> ModelCheckpoint:
        config = dict(config_echo)
        config["model"] = self.model_config()
        return ModelCheckpoint("VAE", config, self.arrays(), dict(metadata))

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "HierarchicalVAE":
        model_cfg = ckpt.config["model"]
        vae = cls(model_cfg["n_points"], model_cfg["d_z"], model_cfg["d_h"], model_cfg["hidden"],
                  np.random.default_rng(0))
        vae.load_arrays(ckpt.params)
        return vae


@dataclass
class TrainHistory:
    """每轮的平均损失记录。"""
    losses: Dict[str, List[float]] = field(default_factory=dict)

    def append(self, **values: float):
        for key, value in values.items():
            self.losses.setdefault(key, []).append(float(value))

    def last(self) -> Dict[str, float]:
        return {k: v[-1] for k, v in self.losses.items() if v}

    def smoothed(self, key: str, window: int = 10) -> Tuple[float, float]:
        """开头与结尾 window 轮的平均值。"""
        values = np.asarray(self.losses.get(key, []))
        if values.size == 0:
            return float("nan"), float("nan")
        w = max(1, min(window, values.size // 2 or 1))
        return float(values[:w].mean()), float(values[-w:].mean())


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_vae(shapes: np.ndarray, section: VaeSection, rng: np.random.Generator,
              vae: Optional[HierarchicalVAE] = None,
              on_checkpoint: Optional[Callable[[int, HierarchicalVAE, TrainHistory], None]] = None,
              ) -> Tuple[HierarchicalVAE, TrainHistory]:
    """在标准化的形状集合 (M, N, 3) 上训练 VAE。

    参考形状与次优形状都作为独立样本传入；每轮重新打乱，KL 权重按轮线性退火。
    on_checkpoint(epoch, vae, history) 每 checkpoint_every 轮回调一次。
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.ndim != 3 or len(shapes) == 0:
        raise RefineError(f"训练集必须是非空的 (M, N, 3) 数组，当前 {shapes.shape}")
    if vae is None:
        vae = HierarchicalVAE.from_section(shapes.shape[1], section, rng)
    schedule = KlAnnealSchedule(max(1, int(round(section.warmup_fraction * section.epochs))),
                                section.lambda_z_max, section.lambda_h_max)
    state = AdamState(lr=section.lr)
    history = TrainHistory()
    logger.info(f"开始训练 VAE: {len(shapes)} 个形状, N={shapes.shape[1]}, 参数量 {vae.num_parameters()}")

    for epoch in range(section.epochs):
        lambda_z, lambda_h = anneal_kl(epoch, schedule)
        sums = {"total": 0.0, "recon": 0.0, "kl_z": 0.0, "kl_h": 0.0}
        order = rng.permutation(len(shapes))
        for idx in _batches(order, section.batch_size):
            try:
                with Tape() as tape:
                    terms = vae.elbo_loss(shapes[idx], lambda_z, lambda_h, rng)
                grads = backward(tape, terms.total)
                vae.assign(nx.adam_step(vae.parameters(), [grads[p] for p in vae.parameters()], state))
            except NonFiniteError as e:
                raise TrainingDivergedError("VAE", epoch, history.last()) from e
            weight = len(idx) / len(shapes)
            for key, value in zip(sums, terms):
                sums[key] += value.item() * weight
        history.append(**sums, lambda_z=lambda_z, lambda_h=lambda_h)

        if section.log_every and (epoch % section.log_every == 0 or epoch == section.epochs - 1):
            logger.info(f"VAE epoch {epoch + 1}/{section.epochs} total={sums['total']:.4f} "
                        f"recon={sums['recon']:.5f} kl_z={sums['kl_z']:.3f} kl_h={sums['kl_h']:.3f} "
                        f"λ=({lambda_z:.3f}, {lambda_h:.3f})")
        if on_checkpoint and section.checkpoint_every and (epoch + 1) % section.checkpoint_every == 0:
            on_checkpoint(epoch + 1, vae, history)
    return vae, history


