"""
隐空间条件扩散：噪声表、前向加噪、两个条件去噪网络、训练损失与祖先采样。

职责定位：
1. `make_schedule()` / `forward_diffuse()`：线性 beta 噪声表与闭式前向加噪。
2. `GlobalDenoiser`（ξ）：挤压-激励残差网络，预测全局隐向量上的噪声，条件为 z_c。
3. `LocalDenoiser`（φ）：双路径逐点网络，路径 A 处理带噪 h_t，路径 B 处理条件 h_c，
   两路按行拼接融合；z_x0 与时间嵌入通过逐特征缩放平移注入。
4. `global_loss()` / `local_loss()`：ε 预测的平方误差，批内平均；条件隐变量永不加噪。
5. `reverse_sample_global()` / `reverse_sample_local()`：σ_t² = β_t 的祖先采样，最后一步不加噪。
6. `train_ddpms()`：冻结 VAE，两个 DDPM 各用独立随机流，可在线程池中并行训练。
7. `refine()`：编码 -> 全局反向 -> 局部反向 -> 解码，失败时带阶段标记抛出。

调用关系：
- 上游：`pipeline.py`
- 下游：`vae.HierarchicalVAE`、`layers.Module`、`numerics`

排查建议：
- 采样结果发散：先检查 beta_end 是否过大，以及检查点里回显的噪声表与当前配置是否一致。
- 批量推理与单例推理结果不同：确认每个病例使用了各自的随机数生成器。
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as nx
from .config import DiffusionSection
from .errors import (
    FrameMismatchError,
    NonFiniteError,
    RefineError,
    ShapeMismatchError,
    StageError,
    TrainingDivergedError,
)
from .geometry import Frame, PointCloud
from .layers import Module, broadcast_rows, modulate
from .numerics import AdamState, Tape, Tensor, backward
from .storage import ModelCheckpoint
from .vae import HierarchicalVAE, TrainHistory

logger = logging.getLogger(__name__)

RngLike = Union[np.random.Generator, Sequence[np.random.Generator]]


# ========== 噪声表 ==========

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def echo(self) -> Dict[str, float]:
        """写入检查点的噪声表参数。"""
        return {"steps": self.steps, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if steps < 1:
        raise RefineError(f"扩散步数必须 >= 1: {steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise RefineError(f"beta 范围不合法: {beta_start} -> {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps) if steps > 1 else np.array([beta_start], dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def schedule_from_section(section: DiffusionSection) -> NoiseSchedule:
    return make_schedule(section.steps, section.beta_start, section.beta_end)


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """按批内每个样本的 t 取系数，并补齐尾部维度以便广播。"""
    picked = values[t]
    return picked.reshape(picked.shape + (1,) * (ndim - picked.ndim))


def _check_steps(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise RefineError(f"时间步超出范围 [0, {schedule.steps}): {t}")
    return t


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε。t 可以是标量，也可以是长度为批大小的整数数组。"""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"噪声形状 {eps.shape} 与 x0 形状 {x0.shape} 不一致")
    t = _check_steps(t, schedule)
    ab = _per_sample(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, dim: int) -> np.ndarray:
    """正弦时间嵌入，(B,) -> (B, dim)，前一半 sin 后一半 cos。"""
    if dim < 2 or dim % 2:
        raise RefineError(f"时间嵌入维度必须是正偶数: {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# ========== 去噪网络 ==========

class _Denoiser(Module):
    kind = ""

    def model_config(self) -> Dict[str, int]:
        raise NotImplementedError

    def to_checkpoint(self, config_echo: Dict, schedule: NoiseSchedule, metadata: Dict) -> ModelCheckpoint:
        config = dict(config_echo)
        config["model"] = self.model_config()
        config["schedule"] = schedule.echo()
        return ModelCheckpoint(self.kind, config, self.arrays(), dict(metadata))

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "_Denoiser":
        if ckpt.kind != cls.kind:
            raise RefineError(f"检查点类型 {ckpt.kind} 不能加载为 {cls.kind}")
        model = cls(rng=np.random.default_rng(0), **ckpt.config["model"])
        model.load_arrays(ckpt.params)
        return model


class GlobalDenoiser(_Denoiser):
    """ε_ξ(z_t, t, z_c)：输入拼接后经过若干挤压-激励残差块。"""

    kind = "GLOBAL_DDPM"

    def __init__(self, d_z: int, hidden: int, time_dim: int, se_blocks: int, rng: np.random.Generator):
        super().__init__()
        self.d_z, self.hidden, self.time_dim, self.se_blocks = int(d_z), int(hidden), int(time_dim), int(se_blocks)
        h = self.hidden
        self.add_mlp(rng, "cond", [self.d_z, h, h])
        self.add_linear(rng, "time", self.time_dim, h)
        self.add_linear(rng, "in", self.d_z + 2 * h, h)
        for i in range(self.se_blocks):
            self.add_se_block(rng, f"block{i}", h)
        self.add_linear(rng, "out", h, self.d_z, scale=0.1)

    def model_config(self) -> Dict[str, int]:
        return {"d_z": self.d_z, "hidden": self.hidden, "time_dim": self.time_dim, "se_blocks": self.se_blocks}

    def __call__(self, z_t, t, z_c) -> Tensor:
        z_t, z_c = nx.as_tensor(z_t), nx.as_tensor(z_c)
        if z_t.ndim != 2 or z_t.shape != z_c.shape or z_t.shape[-1] != self.d_z:
            raise ShapeMismatchError(f"全局去噪输入形状不符: z_t={z_t.shape}, z_c={z_c.shape}")
        temb = nx.relu(self.linear("time", time_embedding(np.broadcast_to(t, (z_t.shape[0],)), self.time_dim)))
        cond = self.mlp("cond", z_c, depth=2, final_activation=True)
        x = nx.relu(self.linear("in", nx.concat([z_t, temb, cond], axis=-1)))
        for i in range(self.se_blocks):
            x = self.se_block(f"block{i}", x)
        return self.linear("out", x)


class LocalDenoiser(_Denoiser):
    """ε_φ(h_t, t, h_c, z_x0)：双路径逐点网络，对点行置换等变。"""

    kind = "LOCAL_DDPM"

    def __init__(self, channels: int, d_z: int, hidden: int, time_dim: int, rng: np.random.Generator):
        super().__init__()
        self.channels, self.d_z, self.hidden, self.time_dim = int(channels), int(d_z), int(hidden), int(time_dim)
        c, h = self.channels, self.hidden
        self.add_mlp(rng, "path_a", [c, h, h])
        self.add_mlp(rng, "path_b", [c, h, h])
        self.add_mlp(rng, "fuse", [2 * h, h, h])
        self.add_mlp(rng, "film", [self.d_z + self.time_dim, h, 2 * h], last_scale=0.1)
        self.add_mlp(rng, "head", [2 * h, h, c], last_scale=0.1)

    def model_config(self) -> Dict[str, int]:
        return {"channels": self.channels, "d_z": self.d_z, "hidden": self.hidden, "time_dim": self.time_dim}

    def __call__(self, h_t, t, h_c, z_x0) -> Tensor:
        h_t, h_c, z_x0 = nx.as_tensor(h_t), nx.as_tensor(h_c), nx.as_tensor(z_x0)
        if h_t.ndim != 3 or h_t.shape != h_c.shape or h_t.shape[-1] != self.channels:
            raise ShapeMismatchError(f"局部去噪输入形状不符: h_t={h_t.shape}, h_c={h_c.shape}")
        b, n, _ = h_t.shape
        if z_x0.shape != (b, self.d_z):
            raise ShapeMismatchError(f"z_x0 形状应为 {(b, self.d_z)}，当前 {z_x0.shape}")
        temb = time_embedding(np.broadcast_to(t, (b,)), self.time_dim)
        film = self.mlp("film", nx.concat([z_x0, temb], axis=-1), depth=2)
        scale = nx.gather(film, np.arange(self.hidden), axis=-1)
        shift = nx.gather(film, np.arange(self.hidden, 2 * self.hidden), axis=-1)

        path_a = self.mlp("path_a", h_t, depth=2, final_activation=True)
        path_b = self.mlp("path_b", h_c, depth=2, final_activation=True)
        fused = self.mlp("fuse", nx.concat([path_a, path_b], axis=-1), depth=2, final_activation=True)
        fused = nx.relu(modulate(fused, scale, shift))
        context = broadcast_rows(nx.max_pool(fused, axis=-2), n)
        return self.mlp("head", nx.concat([fused, context], axis=-1), depth=2)


# ========== 训练损失 ==========

def _eps_loss(pred, eps: np.ndarray) -> Tensor:
    pred = nx.as_tensor(pred)
    if pred.shape != eps.shape:
        raise ShapeMismatchError(f"去噪输出形状 {pred.shape} 与噪声形状 {eps.shape} 不一致")
    diff = nx.sub(pred, eps)
    return nx.mul(nx.sum(nx.mul(diff, diff)), 1.0 / eps.shape[0])


def _draw_step_noise(shape: Tuple[int, ...], schedule: NoiseSchedule, rng: np.random.Generator,
                     t: Optional[np.ndarray], eps: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """未显式给出的 t / ε 从 rng 抽取（先 t 后 ε）。"""
    t = rng.integers(0, schedule.steps, size=shape[0]) if t is None else _check_steps(t, schedule)
    eps = rng.standard_normal(shape) if eps is None else np.asarray(eps, dtype=np.float64)
    return t, eps


def global_loss(z_x: np.ndarray, z_c: np.ndarray, denoiser: Callable, schedule: NoiseSchedule,
                rng: np.random.Generator, t: Optional[np.ndarray] = None,
                eps: Optional[np.ndarray] = None) -> Tensor:
    """‖ε − ε_ξ(z_{x,t}, t, z_c)‖²，每个样本独立抽取 t 与 ε，批内平均。"""
    z_x = np.asarray(z_x, dtype=np.float64)
    if z_x.ndim != 2 or np.shape(z_c) != z_x.shape:
        raise ShapeMismatchError(f"全局隐向量对形状不符: z_x={z_x.shape}, z_c={np.shape(z_c)}")
    t, eps = _draw_step_noise(z_x.shape, schedule, rng, t, eps)
    return _eps_loss(denoiser(forward_diffuse(z_x, t, eps, schedule), t, z_c), eps)


def local_loss(h_x: np.ndarray, h_c: np.ndarray, z_x0: np.ndarray, denoiser: Callable,
               schedule: NoiseSchedule, rng: np.random.Generator, t: Optional[np.ndarray] = None,
               eps: Optional[np.ndarray] = None) -> Tensor:
    """同 global_loss，但作用在局部隐点云上，条件为 h_c 与干净的 z_x0。"""
    h_x = np.asarray(h_x, dtype=np.float64)
    if h_x.ndim != 3 or np.shape(h_c) != h_x.shape:
        raise ShapeMismatchError(f"局部隐点云对形状不符: h_x={h_x.shape}, h_c={np.shape(h_c)}")
    if np.ndim(z_x0) != 2 or np.shape(z_x0)[0] != h_x.shape[0]:
        raise ShapeMismatchError(f"z_x0 形状不符: {np.shape(z_x0)}")
    t, eps = _draw_step_noise(h_x.shape, schedule, rng, t, eps)
    return _eps_loss(denoiser(forward_diffuse(h_x, t, eps, schedule), t, h_c, z_x0), eps)


# ========== 反向采样 ==========

def _case_rngs(rng: RngLike, batch: int) -> List[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * batch
    rngs = list(rng)
    if len(rngs) != batch:
        raise RefineError(f"随机数生成器数量 {len(rngs)} 与批大小 {batch} 不一致")
    return rngs


def _draw(rngs: List[np.random.Generator], shape: Tuple[int, ...]) -> np.ndarray:
    if len(set(map(id, rngs))) == 1:
        return rngs[0].standard_normal((len(rngs),) + shape)
    return np.stack([g.standard_normal(shape) for g in rngs])


def _reverse(x_T: Optional[np.ndarray], shape: Tuple[int, ...], predict: Callable[[np.ndarray, np.ndarray], np.ndarray],
             schedule: NoiseSchedule, rngs: List[np.random.Generator], stochastic: bool) -> np.ndarray:
    x = _draw(rngs, shape) if x_T is None else np.array(x_T, dtype=np.float64)
    if x.shape != (len(rngs),) + shape:
        raise ShapeMismatchError(f"初始噪声形状 {x.shape} 与期望 {(len(rngs),) + shape} 不一致")
    for t in range(schedule.steps - 1, -1, -1):
        beta, alpha, alpha_bar = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
        eps = np.asarray(predict(x, np.full(len(rngs), t)), dtype=np.float64)
        x = (x - beta / np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha)
        if t > 0 and stochastic:
            x = x + np.sqrt(beta) * _draw(rngs, shape)
    return x


def _as_array(result) -> np.ndarray:
    return result.data if isinstance(result, Tensor) else np.asarray(result)


def reverse_sample_global(z_c: np.ndarray, denoiser: Callable, schedule: NoiseSchedule, rng: RngLike,
                          z_T: Optional[np.ndarray] = None, stochastic: bool = True) -> np.ndarray:
    """从 z_{x,T} ~ N(0, I) 出发逐步去噪得到 z_{x,0}。

    rng 可以是单个生成器，也可以是每个病例一个生成器（此时结果与批的组成无关）。
    stochastic=False 时每一步都不加噪声，结果只取决于 z_T。
    """
    z_c = np.asarray(z_c, dtype=np.float64)
    rngs = _case_rngs(rng, z_c.shape[0])
    return _reverse(z_T, z_c.shape[1:], lambda x, t: _as_array(denoiser(x, t, z_c)), schedule, rngs, stochastic)


def reverse_sample_local(h_c: np.ndarray, z_x0: np.ndarray, denoiser: Callable, schedule: NoiseSchedule,
                         rng: RngLike, h_T: Optional[np.ndarray] = None, stochastic: bool = True) -> np.ndarray:
    h_c = np.asarray(h_c, dtype=np.float64)
    z_x0 = np.asarray(z_x0, dtype=np.float64)
    rngs = _case_rngs(rng, h_c.shape[0])
    return _reverse(h_T, h_c.shape[1:], lambda x, t: _as_array(denoiser(x, t, h_c, z_x0)),
                    schedule, rngs, stochastic)


# ========== 训练 ==========

@dataclass
class DdpmModels:
    global_model: GlobalDenoiser
    local_model: LocalDenoiser
    schedule: NoiseSchedule


def build_denoisers(vae: HierarchicalVAE, section: DiffusionSection, rng: np.random.Generator) -> DdpmModels:
    return DdpmModels(
        GlobalDenoiser(vae.d_z, section.hidden, section.time_dim, section.se_blocks, rng),
        LocalDenoiser(vae.latent_channels, vae.d_z, section.hidden, section.time_dim, rng),
        schedule_from_section(section),
    )


def _train_one(kind: str, model: _Denoiser, prepare: Callable[[np.ndarray, np.random.Generator], Callable[[], Tensor]],
               n_pairs: int, section: DiffusionSection, rng: np.random.Generator) -> TrainHistory:
    state = AdamState(lr=section.lr)
    history = TrainHistory()
    for epoch in range(section.epochs):
        total = 0.0
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, section.batch_size):
            idx = order[start:start + section.batch_size]
            try:
                compute = prepare(idx, rng)
                with Tape() as tape:
                    loss = compute()
                grads = backward(tape, loss)
                model.assign(nx.adam_step(model.parameters(), [grads[p] for p in model.parameters()], state))
            except NonFiniteError as e:
                raise TrainingDivergedError(kind, epoch, history.last()) from e
            total += loss.item() * len(idx) / n_pairs
        history.append(loss=total)
        if section.log_every and (epoch % section.log_every == 0 or epoch == section.epochs - 1):
            logger.info(f"{kind} epoch {epoch + 1}/{section.epochs} loss={total:.4f}")
    return history


def train_ddpms(vae: HierarchicalVAE, refs: np.ndarray, subs: np.ndarray, section: DiffusionSection,
                rng: np.random.Generator, threads: int = 1,
                models: Optional[DdpmModels] = None) -> Tuple[DdpmModels, Dict[str, TrainHistory]]:
    """在冻结的 VAE 隐空间上训练两个 DDPM。

    refs / subs 是一一对应的标准化点云 (M, N, 3)。目标隐变量每轮重新重参数化采样，
    条件隐变量使用后验均值。threads >= 2 时两个模型并行训练；
    两者的随机流在开始前就已分开，因此是否并行不影响结果。
    """
    refs = np.asarray(refs, dtype=np.float64)
    subs = np.asarray(subs, dtype=np.float64)
    if refs.shape != subs.shape or refs.ndim != 3 or len(refs) == 0:
        raise ShapeMismatchError(f"参考与次优点云必须一一对应: {refs.shape} vs {subs.shape}")
    if models is None:
        models = build_denoisers(vae, section, rng)
    if models.global_model.d_z != vae.d_z or models.local_model.channels != vae.latent_channels:
        raise RefineError("去噪网络维度与 VAE 隐空间维度不一致")

    cond = vae.encode_means(subs)
    schedule = models.schedule
    seeds = rng.integers(0, 2 ** 63 - 1, size=2)
    global_rng, local_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])

    def global_step(idx, step_rng):
        z_x = vae.encode_global(refs[idx], step_rng).sample.data
        return lambda: global_loss(z_x, cond.z[idx], models.global_model, schedule, step_rng)

    def local_step(idx, step_rng):
        target = vae.encode_sample(refs[idx], step_rng)
        return lambda: local_loss(target.h, cond.h[idx], target.z, models.local_model, schedule, step_rng)

    jobs = [("GLOBAL_DDPM", models.global_model, global_step, global_rng),
            ("LOCAL_DDPM", models.local_model, local_step, local_rng)]
    logger.info(f"开始训练 DDPM: {len(refs)} 对样本, T={schedule.steps}, 并行={threads >= 2}")
    if threads >= 2:
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = [pool.submit(_train_one, kind, model, step, len(refs), section, job_rng)
                       for kind, model, step, job_rng in jobs]
            histories = [f.result() for f in futures]
    else:
        histories = [_train_one(kind, model, step, len(refs), section, job_rng)
                     for kind, model, step, job_rng in jobs]
    return models, {"GLOBAL_DDPM": histories[0], "LOCAL_DDPM": histories[1]}


# ========== 推理 ==========

def _stage(name: str, fn: Callable, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (RefineError, ArithmeticError) as e:
        raise StageError(name, e) from e


def refine(clouds: Sequence[PointCloud], vae: HierarchicalVAE, models: DdpmModels,
           rngs: RngLike) -> List[PointCloud]:
    """把标准化坐标系下的次优点云批量细化为新的标准化点云。

    每个病例推荐传入独立的随机数生成器：先抽 z_{x,T}，再抽 h_{x,T}，
    于是单个病例的结果与同批其他病例无关。
    """
    clouds = list(clouds)
    if not clouds:
        return []
    for cloud in clouds:
        if cloud.frame != Frame.STANDARDIZED:
            raise FrameMismatchError(f"refine 需要标准化坐标系的点云，当前 {cloud.frame.value}")
    case_rngs = _case_rngs(rngs, len(clouds))

    def encode():
        points = np.stack([c.points for c in clouds])
        return vae.encode_means(points)

    cond = _stage("encode", encode)
    z_x0 = _stage("reverse_global", reverse_sample_global, cond.z, models.global_model, models.schedule, case_rngs)
    h_x0 = _stage("reverse_local", reverse_sample_local, cond.h, z_x0, models.local_model, models.schedule,
                  case_rngs)
    decoded = _stage("decode", lambda: vae.decode(z_x0, h_x0).data)
    return [PointCloud(points, Frame.STANDARDIZED) for points in decoded]
