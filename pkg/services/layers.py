"""
网络积木：参数容器、全连接层、逐点 MLP、挤压-激励残差块、特征调制。

VAE 的两个编码器、解码器以及两个去噪网络都继承 `Module`，只在 `numerics` 原语之上组合，
不引入任何深度学习框架。逐点层对 (B, N, C) 张量做 `x @ W + b`，因此对点的行置换天然等变。
"""
from typing import Dict, List, Sequence

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ShapeMismatchError
from .numerics import Tensor


class Module:
    """带命名参数表的网络基类。

    参数按注册顺序保存，`parameters()` / `arrays()` 的顺序即检查点中参数块的顺序。
    """

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    # ========== 参数注册 ==========

    def add_linear(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
                   scale: float = 1.0):
        """He 正态初始化的全连接层，scale 可把输出层初始化得更小。"""
        std = scale * np.sqrt(2.0 / fan_in)
        self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def add_mlp(self, rng: np.random.Generator, name: str, widths: Sequence[int], last_scale: float = 1.0):
        for i in range(len(widths) - 1):
            scale = last_scale if i == len(widths) - 2 else 1.0
            self.add_linear(rng, f"{name}.{i}", widths[i], widths[i + 1], scale=scale)

    def add_se_block(self, rng: np.random.Generator, name: str, width: int, reduction: int = 4):
        bottleneck = max(1, width // reduction)
        self.add_linear(rng, f"{name}.fc1", width, width)
        self.add_linear(rng, f"{name}.fc2", width, width, scale=0.1)
        self.add_linear(rng, f"{name}.se1", width, bottleneck)
        self.add_linear(rng, f"{name}.se2", bottleneck, width)

    # ========== 前向积木 ==========

    def linear(self, name: str, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def mlp(self, name: str, x: Tensor, depth: int, final_activation: bool = False) -> Tensor:
        for i in range(depth):
            x = self.linear(f"{name}.{i}", x)
            if i < depth - 1 or final_activation:
                x = nx.relu(x)
        return x

    def se_block(self, name: str, x: Tensor) -> Tensor:
        """挤压-激励残差块：两层变换 + 通道均值上的瓶颈门控。"""
        h = self.linear(f"{name}.fc2", nx.relu(self.linear(f"{name}.fc1", x)))
        squeezed = nx.mean(h, axis=-2, keepdims=True) if h.ndim == 3 else h
        gate = nx.sigmoid(self.linear(f"{name}.se2", nx.relu(self.linear(f"{name}.se1", squeezed))))
        return nx.add(x, nx.mul(h, gate))

    # ========== 参数读写 ==========

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def names(self) -> List[str]:
        return list(self.params.keys())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        """用检查点里的数组替换参数，名称和形状必须一一对应。"""
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"参数名不一致，缺少 {sorted(missing)}，多余 {sorted(extra)}")
        for name, current in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != current.shape:
                raise CheckpointError(f"参数 {name} 形状不一致: 检查点 {arr.shape}，模型 {current.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def assign(self, new_params: Sequence[Tensor]):
        if len(new_params) != len(self.params):
            raise ShapeMismatchError("更新后的参数数量与模型不一致")
        for name, tensor in zip(list(self.params), new_params):
            self.params[name] = tensor

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """(B, D) -> (B, n, D)：把每个样本的向量复制到所有点上。"""
    b, d = x.shape
    return nx.broadcast_to(nx.reshape(x, (b, 1, d)), (b, n, d))


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """逐特征缩放平移：x * (1 + scale) + shift，scale/shift 为 (B, D)，在点维上广播。"""
    if x.ndim == 3:
        b, d = scale.shape
        scale = nx.reshape(scale, (b, 1, d))
        shift = nx.reshape(shift, (b, 1, d))
    return nx.add(nx.mul(x, nx.add(scale, 1.0)), shift)
