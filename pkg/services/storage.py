"""
产物文件编解码。

支持的格式：
- "VGRD" 体素网格：魔数、u16 版本、3×u32 维度、3×f64 间距、3×f64 原点、小端位打包占据。
- "PCLD" 点云：魔数、u16 版本、u8 坐标系标记、u32 点数、N×3 f64 小端。
- "CKPT" 检查点：魔数、u16 版本、模型类型、JSON 配置回显、JSON 元信息、命名 f64 参数块。
- OBJ 网格（仅 v/f 记录）、`stats.bin`（均值 3×f64 + 标准差 f64）、CSV 报表。

所有写出函数的字节内容只取决于输入内容，重复运行得到逐字节相同的文件。
"""
import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from .errors import CheckpointError, RefineError
from .geometry import Frame, PointCloud, StandardizationStats, TriangleMesh, VoxelGrid

logger = logging.getLogger(__name__)

VGRD_MAGIC = b"VGRD"
PCLD_MAGIC = b"PCLD"
CKPT_MAGIC = b"CKPT"
FORMAT_VERSION = 1

_FRAME_TAGS = {Frame.WORLD_MM: 0, Frame.STANDARDIZED: 1}
_TAG_FRAMES = {v: k for k, v in _FRAME_TAGS.items()}

MODEL_KINDS = ("VAE", "GLOBAL_DDPM", "LOCAL_DDPM")


class _Reader:
    """按小端格式顺序读取字节。"""

    def __init__(self, data: bytes, label: str):
        self._data = data
        self._pos = 0
        self._label = label

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise RefineError(f"{self._label} 文件被截断")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self, length_fmt: str = "<H") -> str:
        (length,) = self.unpack(length_fmt)
        return self.take(length).decode("utf-8")

    def array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _check_header(reader: _Reader, magic: bytes):
    if reader.take(4) != magic:
        raise RefineError(f"魔数不匹配，期望 {magic!r}")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise RefineError(f"不支持的 {magic.decode()} 版本: {version}")


# ========== 体素网格 ==========

def encode_voxel_grid(grid: VoxelGrid) -> bytes:
    header = VGRD_MAGIC + struct.pack("<H3I3d3d", FORMAT_VERSION, *grid.dims, *grid.spacing_mm, *grid.origin_mm)
    return header + np.packbits(grid.occupancy.ravel(order="C"), bitorder="little").tobytes()


def decode_voxel_grid(data: bytes) -> VoxelGrid:
    reader = _Reader(data, "VGRD")
    _check_header(reader, VGRD_MAGIC)
    dims = reader.unpack("<3I")
    spacing = reader.unpack("<3d")
    origin = reader.unpack("<3d")
    count = int(np.prod(dims))
    packed = np.frombuffer(reader.take((count + 7) // 8), dtype=np.uint8)
    occ = np.unpackbits(packed, count=count, bitorder="little").astype(bool).reshape(dims)
    return VoxelGrid(occ, spacing, origin)


def save_voxel_grid(grid: VoxelGrid, path: Path):
    Path(path).write_bytes(encode_voxel_grid(grid))


def load_voxel_grid(path: Path) -> VoxelGrid:
    return decode_voxel_grid(Path(path).read_bytes())


# ========== 点云 ==========

def encode_point_cloud(cloud: PointCloud) -> bytes:
    header = PCLD_MAGIC + struct.pack("<HBI", FORMAT_VERSION, _FRAME_TAGS[cloud.frame], cloud.n)
    return header + np.ascontiguousarray(cloud.points, dtype="<f8").tobytes()


def decode_point_cloud(data: bytes) -> PointCloud:
    reader = _Reader(data, "PCLD")
    _check_header(reader, PCLD_MAGIC)
    tag, n = reader.unpack("<BI")
    if tag not in _TAG_FRAMES:
        raise RefineError(f"未知坐标系标记: {tag}")
    return PointCloud(reader.array(3 * n).reshape(n, 3), _TAG_FRAMES[tag])


def save_point_cloud(cloud: PointCloud, path: Path):
    Path(path).write_bytes(encode_point_cloud(cloud))


def load_point_cloud(path: Path) -> PointCloud:
    return decode_point_cloud(Path(path).read_bytes())


# ========== 网格 / 统计量 ==========

def save_mesh_obj(mesh: TriangleMesh, path: Path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]  # tolist() 给出 Python float
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh_obj(path: Path) -> TriangleMesh:
    vertices, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_stats(stats: StandardizationStats, path: Path):
    Path(path).write_bytes(struct.pack("<4d", *stats.mean.tolist(), stats.std))


def load_stats(path: Path) -> StandardizationStats:
    values = struct.unpack("<4d", Path(path).read_bytes()[:32])
    return StandardizationStats(np.array(values[:3]), values[3])


# ========== 检查点 ==========

@dataclass
class ModelCheckpoint:
    """模型参数 + 训练元信息，kind 取 VAE / GLOBAL_DDPM / LOCAL_DDPM。"""
    kind: str
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return int(self.metadata.get("epochs", 0))


def _json_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, allow_nan=True).encode("utf-8")


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    if ckpt.kind not in MODEL_KINDS:
        raise CheckpointError(f"未知模型类型: {ckpt.kind}")
    kind = ckpt.kind.encode("utf-8")
    config = _json_bytes(ckpt.config)
    metadata = _json_bytes(ckpt.metadata)
    chunks = [CKPT_MAGIC, struct.pack("<HH", FORMAT_VERSION, len(kind)), kind,
              struct.pack("<I", len(config)), config,
              struct.pack("<I", len(metadata)), metadata,
              struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    reader = _Reader(data, "CKPT")
    try:
        _check_header(reader, CKPT_MAGIC)
        kind = reader.string("<H")
        config = json.loads(reader.string("<I"))
        metadata = json.loads(reader.string("<I"))
        (count,) = reader.unpack("<I")
        params = {}
        for _ in range(count):
            name = reader.string("<H")
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            params[name] = reader.array(int(np.prod(shape))).reshape(shape)
    except (RefineError, ValueError, struct.error) as e:
        raise CheckpointError(f"检查点解析失败: {e}") from e
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"未知模型类型: {kind}")
    return ModelCheckpoint(kind, config, params, metadata)


def save_checkpoint(ckpt: ModelCheckpoint, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"检查点已保存: {path} ({ckpt.kind}, {len(ckpt.params)} 个参数块)")


def load_checkpoint(path: Path, expected_kind: str = "") -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}")
    ckpt = decode_checkpoint(path.read_bytes())
    if expected_kind and ckpt.kind != expected_kind:
        raise CheckpointError(f"检查点类型不符: 期望 {expected_kind}，实际 {ckpt.kind} ({path})")
    return ckpt


# ========== CSV ==========

def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Dict[str, Any]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(row.get(col, "")) for col in header])


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
