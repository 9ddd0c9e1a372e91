"""
产物持久化
特征分片、三元组分片、检查点、嵌入库的二进制格式，以及 JSON Lines 语料清单

二进制产物统一布局（小端）:
    magic (7 字节) | version u32 | payload 长度 u64 | 分道 FNV-1a 64 校验和 u64 | payload
校验和只覆盖 payload。
"""

import csv
import json
import logging
import os
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from errors import (
    ArtifactError, ArtifactMissingError, ChecksumError, TruncatedArtifactError,
    UnknownMagicError, UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

SPEC_MAGIC = b'TFSPEC1'
TRIPLET_MAGIC = b'TFTRIP1'
CHECKPOINT_MAGIC = b'TFCKPT1'
EMBEDDING_MAGIC = b'TFEMB1\x00'

FORMAT_VERSION = 1
HEADER = struct.Struct('<7sIQQ')

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK_64 = 0xffffffffffffffff
CHECKSUM_LANES = 4096

MANIFEST_FILE = 'manifest.jsonl'
CORPUS_FILE = 'corpus.json'


class TripletRecord(NamedTuple):
    """三元组引用：来源、变换种子、三个 (录音索引, 窗口索引)、4 个参数"""
    source: int
    transform_seed: int
    anchor: Tuple[int, int]
    positive: Tuple[int, int]
    negative: Tuple[int, int]
    params: Tuple[float, float, float, float]


def fnv1a_64(payload: bytes) -> int:
    """按 64 位字分道的 FNV-1a 校验和

    payload 补零到 8 字节整数倍后按小端读成字 w_0..w_{m-1}，第 i 个字归入第 i mod k 道
    （k = min(CHECKSUM_LANES, m)），各道独立做 FNV-1a，再从第 0 道起按 FNV-1a 依次折叠其余各道。
    空 payload 与单字 payload 的结果和逐字节 FNV-1a-64 相同。
    """
    data = bytes(payload)
    if not data:
        return FNV_OFFSET
    data += b'\x00' * (-len(data) % 8)
    words = np.frombuffer(data, dtype='<u8')
    k = min(CHECKSUM_LANES, len(words))
    full = len(words) // k
    lanes = np.full(k, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for row in words[:full * k].reshape(full, k):
        lanes ^= row
        lanes *= prime
    tail = words[full * k:]
    if len(tail):
        lanes[:len(tail)] ^= tail
        lanes[:len(tail)] *= prime
    h = int(lanes[0])
    for lane in lanes[1:].tolist():
        h = ((h ^ lane) * FNV_PRIME) & MASK_64
    return h


class _Cursor:
    """顺序读取 payload，越界即视为截断"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise TruncatedArtifactError(f"payload 在偏移 {self.offset} 处被截断")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        size = dtype.itemsize * count
        if self.offset + size > len(self.payload):
            raise TruncatedArtifactError(f"payload 在偏移 {self.offset} 处被截断")
        values = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += size
        return values

    def bytes(self, count):
        if self.offset + count > len(self.payload):
            raise TruncatedArtifactError(f"payload 在偏移 {self.offset} 处被截断")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def finish(self):
        if self.offset != len(self.payload):
            raise ArtifactError(f"payload 末尾有 {len(self.payload) - self.offset} 字节多余数据")


def pack_artifact(magic: bytes, payload: bytes, version: int = FORMAT_VERSION) -> bytes:
    return HEADER.pack(magic, version, len(payload), fnv1a_64(payload)) + payload


def unpack_artifact(data: bytes, magic: bytes, supported=(FORMAT_VERSION,)) -> Tuple[int, bytes]:
    """校验文件头并返回 (version, payload)"""
    if len(data) < HEADER.size:
        raise TruncatedArtifactError(f"文件长度 {len(data)} 小于文件头 {HEADER.size}")
    found_magic, version, length, checksum = HEADER.unpack_from(data)
    if found_magic != magic:
        raise UnknownMagicError(f"魔数 {found_magic!r} 不是期望的 {magic!r}")
    if version not in supported:
        raise UnsupportedVersionError(f"{magic.decode(errors='replace')} 版本 {version} 不受支持")
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise TruncatedArtifactError(f"payload 长度 {len(payload)} 与文件头记录的 {length} 不一致")
    if fnv1a_64(payload) != checksum:
        raise ChecksumError("payload 校验和不匹配，文件已损坏")
    return version, payload


def _write_bytes(path, data: bytes):
    """先写临时文件再替换，写者独占目标文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)


def _read_bytes(path, producer):
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(path, producer)
    return path.read_bytes()


# ---------------------------------------------------------------- 特征分片

def write_spectrogram(path, cells: np.ndarray, frame_hop_s: float):
    """TFSPEC1: u32 F, u32 n_frames, f64 frame_hop_s, F·n_frames 个 f32（通道优先）"""
    cells = np.ascontiguousarray(cells, dtype='<f4')
    n_mels, n_frames = cells.shape
    payload = struct.pack('<IId', n_mels, n_frames, frame_hop_s) + cells.tobytes()
    _write_bytes(path, pack_artifact(SPEC_MAGIC, payload))


def read_spectrogram(path) -> Tuple[np.ndarray, float]:
    _, payload = unpack_artifact(_read_bytes(path, 'featurize'), SPEC_MAGIC)
    cursor = _Cursor(payload)
    n_mels, n_frames, frame_hop_s = cursor.unpack('<IId')
    cells = cursor.array('<f4', n_mels * n_frames).reshape(n_mels, n_frames)
    cursor.finish()
    return cells.astype(np.float32), frame_hop_s


# ---------------------------------------------------------------- 三元组分片

_TRIPLET_ROW = struct.Struct('<BQIIIIII4f')


def write_triplets(path, records: List[TripletRecord]):
    """TFTRIP1: u32 count，每条 u8 来源、u64 变换种子、三个 (u32, u32) 引用、4 个 f32 参数"""
    chunks = [struct.pack('<I', len(records))]
    for r in records:
        chunks.append(_TRIPLET_ROW.pack(
            int(r.source), int(r.transform_seed),
            *r.anchor, *r.positive, *r.negative,
            *[float(p) for p in r.params],
        ))
    _write_bytes(path, pack_artifact(TRIPLET_MAGIC, b''.join(chunks)))


def read_triplets(path) -> List[TripletRecord]:
    _, payload = unpack_artifact(_read_bytes(path, 'sample-triplets'), TRIPLET_MAGIC)
    cursor = _Cursor(payload)
    (count,) = cursor.unpack('<I')
    records = []
    for _ in range(count):
        row = cursor.unpack(_TRIPLET_ROW.format)
        records.append(TripletRecord(
            source=row[0], transform_seed=row[1],
            anchor=(row[2], row[3]), positive=(row[4], row[5]), negative=(row[6], row[7]),
            params=tuple(row[8:12]),
        ))
    cursor.finish()
    return records


# ---------------------------------------------------------------- 检查点

def _pack_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode('utf-8')
        value = np.ascontiguousarray(value, dtype='<f4')
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack('<I', value.ndim) + struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(value.tobytes())
    return b''.join(chunks)


def _unpack_tensors(cursor: _Cursor) -> Dict[str, np.ndarray]:
    (count,) = cursor.unpack('<I')
    tensors = {}
    for _ in range(count):
        (name_len,) = cursor.unpack('<H')
        name = cursor.bytes(name_len).decode('utf-8')
        (ndim,) = cursor.unpack('<I')
        shape = cursor.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = cursor.array('<f4', size).reshape(shape).astype(np.float32)
    return tensors


def write_checkpoint(path, model_spec: Dict, params: Dict[str, np.ndarray], optimizer: Optional[Dict] = None):
    """TFCKPT1: ModelSpec(JSON)、参数、可选的优化器状态"""
    spec_bytes = json.dumps(model_spec, sort_keys=True).encode('utf-8')
    chunks = [struct.pack('<I', len(spec_bytes)), spec_bytes, _pack_tensors(params)]
    if optimizer is None:
        chunks.append(struct.pack('<B', 0))
    else:
        chunks.append(struct.pack('<BQdddd', 1, optimizer['step'], optimizer['learning_rate'],
                                  optimizer['beta1'], optimizer['beta2'], optimizer['eps']))
        chunks.append(_pack_tensors(optimizer['m']))
        chunks.append(_pack_tensors(optimizer['v']))
    _write_bytes(path, pack_artifact(CHECKPOINT_MAGIC, b''.join(chunks)))


def read_checkpoint(path, with_optimizer: bool = True):
    """返回 (model_spec, params, optimizer 或 None)"""
    _, payload = unpack_artifact(_read_bytes(path, 'train'), CHECKPOINT_MAGIC)
    cursor = _Cursor(payload)
    (spec_len,) = cursor.unpack('<I')
    model_spec = json.loads(cursor.bytes(spec_len).decode('utf-8'))
    params = _unpack_tensors(cursor)
    (has_optimizer,) = cursor.unpack('<B')
    optimizer = None
    if has_optimizer:
        step, lr, beta1, beta2, eps = cursor.unpack('<Qdddd')
        m = _unpack_tensors(cursor)
        v = _unpack_tensors(cursor)
        if with_optimizer:
            optimizer = {'step': step, 'learning_rate': lr, 'beta1': beta1, 'beta2': beta2,
                         'eps': eps, 'm': m, 'v': v}
    cursor.finish()
    return model_spec, params, optimizer


# ---------------------------------------------------------------- 嵌入库

def write_embeddings(path, ids, vectors: np.ndarray):
    """TFEMB1: u32 d, u64 count，每行 u64 id + d 个 f32"""
    ids = np.asarray(ids, dtype='<u8')
    vectors = np.ascontiguousarray(vectors, dtype='<f4')
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise ArtifactError(f"嵌入矩阵形状 {vectors.shape} 与 id 数 {len(ids)} 不一致")
    count, d = vectors.shape
    rows = np.empty(count, dtype=[('id', '<u8'), ('vec', '<f4', (d,))])
    rows['id'] = ids
    rows['vec'] = vectors
    payload = struct.pack('<IQ', d, count) + rows.tobytes()
    _write_bytes(path, pack_artifact(EMBEDDING_MAGIC, payload))


def read_embeddings(path) -> Tuple[np.ndarray, np.ndarray]:
    _, payload = unpack_artifact(_read_bytes(path, 'embed'), EMBEDDING_MAGIC)
    cursor = _Cursor(payload)
    d, count = cursor.unpack('<IQ')
    row_type = np.dtype([('id', '<u8'), ('vec', '<f4', (d,))])
    raw = cursor.bytes(row_type.itemsize * count)
    cursor.finish()
    rows = np.frombuffer(raw, dtype=row_type, count=count)
    return rows['id'].astype(np.uint64), rows['vec'].astype(np.float32).reshape(count, d)


# ---------------------------------------------------------------- 语料清单

def write_manifest(corpus_dir: Path, header: Dict, records: List[Dict]):
    """manifest.jsonl 每行一条录音，corpus.json 保存类别与生成参数"""
    corpus_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record, sort_keys=True, ensure_ascii=False) for record in records]
    _write_bytes(corpus_dir / MANIFEST_FILE, ('\n'.join(lines) + '\n').encode('utf-8'))
    _write_bytes(corpus_dir / CORPUS_FILE,
                 json.dumps(header, sort_keys=True, indent=2, ensure_ascii=False).encode('utf-8'))


def read_manifest(corpus_dir: Path) -> Tuple[Dict, List[Dict]]:
    manifest_path = corpus_dir / MANIFEST_FILE
    header_path = corpus_dir / CORPUS_FILE
    for path in (manifest_path, header_path):
        if not path.exists():
            raise ArtifactMissingError(path, 'gen-corpus')
    header = json.loads(header_path.read_text(encoding='utf-8'))
    records = []
    with open(manifest_path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ArtifactError(f"{manifest_path} 第 {line_no} 行无法解析: {e}")
    return header, records


# ---------------------------------------------------------------- 报告

def write_csv(path, header: List[str], rows: List[List]):
    """写出 CSV 报告；浮点统一 repr，保证重复运行字节一致"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(path, 'eval-qbe')
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))
