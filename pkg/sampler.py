"""
三元组采样器
在能量域窗口上按六种策略生成 (anchor, positive, negative) 三元组

三元组以引用形式 (TripletRecord) 保存：来源、变换种子、三个窗口引用和参数。
变换后的正例不落盘，加载时按引用确定性地重新生成。
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import store
from errors import ConfigError, DomainMismatchError, SamplingError
from frontend import ENERGY, ContextWindow, energy_of, window_spectrogram, EnergySpectrogram
from store import TripletRecord
from utils import draw_seed

logger = logging.getLogger(__name__)

MAX_MIXING_RETRIES = 100


class TripletSource(IntEnum):
    LABELED = 0
    NOISE = 1
    TRANSLATION = 2
    MIXING = 3
    PROXIMITY = 4

    @property
    def config_name(self):
        return self.name.lower()

    @classmethod
    def from_name(cls, name):
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigError(f"未知三元组来源: {name}")


@dataclass
class Example:
    """一个能量域训练样本"""
    window: ContextWindow
    labels: Optional[frozenset]
    recording_id: str
    start_time_s: float
    recording_index: int
    window_index: int

    @property
    def key(self) -> Tuple[int, int]:
        return (self.recording_index, self.window_index)

    @property
    def cells(self):
        return self.window.cells


@dataclass
class Triplet:
    """物化后的三元组"""
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    source: TripletSource
    transform_seed: int
    params: Tuple[float, float, float, float]
    record: TripletRecord


@dataclass
class SamplerConfig:
    """采样超参数"""
    sigma: float = 0.5
    freq_shift: int = 10
    alpha: float = 0.25
    delta_t_s: float = 10.0
    pairs_per_anchor: int = 1
    weights: Dict[str, float] = field(default_factory=lambda: {
        'noise': 1.0, 'translation': 1.0, 'mixing': 1.0, 'proximity': 1.0})

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma 必须 >= 0: {self.sigma}")
        if self.freq_shift < 0:
            raise ConfigError(f"freq_shift 必须 >= 0: {self.freq_shift}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha 必须 > 0: {self.alpha}")
        if self.delta_t_s <= 0:
            raise ConfigError(f"delta_t 必须 > 0: {self.delta_t_s}")
        if self.pairs_per_anchor < 1:
            raise ConfigError(f"pairs_per_anchor 必须 >= 1: {self.pairs_per_anchor}")
        validate_weights(self.weights)

    @classmethod
    def from_config(cls, config):
        section = config.get('sampler')
        return cls(sigma=float(section['sigma']), freq_shift=int(section['freq_shift']),
                   alpha=float(section['alpha']), delta_t_s=float(section['delta_t_s']),
                   pairs_per_anchor=int(section['pairs_per_anchor']),
                   weights=dict(section['weights']))


def validate_weights(weights: Dict[str, float]):
    for name, w in weights.items():
        TripletSource.from_name(name)
        if w < 0:
            raise ConfigError(f"来源权重必须非负: {name}={w}")
    if not any(w > 0 for w in weights.values()):
        raise ConfigError("来源权重不能全为 0")


def _f32(value) -> float:
    """参数块以 f32 落盘，采样时同样取 f32 值保证重新物化一致"""
    return float(np.float32(value))


# ---------------------------------------------------------------- 变换

def circular_time_shift(cells: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(cells, int(shift), axis=1)


def truncated_freq_shift(cells: np.ndarray, shift: int) -> np.ndarray:
    """频率方向平移，移出的行丢弃，空出的行补零能量"""
    shift = int(shift)
    out = np.zeros_like(cells)
    n = cells.shape[0]
    if shift >= 0:
        out[shift:] = cells[:n - shift]
    else:
        out[:n + shift] = cells[-shift:]
    return out


def noise_positive(anchor: np.ndarray, sigma: float, transform_seed: int) -> np.ndarray:
    """x_p = x_a · (1 + |ε|)，ε ~ N(0, σ²) 逐元素独立"""
    eps = np.random.default_rng(transform_seed).normal(0.0, sigma, size=anchor.shape)
    return anchor * (1.0 + np.abs(eps))


def mixing_positive(anchor: np.ndarray, negative: np.ndarray, alpha: float) -> np.ndarray:
    """x_p = x_a + α·[E(x_a)/E(x_n)]·x_n"""
    return anchor + alpha * (energy_of(anchor) / energy_of(negative)) * negative


def materialize(record: TripletRecord, lookup: Dict[Tuple[int, int], Example]) -> Triplet:
    """按引用重建三元组窗口"""
    try:
        anchor = np.asarray(lookup[tuple(record.anchor)].cells, dtype=np.float64)
        negative = np.asarray(lookup[tuple(record.negative)].cells, dtype=np.float64)
        positive_src = lookup[tuple(record.positive)].cells
    except KeyError as e:
        raise SamplingError(f"三元组引用的窗口不存在: {e}")
    source = TripletSource(record.source)
    params = tuple(float(p) for p in record.params)

    if source == TripletSource.NOISE:
        positive = noise_positive(anchor, params[0], record.transform_seed)
    elif source == TripletSource.TRANSLATION:
        positive = truncated_freq_shift(circular_time_shift(anchor, params[0]), params[1])
    elif source == TripletSource.MIXING:
        positive = mixing_positive(anchor, negative, params[0])
    else:
        positive = np.asarray(positive_src, dtype=np.float64)
    return Triplet(anchor, positive, negative, source, record.transform_seed, params, record)


# ---------------------------------------------------------------- 采样

def build_lookup(examples: Sequence[Example]) -> Dict[Tuple[int, int], Example]:
    return {e.key: e for e in examples}


def _check_energy(dataset: Sequence[Example]):
    for example in dataset:
        if example.window.domain != ENERGY:
            raise DomainMismatchError("三元组采样只接受能量域窗口")


def _draw_other(rng, n: int, exclude: int) -> int:
    """从 [0, n) 中均匀抽取一个不等于 exclude 的索引"""
    j = int(rng.integers(n - 1))
    return j + 1 if j >= exclude else j


def _emit(dataset, lookup, source, seed, a, p, n, params):
    record = TripletRecord(int(source), int(seed), dataset[a].key, dataset[p].key, dataset[n].key,
                           tuple(_f32(v) for v in params))
    return materialize(record, lookup)


def sample_labeled(dataset: Sequence[Example], n: int, rng) -> List[Triplet]:
    """显式标注三元组：anchor 与 positive 共享类别 c，negative 不含 c"""
    if not dataset:
        raise SamplingError("数据集为空")
    if any(e.labels is None for e in dataset):
        raise SamplingError("标注采样要求所有样本都带标签")
    if n == 0:
        return []
    _check_energy(dataset)

    members: Dict[int, List[int]] = {}
    for i, example in enumerate(dataset):
        for c in example.labels:
            members.setdefault(c, []).append(i)
    valid = []
    for c in sorted(members):
        if len(members[c]) < 2:
            logger.warning(f"类别 {c} 只有 {len(members[c])} 个样本，跳过")
        elif len(members[c]) == len(dataset):
            logger.warning(f"类别 {c} 没有反例，跳过")
        else:
            valid.append(c)
    if not valid:
        raise SamplingError("没有可用于标注采样的类别")
    outsiders = {c: [i for i, e in enumerate(dataset) if c not in e.labels] for c in valid}

    lookup = build_lookup(dataset)
    triplets = []
    for _ in range(n):
        c = valid[int(rng.integers(len(valid)))]
        a, p = rng.choice(members[c], size=2, replace=False)
        neg = outsiders[c][int(rng.integers(len(outsiders[c])))]
        triplets.append(_emit(dataset, lookup, TripletSource.LABELED, draw_seed(rng), a, p, neg, (c, 0, 0, 0)))
    return triplets


def _anchor_schedule(rng, n_examples: int, n: int, pairs_per_anchor: int, candidates=None):
    """依次给出 n 个 anchor 索引，每个 anchor 连续产生 pairs_per_anchor 对"""
    anchors = []
    while len(anchors) < n:
        if candidates is None:
            a = int(rng.integers(n_examples))
        else:
            a = int(candidates[int(rng.integers(len(candidates)))])
        anchors.extend([a] * min(pairs_per_anchor, n - len(anchors)))
    return anchors


def sample_noise(dataset: Sequence[Example], n: int, sigma: float, rng, pairs_per_anchor: int = 1) -> List[Triplet]:
    """高斯噪声三元组"""
    if sigma < 0:
        raise ConfigError(f"sigma 必须 >= 0: {sigma}")
    if n == 0:
        return []
    if len(dataset) < 2:
        raise SamplingError("噪声采样至少需要 2 个样本")
    _check_energy(dataset)
    lookup = build_lookup(dataset)
    triplets = []
    for a in _anchor_schedule(rng, len(dataset), n, pairs_per_anchor):
        neg = _draw_other(rng, len(dataset), a)
        triplets.append(_emit(dataset, lookup, TripletSource.NOISE, draw_seed(rng), a, a, neg, (sigma, 0, 0, 0)))
    return triplets


def sample_translation(dataset: Sequence[Example], n: int, S: int, rng, pairs_per_anchor: int = 1) -> List[Triplet]:
    """时间循环移位 + 频率截断平移三元组"""
    if n == 0:
        return []
    if len(dataset) < 2:
        raise SamplingError("平移采样至少需要 2 个样本")
    n_mels, n_frames = dataset[0].cells.shape
    if S < 0 or S >= n_mels:
        raise ConfigError(f"频率平移范围 S 必须在 [0, {n_mels - 1}]: {S}")
    _check_energy(dataset)
    lookup = build_lookup(dataset)
    triplets = []
    for a in _anchor_schedule(rng, len(dataset), n, pairs_per_anchor):
        time_shift = int(rng.integers(0, n_frames))
        freq_shift = int(rng.integers(-S, S + 1))
        neg = _draw_other(rng, len(dataset), a)
        triplets.append(_emit(dataset, lookup, TripletSource.TRANSLATION, draw_seed(rng), a, a, neg,
                              (time_shift, freq_shift, 0, 0)))
    return triplets


def sample_mixing(dataset: Sequence[Example], n: int, alpha: float, rng, pairs_per_anchor: int = 1) -> List[Triplet]:
    """样本混合三元组：正例由 anchor 与按能量缩放的 negative 相加得到"""
    if alpha <= 0:
        raise ConfigError(f"alpha 必须 > 0: {alpha}")
    if n == 0:
        return []
    if len(dataset) < 2:
        raise SamplingError("混合采样至少需要 2 个样本")
    _check_energy(dataset)
    energies = [energy_of(e.cells) for e in dataset]
    anchors = [i for i, energy in enumerate(energies) if energy > 0]
    if not anchors:
        raise SamplingError("没有非零能量的 anchor 窗口")
    lookup = build_lookup(dataset)
    triplets = []
    for a in _anchor_schedule(rng, len(dataset), n, pairs_per_anchor, candidates=anchors):
        for _ in range(MAX_MIXING_RETRIES):
            neg = _draw_other(rng, len(dataset), a)
            if energies[neg] > 0:
                break
        else:
            raise SamplingError(f"连续 {MAX_MIXING_RETRIES} 次抽到零能量 negative")
        triplets.append(_emit(dataset, lookup, TripletSource.MIXING, draw_seed(rng), a, a, neg, (alpha, 0, 0, 0)))
    return triplets


def sample_proximity(dataset: Sequence[Example], n: int, delta_t: float, rng) -> List[Triplet]:
    """时间邻近三元组：anchor/positive 同录音且起始时间差 < Δt，negative 来自其他录音"""
    if delta_t <= 0:
        raise ConfigError(f"delta_t 必须 > 0: {delta_t}")
    if n == 0:
        return []
    _check_energy(dataset)
    by_recording: Dict[int, List[int]] = {}
    for i, example in enumerate(dataset):
        by_recording.setdefault(example.recording_index, []).append(i)
    if len(by_recording) < 2:
        raise SamplingError("时间邻近采样至少需要 2 条录音")

    partners: Dict[int, Dict[int, List[int]]] = {}
    for rec, members in by_recording.items():
        rec_partners = {}
        for i in members:
            close = [j for j in members
                     if j != i and abs(dataset[i].start_time_s - dataset[j].start_time_s) < delta_t]
            if close:
                rec_partners[i] = close
        if rec_partners:
            partners[rec] = rec_partners
    if not partners:
        raise SamplingError(f"没有任何录音包含起始时间差 < {delta_t}s 的窗口对")

    qualifying = sorted(partners)
    lookup = build_lookup(dataset)
    triplets = []
    for _ in range(n):
        rec = qualifying[int(rng.integers(len(qualifying)))]
        anchors = sorted(partners[rec])
        a = anchors[int(rng.integers(len(anchors)))]
        close = partners[rec][a]
        p = close[int(rng.integers(len(close)))]
        # negative 从其他录音中均匀抽取
        while True:
            neg = int(rng.integers(len(dataset)))
            if dataset[neg].recording_index != rec:
                break
        triplets.append(_emit(dataset, lookup, TripletSource.PROXIMITY, draw_seed(rng), a, p, neg,
                              (delta_t, 0, 0, 0)))
    return triplets


def apportion(n: int, weights: Dict[str, float]) -> Dict[str, int]:
    """按权重分配数量（最大余数法），每项与精确比例相差不超过 1"""
    validate_weights(weights)
    names = [name for name in weights]
    total = float(sum(weights.values()))
    quotas = [n * weights[name] / total for name in names]
    counts = [int(np.floor(q)) for q in quotas]
    remainder = n - sum(counts)
    order = sorted(range(len(names)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return dict(zip(names, counts))


def sample_by_source(source: TripletSource, dataset, n, cfg: SamplerConfig, rng) -> List[Triplet]:
    if source == TripletSource.LABELED:
        return sample_labeled(dataset, n, rng)
    if source == TripletSource.NOISE:
        return sample_noise(dataset, n, cfg.sigma, rng, cfg.pairs_per_anchor)
    if source == TripletSource.TRANSLATION:
        return sample_translation(dataset, n, cfg.freq_shift, rng, cfg.pairs_per_anchor)
    if source == TripletSource.MIXING:
        return sample_mixing(dataset, n, cfg.alpha, rng, cfg.pairs_per_anchor)
    return sample_proximity(dataset, n, cfg.delta_t_s, rng)


def sample_joint(dataset: Sequence[Example], n: int, weights: Dict[str, float], rng,
                 cfg: Optional[SamplerConfig] = None) -> List[Triplet]:
    """联合采样：各来源按权重分配数量后合并并确定性打乱"""
    cfg = cfg or SamplerConfig(weights=weights)
    counts = apportion(n, weights)
    active = [name for name, count in counts.items() if weights[name] > 0]
    if len(active) == 1:
        return sample_by_source(TripletSource.from_name(active[0]), dataset, n, cfg, rng)

    triplets = []
    for source in TripletSource:
        name = source.config_name
        if counts.get(name, 0) == 0:
            continue
        sub_rng = np.random.default_rng(draw_seed(rng))
        triplets.extend(sample_by_source(source, dataset, counts[name], cfg, sub_rng))
    order = rng.permutation(len(triplets))
    logger.info(f"联合采样: {counts}")
    return [triplets[i] for i in order]


def sample_triplets(method: str, dataset: Sequence[Example], n: int, cfg: SamplerConfig, rng) -> List[Triplet]:
    """按方法名分派"""
    if method == 'joint':
        return sample_joint(dataset, n, cfg.weights, rng, cfg)
    return sample_by_source(TripletSource.from_name(method), dataset, n, cfg, rng)


# ---------------------------------------------------------------- 数据集

def build_examples(manifest, feature_dir, context_frames: int, split: Optional[str] = None,
                   labeled: bool = True) -> List[Example]:
    """读取特征分片，切窗并附上清单中的窗口标签"""
    feature_dir = Path(feature_dir)
    examples = []
    for entry in manifest.recordings:
        if split is not None and entry.split != split:
            continue
        cells, frame_hop_s = store.read_spectrogram(feature_dir / f"{entry.recording_id}.spec")
        spectrogram = EnergySpectrogram(cells=cells.astype(np.float64), frame_hop_s=frame_hop_s)
        windows = window_spectrogram(spectrogram, context_frames, entry.recording_id)
        for window in windows:
            labels = None
            if labeled and window.window_index < len(entry.window_labels):
                labels = entry.window_labels[window.window_index]
            window.labels = labels
            examples.append(Example(window, labels, entry.recording_id, window.start_time_s,
                                    entry.script.index, window.window_index))
    return examples
