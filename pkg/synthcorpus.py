"""
合成声音事件语料
确定性地生成带标注的录音集合，代替大规模真实数据集
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

import store
from errors import ConfigError, CorpusError
from frontend import FeatureConfig, Waveform, write_wav
from utils import make_rng

logger = logging.getLogger(__name__)

FAMILIES = ('tone', 'chirp-up', 'chirp-down', 'harmonic-stack', 'am-noise-burst', 'click-train')
SPLITS = ('train', 'dev', 'eval')

RAMP_S = 0.01
JITTER = 0.05
GAIN_DB_RANGE = (-6.0, 0.0)
# 切分使用的随机流键，与录音索引空间分开
SPLIT_STREAM_KEY = 2 ** 31


@dataclass(frozen=True)
class EventClass:
    """事件类别：族 + 参数"""
    class_id: int
    family: str
    parameters: Tuple[Tuple[str, float], ...]

    def param(self, name):
        return dict(self.parameters)[name]

    def to_dict(self):
        return {'class_id': self.class_id, 'family': self.family, 'parameters': dict(self.parameters)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['class_id']), data['family'], tuple(sorted(data['parameters'].items())))


@dataclass(frozen=True)
class EventSpec:
    class_id: int
    onset_s: float
    duration_s: float
    gain: float


@dataclass
class RecordingScript:
    """一条录音的生成脚本"""
    recording_id: str
    index: int
    duration_s: float
    events: List[EventSpec]
    background_snr_db: float
    class_pool: List[int]


@dataclass
class RecordingEntry:
    script: RecordingScript
    path: str
    split: Optional[str] = None
    window_labels: List[frozenset] = field(default_factory=list)

    @property
    def recording_id(self):
        return self.script.recording_id

    @property
    def segment_labels(self):
        """片段标签：所有窗口标签的并集"""
        labels = set()
        for window in self.window_labels:
            labels |= window
        return frozenset(labels)


@dataclass
class CorpusConfig:
    """语料生成参数"""
    n_classes: int = 8
    n_recordings: int = 200
    duration_s: float = 10.0
    pool_size_min: int = 2
    pool_size_max: int = 3
    affinity: Optional[List[List[int]]] = None
    events_min: int = 3
    events_max: int = 6
    event_duration_min_s: float = 1.0
    event_duration_max_s: float = 3.0
    snr_db_min: float = 15.0
    snr_db_max: float = 30.0
    label_min_overlap: float = 0.5
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1)
    min_segments: int = 2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"类别数 K 必须 >= 2: {self.n_classes}")
        if self.n_recordings < 10:
            raise ConfigError(f"录音数必须 >= 10: {self.n_recordings}")
        if not (1 <= self.pool_size_min <= self.pool_size_max):
            raise ConfigError("类别池大小范围非法")
        if not (1 <= self.events_min <= self.events_max):
            raise ConfigError("事件数范围非法")
        if not (0 < self.event_duration_min_s <= self.event_duration_max_s):
            raise ConfigError("事件时长范围非法")
        if self.snr_db_min > self.snr_db_max:
            raise ConfigError("信噪比范围非法")
        if not (0 < self.label_min_overlap <= 1):
            raise ConfigError(f"label_min_overlap 必须在 (0, 1]: {self.label_min_overlap}")
        if self.affinity is not None:
            for edge in self.affinity:
                if len(edge) != 2 or not all(0 <= c < self.n_classes for c in edge):
                    raise ConfigError(f"亲和图边非法: {edge}")

    @classmethod
    def from_config(cls, config):
        section = dict(config.get('corpus'))
        section['split_ratios'] = tuple(section['split_ratios'])
        return cls(**section)

    def to_dict(self):
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data['split_ratios'] = list(self.split_ratios)
        return data


@dataclass
class CorpusManifest:
    """语料清单"""
    classes: List[EventClass]
    recordings: List[RecordingEntry]
    seed: int
    window_s: float
    corpus_config: Dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.classes)

    def by_split(self, split):
        return [r for r in self.recordings if r.split == split]

    def recording(self, recording_id):
        for entry in self.recordings:
            if entry.recording_id == recording_id:
                return entry
        raise KeyError(recording_id)


def build_classes(n_classes: int) -> List[EventClass]:
    """按族轮转构造类别，同族不同变体参数错开"""
    classes = []
    for class_id in range(n_classes):
        family = FAMILIES[class_id % len(FAMILIES)]
        v = class_id // len(FAMILIES)
        if family == 'tone':
            params = {'f0': 500.0 + 700.0 * v}
        elif family == 'chirp-up':
            params = {'f0': 300.0 + 400.0 * v, 'sweep_hz_per_s': 800.0}
        elif family == 'chirp-down':
            params = {'f0': 3500.0 + 500.0 * v, 'sweep_hz_per_s': -800.0}
        elif family == 'harmonic-stack':
            params = {'f0': 220.0 + 110.0 * v, 'n_harmonics': 6.0}
        elif family == 'am-noise-burst':
            params = {'center_hz': 2500.0 + 1000.0 * v, 'bandwidth_hz': 800.0, 'mod_hz': 8.0}
        else:
            params = {'click_rate_hz': 12.0 + 8.0 * v}
        classes.append(EventClass(class_id, family, tuple(sorted(params.items()))))
    return classes


def affinity_neighbors(cfg: CorpusConfig) -> Dict[int, List[int]]:
    """类别亲和图的邻接表，默认环形"""
    edges = cfg.affinity
    if edges is None:
        edges = [[k, (k + 1) % cfg.n_classes] for k in range(cfg.n_classes)]
    neighbors = {k: set() for k in range(cfg.n_classes)}
    for a, b in edges:
        if a != b:
            neighbors[a].add(b)
            neighbors[b].add(a)
    return {k: sorted(v) for k, v in neighbors.items()}


def draw_class_pool(cfg: CorpusConfig, neighbors, rng) -> List[int]:
    """沿亲和图游走抽取本录音的类别池"""
    size = int(rng.integers(cfg.pool_size_min, cfg.pool_size_max + 1))
    size = min(size, cfg.n_classes)
    pool = [int(rng.integers(cfg.n_classes))]
    while len(pool) < size:
        frontier = sorted({n for c in pool for n in neighbors[c]} - set(pool))
        if not frontier:
            frontier = sorted(set(range(cfg.n_classes)) - set(pool))
        pool.append(int(frontier[rng.integers(len(frontier))]))
    return sorted(pool)


def make_script(cfg: CorpusConfig, seed: int, index: int, neighbors) -> RecordingScript:
    """生成一条录音的脚本"""
    rng = make_rng(seed, index, 0)
    pool = draw_class_pool(cfg, neighbors, rng)
    n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    events = []
    for _ in range(n_events):
        class_id = int(pool[rng.integers(len(pool))])
        max_dur = min(cfg.event_duration_max_s, cfg.duration_s)
        duration = float(rng.uniform(min(cfg.event_duration_min_s, max_dur), max_dur))
        onset = float(rng.uniform(0.0, cfg.duration_s - duration))
        gain = float(10.0 ** (rng.uniform(*GAIN_DB_RANGE) / 20.0))
        events.append(EventSpec(class_id, round(onset, 6), round(duration, 6), round(gain, 6)))
    events.sort(key=lambda e: (e.onset_s, e.class_id))
    snr = round(float(rng.uniform(cfg.snr_db_min, cfg.snr_db_max)), 6)
    return RecordingScript(f"rec_{index:05d}", index, cfg.duration_s, events, snr, pool)


def render_event(event_class: EventClass, duration_s: float, sample_rate: int, rng) -> np.ndarray:
    """合成单个事件（单位 RMS，带 10 ms 渐入渐出）"""
    n = max(int(round(duration_s * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    jitter = 1.0 + rng.uniform(-JITTER, JITTER)
    family = event_class.family
    phase = rng.uniform(0, 2 * np.pi)

    if family == 'tone':
        x = np.sin(2 * np.pi * event_class.param('f0') * jitter * t + phase)
    elif family in ('chirp-up', 'chirp-down'):
        f0 = event_class.param('f0') * jitter
        rate = event_class.param('sweep_hz_per_s') * jitter
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * rate * t ** 2) + phase)
    elif family == 'harmonic-stack':
        f0 = event_class.param('f0') * jitter
        x = np.zeros(n)
        for h in range(1, int(event_class.param('n_harmonics')) + 1):
            x += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    elif family == 'am-noise-burst':
        center = event_class.param('center_hz') * jitter
        half_bw = event_class.param('bandwidth_hz') / 2
        nyquist = sample_rate / 2
        band = [max(center - half_bw, 20.0), min(center + half_bw, nyquist * 0.95)]
        sos = signal.butter(4, band, btype='bandpass', fs=sample_rate, output='sos')
        carrier = signal.sosfilt(sos, rng.standard_normal(n))
        x = carrier * 0.5 * (1 + np.cos(2 * np.pi * event_class.param('mod_hz') * jitter * t + phase))
    elif family == 'click-train':
        period = max(int(round(sample_rate / (event_class.param('click_rate_hz') * jitter))), 1)
        click_len = int(0.005 * sample_rate)
        click = np.exp(-np.arange(click_len) / (0.001 * sample_rate)) * rng.standard_normal(click_len)
        x = np.zeros(n)
        for start in range(int(rng.integers(period)), n, period):
            stop = min(start + click_len, n)
            x[start:stop] += click[:stop - start]
    else:
        raise ConfigError(f"未知事件族: {family}")

    rms = math.sqrt(float(np.mean(x ** 2)))
    if rms > 0:
        x = x / rms
    ramp = min(int(RAMP_S * sample_rate), n // 2)
    if ramp > 0:
        envelope = np.ones(n)
        envelope[:ramp] = np.linspace(0, 1, ramp, endpoint=False)
        envelope[n - ramp:] = np.linspace(1, 0, ramp)
        x = x * envelope
    return x


def synthesize(script: RecordingScript, classes: List[EventClass], seed: int, sample_rate: int) -> Waveform:
    """按脚本合成波形：事件叠加 + 指定信噪比的白噪声背景"""
    n = int(round(script.duration_s * sample_rate))
    mix = np.zeros(n)
    for event_index, event in enumerate(script.events):
        rng = make_rng(seed, script.index, event_index + 1)
        x = render_event(classes[event.class_id], event.duration_s, sample_rate, rng) * event.gain
        start = int(round(event.onset_s * sample_rate))
        stop = min(start + len(x), n)
        mix[start:stop] += x[:stop - start]

    signal_power = float(np.mean(mix ** 2))
    if signal_power <= 0:
        signal_power = 1e-2
    noise_rng = make_rng(seed, script.index, 0, 1)
    noise_std = math.sqrt(signal_power / 10.0 ** (script.background_snr_db / 10.0))
    mix = mix + noise_rng.standard_normal(n) * noise_std

    peak = float(np.max(np.abs(mix)))
    if peak > 0:
        mix = mix * (0.9 / peak)
    return Waveform(mix, sample_rate)


def count_windows(duration_s: float, feature_cfg: FeatureConfig) -> int:
    """一条录音可切出的上下文窗口数"""
    n_samples = int(round(duration_s * feature_cfg.sample_rate))
    if n_samples < feature_cfg.window_samples:
        return 0
    n_frames = (n_samples - feature_cfg.window_samples) // feature_cfg.hop_samples + 1
    return n_frames // feature_cfg.context_frames


def window_labels(script: RecordingScript, n_windows: int, window_s: float, min_overlap: float) -> List[frozenset]:
    """窗口标签：与窗口重叠不少于 min_overlap·window_s 的事件类别"""
    labels = []
    for k in range(n_windows):
        start = k * window_s
        stop = start + window_s
        present = set()
        for event in script.events:
            overlap = min(stop, event.onset_s + event.duration_s) - max(start, event.onset_s)
            if overlap >= min_overlap * window_s - 1e-9:
                present.add(event.class_id)
        labels.append(frozenset(present))
    return labels


def generate_corpus(cfg: CorpusConfig, seed: int, out_dir, feature_cfg: Optional[FeatureConfig] = None,
                    threads: int = 1) -> CorpusManifest:
    """生成语料：脚本、波形文件、窗口标签、数据集划分"""
    feature_cfg = feature_cfg or FeatureConfig()
    window_s = feature_cfg.context_frames * feature_cfg.frame_hop_s
    n_windows = count_windows(cfg.duration_s, feature_cfg)
    if n_windows < 2:
        raise ConfigError(f"录音时长 {cfg.duration_s}s 不足两个上下文窗口")

    out_dir = Path(out_dir)
    audio_dir = out_dir / 'audio'
    audio_dir.mkdir(parents=True, exist_ok=True)
    classes = build_classes(cfg.n_classes)
    neighbors = affinity_neighbors(cfg)

    def build(index):
        script = make_script(cfg, seed, index, neighbors)
        wav_path = audio_dir / f"{script.recording_id}.wav"
        write_wav(wav_path, synthesize(script, classes, seed, feature_cfg.sample_rate))
        labels = window_labels(script, n_windows, window_s, cfg.label_min_overlap)
        return RecordingEntry(script, str(wav_path.relative_to(out_dir)), None, labels)

    logger.info(f"生成 {cfg.n_recordings} 条录音 (K={cfg.n_classes}, seed={seed}, threads={threads})")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        recordings = list(pool.map(build, range(cfg.n_recordings)))

    manifest = CorpusManifest(classes, recordings, seed, window_s, cfg.to_dict())
    manifest = split_corpus(manifest, cfg.split_ratios, seed)
    check_min_segments(manifest, cfg.min_segments)
    save_manifest(manifest, out_dir)
    return manifest


def split_corpus(m: CorpusManifest, ratios, seed: int) -> CorpusManifest:
    """按录音划分 train/dev/eval"""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"划分比例必须为三个正数且和为 1: {ratios}")
    n = len(m.recordings)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    counts = (n_train, n_dev, n - n_train - n_dev)
    for split, count in zip(SPLITS, counts):
        if count <= 0:
            raise CorpusError(f"划分 {split} 分不到任何录音 (比例 {ratios}, 录音数 {n})")

    order = make_rng(seed, SPLIT_STREAM_KEY).permutation(n)
    assignment = {}
    bounds = np.cumsum((0,) + counts)
    for s, split in enumerate(SPLITS):
        for position in order[bounds[s]:bounds[s + 1]]:
            assignment[int(position)] = split
    recordings = [replace(entry, split=assignment[i]) for i, entry in enumerate(m.recordings)]
    return replace(m, recordings=recordings)


def check_min_segments(m: CorpusManifest, min_segments: int):
    """每个类别在每个划分中至少有 min_segments 个带标签窗口"""
    for split in SPLITS:
        counts = np.zeros(m.n_classes, dtype=int)
        for entry in m.by_split(split):
            for labels in entry.window_labels:
                for c in labels:
                    counts[c] += 1
        for c in range(m.n_classes):
            if counts[c] < min_segments:
                raise CorpusError(
                    f"类别 {c} ({m.classes[c].family}) 在 {split} 划分中只有 {counts[c]} 个窗口，"
                    f"少于 min_segments={min_segments}"
                )


def proximity_statistic(m: CorpusManifest) -> Tuple[float, float]:
    """同录音窗口对与跨录音窗口对共享类别的经验概率"""
    rows, owners = [], []
    for r, entry in enumerate(m.recordings):
        for labels in entry.window_labels:
            row = np.zeros(m.n_classes, dtype=np.float64)
            row[list(labels)] = 1.0
            rows.append(row)
            owners.append(r)
    labels = np.array(rows)
    owners = np.array(owners)
    share = (labels @ labels.T) > 0
    same = owners[:, None] == owners[None, :]
    off_diag = ~np.eye(len(owners), dtype=bool)
    within = share[same & off_diag]
    across = share[~same]
    p_within = float(within.mean()) if within.size else 0.0
    p_across = float(across.mean()) if across.size else 0.0
    return p_within, p_across


def manifest_to_records(m: CorpusManifest):
    """清单 -> (头信息, 每条录音一行的记录)"""
    header = {
        'seed': m.seed,
        'window_s': m.window_s,
        'classes': [c.to_dict() for c in m.classes],
        'corpus_config': m.corpus_config,
    }
    records = []
    for entry in m.recordings:
        s = entry.script
        records.append({
            'id': s.recording_id,
            'index': s.index,
            'path': entry.path,
            'duration': s.duration_s,
            'events': [
                {'class_id': e.class_id, 'onset_s': e.onset_s, 'duration_s': e.duration_s, 'gain': e.gain}
                for e in s.events
            ],
            'background_snr_db': s.background_snr_db,
            'class_pool': list(s.class_pool),
            'split': entry.split,
            'window_labels': [sorted(labels) for labels in entry.window_labels],
        })
    return header, records


def manifest_from_records(header, records) -> CorpusManifest:
    classes = [EventClass.from_dict(c) for c in header['classes']]
    recordings = []
    for rec in records:
        events = [EventSpec(int(e['class_id']), e['onset_s'], e['duration_s'], e['gain']) for e in rec['events']]
        script = RecordingScript(rec['id'], int(rec['index']), rec['duration'], events,
                                 rec['background_snr_db'], list(rec['class_pool']))
        labels = [frozenset(int(c) for c in w) for w in rec['window_labels']]
        recordings.append(RecordingEntry(script, rec['path'], rec['split'], labels))
    return CorpusManifest(classes, recordings, int(header['seed']), float(header['window_s']),
                          header.get('corpus_config', {}))


def save_manifest(m: CorpusManifest, out_dir):
    """写出 manifest.jsonl 与 corpus.json"""
    header, records = manifest_to_records(m)
    store.write_manifest(Path(out_dir), header, records)


def load_manifest(corpus_dir) -> CorpusManifest:
    header, records = store.read_manifest(Path(corpus_dir))
    return manifest_from_records(header, records)
