"""
特征前端
波形 -> 梅尔能量谱 -> 稳定对数 -> 固定大小上下文窗口
"""

import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import librosa
import soundfile as sf
from scipy.signal import get_window

from errors import ConfigError, DataError, DomainMismatchError, InsufficientAudioError

logger = logging.getLogger(__name__)

ENERGY = 'energy'
LOG = 'log'


@dataclass
class Waveform:
    """单声道波形"""
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"波形必须是单声道一维数组，实际形状 {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"采样率必须为正: {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("波形包含非有限采样值")

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    """特征提取参数"""
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fft_size: Optional[int] = None
    mel_lo_hz: float = 125.0
    mel_hi_hz: float = 7500.0
    log_offset: float = 0.01
    context_frames: int = 96

    def __post_init__(self):
        if not (self.window_ms > self.hop_ms > 0):
            raise ConfigError(f"要求 window_ms > hop_ms > 0，实际 {self.window_ms}/{self.hop_ms}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels 必须 >= 1: {self.n_mels}")
        if self.mel_hi_hz > self.sample_rate / 2:
            raise ConfigError(f"mel_hi_hz 不能超过奈奎斯特频率: {self.mel_hi_hz}")
        if not (0 <= self.mel_lo_hz < self.mel_hi_hz):
            raise ConfigError(f"梅尔频率范围非法: [{self.mel_lo_hz}, {self.mel_hi_hz}]")
        if self.log_offset <= 0:
            raise ConfigError(f"log_offset 必须为正: {self.log_offset}")
        if self.context_frames < 1:
            raise ConfigError(f"context_frames 必须 >= 1: {self.context_frames}")
        if self.fft_size is None:
            self.fft_size = 1 << (self.window_samples - 1).bit_length()
        if self.fft_size < self.window_samples:
            raise ConfigError(f"fft_size {self.fft_size} 小于窗长 {self.window_samples}")

    @property
    def window_samples(self):
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self):
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def frame_hop_s(self):
        return self.hop_samples / self.sample_rate

    @classmethod
    def from_config(cls, config):
        """从 Config 的 feature 节构造"""
        return cls(**config.get('feature'))


@dataclass
class EnergySpectrogram:
    """梅尔能量谱，cells 形状 F × n_frames"""
    cells: np.ndarray
    frame_hop_s: float
    domain: str = ENERGY

    @property
    def n_mels(self):
        return self.cells.shape[0]

    @property
    def n_frames(self):
        return self.cells.shape[1]


@dataclass
class ContextWindow:
    """F × T 上下文窗口"""
    cells: np.ndarray
    start_time_s: float = 0.0
    recording_id: str = ''
    domain: str = ENERGY
    window_index: int = 0
    labels: Optional[frozenset] = field(default=None)


def mel_filterbank(cfg: FeatureConfig):
    """三角形梅尔滤波器组（峰值归一化，HTK 梅尔公式 2595·log10(1 + f/700)）"""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.fft_size,
        n_mels=cfg.n_mels,
        fmin=cfg.mel_lo_hz,
        fmax=cfg.mel_hi_hz,
        htk=True,
        norm=None,
    ).astype(np.float64)


def mel_center_frequencies(cfg: FeatureConfig):
    """各梅尔通道的中心频率（Hz）"""
    return librosa.mel_frequencies(cfg.n_mels + 2, fmin=cfg.mel_lo_hz, fmax=cfg.mel_hi_hz, htk=True)[1:-1]


def mel_spectrogram(w: Waveform, cfg: FeatureConfig) -> EnergySpectrogram:
    """计算梅尔能量谱

    帧数 = floor((len - window) / hop) + 1；能量为周期 Hann 窗 STFT 的幅度平方，再经三角梅尔滤波器聚合。
    """
    if w.sample_rate != cfg.sample_rate:
        w = resample_linear(w, cfg.sample_rate)
    win = cfg.window_samples
    hop = cfg.hop_samples
    if len(w.samples) < win:
        raise InsufficientAudioError(
            f"音频不足: {len(w.samples)} 个采样点，至少需要一个窗长 {win}"
        )

    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop]
    window = get_window('hann', win, fftbins=True)
    spectrum = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    cells = mel_filterbank(cfg) @ power.T
    # 浮点误差不应产生负能量
    np.maximum(cells, 0.0, out=cells)
    return EnergySpectrogram(cells=cells, frame_hop_s=cfg.frame_hop_s)


def stabilized_log(s, offset: float):
    """稳定对数 ln(cell + offset)，对 EnergySpectrogram 或 ContextWindow 均可用"""
    if offset <= 0:
        raise ConfigError(f"log_offset 必须为正: {offset}")
    if s.domain != ENERGY:
        raise DomainMismatchError("稳定对数只能作用于能量域输入")
    cells = np.log(s.cells + offset)
    if isinstance(s, ContextWindow):
        return ContextWindow(cells=cells, start_time_s=s.start_time_s, recording_id=s.recording_id,
                             domain=LOG, window_index=s.window_index, labels=s.labels)
    return EnergySpectrogram(cells=cells, frame_hop_s=s.frame_hop_s, domain=LOG)


def window_spectrogram(s: EnergySpectrogram, T: int, recording_id: str = '') -> List[ContextWindow]:
    """切分为互不重叠的 T 帧窗口，丢弃末尾不足 T 帧的部分"""
    if T < 1:
        raise ConfigError(f"T 必须 >= 1: {T}")
    count = s.n_frames // T
    return [
        ContextWindow(
            cells=s.cells[:, k * T:(k + 1) * T],
            start_time_s=k * T * s.frame_hop_s,
            recording_id=recording_id,
            domain=s.domain,
            window_index=k,
        )
        for k in range(count)
    ]


def total_energy(x) -> float:
    """窗口总能量 E(x)

    使用 math.fsum 做精确舍入求和，结果与元素顺序无关（时间循环移位严格守恒）。
    """
    if x.domain != ENERGY:
        raise DomainMismatchError("total_energy 只接受能量域窗口")
    return math.fsum(np.asarray(x.cells, dtype=np.float64).ravel().tolist())


def energy_of(cells: np.ndarray) -> float:
    """对裸能量矩阵求总能量"""
    return math.fsum(np.asarray(cells, dtype=np.float64).ravel().tolist())


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """线性插值重采样"""
    if w.sample_rate == target_rate:
        return w
    n_out = int(math.floor(len(w.samples) * target_rate / w.sample_rate))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(w.samples)) / w.sample_rate
    logger.info(f"重采样 {w.sample_rate} Hz -> {target_rate} Hz")
    return Waveform(np.interp(t_out, t_in, w.samples), target_rate)


def load_wav(path, target_rate: int = 16000) -> Waveform:
    """读取 WAV 文件，多声道取均值并重采样到目标采样率"""
    samples, rate = sf.read(str(path), dtype='float64', always_2d=True)
    mono = samples.mean(axis=1)
    return resample_linear(Waveform(mono, int(rate)), target_rate)


def write_wav(path, w: Waveform):
    """写出 16-bit PCM 单声道 WAV"""
    peak = float(np.max(np.abs(w.samples))) if len(w.samples) else 0.0
    if peak > 1.0:
        raise DataError(f"波形幅度超出 [-1, 1]: 峰值 {peak:.3f}")
    sf.write(str(path), w.samples, w.sample_rate, subtype='PCM_16', format='WAV')


def featurize_recording(path, cfg: FeatureConfig) -> EnergySpectrogram:
    """读取一条录音并计算能量谱"""
    return mel_spectrogram(load_wav(path, cfg.sample_rate), cfg)
