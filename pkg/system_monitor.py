"""
系统监控器
按配置估算语料、特征与训练批次的资源占用，核对磁盘、内存、写入权限并决定工作线程数
"""

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import psutil

from nn import EmbeddingNet, ModelSpec
from utils import format_file_size, Colors, get_current_timestamp

logger = logging.getLogger(__name__)

WAV_SAMPLE_BYTES = 2  # PCM_16
SPEC_CELL_BYTES = 4   # TFSPEC1 以 f32 存储


@dataclass
class Footprint:
    """一次完整流水线的资源估算（字节）"""
    corpus_bytes: int = 0
    feature_bytes: int = 0
    batch_bytes: int = 0
    n_parameters: int = 0

    @property
    def disk_bytes(self):
        return self.corpus_bytes + self.feature_bytes

    @classmethod
    def from_config(cls, config):
        n_recordings = int(config.get('corpus.n_recordings'))
        duration_s = float(config.get('corpus.duration_s'))
        samples = int(duration_s * config.get('feature.sample_rate'))
        frames = int(duration_s * 1000.0 / config.get('feature.hop_ms'))

        net = EmbeddingNet.from_spec(ModelSpec.from_config(config))
        shape = (1,) + net.spec.input_shape
        activations = 0
        for layer in net.network.layers:
            shape = layer.output_shape(shape)
            activations += int(np.prod(shape))
        params = net.parameters()
        n_parameters = sum(v.size for v in params.values())
        itemsize = net.dtype.itemsize
        # 每个三元组 3 个输入；激活与其梯度各一份，参数另有梯度与两份 Adam 矩
        batch = int(config.get('training.batch_size'))
        batch_bytes = 3 * batch * activations * itemsize * 2 + n_parameters * itemsize * 4

        return cls(
            corpus_bytes=n_recordings * samples * WAV_SAMPLE_BYTES,
            feature_bytes=n_recordings * int(config.get('feature.n_mels')) * frames * SPEC_CELL_BYTES,
            batch_bytes=batch_bytes,
            n_parameters=n_parameters,
        )


class SystemMonitor:
    """系统状态监控器"""

    def __init__(self, disk_space_threshold_mb=256):
        self.min_free_space = disk_space_threshold_mb * 1024 * 1024
        self.warning_threshold = 0.9  # 磁盘使用率警告阈值90%

    def resolve_threads(self, requested):
        """线程数不超过逻辑 CPU 数"""
        available = psutil.cpu_count(logical=True) or 1
        if requested > available:
            logger.warning(f"请求 {requested} 个线程，超过 CPU 数 {available}，改用 {available}")
            return available
        return requested

    def check_disk_space(self, path, required_size=0):
        """工作目录所在磁盘是否放得下产物，并保留最小剩余空间"""
        try:
            path = Path(path)
            path.mkdir(parents=True, exist_ok=True)
            usage = shutil.disk_usage(path)
        except OSError as e:
            return {'error': str(e), 'sufficient_space': False, 'critical': True}

        used = usage.used / usage.total
        return {
            'free_formatted': format_file_size(usage.free),
            'total_formatted': format_file_size(usage.total),
            'required_formatted': format_file_size(required_size),
            'usage_percent_formatted': f"{used * 100:.1f}%",
            'sufficient_space': usage.free - required_size >= self.min_free_space,
            'warning': used >= self.warning_threshold,
            'critical': usage.free < self.min_free_space,
        }

    def check_memory(self, required_size=0):
        """可用内存是否容纳一个训练批次"""
        memory = psutil.virtual_memory()
        return {
            'available_formatted': format_file_size(memory.available),
            'total_formatted': format_file_size(memory.total),
            'required_formatted': format_file_size(required_size),
            'percent': memory.percent,
            'sufficient': memory.available >= required_size,
        }

    def check_write_permission(self, path):
        """检查写入权限"""
        marker = Path(path) / '.write_test'
        try:
            marker.parent.mkdir(parents=True, exist_ok=True)
            marker.write_text('test')
            marker.unlink()
        except OSError as e:
            return {'writable': False, 'error': str(e)}
        return {'writable': True}

    def comprehensive_check(self, work_dir, threads=1, footprint=None):
        """全面系统检查；footprint 为 None 时只核对最小剩余空间"""
        footprint = footprint or Footprint()
        disk = self.check_disk_space(work_dir, footprint.disk_bytes)
        memory = self.check_memory(footprint.batch_bytes)
        permission = self.check_write_permission(work_dir)

        if disk.get('critical') or not disk.get('sufficient_space'):
            status = 'critical'
        elif not permission['writable'] or not memory['sufficient']:
            status = 'error'
        elif disk.get('warning') or memory['percent'] > 80:
            status = 'warning'
        else:
            status = 'ok'
        return {
            'timestamp': get_current_timestamp(),
            'work_dir': str(work_dir),
            'footprint': footprint,
            'disk_space': disk,
            'memory': memory,
            'write_permission': permission,
            'cpu_count': psutil.cpu_count(logical=True),
            'threads': self.resolve_threads(threads),
            'overall_status': status,
        }

    def print_system_status(self, check_result):
        """打印系统状态"""
        print(f"\n{Colors.BOLD}=== 系统状态检查 ==={Colors.NC}")
        print(f"工作目录: {check_result['work_dir']}")

        footprint = check_result['footprint']
        if footprint.disk_bytes:
            print(f"● 预计产物: 语料 {format_file_size(footprint.corpus_bytes)}, "
                  f"特征 {format_file_size(footprint.feature_bytes)}")
            print(f"● 网络参数: {footprint.n_parameters:,} 个, "
                  f"训练批次约 {format_file_size(footprint.batch_bytes)}")

        disk = check_result['disk_space']
        if 'error' in disk:
            print(f"{Colors.RED}✗ 磁盘检查失败: {disk['error']}{Colors.NC}")
        else:
            color = Colors.RED if not disk['sufficient_space'] else Colors.YELLOW if disk['warning'] else Colors.GREEN
            print(f"{color}● 磁盘空间: {disk['free_formatted']} 可用 / {disk['total_formatted']} 总计 "
                  f"({disk['usage_percent_formatted']} 已使用)，需要 {disk['required_formatted']}{Colors.NC}")

        memory = check_result['memory']
        color = Colors.RED if not memory['sufficient'] else Colors.YELLOW if memory['percent'] > 80 else Colors.GREEN
        print(f"{color}● 内存: {memory['available_formatted']} 可用 / {memory['total_formatted']} 总计，"
              f"需要 {memory['required_formatted']}{Colors.NC}")

        if check_result['write_permission']['writable']:
            print(f"{Colors.GREEN}✓ 写入权限: 正常{Colors.NC}")
        else:
            print(f"{Colors.RED}✗ 写入权限: 失败 - {check_result['write_permission']['error']}{Colors.NC}")
        print(f"● CPU: {check_result['cpu_count']} 核, 工作线程 {check_result['threads']}")

        overall = check_result['overall_status']
        status_colors = {'ok': Colors.GREEN, 'warning': Colors.YELLOW, 'error': Colors.RED, 'critical': Colors.RED}
        print(f"\n{status_colors.get(overall, Colors.GRAY)}总体状态: {overall.upper()}{Colors.NC}")
        return overall == 'ok'
