#!/usr/bin/env python3
"""
配置管理模块
"""

import os
import copy
import json
from pathlib import Path
from typing import Dict, Optional

from errors import ConfigError

THREADS_ENV = 'TRIPLET_FORGE_THREADS'

SOURCE_NAMES = ('labeled', 'noise', 'translation', 'mixing', 'proximity')
SWEEP_PARAMS = ('sigma', 'freq-shift', 'alpha', 'delta-t')

# 值为自由映射的配置节，键集合单独校验
FREE_FORM_KEYS = {
    'sampler.weights': SOURCE_NAMES,
    'training.source_loss_weights': SOURCE_NAMES,
    'eval.sweep': SWEEP_PARAMS,
}


def default_layers():
    """桌面规模默认网络结构"""
    return [
        {"type": "conv2d", "kernel": 3, "channels": 16, "stride": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2, "stride": 2},
        {"type": "conv2d", "kernel": 3, "channels": 32, "stride": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2, "stride": 2},
        {"type": "conv2d", "kernel": 3, "channels": 64, "stride": 1},
        {"type": "relu"},
        {"type": "global_avg_pool"},
    ]


class Config:
    """配置管理类"""

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict] = None):
        self.config_file = Path(config_file) if config_file else None
        self.config = self.load_config()
        if overrides:
            self.merge(overrides)

    def load_config(self) -> Dict:
        """加载配置文件并与默认配置合并"""
        config = self.get_default_config()
        if self.config_file is None:
            return config
        if not self.config_file.exists():
            raise ConfigError(f"配置文件不存在: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"无法解析配置文件 {self.config_file}: {e}")
        _deep_merge(config, user_config, config, prefix='')
        return config

    def merge(self, overrides: Dict):
        """合并一份部分配置（实验配方使用）"""
        _deep_merge(self.config, overrides, self.get_default_config(), prefix='')

    def get_default_config(self) -> Dict:
        """获取默认配置"""
        return {
            "seed": 0,
            "paths": {
                "work_dir": "./work",
                "metadata_dir": "./metadata",
                "logs_dir": "./logs"
            },
            "system": {
                "threads": 1,
                "disk_space_threshold": 256  # MB
            },
            "feature": {
                "sample_rate": 16000,
                "window_ms": 25.0,
                "hop_ms": 10.0,
                "n_mels": 64,
                "fft_size": None,  # None: 不小于窗长的最小 2 的幂
                "mel_lo_hz": 125.0,
                "mel_hi_hz": 7500.0,
                "log_offset": 0.01,
                "context_frames": 96
            },
            "corpus": {
                "n_classes": 8,
                "n_recordings": 200,
                "duration_s": 10.0,
                "pool_size_min": 2,
                "pool_size_max": 3,
                "affinity": None,  # None: 环形亲和图
                "events_min": 3,
                "events_max": 6,
                "event_duration_min_s": 1.0,
                "event_duration_max_s": 3.0,
                "snr_db_min": 15.0,
                "snr_db_max": 30.0,
                "label_min_overlap": 0.5,
                "split_ratios": [0.8, 0.1, 0.1],
                "min_segments": 2
            },
            "sampler": {
                "method": "joint",
                "n_triplets": 4000,
                "sigma": 0.5,
                "freq_shift": 10,
                "alpha": 0.25,
                "delta_t_s": 10.0,
                "pairs_per_anchor": 1,
                "weights": {
                    "noise": 1.0,
                    "translation": 1.0,
                    "mixing": 1.0,
                    "proximity": 1.0
                }
            },
            "model": {
                "embedding_dim": 128,
                "layers": default_layers()
            },
            "training": {
                "margin": 0.1,
                "mining": "auto",  # auto: 按三元组来源决定
                "batch_size": 64,
                "steps": 200,
                "learning_rate": None,  # None: 按挖掘策略取 lr_mining / lr_no_mining
                "lr_mining": 1e-4,
                "lr_no_mining": 1e-6,
                "beta1": 0.9,
                "beta2": 0.999,
                "eps": 1e-8,
                "candidate_pool": "negatives",
                "source_loss_weights": {},
                "log_every": 20
            },
            "eval": {
                "qbe_per_class": 100,
                "classifier": {
                    "hidden_layers": 1,
                    "width": 512,
                    "learning_rate": 1e-3,
                    "batch_size": 32,
                    "max_epochs": 30,
                    "patience": 5
                },
                "light_supervision": {
                    "per_class": 20,
                    "trials": 3
                },
                "sweep": {
                    "sigma": [0.1, 0.25, 0.5, 1.0],
                    "freq-shift": [0, 2, 5, 10],
                    "alpha": [0.1, 0.25, 0.5, 1.0],
                    "delta-t": [0.97, 2.0, 5.0, 10.0]
                }
            }
        }

    def save_config(self, path=None):
        """保存解析后的完整配置"""
        target = Path(path) if path else self.config_file
        if target is None:
            raise ConfigError("未指定配置保存路径")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(self.config, f, indent=2, ensure_ascii=False, sort_keys=True)
        return target

    def get(self, key: str, default=None):
        """获取配置值，支持点号路径"""
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def set(self, key: str, value):
        """设置配置值，支持点号路径；未知键直接拒绝"""
        keys = key.split('.')
        config = self.config

        for k in keys[:-1]:
            if not isinstance(config, dict) or k not in config:
                raise ConfigError(f"未知配置键: {key}")
            config = config[k]

        parent = '.'.join(keys[:-1])
        if parent in FREE_FORM_KEYS:
            if keys[-1] not in FREE_FORM_KEYS[parent]:
                raise ConfigError(f"未知配置键: {key}")
        elif keys[-1] not in config:
            raise ConfigError(f"未知配置键: {key}")

        config[keys[-1]] = value

    def set_from_string(self, assignment: str):
        """解析 key=value 形式的命令行覆盖，值按 JSON 解析，失败则视为字符串"""
        if '=' not in assignment:
            raise ConfigError(f"覆盖项格式应为 key=value: {assignment}")
        key, raw = assignment.split('=', 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(key.strip(), value)

    def get_threads(self) -> int:
        """获取线程数，环境变量优先于配置文件"""
        env_value = os.environ.get(THREADS_ENV)
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} 必须是整数: {env_value}")
        else:
            threads = int(self.get('system.threads', 1))
        if threads < 1:
            raise ConfigError(f"线程数必须 >= 1: {threads}")
        return threads

    def get_work_dir(self):
        """获取工作目录"""
        return Path(self.get('paths.work_dir', './work'))

    def get_metadata_dir(self):
        """获取元数据目录"""
        return Path(self.get('paths.metadata_dir', './metadata'))

    def get_logs_dir(self):
        """获取日志目录"""
        return Path(self.get('paths.logs_dir', './logs'))


def _deep_merge(target: Dict, source: Dict, schema: Dict, prefix: str):
    """把 source 合并进 target，schema 中不存在的键视为错误"""
    if not isinstance(source, dict):
        raise ConfigError(f"配置节 {prefix or '<root>'} 必须是对象")
    for key, value in source.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if prefix in FREE_FORM_KEYS:
            if key not in FREE_FORM_KEYS[prefix]:
                raise ConfigError(f"未知配置键: {dotted}")
            target[key] = value
            continue
        if key not in schema:
            raise ConfigError(f"未知配置键: {dotted}")
        if dotted in FREE_FORM_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"配置节 {dotted} 必须是对象")
            # 自由映射整体替换
            target[key] = {}
            _deep_merge(target[key], value, {}, prefix=dotted)
        elif isinstance(schema[key], dict) and schema[key]:
            _deep_merge(target[key], value, schema[key], prefix=dotted)
        else:
            target[key] = copy.deepcopy(value)


# 全局配置实例
_config = None


def get_config():
    """获取全局配置实例"""
    global _config
    if _config is None:
        _config = Config()
    return _config


def set_config(config_instance):
    """替换全局配置实例（main.py 在解析参数后调用）"""
    global _config
    _config = config_instance
    return _config
