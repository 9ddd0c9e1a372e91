"""
测试公共夹具
"""

import os

import numpy as np
import pytest

from config import Config
from frontend import ContextWindow, ENERGY
from sampler import Example


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 完整对比实验，设置 TRIPLET_FORGE_SLOW=1 时运行')


def pytest_collection_modifyitems(config, items):
    if os.environ.get('TRIPLET_FORGE_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason='设置 TRIPLET_FORGE_SLOW=1 运行慢速实验')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


TINY_LAYERS = [
    {"type": "conv2d", "kernel": 3, "channels": 4, "stride": 1},
    {"type": "relu"},
    {"type": "maxpool", "kernel": 4, "stride": 4},
    {"type": "global_avg_pool"},
]


@pytest.fixture
def tiny_config(tmp_path):
    """小语料、小网络的配置，产物写入临时目录"""
    config = Config()
    config.merge({
        "seed": 3,
        "paths": {
            "work_dir": str(tmp_path / 'work'),
            "metadata_dir": str(tmp_path / 'metadata'),
            "logs_dir": str(tmp_path / 'logs'),
        },
        "corpus": {
            "n_classes": 3,
            "n_recordings": 60,
            "duration_s": 4.0,
            "pool_size_min": 1,
            "pool_size_max": 2,
            "events_min": 4,
            "events_max": 6,
            "event_duration_min_s": 1.0,
            "event_duration_max_s": 2.0,
            "split_ratios": [0.6, 0.2, 0.2],
            "min_segments": 1,
        },
        "sampler": {"n_triplets": 64},
        "model": {"embedding_dim": 8, "layers": TINY_LAYERS},
        "training": {"batch_size": 8, "steps": 3, "log_every": 0},
        "eval": {
            "qbe_per_class": 5,
            "classifier": {"width": 16, "max_epochs": 3, "patience": 2},
            "light_supervision": {"per_class": 2, "trials": 2},
        },
    })
    return config


def make_examples(n_examples=12, n_recordings=4, shape=(64, 96), seed=0, labels=None, zero_rows=()):
    """随机能量域样本，按录音轮流分配，窗口起始时间按 0.96 s 递增"""
    rng = np.random.default_rng(seed)
    examples = []
    counters = {}
    for i in range(n_examples):
        rec = i % n_recordings
        k = counters.get(rec, 0)
        counters[rec] = k + 1
        cells = rng.gamma(2.0, 1.0, size=shape)
        if i in zero_rows:
            cells = np.zeros(shape)
        window_labels = None if labels is None else frozenset(labels[i])
        window = ContextWindow(cells, k * 0.96, f"rec_{rec:05d}", ENERGY, k, window_labels)
        examples.append(Example(window, window_labels, f"rec_{rec:05d}", k * 0.96, rec, k))
    return examples


@pytest.fixture
def energy_examples():
    return make_examples()
