"""
运行记录管理器
负责实验运行的登记、状态跟踪和解析后配置的落盘
"""

import logging
import time
from pathlib import Path
from typing import TypedDict, Optional, List, Dict
from utils import load_json_file, save_json_file, get_current_timestamp, generate_run_id
from config import get_config

RESOLVED_CONFIG_FILE = 'resolved_config.json'


class Run(TypedDict):
    """运行记录类型定义"""
    id: str
    command: str
    seed: int
    output_dir: str
    outputs: List[str]
    status: str
    created_at: str
    completed_at: Optional[str]
    error_message: Optional[str]
    metrics: Dict[str, float]


class RunManager:
    """运行记录管理器"""

    def __init__(self, config=None):
        self.config = config or get_config()
        self.metadata_dir = self.config.get_metadata_dir()
        self.metadata_dir.mkdir(parents=True, exist_ok=True)
        self.runs_file = self.metadata_dir / 'runs.json'
        self.runs = self._load_runs()
        self.logger = logging.getLogger(__name__)

    def _load_runs(self):
        """加载运行列表"""
        return load_json_file(self.runs_file, default=[])

    def _save_runs(self):
        """保存运行列表"""
        return save_json_file(self.runs_file, self.runs)

    def start_run(self, command, output_dir):
        """登记一次运行，并在输出目录写出解析后的配置"""
        run_id = f"run_{int(time.time())}_{generate_run_id()}"
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        self.config.save_config(output_dir / RESOLVED_CONFIG_FILE)

        run = {
            'id': run_id,
            'command': command,
            'seed': int(self.config.get('seed', 0)),
            'output_dir': str(output_dir),
            'outputs': [],
            'status': 'running',
            'created_at': get_current_timestamp(),
            'completed_at': None,
            'error_message': None,
            'metrics': {}
        }
        self.runs.append(run)
        self._save_runs()
        self.logger.info(f"开始运行: {run_id} - {command}")
        return run_id

    def get_run(self, run_id):
        """获取运行信息"""
        for run in self.runs:
            if run['id'] == run_id:
                return run
        return None

    def add_output(self, run_id, path):
        run = self.get_run(run_id)
        if not run:
            return False
        run['outputs'].append(str(path))
        return self._save_runs()

    def finish_run(self, run_id, status='completed', error_message=None, metrics=None):
        """更新运行状态"""
        run = self.get_run(run_id)
        if not run:
            return False

        run['status'] = status
        run['completed_at'] = get_current_timestamp()
        if error_message:
            run['error_message'] = error_message
        if metrics:
            run['metrics'].update({k: float(v) for k, v in metrics.items()})
        return self._save_runs()

    def list_runs(self, status=None, command=None):
        """列出运行记录，按创建时间倒序"""
        runs = self.runs.copy()
        if status:
            runs = [run for run in runs if run['status'] == status]
        if command:
            runs = [run for run in runs if run['command'] == command]
        runs.sort(key=lambda x: x['created_at'], reverse=True)
        return runs

    def get_run_stats(self):
        """获取运行统计信息"""
        stats = {'total': len(self.runs), 'running': 0, 'completed': 0, 'failed': 0}
        for run in self.runs:
            if run['status'] in stats:
                stats[run['status']] += 1
        return stats
