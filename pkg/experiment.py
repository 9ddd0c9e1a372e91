"""
实验编排
把语料生成、特征提取、三元组采样、训练、嵌入和评估串成可复现的流水线，
并执行超参数扫描与整套对比实验配方
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import store
from config import SWEEP_PARAMS
from errors import ArtifactMissingError, ConfigError, EvaluationError, TrainingDivergedError
from evaluation import (
    ClassifierSpec, LogMelFeatures, SegmentEmbedding, SegmentSet, StoredEmbeddings, eval_classifier, evaluate_qbe,
    format_results_table, gap_recovery, light_supervision_protocol, segment_embedding, train_shallow_classifier,
)
from frontend import FeatureConfig, featurize_recording, stabilized_log
from metric import Trainer, train_config_from
from nn import EmbeddingNet, ModelSpec
from sampler import SamplerConfig, TripletSource, build_examples, build_lookup, sample_triplets
from synthcorpus import CorpusConfig, generate_corpus, load_manifest
from utils import Colors, draw_seed, load_json_file, make_rng

logger = logging.getLogger(__name__)

LOGMEL = 'logmel'

SAMPLE_STREAM_KEY = 11
MODEL_STREAM_KEY = 12

# 扫描参数 -> (采样方法, SamplerConfig 字段)
SWEEP_TARGETS = {
    'sigma': ('noise', 'sigma'),
    'freq-shift': ('translation', 'freq_shift'),
    'alpha': ('mixing', 'alpha'),
    'delta-t': ('proximity', 'delta_t_s'),
}


def embedding_id(recording_index: int, window_index: int) -> int:
    """嵌入行 id：高 32 位录音索引，低 32 位窗口索引"""
    return (int(recording_index) << 32) | int(window_index)


def method_of(records) -> str:
    """由三元组分片的来源推断训练方法；多来源即 joint"""
    sources = {int(r.source) for r in records}
    if len(sources) == 1:
        return TripletSource(sources.pop()).config_name
    return 'joint'


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ReportResult:
    qbe: Dict[str, float] = field(default_factory=dict)
    classifier: Dict[int, Dict[str, float]] = field(default_factory=dict)
    light_supervision: Dict[str, float] = field(default_factory=dict)
    sweeps: Dict[str, List[tuple]] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self):
        return all(check.passed for check in self.checks)


class ExperimentRunner:
    """实验流水线"""

    def __init__(self, config, threads: int = 1, on_output: Optional[Callable[[Path], None]] = None):
        self.config = config
        self.threads = threads
        # 每写出一个产物回调一次，main 用它登记到运行记录
        self.on_output = on_output
        self.logger = logging.getLogger(__name__)
        self._reload()

    def _reload(self):
        """配置变化后刷新派生设置与缓存"""
        self.seed = int(self.config.get('seed', 0))
        self.feature_cfg = FeatureConfig.from_config(self.config)
        self.work_dir = self.config.get_work_dir()
        self._manifest = None
        self._examples = {}

    # ------------------------------------------------------------ 目录

    @property
    def corpus_dir(self):
        return self.work_dir / 'corpus'

    @property
    def features_dir(self):
        return self.work_dir / 'features'

    def artifact_path(self, kind: str, name: str) -> Path:
        suffix = {'triplets': '.trip', 'models': '.ckpt', 'embeddings': '.emb', 'reports': ''}[kind]
        return self.work_dir / kind / f"{name}{suffix}"

    def _produced(self, path) -> Path:
        path = Path(path)
        if self.on_output is not None:
            self.on_output(path)
        return path

    def _write_csv(self, path, header, rows) -> Path:
        store.write_csv(path, header, rows)
        return self._produced(path)

    # ------------------------------------------------------------ 语料与特征

    def gen_corpus(self, out_dir=None, seed: Optional[int] = None):
        out_dir = Path(out_dir) if out_dir else self.corpus_dir
        seed = self.seed if seed is None else seed
        manifest = generate_corpus(CorpusConfig.from_config(self.config), seed, out_dir,
                                   self.feature_cfg, self.threads)
        self._manifest = None
        self._examples.clear()
        self._produced(out_dir)
        return manifest

    def manifest(self):
        if self._manifest is None:
            self._manifest = load_manifest(self.corpus_dir)
        return self._manifest

    def featurize(self, corpus_dir=None, out_dir=None) -> int:
        """为清单中的每条录音写出 TFSPEC1 能量谱分片"""
        corpus_dir = Path(corpus_dir) if corpus_dir else self.corpus_dir
        out_dir = Path(out_dir) if out_dir else self.features_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = load_manifest(corpus_dir)

        def work(entry):
            wav_path = corpus_dir / entry.path
            if not wav_path.exists():
                raise ArtifactMissingError(wav_path, 'gen-corpus')
            spectrogram = featurize_recording(wav_path, self.feature_cfg)
            store.write_spectrogram(out_dir / f"{entry.recording_id}.spec", spectrogram.cells, spectrogram.frame_hop_s)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            list(pool.map(work, manifest.recordings))
        self._examples.clear()
        self._produced(out_dir)
        self.logger.info(f"特征提取完成: {len(manifest.recordings)} 条录音 -> {out_dir}")
        return len(manifest.recordings)

    def ensure_corpus(self):
        """语料或特征缺失时补齐"""
        if not (self.corpus_dir / store.MANIFEST_FILE).exists():
            print(f"{Colors.CYAN}生成合成语料...{Colors.NC}")
            self.gen_corpus()
        manifest = self.manifest()
        missing = [e for e in manifest.recordings if not (self.features_dir / f"{e.recording_id}.spec").exists()]
        if missing:
            print(f"{Colors.CYAN}提取特征 ({len(missing)} 条录音缺失)...{Colors.NC}")
            self.featurize()

    def examples(self, split: str, labeled: bool = True):
        key = (split, labeled)
        if key not in self._examples:
            self._examples[key] = build_examples(self.manifest(), self.features_dir,
                                                 self.feature_cfg.context_frames, split, labeled)
        return self._examples[key]

    # ------------------------------------------------------------ 采样与训练

    def sample(self, method: str, n: Optional[int] = None, seed: Optional[int] = None,
               sampler_cfg: Optional[SamplerConfig] = None, out=None, split: str = 'train'):
        """采样三元组并写出 TFTRIP1 分片，返回 (records, path)"""
        n = int(self.config.get('sampler.n_triplets')) if n is None else n
        seed = self.seed if seed is None else seed
        sampler_cfg = sampler_cfg or SamplerConfig.from_config(self.config)
        dataset = self.examples(split, labeled=method == 'labeled')
        rng = make_rng(seed, SAMPLE_STREAM_KEY)
        triplets = sample_triplets(method, dataset, n, sampler_cfg, rng)
        records = [t.record for t in triplets]
        out = Path(out) if out else self.artifact_path('triplets', method)
        store.write_triplets(out, records)
        self._produced(out)
        self.logger.info(f"采样 {len(records)} 个 {method} 三元组 -> {out}")
        return records, out

    def model_spec(self, model_config=None) -> ModelSpec:
        if model_config is None:
            return ModelSpec.from_config(self.config)
        data = load_json_file(model_config, default=None)
        if data is None:
            raise ArtifactMissingError(model_config, 'config')
        data.setdefault('input_shape', [self.feature_cfg.n_mels, self.feature_cfg.context_frames])
        return ModelSpec.from_dict(data)

    def train(self, triplets_path, out=None, seed: Optional[int] = None, steps: Optional[int] = None,
              model_config=None):
        """训练嵌入网络，写出检查点和损失曲线 CSV，返回 (checkpoint 路径, 损失记录)"""
        seed = self.seed if seed is None else seed
        records = store.read_triplets(triplets_path)
        method = method_of(records)
        train_cfg = train_config_from(self.config, method)
        if steps is not None:
            train_cfg.steps = int(steps)
        spec = self.model_spec(model_config)
        model = EmbeddingNet.from_spec(spec, seed=draw_seed(make_rng(seed, MODEL_STREAM_KEY)))
        out = Path(out) if out else self.artifact_path('models', Path(triplets_path).stem)

        lookup = build_lookup(self.examples('train', labeled=False))
        trainer = Trainer(model, train_cfg, seed)
        try:
            trace = trainer.train(records, lookup)
        except TrainingDivergedError as e:
            store.write_checkpoint(out, spec.to_dict(), e.last_good_params, None)
            self._produced(out)
            self._write_trace(out, trainer.trace)
            self.logger.error(f"训练发散，已保存第 {e.step} 步的参数到 {out}")
            raise
        store.write_checkpoint(out, spec.to_dict(), model.parameters(), trainer.optimizer.to_dict())
        self._produced(out)
        self._write_trace(out, trace)
        return out, trace

    def _write_trace(self, checkpoint: Path, trace):
        path = checkpoint.with_suffix('.loss.csv')
        self._write_csv(path, ['step', 'loss', 'active_triplet_fraction'],
                        [[row.step, float(row.loss), float(row.active_fraction)] for row in trace])
        return path

    # ------------------------------------------------------------ 嵌入

    def load_representation(self, model):
        """'logmel' 表示原始对数梅尔基线，否则为检查点路径"""
        if str(model) == LOGMEL:
            return LogMelFeatures((self.feature_cfg.n_mels, self.feature_cfg.context_frames))
        spec_dict, params, _ = store.read_checkpoint(model, with_optimizer=False)
        net = EmbeddingNet.from_spec(ModelSpec.from_dict(spec_dict))
        net.load_parameters(params)
        return net

    def embed(self, model, split: str = 'eval', out=None) -> Path:
        """计算某个划分所有窗口的嵌入并写出 TFEMB1"""
        representation = self.load_representation(model)
        examples = self.examples(split, labeled=False)
        offset = self.feature_cfg.log_offset
        cells = np.stack([stabilized_log(e.window, offset).cells for e in examples]) if examples else \
            np.zeros((0, self.feature_cfg.n_mels, self.feature_cfg.context_frames))
        vectors = representation.embed(cells)
        ids = [embedding_id(e.recording_index, e.window_index) for e in examples]
        name = LOGMEL if str(model) == LOGMEL else Path(model).stem
        out = Path(out) if out else self.artifact_path('embeddings', f"{name}.{split}")
        store.write_embeddings(out, ids, vectors)
        self._produced(out)
        self.logger.info(f"写出 {len(ids)} 个 {vectors.shape[1]} 维嵌入 -> {out}")
        return out

    def segment_set(self, embeddings_path) -> SegmentSet:
        """按录音把窗口嵌入分组为片段，并附上片段标签"""
        ids, vectors = store.read_embeddings(embeddings_path)
        if len(ids) == 0:
            raise EvaluationError(f"嵌入库 {embeddings_path} 为空")
        manifest = self.manifest()
        by_index = {entry.script.index: entry for entry in manifest.recordings}
        recording_index = (ids >> np.uint64(32)).astype(np.int64)
        order = sorted(set(recording_index.tolist()))
        position = {r: i for i, r in enumerate(order)}
        labels = np.zeros((len(order), manifest.n_classes), dtype=bool)
        for r in order:
            labels[position[r], sorted(by_index[r].segment_labels)] = True
        return SegmentSet(vectors, np.array([position[r] for r in recording_index.tolist()]),
                          labels, [by_index[r].recording_id for r in order])

    def segment_embeddings(self, embeddings_path) -> List[SegmentEmbedding]:
        segments = self.segment_set(embeddings_path)
        stored = StoredEmbeddings(segments.features)
        order = np.argsort(segments.segment_index, kind='stable')
        bounds = np.searchsorted(segments.segment_index[order], np.arange(segments.n_segments + 1))
        return [segment_embedding(stored, order[bounds[i]:bounds[i + 1]], segments.segment_ids[i],
                                  np.flatnonzero(segments.labels[i]).tolist())
                for i in range(segments.n_segments)]

    # ------------------------------------------------------------ 评估

    def eval_qbe(self, embeddings_path, out=None, per_class: Optional[int] = None, seed: Optional[int] = None):
        per_class = int(self.config.get('eval.qbe_per_class')) if per_class is None else per_class
        seed = self.seed if seed is None else seed
        report = evaluate_qbe(self.segment_embeddings(embeddings_path), range(self.manifest().n_classes),
                              per_class, seed)
        if out:
            rows = [[c, report.per_class_ap[c]] for c in sorted(report.per_class_ap)]
            rows += [[c, 'skipped'] for c in report.skipped]
            rows.append(['mAP', report.map])
            self._write_csv(out, ['class_id', 'AP'], rows)
        return report

    def compare_qbe(self, embeddings: Sequence, baseline=None, topline=None, out=None):
        """多个表示的 QbE mAP，给出 baseline 与 topline 时附带差距恢复率"""
        maps = {str(path): self.eval_qbe(path).map for path in embeddings}
        rows = []
        for path, value in maps.items():
            recovery = None
            if baseline is not None and topline is not None:
                recovery = gap_recovery(maps[str(baseline)], maps[str(topline)], value)
            rows.append([path, value, recovery])
        if out:
            self._write_csv(out, ['representation', 'mAP', 'recovery_percent'],
                            [[p, v, '' if r is None else r] for p, v, r in rows])
        return rows

    def classifier_spec(self, hidden_layers: Optional[int] = None) -> ClassifierSpec:
        if hidden_layers is None:
            return ClassifierSpec.from_config(self.config)
        return ClassifierSpec.from_config(self.config, hidden_layers=int(hidden_layers))

    def eval_classifier(self, train_embeddings, eval_embeddings, hidden_layers: Optional[int] = None,
                        dev_embeddings=None, out=None, seed: Optional[int] = None):
        seed = self.seed if seed is None else seed
        dev = self.segment_set(dev_embeddings) if dev_embeddings else None
        classifier = train_shallow_classifier(self.segment_set(train_embeddings),
                                              self.classifier_spec(hidden_layers), seed, dev)
        report = eval_classifier(classifier, self.segment_set(eval_embeddings))
        if out:
            rows = [[c, report.per_class_ap[c]] for c in sorted(report.per_class_ap)]
            rows += [[c, 'skipped'] for c in report.skipped]
            rows.append(['mAP', report.map])
            self._write_csv(out, ['class_id', 'AP'], rows)
        return report

    def light_supervision(self, train_embeddings, eval_embeddings, per_class: Optional[int] = None,
                          trials: Optional[int] = None, hidden_layers: int = 1, dev_embeddings=None,
                          out=None, seed: Optional[int] = None):
        per_class = int(self.config.get('eval.light_supervision.per_class')) if per_class is None else per_class
        trials = int(self.config.get('eval.light_supervision.trials')) if trials is None else trials
        seed = self.seed if seed is None else seed
        dev = self.segment_set(dev_embeddings) if dev_embeddings else None
        result = light_supervision_protocol(self.segment_set(train_embeddings), self.segment_set(eval_embeddings),
                                            self.classifier_spec(hidden_layers), per_class, trials, seed, dev)
        if out:
            rows = [[i, value] for i, value in enumerate(result.trial_maps)]
            rows.append(['mean', result.map])
            self._write_csv(out, ['trial', 'mAP'], rows)
        return result

    # ------------------------------------------------------------ 表示流水线

    def build_representation(self, name: str, method: str, sampler_cfg: Optional[SamplerConfig] = None,
                             splits=('train', 'dev', 'eval')) -> Dict[str, Path]:
        """采样 -> 训练 -> 嵌入，返回各划分的嵌入路径"""
        if name == LOGMEL:
            return {split: self.embed(LOGMEL, split) for split in splits}
        _, triplets_path = self.sample(method, sampler_cfg=sampler_cfg, out=self.artifact_path('triplets', name))
        checkpoint, trace = self.train(triplets_path, out=self.artifact_path('models', name))
        if trace:
            self.logger.info(f"{name}: 最终损失 {trace[-1].loss:.5f}")
        return {split: self.embed(checkpoint, split, self.artifact_path('embeddings', f"{name}.{split}"))
                for split in splits}

    def sweep(self, param: str, grid: Optional[Sequence[float]] = None, out=None):
        """对单个采样超参数扫描，返回 [(值, QbE mAP)]"""
        if param not in SWEEP_PARAMS:
            raise ConfigError(f"未知扫描参数: {param}，可选 {SWEEP_PARAMS}")
        grid = list(self.config.get(f'eval.sweep.{param}')) if grid is None else list(grid)
        if not grid:
            raise ConfigError(f"扫描网格为空: {param}")
        method, attribute = SWEEP_TARGETS[param]
        base = SamplerConfig.from_config(self.config)
        rows = []
        for value in grid:
            value = int(value) if attribute == 'freq_shift' else float(value)
            sampler_cfg = SamplerConfig(**{**base.__dict__, attribute: value})
            name = f"sweep-{param}-{value}"
            paths = self.build_representation(name, method, sampler_cfg, splits=('eval',))
            value_map = self.eval_qbe(paths['eval']).map
            rows.append((value, value_map))
            print(f"{Colors.GREEN}✓ {param}={value}: mAP {value_map:.4f}{Colors.NC}")
        if out:
            self._write_csv(out, ['param', 'value', 'mAP'], [[param, v, m] for v, m in rows])
        return rows

    # ------------------------------------------------------------ 对比实验

    def report(self, recipe_path, out_dir=None) -> ReportResult:
        """执行实验配方并生成对比表格与方向性检查"""
        recipe = load_json_file(recipe_path, default=None)
        if recipe is None:
            raise ArtifactMissingError(recipe_path, 'report')
        if recipe.get('config'):
            self.config.merge(recipe['config'])
            self._reload()
        out_dir = Path(out_dir) if out_dir else self.artifact_path('reports', recipe.get('name', 'report'))
        out_dir.mkdir(parents=True, exist_ok=True)
        self.config.save_config(out_dir / 'resolved_config.json')
        self._produced(out_dir / 'resolved_config.json')
        self.ensure_corpus()

        result = ReportResult()
        baseline = LOGMEL
        topline = recipe['topline']['name']
        learned = [recipe['topline']] + list(recipe['representations'])
        embeddings = {LOGMEL: self.build_representation(LOGMEL, LOGMEL)}
        for item in learned:
            print(f"{Colors.CYAN}训练表示 {item['name']} ({item['method']})...{Colors.NC}")
            embeddings[item['name']] = self.build_representation(item['name'], item['method'])

        for name, paths in embeddings.items():
            result.qbe[name] = self.eval_qbe(paths['eval'], out=out_dir / f"qbe-{name}.csv").map
        for layers in recipe.get('classifier_hidden_layers', [1, 2]):
            result.classifier[layers] = {
                name: self.eval_classifier(paths['train'], paths['eval'], layers, paths['dev']).map
                for name, paths in embeddings.items()
            }

        light = recipe.get('light_supervision', {})
        for entry in light.get('rows', []):
            paths = embeddings[entry['representation']]
            label = entry.get('label', entry['representation'])
            result.light_supervision[label] = self.light_supervision(
                paths['train'], paths['eval'], hidden_layers=entry.get('hidden_layers', 1),
                dev_embeddings=paths['dev']).map

        for param, grid in recipe.get('sweeps', {}).items():
            result.sweeps[param] = self.sweep(param, grid, out=out_dir / f"sweep-{param}.csv")

        result.checks = self.ordering_checks(result, recipe.get('checks', {}), baseline, topline,
                                             [item['name'] for item in recipe['representations']])
        self._write_report(result, out_dir, baseline, topline, [item['name'] for item in learned])
        return result

    @staticmethod
    def ordering_checks(result: ReportResult, thresholds: Dict, baseline: str, topline: str,
                        singles: Sequence[str]) -> List[Check]:
        """基线 < 联合 < 监督上限，单约束表示优于基线，扫描与少量监督的方向"""
        checks = []
        min_gap = thresholds.get('min_gap', 0.03)
        min_single = thresholds.get('min_single_gain', 0.01)
        qbe = result.qbe
        joint = thresholds.get('joint', 'joint')
        if joint in qbe:
            checks.append(Check('baseline < joint', qbe[joint] - qbe[baseline] >= min_gap,
                                f"{qbe[baseline]:.4f} -> {qbe[joint]:.4f}"))
            checks.append(Check('joint < topline', qbe[topline] - qbe[joint] >= min_gap,
                                f"{qbe[joint]:.4f} -> {qbe[topline]:.4f}"))
        for name in singles:
            if name == joint:
                continue
            checks.append(Check(f"{name} > baseline", qbe[name] - qbe[baseline] >= min_single,
                                f"{qbe[baseline]:.4f} -> {qbe[name]:.4f}"))
        sweep = result.sweeps.get('freq-shift')
        if sweep and len(sweep) >= 2:
            first, last = sweep[0][1], sweep[-1][1]
            tolerance = thresholds.get('sweep_tolerance', 0.005)
            checks.append(Check('freq-shift sweep', last >= first - tolerance, f"{first:.4f} -> {last:.4f}"))
        light = result.light_supervision
        if baseline in light and joint in light:
            gap = thresholds.get('light_supervision_gap', 0.03)
            checks.append(Check('light supervision', light[joint] - light[baseline] >= gap,
                                f"{light[baseline]:.4f} -> {light[joint]:.4f}"))
        return checks

    def _write_report(self, result: ReportResult, out_dir: Path, baseline: str, topline: str, learned):
        names = [topline, baseline] + [n for n in learned if n != topline]
        layers = sorted(result.classifier)
        width = self.config.get('eval.classifier.width')

        def recovery(values, name):
            try:
                return gap_recovery(values[baseline], values[topline], values[name])
            except EvaluationError:
                return None

        header = ['representation', 'qbe_map', 'qbe_recovery']
        for n in layers:
            header += [f'classifier_{n}x{width}_map', f'classifier_{n}x{width}_recovery']
        rows = []
        for name in names:
            row = [name, result.qbe[name], recovery(result.qbe, name)]
            for n in layers:
                row += [result.classifier[n][name], recovery(result.classifier[n], name)]
            rows.append(row)

        self._write_csv(out_dir / 'report.csv', header, [[('' if v is None else v) for v in r] for r in rows])
        sections = ['# 对比实验结果\n', format_results_table(header, rows)]
        if result.light_supervision:
            sections += [f'\n## 少量监督 (每类 {self.config.get("eval.light_supervision.per_class")} 个片段)\n',
                         format_results_table(['representation', 'mAP'], list(result.light_supervision.items()))]
            self._write_csv(out_dir / 'light_supervision.csv', ['representation', 'mAP'],
                            [list(item) for item in result.light_supervision.items()])
        for param, sweep in result.sweeps.items():
            sections += [f'\n## 扫描 {param}\n', format_results_table([param, 'mAP'], [list(r) for r in sweep])]
        sections += ['\n## 方向性检查\n', format_results_table(
            ['check', 'passed', 'detail'], [[c.name, 'yes' if c.passed else 'NO', c.detail] for c in result.checks])]
        (out_dir / 'report.md').write_text('\n'.join(sections), encoding='utf-8')
        self._produced(out_dir / 'report.md')
        self._write_csv(out_dir / 'checks.csv', ['check', 'passed', 'detail'],
                        [[c.name, int(c.passed), c.detail] for c in result.checks])
        self.logger.info(f"报告已写出: {out_dir}")
