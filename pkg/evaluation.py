"""
评估
按例查询 (QbE) 检索、浅层分类器、少量监督协议与差距恢复率
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from errors import ConfigError, DomainMismatchError, EvaluationError, ShapeError
from frontend import LOG
from nn import AdamState, Dense, ReLU, Sequential, adam_step
from utils import make_rng

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


# ---------------------------------------------------------------- 表示

class LogMelFeatures:
    """原始对数梅尔基线：把 F × T 窗口展平为一个向量"""

    def __init__(self, input_shape=(64, 96)):
        self.input_shape = tuple(input_shape)

    @property
    def embedding_dim(self):
        return int(np.prod(self.input_shape))

    def embed(self, x) -> np.ndarray:
        if isinstance(x, (list, tuple)):
            if any(getattr(w, 'domain', LOG) != LOG for w in x):
                raise DomainMismatchError("对数梅尔基线需要对数域窗口")
            x = np.stack([w.cells for w in x]) if x else np.zeros((0,) + self.input_shape)
        x = np.asarray(x, dtype=np.float32)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"窗口形状 {x.shape[1:]} 与 {self.input_shape} 不一致")
        return x.reshape(len(x), -1)


@dataclass
class SegmentEmbedding:
    """片段嵌入：窗口嵌入的算术平均（不重新归一化）"""
    vector: np.ndarray
    segment_id: str = ''
    labels: frozenset = frozenset()


def segment_embedding(model, windows, segment_id: str = '', labels=frozenset()) -> SegmentEmbedding:
    if len(windows) == 0:
        raise EvaluationError(f"片段 {segment_id!r} 没有任何窗口")
    vectors = np.asarray(model.embed(windows), dtype=np.float64)
    vector = vectors.mean(axis=0)
    if not np.all(np.isfinite(vector)):
        raise EvaluationError(f"片段 {segment_id!r} 的嵌入包含非有限值")
    return SegmentEmbedding(vector, segment_id, frozenset(labels))


class StoredEmbeddings:
    """已写出的窗口嵌入，embed 按行号取向量"""

    def __init__(self, vectors):
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def embed(self, rows) -> np.ndarray:
        return self.vectors[np.asarray(rows, dtype=np.int64)]


def segment_means(values: np.ndarray, segment_index: np.ndarray, n_segments: int) -> np.ndarray:
    """按片段对窗口级向量求平均"""
    values = np.asarray(values, dtype=np.float64)
    sums = np.zeros((n_segments, values.shape[1]))
    np.add.at(sums, segment_index, values)
    counts = np.bincount(segment_index, minlength=n_segments)
    if np.any(counts == 0):
        raise EvaluationError("存在没有窗口的片段")
    return sums / counts[:, None]


def cosine_distance(u, v) -> np.ndarray:
    """余弦距离 1 − cos(u, v)，范数下限 1e-12，结果截断到 [0, 2]"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.maximum(np.linalg.norm(u, axis=-1), NORM_FLOOR)
    nv = np.maximum(np.linalg.norm(v, axis=-1), NORM_FLOOR)
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    return np.clip(1.0 - cos, 0.0, 2.0)


# ---------------------------------------------------------------- QbE

@dataclass
class Trial:
    pair: tuple
    is_target: bool
    distance: float


@dataclass
class ClassTrials:
    class_id: int
    per_class: int
    trials: List[Trial]

    @property
    def n_targets(self):
        return sum(t.is_target for t in self.trials)


class QbeReport(NamedTuple):
    per_class_ap: Dict[int, float]
    map: float
    skipped: List[int]
    per_class_p: Dict[int, int]


def build_qbe_trials(segments: Sequence[SegmentEmbedding], class_ids: Sequence[int], per_class: int = 100,
                     seed: int = 0):
    """为每个类别构造 target / nontarget 试验

    每类抽 P 个含该类与 P 个不含该类的片段（数量不足时降低 P 并告警）；
    target 为 C(P,2) 个 present-present 对，nontarget 为 P² 个 present-absent 对。
    试验顺序固定：先 target 后 nontarget，各自按抽样顺序。
    返回 ({class_id: ClassTrials}, 被跳过的类别列表)。
    """
    if per_class < 2:
        raise ConfigError(f"per_class 必须 >= 2: {per_class}")
    results: Dict[int, ClassTrials] = {}
    skipped: List[int] = []
    for c in class_ids:
        present = [i for i, s in enumerate(segments) if c in s.labels]
        absent = [i for i, s in enumerate(segments) if c not in s.labels]
        if len(present) < 2 or not absent:
            logger.warning(f"类别 {c}: present {len(present)} / absent {len(absent)}，无法构造试验，跳过")
            skipped.append(c)
            continue
        p = min(per_class, len(present), len(absent))
        if p < 2:
            # P < 2 时没有 target 试验
            logger.warning(f"类别 {c}: present {len(present)} / absent {len(absent)}，P 只能取 {p}，跳过")
            skipped.append(c)
            continue
        if p < per_class:
            logger.warning(f"类别 {c}: 片段不足，P 从 {per_class} 降为 {p}")
        rng = make_rng(seed, c)
        chosen_present = [present[i] for i in rng.choice(len(present), size=p, replace=False)]
        chosen_absent = [absent[i] for i in rng.choice(len(absent), size=p, replace=False)]

        pairs = list(itertools.combinations(chosen_present, 2))
        n_targets = len(pairs)
        pairs += list(itertools.product(chosen_present, chosen_absent))
        left = np.stack([segments[i].vector for i, _ in pairs])
        right = np.stack([segments[j].vector for _, j in pairs])
        distances = cosine_distance(left, right)
        trials = [Trial((segments[i].segment_id, segments[j].segment_id), k < n_targets, float(d))
                  for k, ((i, j), d) in enumerate(zip(pairs, distances))]
        results[c] = ClassTrials(c, p, trials)
    return results, skipped


def ranked_average_precision(distances, is_target) -> float:
    """按距离升序（稳定排序）排列，AP = 各 target 所在名次处精度的平均"""
    distances = np.asarray(distances, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if not is_target.any():
        raise EvaluationError("没有 target 试验，AP 无定义")
    order = np.argsort(distances, kind='stable')
    hits = is_target[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].mean())


def average_precision(trials: Sequence[Trial]) -> float:
    return ranked_average_precision([t.distance for t in trials], [t.is_target for t in trials])


def mean_average_precision(per_class_ap) -> float:
    values = list(per_class_ap.values()) if isinstance(per_class_ap, dict) else list(per_class_ap)
    if not values:
        raise EvaluationError("没有任何类别的 AP，mAP 无定义")
    return float(np.mean(values))


def evaluate_qbe(segments: Sequence[SegmentEmbedding], class_ids: Sequence[int], per_class: int = 100,
                 seed: int = 0) -> QbeReport:
    trials, skipped = build_qbe_trials(segments, class_ids, per_class, seed)
    per_class_ap = {c: average_precision(t.trials) for c, t in trials.items()}
    return QbeReport(per_class_ap, mean_average_precision(per_class_ap), skipped,
                     {c: t.per_class for c, t in trials.items()})


def gap_recovery(baseline: float, topline: float, value: float) -> float:
    """差距恢复率（百分比）"""
    if topline <= baseline:
        raise EvaluationError(f"topline {topline} 必须大于 baseline {baseline}")
    return 100.0 * ((value - baseline) / (topline - baseline))


# ---------------------------------------------------------------- 浅层分类器

@dataclass
class ClassifierSpec:
    """全连接分类器：hidden_layers 个 width 宽的 ReLU 隐层，每类一个独立 logistic 输出"""
    hidden_layers: int = 1
    width: int = 512
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ConfigError(f"hidden_layers 必须 >= 1: {self.hidden_layers}")
        if self.width < 1:
            raise ConfigError(f"width 必须 >= 1: {self.width}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size 与 max_epochs 必须 >= 1")

    @classmethod
    def from_config(cls, config, **overrides):
        section = dict(config.get('eval.classifier'))
        section.update(overrides)
        return cls(**section)


@dataclass
class SegmentSet:
    """窗口级特征 + 片段分组 + 片段多热标签"""
    features: np.ndarray
    segment_index: np.ndarray
    labels: np.ndarray
    segment_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.segment_index = np.asarray(self.segment_index, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if len(self.features) != len(self.segment_index):
            raise ShapeError("特征行数与片段索引长度不一致")

    @property
    def n_segments(self):
        return len(self.labels)

    @property
    def window_labels(self):
        """每个窗口继承所在片段的标签"""
        return self.labels[self.segment_index]

    def subset(self, segments: Sequence[int]) -> 'SegmentSet':
        segments = list(segments)
        remap = {s: i for i, s in enumerate(segments)}
        mask = np.isin(self.segment_index, segments)
        index = np.array([remap[s] for s in self.segment_index[mask]], dtype=np.int64)
        ids = [self.segment_ids[s] for s in segments] if self.segment_ids else []
        return SegmentSet(self.features[mask], index, self.labels[segments], ids)


class ShallowClassifier:
    """多标签全连接分类器"""

    def __init__(self, spec: ClassifierSpec, n_inputs: int, n_classes: int, seed: int = 0):
        self.spec = spec
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        layers = []
        width_in = n_inputs
        for _ in range(spec.hidden_layers):
            layers += [Dense(width_in, spec.width, rng), ReLU()]
            width_in = spec.width
        layers.append(Dense(width_in, n_classes, rng))
        self.network = Sequential(layers)
        self.mean = np.zeros(n_inputs, dtype=np.float32)
        self.scale = np.ones(n_inputs, dtype=np.float32)
        self.skipped_classes: List[int] = []

    def _normalize(self, x):
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.scale).astype(np.float32)

    def logits(self, x, record=False):
        return self.network.forward(self._normalize(x), record)

    def predict_proba(self, x) -> np.ndarray:
        return expit(self.logits(x).astype(np.float64))

    def fit_step(self, x, y, state: AdamState) -> float:
        """一个小批次的 BCE 梯度步，返回平均损失"""
        z = self.logits(x, record=True).astype(np.float64)
        loss = float(np.mean(np.sum(np.logaddexp(0.0, z) - y * z, axis=1)))
        dz = (expit(z) - y) / len(x)
        self.network.backward(dz.astype(np.float32))
        adam_step(self.network.parameters(), self.network.gradients(), state)
        return loss


class ClassifierReport(NamedTuple):
    per_class_ap: Dict[int, float]
    map: float
    skipped: List[int]


def eval_classifier(classifier: ShallowClassifier, segments: SegmentSet) -> ClassifierReport:
    """片段得分 = 窗口 sigmoid 输出的平均；按类别对片段排序计算 AP"""
    probs = classifier.predict_proba(segments.features)
    scores = segment_means(probs, segments.segment_index, segments.n_segments)
    per_class_ap = {}
    skipped = []
    for c in range(classifier.n_classes):
        present = segments.labels[:, c]
        if c in classifier.skipped_classes or not present.any() or present.all():
            skipped.append(c)
            continue
        per_class_ap[c] = ranked_average_precision(-scores[:, c], present)
    return ClassifierReport(per_class_ap, mean_average_precision(per_class_ap), skipped)


def train_shallow_classifier(train: SegmentSet, spec: ClassifierSpec, seed: int = 0,
                             dev: Optional[SegmentSet] = None) -> ShallowClassifier:
    """训练浅层分类器，窗口标签取所在片段的标签

    提供 dev 时按 dev mAP 早停并恢复最佳参数。
    """
    x = np.asarray(train.features, dtype=np.float32)
    y = train.window_labels.astype(np.float64)
    n_classes = train.labels.shape[1]
    classifier = ShallowClassifier(spec, x.shape[1], n_classes, seed)
    classifier.mean = x.mean(axis=0, dtype=np.float64).astype(np.float32)
    classifier.scale = np.maximum(x.std(axis=0, dtype=np.float64), 1e-6).astype(np.float32)
    classifier.skipped_classes = [c for c in range(n_classes) if not train.labels[:, c].any()]
    if classifier.skipped_classes:
        logger.warning(f"训练数据中缺少类别 {classifier.skipped_classes}，评估时跳过")

    state = AdamState(learning_rate=spec.learning_rate)
    rng = make_rng(seed, 1)
    best_map, best_params, stale = -1.0, None, 0
    for epoch in range(spec.max_epochs):
        order = rng.permutation(len(x))
        losses = [classifier.fit_step(x[idx], y[idx], state)
                  for idx in (order[i:i + spec.batch_size] for i in range(0, len(order), spec.batch_size))]
        if dev is None:
            continue
        dev_map = eval_classifier(classifier, dev).map
        logger.debug(f"epoch {epoch + 1}: loss {np.mean(losses):.4f}, dev mAP {dev_map:.4f}")
        if dev_map > best_map:
            best_map, stale = dev_map, 0
            best_params = {k: v.copy() for k, v in classifier.network.parameters().items()}
        else:
            stale += 1
            if stale >= spec.patience:
                logger.info(f"第 {epoch + 1} 轮早停，dev mAP 最佳 {best_map:.4f}")
                break
    if best_params is not None:
        classifier.network.load_parameters(best_params)
    return classifier


class LightSupervisionResult(NamedTuple):
    map: float
    trial_maps: List[float]


def light_supervision_protocol(train: SegmentSet, evaluation: SegmentSet, spec: ClassifierSpec,
                               per_class: int = 20, trials: int = 3, seed: int = 0,
                               dev: Optional[SegmentSet] = None) -> LightSupervisionResult:
    """每类随机抽 k 个含该类的片段训练分类器，重复 trials 次取平均 mAP"""
    if trials < 1 or per_class < 1:
        raise ConfigError("trials 与 per_class 必须 >= 1")
    n_classes = train.labels.shape[1]
    maps = []
    for trial in range(trials):
        rng = make_rng(seed, trial)
        chosen = set()
        for c in range(n_classes):
            candidates = np.where(train.labels[:, c])[0]
            if len(candidates) < per_class:
                logger.warning(f"类别 {c} 只有 {len(candidates)} 个片段 (< {per_class})，全部使用")
                picked = candidates
            else:
                picked = rng.choice(candidates, size=per_class, replace=False)
            chosen.update(int(s) for s in picked)
        subset = train.subset(sorted(chosen))
        classifier = train_shallow_classifier(subset, spec, seed=seed + trial, dev=dev)
        maps.append(eval_classifier(classifier, evaluation).map)
        logger.info(f"少量监督第 {trial + 1}/{trials} 次: {len(chosen)} 个片段, mAP {maps[-1]:.4f}")
    return LightSupervisionResult(float(np.mean(maps)), maps)


# ---------------------------------------------------------------- 报告

def format_results_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Markdown 表格；浮点保留三位，None 显示为 n/a"""
    def cell(value):
        if value is None:
            return 'n/a'
        if isinstance(value, float):
            return f"{value:.3f}"
        return str(value)

    lines = ['| ' + ' | '.join(header) + ' |', '|' + '|'.join('---' for _ in header) + '|']
    lines += ['| ' + ' | '.join(cell(v) for v in row) + ' |' for row in rows]
    return '\n'.join(lines) + '\n'
