"""
度量学习
三元组铰链损失、批内半困难负例挖掘，以及把采样器和网络连起来的训练循环
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from errors import ConfigError, NonFiniteError, SamplingError, TrainingDivergedError
from frontend import ContextWindow, stabilized_log
from nn import AdamState, EmbeddingNet, adam_step
from sampler import Triplet, TripletSource, materialize
from store import TripletRecord
from utils import make_rng

logger = logging.getLogger(__name__)

CANDIDATE_POOLS = ('negatives', 'all')
MINING_MODES = ('auto', 'on', 'off')
TRAIN_STREAM_KEY = 7


@dataclass
class TripletLossConfig:
    """损失与批次设置"""
    margin: float = 0.1
    mining: bool = True
    batch_size: int = 64
    candidate_pool: str = 'negatives'
    source_loss_weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin 必须 >= 0: {self.margin}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size 必须 >= 2: {self.batch_size}")
        if self.candidate_pool not in CANDIDATE_POOLS:
            raise ConfigError(f"candidate_pool 只能是 {CANDIDATE_POOLS}: {self.candidate_pool}")
        for name, weight in self.source_loss_weights.items():
            TripletSource.from_name(name)
            if weight < 0:
                raise ConfigError(f"来源损失权重必须非负: {name}={weight}")


@dataclass
class TrainConfig:
    """训练设置：损失配置 + 优化器"""
    loss: TripletLossConfig
    steps: int = 200
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_offset: float = 0.01
    log_every: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps 必须 >= 1: {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate 必须 > 0: {self.learning_rate}")


class MiningPolicy(NamedTuple):
    mining: bool
    learning_rate: float


def mining_policy(method: Union[str, TripletSource], lr_mining: float = 1e-4,
                  lr_no_mining: float = 1e-6) -> MiningPolicy:
    """按采样方法决定是否挖掘与学习率

    labeled / proximity / joint 开启挖掘；noise / translation / mixing 关闭。
    """
    name = method.config_name if isinstance(method, TripletSource) else str(method)
    if name in ('labeled', 'proximity', 'joint'):
        return MiningPolicy(True, lr_mining)
    if name in ('noise', 'translation', 'mixing'):
        return MiningPolicy(False, lr_no_mining)
    raise ConfigError(f"未知采样方法: {name}")


def train_config_from(config, method: str) -> TrainConfig:
    """从 Config 的 training 节构造，mining='auto' / learning_rate=None 时套用挖掘策略"""
    section = config.get('training')
    mode = section['mining']
    if mode not in MINING_MODES:
        raise ConfigError(f"training.mining 只能是 {MINING_MODES}: {mode}")
    policy = mining_policy(method, section['lr_mining'], section['lr_no_mining'])
    mining = policy.mining if mode == 'auto' else mode == 'on'
    if section['learning_rate'] is not None:
        learning_rate = float(section['learning_rate'])
    else:
        learning_rate = section['lr_mining'] if mining else section['lr_no_mining']
    loss = TripletLossConfig(
        margin=float(section['margin']),
        mining=mining,
        batch_size=int(section['batch_size']),
        candidate_pool=section['candidate_pool'],
        source_loss_weights=dict(section['source_loss_weights']),
    )
    return TrainConfig(loss=loss, steps=int(section['steps']), learning_rate=float(learning_rate),
                       beta1=float(section['beta1']), beta2=float(section['beta2']),
                       eps=float(section['eps']), log_offset=float(config.get('feature.log_offset')),
                       log_every=int(section['log_every']))


# ---------------------------------------------------------------- 损失

class LossResult(NamedTuple):
    loss: float
    per_triplet: np.ndarray
    active: np.ndarray
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray


def _squared_distance(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sum(diff * diff, axis=-1)


def triplet_loss(anchors, positives, negatives, margin: float = 0.1, weights=None) -> LossResult:
    """L = Σ_i w_i·[‖a−p‖² − ‖a−n‖² + δ]₊

    铰链拐点处取次梯度 0（视为未激活）。weights 为逐三元组的来源权重，缺省全为 1。
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    for name, value in (('anchor', a), ('positive', p), ('negative', n)):
        if not np.all(np.isfinite(value)):
            rows = np.where(~np.all(np.isfinite(value), axis=-1))[0]
            raise NonFiniteError(f"{name} 嵌入包含非有限值，行 {rows.tolist()[:10]}")
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=np.float64)

    per = _squared_distance(a, p) - _squared_distance(a, n) + margin
    active = per > 0
    hinge = np.where(active, per, 0.0)
    scale = (w * active)[:, None]
    return LossResult(
        loss=float(np.sum(w * hinge)),
        per_triplet=hinge,
        active=active,
        grad_anchor=2.0 * (n - p) * scale,
        grad_positive=2.0 * (p - a) * scale,
        grad_negative=2.0 * (a - n) * scale,
    )


# ---------------------------------------------------------------- 挖掘

def semi_hard_mine(anchors, positives, candidates, original=None) -> np.ndarray:
    """批内半困难负例挖掘

    每个 (anchor, positive) 对选择满足 d(a,n) > d(a,p) 的最近候选；
    并列时取下标最小者；没有候选满足时保留 original 中的原负例下标。
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if original is None:
        original = np.arange(len(a))
    original = np.asarray(original, dtype=np.int64)

    d_ap = _squared_distance(a, p)
    d_ac = _squared_distance(a[:, None, :], c[None, :, :])
    feasible = d_ac > d_ap[:, None]
    masked = np.where(feasible, d_ac, np.inf)
    chosen = np.argmin(masked, axis=1)
    return np.where(feasible.any(axis=1), chosen, original)


# ---------------------------------------------------------------- 训练

class TraceRow(NamedTuple):
    """单步记录；loss 为批内各三元组 hinge 之和"""
    step: int
    loss: float
    active_fraction: float


class Trainer:
    """三元组训练循环"""

    def __init__(self, model: EmbeddingNet, cfg: TrainConfig, seed: int = 0,
                 optimizer: Optional[AdamState] = None):
        self.model = model
        self.cfg = cfg
        self.seed = int(seed)
        self.optimizer = optimizer or AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        self.trace: List[TraceRow] = []
        self.logger = logging.getLogger(__name__)

    # 批次组装 ------------------------------------------------------------

    def _batch_schedule(self, sources: np.ndarray, rng):
        """一轮的批次序列；开启挖掘时 mixing 与其余来源分组成批，每批只有一种挖掘方式"""
        size = self.cfg.loss.batch_size
        if self.cfg.loss.mining:
            groups = [np.where(sources != TripletSource.MIXING)[0], np.where(sources == TripletSource.MIXING)[0]]
        else:
            groups = [np.arange(len(sources))]
        batches = []
        for group in groups:
            if len(group) == 0:
                continue
            order = group[rng.permutation(len(group))]
            batches.extend(order[i:i + size] for i in range(0, len(order), size))
        return [batches[i] for i in rng.permutation(len(batches))]

    def _batches(self, sources: np.ndarray):
        rng = make_rng(self.seed, TRAIN_STREAM_KEY)
        while True:
            yield from self._batch_schedule(sources, rng)

    # 单步 --------------------------------------------------------------

    def _to_log(self, cells_list) -> np.ndarray:
        return np.stack([stabilized_log(ContextWindow(cells), self.cfg.log_offset).cells for cells in cells_list])

    def _negative_rows(self, g: np.ndarray, sources: np.ndarray) -> np.ndarray:
        """返回每个三元组在 g 中使用的负例行号"""
        B = len(sources)
        rows = 2 * B + np.arange(B)
        if not self.cfg.loss.mining or B < 2:
            return rows
        remine = sources != TripletSource.MIXING
        pairs = np.where(remine)[0]
        if len(pairs) == 0:
            return rows
        candidate_rows = 2 * B + pairs
        if self.cfg.loss.candidate_pool == 'all':
            candidate_rows = np.concatenate([pairs, B + pairs, candidate_rows])
        # 原负例位于候选列表末尾
        own = np.arange(len(pairs)) + len(candidate_rows) - len(pairs)
        chosen = semi_hard_mine(g[pairs], g[B + pairs], g[candidate_rows], original=own)
        rows[pairs] = candidate_rows[chosen]
        return rows

    def _weights(self, sources: np.ndarray):
        table = self.cfg.loss.source_loss_weights
        if not table:
            return None
        return np.array([table.get(TripletSource(s).config_name, 1.0) for s in sources])

    def step(self, batch: Sequence[Triplet]) -> TraceRow:
        B = len(batch)
        sources = np.array([int(t.source) for t in batch])
        x = self._to_log([t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch])
        g = self.model.forward(x, record=True)
        neg_rows = self._negative_rows(g, sources)

        result = triplet_loss(g[:B], g[B:2 * B], g[neg_rows], self.cfg.loss.margin, self._weights(sources))
        if not np.isfinite(result.loss):
            raise NonFiniteError(f"损失为非有限值: {result.loss}")

        dg = np.zeros(g.shape, dtype=np.float64)
        dg[:B] += result.grad_anchor
        dg[B:2 * B] += result.grad_positive
        np.add.at(dg, neg_rows, result.grad_negative)
        grads = self.model.backward(dg)
        params = self.model.parameters()
        adam_step(params, grads, self.optimizer)
        bad = [name for name, value in params.items() if not np.all(np.isfinite(value))]
        if bad:
            raise NonFiniteError(f"更新后参数出现非有限值: {bad}")
        return TraceRow(self.optimizer.step, result.loss, float(np.mean(result.active)))

    # 主循环 ------------------------------------------------------------

    def train(self, triplets: Sequence[Union[Triplet, TripletRecord]], lookup=None,
              steps: Optional[int] = None) -> List[TraceRow]:
        """按种子确定性地循环三元组流训练 steps 步

        triplets 可以是物化后的 Triplet，也可以是 TripletRecord（需要 lookup，按批物化）。
        损失或梯度出现非有限值时抛出 TrainingDivergedError，附带最后一次正常的参数。
        """
        if not triplets:
            raise SamplingError("三元组流为空，至少需要一个批次")
        steps = steps or self.cfg.steps

        def get(i):
            item = triplets[i]
            if isinstance(item, Triplet):
                return item
            if lookup is None:
                raise SamplingError("TripletRecord 需要提供窗口查找表")
            return materialize(item, lookup)

        sources = np.array([int(t.source if isinstance(t, Triplet) else t.source) for t in triplets])
        self.logger.info(
            f"开始训练: {len(triplets)} 个三元组, {steps} 步, 批大小 {self.cfg.loss.batch_size}, "
            f"挖掘 {'开启' if self.cfg.loss.mining else '关闭'}, 学习率 {self.optimizer.learning_rate:g}"
        )
        batches = self._batches(sources)
        for _ in range(steps):
            indices = next(batches)
            last_good = {k: v.copy() for k, v in self.model.parameters().items()}
            try:
                row = self.step([get(int(i)) for i in indices])
            except NonFiniteError as e:
                self.model.load_parameters(last_good)
                raise TrainingDivergedError(f"第 {self.optimizer.step + 1} 步训练发散: {e}",
                                            self.optimizer.step, last_good)
            self.trace.append(row)
            if self.cfg.log_every and row.step % self.cfg.log_every == 0:
                self.logger.info(f"step {row.step}: loss(批内求和) {row.loss:.5f}, active {row.active_fraction:.3f}")
        return self.trace


def train(model: EmbeddingNet, triplets, cfg: TrainConfig, seed: int = 0, lookup=None):
    """训练并返回 (model, loss trace)"""
    trainer = Trainer(model, cfg, seed)
    trace = trainer.train(triplets, lookup)
    return model, trace
