"""
最小神经网络引擎
numpy 实现的卷积嵌入网络：逐层前向/反向、Adam 优化器、L2 归一化输出头

张量布局 (N, C, H, W)，H 为梅尔通道，W 为帧。参数以 float32 存储；
求和与范数在 float64 中累加。dtype=float64 时为梯度核验用的影子模式。
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import ConfigError, DomainMismatchError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
LAYER_TYPES = ('conv2d', 'maxpool', 'relu', 'global_avg_pool', 'dense', 'residual')


class Layer:
    """层基类"""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self.grads: Dict[str, np.ndarray] = OrderedDict()
        self.cache = None

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, record=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _require_cache(self):
        if self.cache is None:
            raise ShapeError(f"{type(self).__name__} 未记录前向激活，无法反向传播")
        return self.cache

    def zero_grad(self):
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)


class Conv2D(Layer):
    """二维卷积，'same' 填充 (kernel // 2)"""

    def __init__(self, in_channels, channels, kernel=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = self.kernel // 2
        fan_in = in_channels * self.kernel * self.kernel
        limit = np.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.params['weight'] = rng.uniform(-limit, limit,
                                            (channels, in_channels, self.kernel, self.kernel)).astype(dtype)
        self.params['bias'] = np.zeros(channels, dtype=dtype)
        self.zero_grad()

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"卷积输入 {in_shape} 过小")
        if c != self.params['weight'].shape[1]:
            raise ShapeError(f"卷积期望 {self.params['weight'].shape[1]} 个输入通道，实际 {c}")
        return (self.params['weight'].shape[0], ho, wo)

    def forward(self, x, record=True):
        weight, bias = self.params['weight'], self.params['bias']
        if x.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError(f"卷积输入形状 {x.shape} 与权重 {weight.shape} 不匹配")
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + bias[None, :, None, None]
        if record:
            self.cache = (x.shape, xp.shape, windows)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x_shape, xp_shape, windows = self._require_cache()
        weight = self.params['weight']
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = dout.shape[2], dout.shape[3]
        self.grads['bias'] = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(weight.dtype)
        self.grads['weight'] = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])).astype(weight.dtype)
        dwin = np.tensordot(dout, weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, p:p + h, p:p + w]


class MaxPool2D(Layer):
    """最大池化，并列最大值取窗口内第一个位置"""

    def __init__(self, kernel=2, stride=2):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = int(stride)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"池化输入 {in_shape} 过小")
        return (c, ho, wo)

    def forward(self, x, record=True):
        k, s = self.kernel, self.stride
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(windows.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if record:
            self.cache = (x.shape, idx)
        return out

    def backward(self, dout):
        x_shape, idx = self._require_cache()
        k, s = self.kernel, self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                mask = idx == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * mask
        return dx


class ReLU(Layer):

    def forward(self, x, record=True):
        mask = x > 0
        if record:
            self.cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._require_cache()


class GlobalAvgPool(Layer):
    """对频率和时间求平均"""

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, record=True):
        if record:
            self.cache = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, dout):
        shape = self._require_cache()
        scale = 1.0 / (shape[2] * shape[3])
        return np.broadcast_to((dout * scale)[:, :, None, None], shape).copy()


class Dense(Layer):
    """全连接层，多维输入先展平"""

    def __init__(self, in_features, units, rng=None, dtype=np.float32):
        super().__init__()
        limit = np.sqrt(6.0 / in_features)
        rng = rng or np.random.default_rng(0)
        self.params['weight'] = rng.uniform(-limit, limit, (in_features, units)).astype(dtype)
        self.params['bias'] = np.zeros(units, dtype=dtype)
        self.zero_grad()

    def output_shape(self, in_shape):
        features = int(np.prod(in_shape))
        if features != self.params['weight'].shape[0]:
            raise ShapeError(f"全连接层期望 {self.params['weight'].shape[0]} 维输入，实际 {features}")
        return (self.params['weight'].shape[1],)

    def forward(self, x, record=True):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.params['weight'].shape[0]:
            raise ShapeError(f"全连接层输入 {x.shape} 与权重 {self.params['weight'].shape} 不匹配")
        if record:
            self.cache = (x.shape, x2)
        return x2 @ self.params['weight'] + self.params['bias']

    def backward(self, dout):
        x_shape, x2 = self._require_cache()
        weight = self.params['weight']
        self.grads['weight'] = (x2.T @ dout).astype(weight.dtype)
        self.grads['bias'] = dout.sum(axis=0, dtype=np.float64).astype(weight.dtype)
        return (dout @ weight.T).reshape(x_shape)


class L2Normalize(Layer):
    """g = h / ‖h‖₂；‖h‖₂ < 1e-12 的行输出固定单位向量 e₀，梯度为零"""

    def forward(self, x, record=True):
        norm = np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=1, keepdims=True))
        degenerate = norm < NORM_EPS
        safe_norm = np.where(degenerate, 1.0, norm)
        out = x / safe_norm
        if degenerate.any():
            fallback = np.zeros(x.shape[1])
            fallback[0] = 1.0
            out = np.where(degenerate, fallback, out)
        if record:
            self.cache = (x, safe_norm, degenerate)
        return out.astype(x.dtype)

    def backward(self, dout):
        x, safe_norm, degenerate = self._require_cache()
        dot = np.sum(x.astype(np.float64) * dout, axis=1, keepdims=True)
        dx = dout / safe_norm - x * dot / safe_norm ** 3
        return np.where(degenerate, 0.0, dx).astype(dout.dtype)


class Sequential(Layer):
    """顺序容器"""

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def forward(self, x, record=True):
        for layer in self.layers:
            x = layer.forward(x, record)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self, prefix=''):
        for i, layer in enumerate(self.layers):
            name = f"{prefix}layer{i}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(prefix=f"{name}.")
            else:
                yield name, layer

    def parameters(self) -> Dict[str, np.ndarray]:
        """参数名 -> 数组（引用，原地更新即更新模型）"""
        params = OrderedDict()
        for name, layer in self.named_layers():
            for key, value in layer.params.items():
                params[f"{name}.{key}"] = value
        return params

    def gradients(self) -> Dict[str, np.ndarray]:
        grads = OrderedDict()
        for name, layer in self.named_layers():
            for key in layer.params:
                grads[f"{name}.{key}"] = layer.grads[key]
        return grads

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def load_parameters(self, values: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ShapeError(f"参数名不匹配: 缺少 {sorted(missing)}，多余 {sorted(extra)}")
        for name, target in params.items():
            value = np.asarray(values[name])
            if value.shape != target.shape:
                raise ShapeError(f"参数 {name} 形状 {value.shape} 与模型 {target.shape} 不一致")
            np.copyto(target, value.astype(target.dtype))


class Residual(Sequential):
    """残差块：out = x + f(x)，要求 f 保持形状"""

    def output_shape(self, in_shape):
        out_shape = super().output_shape(in_shape)
        if tuple(out_shape) != tuple(in_shape):
            raise ShapeError(f"残差块输出 {out_shape} 与输入 {in_shape} 形状不同")
        return in_shape

    def forward(self, x, record=True):
        return x + super().forward(x, record)

    def backward(self, dout):
        return dout + super().backward(dout)


# ---------------------------------------------------------------- 模型描述

@dataclass
class ModelSpec:
    """网络结构描述：层列表 + d 维线性输出头 + L2 归一化"""
    layers: List[Dict] = field(default_factory=list)
    embedding_dim: int = 128
    input_shape: Tuple[int, int] = (64, 96)

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim 必须 >= 1: {self.embedding_dim}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        _validate_layers(self.layers)

    def to_dict(self):
        return {'layers': self.layers, 'embedding_dim': self.embedding_dim,
                'input_shape': list(self.input_shape)}

    @classmethod
    def from_dict(cls, data):
        return cls(layers=list(data['layers']), embedding_dim=int(data['embedding_dim']),
                   input_shape=tuple(data.get('input_shape', (64, 96))))

    @classmethod
    def from_config(cls, config):
        return cls(layers=list(config.get('model.layers')),
                   embedding_dim=int(config.get('model.embedding_dim')),
                   input_shape=(int(config.get('feature.n_mels')), int(config.get('feature.context_frames'))))


def _validate_layers(layers):
    for layer in layers:
        kind = layer.get('type')
        if kind not in LAYER_TYPES:
            raise ConfigError(f"未知层类型: {kind}")
        if kind == 'residual':
            _validate_layers(layer.get('layers', []))


def build_layers(specs, in_shape, rng, dtype) -> Tuple[List[Layer], Tuple]:
    """按描述构建层并推导各层输出形状"""
    layers = []
    shape = tuple(in_shape)
    for spec in specs:
        kind = spec['type']
        if kind == 'conv2d':
            layer = Conv2D(shape[0], spec['channels'], spec.get('kernel', 3), spec.get('stride', 1), rng, dtype)
        elif kind == 'maxpool':
            layer = MaxPool2D(spec.get('kernel', 2), spec.get('stride', spec.get('kernel', 2)))
        elif kind == 'relu':
            layer = ReLU()
        elif kind == 'global_avg_pool':
            if len(shape) != 3:
                raise ShapeError("global_avg_pool 需要 (C, H, W) 输入")
            layer = GlobalAvgPool()
        elif kind == 'dense':
            layer = Dense(int(np.prod(shape)), spec['units'], rng, dtype)
        else:
            inner, _ = build_layers(spec.get('layers', []), shape, rng, dtype)
            layer = Residual(inner)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers, shape


class EmbeddingNet:
    """卷积嵌入网络 g(x) = h(x) / ‖h(x)‖₂"""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        body, shape = build_layers(spec.layers, (1,) + spec.input_shape, rng, self.dtype)
        head = Dense(int(np.prod(shape)), spec.embedding_dim, rng, self.dtype)
        self.network = Sequential(body + [head, L2Normalize()])

    @classmethod
    def from_spec(cls, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        return cls(spec, seed, dtype)

    @property
    def embedding_dim(self):
        return self.spec.embedding_dim

    def _prepare(self, x) -> np.ndarray:
        if isinstance(x, (list, tuple)):
            for window in x:
                if getattr(window, 'domain', 'log') != 'log':
                    raise DomainMismatchError("网络输入必须是对数域窗口")
            x = np.stack([w.cells for w in x]) if x else np.zeros((0,) + self.spec.input_shape)
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1,) + self.spec.input_shape:
            raise ShapeError(f"输入形状 {x.shape} 与模型期望 (N, 1, {self.spec.input_shape}) 不符")
        return x

    def forward(self, x, record=True) -> np.ndarray:
        return self.network.forward(self._prepare(x), record)

    def backward(self, dg) -> Dict[str, np.ndarray]:
        """根据嵌入上的上游梯度计算参数梯度"""
        head_cache = self.network.layers[-1].cache
        if head_cache is None:
            raise ShapeError("未记录前向激活，无法反向传播")
        dg = np.asarray(dg, dtype=self.dtype)
        if dg.shape != head_cache[0].shape:
            raise ShapeError(f"上游梯度形状 {dg.shape} 与嵌入输出 {head_cache[0].shape} 不一致")
        self.network.backward(dg)
        return self.gradients()

    def embed(self, x, batch_size: int = 256) -> np.ndarray:
        """批量计算单位范数嵌入（不记录激活）"""
        x = self._prepare(x)
        if len(x) == 0:
            return np.zeros((0, self.embedding_dim), dtype=self.dtype)
        chunks = [self.network.forward(x[i:i + batch_size], record=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks)

    def parameters(self):
        return self.network.parameters()

    def gradients(self):
        return self.network.gradients()

    def load_parameters(self, values):
        self.network.load_parameters(values)

    def n_parameters(self):
        return int(sum(p.size for p in self.parameters().values()))

    def astype(self, dtype) -> 'EmbeddingNet':
        """复制为指定精度（float64 影子模式）"""
        clone = EmbeddingNet(self.spec, 0, dtype)
        clone.load_parameters(self.parameters())
        return clone


# ---------------------------------------------------------------- 优化器

@dataclass
class AdamState:
    """Adam 状态：一阶/二阶矩、步数与超参数"""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def to_dict(self):
        return {'step': self.step, 'learning_rate': self.learning_rate, 'beta1': self.beta1,
                'beta2': self.beta2, 'eps': self.eps, 'm': self.m, 'v': self.v}

    @classmethod
    def from_dict(cls, data):
        return cls(data['learning_rate'], data['beta1'], data['beta2'], data['eps'], int(data['step']),
                   OrderedDict(data['m']), OrderedDict(data['v']))


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """带偏差校正的 Adam 更新，参数原地修改"""
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise ShapeError(f"参数 {name} 缺少梯度或形状不一致")
    bad = [name for name in params if not np.all(np.isfinite(grads[name]))]
    if bad:
        details = ', '.join(f"{n}(max|g|={np.nanmax(np.abs(grads[n])):.3g})" for n in bad)
        raise NonFiniteError(f"梯度出现非有限值，放弃本步更新: {details}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, value in params.items():
        g = grads[name].astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = state.beta1 * state.m[name].astype(np.float64) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name].astype(np.float64) + (1.0 - state.beta2) * (g * g)
        state.m[name][...] = m
        state.v[name][...] = v
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        value -= update.astype(value.dtype)
    return params, state


class Adam:
    """Adam 优化器"""

    def __init__(self, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(learning_rate, beta1, beta2, eps)

    def step(self, params, grads):
        adam_step(params, grads, self.state)


# ---------------------------------------------------------------- 梯度核验

def gradient_check(model, x, upstream=None, h=None, floor=None, max_checks=None, seed=0, shadow=None):
    """中心差分核验参数梯度，返回 {参数名: 最大相对误差}

    损失取 L = Σ upstream ⊙ model(x)。解析梯度由被测模型按其自身精度反传得到；
    shadow 为真时（float32 的 EmbeddingNet 默认开启）差分在 float64 影子副本上计算，扰动 1e-6。
    相对误差 |a - n| / max(|a|, |n|, floor)；float32 模型的 floor 缺省随该参数解析梯度的最大幅值缩放。
    max_checks 限定每个参数抽查的元素数。
    """
    params = model.parameters()
    dtype = next(iter(params.values())).dtype
    if shadow is None:
        shadow = dtype != np.float64 and isinstance(model, EmbeddingNet)
    reference = model.astype(np.float64) if shadow else model
    numeric_dtype = np.float64 if shadow else dtype
    if h is None:
        h = 1e-6 if numeric_dtype == np.float64 else 1e-3

    out = model.forward(x, record=True)
    rng = np.random.default_rng(seed)
    if upstream is None:
        upstream = rng.standard_normal(out.shape)
    upstream = np.asarray(upstream, dtype=dtype).astype(np.float64)
    if isinstance(model, EmbeddingNet):
        grads = model.backward(upstream.astype(dtype))
    else:
        model.backward(upstream.astype(dtype))
        grads = model.gradients()
    grads = {k: v.astype(np.float64).copy() for k, v in grads.items()}
    x_ref = model._prepare(x).astype(np.float64) if shadow else x

    def loss():
        return float(np.sum(upstream * reference.forward(x_ref, record=False)))

    errors = OrderedDict()
    for name, value in reference.parameters().items():
        analytic_all = grads[name].reshape(-1)
        if floor is not None:
            name_floor = floor
        elif dtype == np.float64:
            name_floor = 1e-4
        else:
            # float32 反传的舍入误差与梯度幅值同阶
            name_floor = max(1e-4, 1e-3 * float(np.max(np.abs(analytic_all))))
        flat = value.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = rng.choice(flat.size, size=max_checks, replace=False)
        worst = 0.0
        for i in indices:
            original = flat[i].copy()
            flat[i] = original + h
            plus = loss()
            flat[i] = original - h
            minus = loss()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            analytic = analytic_all[i]
            denom = max(abs(analytic), abs(numeric), name_floor)
            worst = max(worst, abs(analytic - numeric) / denom)
        errors[name] = worst
    return errors
