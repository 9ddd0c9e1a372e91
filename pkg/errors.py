"""
异常定义
每类异常带有进程退出码，main.py 据此返回
"""


class TripletForgeError(Exception):
    """所有工具异常的基类"""
    exit_code = 1


class ConfigError(TripletForgeError):
    """配置错误：未知键、非法取值"""
    exit_code = 2


class ArtifactError(TripletForgeError):
    """产物读写错误"""
    exit_code = 3


class ArtifactMissingError(ArtifactError):
    """上游产物不存在"""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(f"找不到产物 {path}，请先运行子命令 '{producer}'")


class ChecksumError(ArtifactError):
    """载荷校验和不一致"""


class TruncatedArtifactError(ArtifactError):
    """文件被截断"""


class UnknownMagicError(ArtifactError):
    """文件头魔数无法识别"""


class UnsupportedVersionError(ArtifactError):
    """不支持的产物版本"""


class NumericError(TripletForgeError):
    """数值错误"""
    exit_code = 4


class NonFiniteError(NumericError):
    """出现 NaN 或 Inf"""


class ShapeError(NumericError):
    """张量形状不匹配"""


class TrainingDivergedError(NumericError):
    """训练发散，携带最后一次正常的参数"""

    def __init__(self, message, step, last_good_params=None):
        self.step = step
        self.last_good_params = last_good_params
        super().__init__(message)


class DataError(TripletForgeError):
    """输入数据不满足前置条件"""


class InsufficientAudioError(DataError):
    """音频过短"""


class DomainMismatchError(DataError):
    """能量域/对数域不匹配"""


class SamplingError(DataError):
    """三元组采样无法满足"""


class CorpusError(DataError):
    """语料生成或划分失败"""


class EvaluationError(DataError):
    """评估前置条件不满足"""


class OrderingCheckError(DataError):
    """对比实验的方向性检查未通过"""

    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__(f"{len(self.failed)} 项方向性检查未通过: {', '.join(self.failed)}")
