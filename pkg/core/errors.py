# core/errors.py
# 项目内统一的异常层级。发散 (divergence) 不是异常，而是结果数据的一部分。


class NodeResidualError(Exception):
    """所有可预期错误的基类，CLI 捕获后以非零状态码退出。"""


class StructuralError(NodeResidualError, ValueError):
    """宽度/形状不匹配，或 tape 与调用方不对应。"""


class ParameterError(NodeResidualError, ValueError):
    """数值参数非法 (例如 delta <= 0、负方差、学习率 <= 0)。"""


class SpecError(NodeResidualError, ValueError):
    """残差接线 (ResidualSpec) 无法解析或与数据集不符。"""


class AnalysisError(NodeResidualError):
    """分析阶段的数值问题，例如雅可比矩阵含非有限值。"""


class ArtifactError(NodeResidualError):
    """缺失、不可读或不可写的文件。"""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class TrainingFailure(NodeResidualError):
    """训练过程中持续发散 (单个 epoch 内超过一半窗口发散)。"""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch

    def __reduce__(self):
        # 跨进程传回时保留 epoch
        return type(self), (self.args[0], self.epoch)
