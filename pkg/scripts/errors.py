# scripts/errors.py
"""
所有模块共用的异常。exit_code 给 cli 用：
    0 ok, 2 配置错误, 3 数值失败, 4 超出枚举上限
"""


class GFNError(Exception):
    exit_code = 3


class ConfigError(GFNError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericError(GFNError):
    exit_code = 3


class GuardExceeded(GFNError):
    exit_code = 4


class MalformedStateError(GFNError):
    pass


class NotTerminalError(GFNError):
    pass


class EnvIntegrityError(GFNError):
    pass


class NoParentsError(GFNError):
    pass


class UnsupportedError(GFNError):
    pass


class ShardError(GFNError):
    pass


class SnapshotError(GFNError):
    exit_code = 2
