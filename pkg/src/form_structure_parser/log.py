"""
表单结构解析器 - 日志

配置 loguru：替换默认 sink 为 stderr sink。
"""

import sys

from loguru import logger

LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")

_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{line} - {message}"


def configure_logging(level: str = "INFO", json: bool = False) -> int:
    """
    重置 loguru 的输出

    Args:
        level: 日志级别
        json: 为 True 时每条日志输出为一行 JSON

    Returns:
        新 sink 的 id
    """
    level = level.upper()
    if level not in LEVELS:
        raise ValueError(f"unknown log level '{level}'; choose from {LEVELS}")
    logger.remove()
    if json:
        return logger.add(sys.stderr, level=level, serialize=True)
    return logger.add(sys.stderr, level=level, format=_FORMAT)
