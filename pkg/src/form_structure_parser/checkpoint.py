"""
表单结构解析器 - 检查点

命名张量归档：UTF-8 JSON 头 {version, entries, meta}，一个零字节，
随后是按顺序拼接的小端原始数组。读写逐位一致。
"""

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from .models import FormParserError

FORMAT_VERSION = 1
_SUPPORTED_DTYPES = ("float32", "float64", "int64", "int32")


class CheckpointError(FormParserError):
    """检查点格式错误"""
    pass


def encode_archive(arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    """将命名数组编码为归档字节"""
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        arr = np.asarray(array)
        if arr.dtype.name not in _SUPPORTED_DTYPES:
            raise CheckpointError(f"entry '{name}': unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "entries": entries, "meta": meta or {}}
    return json.dumps(header, ensure_ascii=False).encode("utf-8") + b"\0" + b"".join(chunks)


def decode_archive(data: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    解码归档字节

    Returns:
        (名称 -> 数组, meta)

    Raises:
        CheckpointError: 头部缺失或无法解析、版本不支持、条目越界
    """
    split = data.find(b"\0")
    if split < 0:
        raise CheckpointError("archive header terminator not found")
    try:
        header = json.loads(data[:split].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"archive header is not valid JSON: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported archive version {header.get('version')}")
    body = memoryview(data)[split + 1:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("entries", []):
        name = entry["name"]
        if entry["dtype"] not in _SUPPORTED_DTYPES:
            raise CheckpointError(f"entry '{name}': unsupported dtype {entry['dtype']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected or start < 0 or start + nbytes > len(body):
            raise CheckpointError(f"entry '{name}': byte range {start}+{nbytes} is inconsistent")
        arr = np.frombuffer(body[start:start + nbytes], dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    return arrays, header.get("meta", {})


def save_checkpoint(path: Path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_archive(arrays, meta))
    logger.info("checkpoint written to {} ({} entries)", path, len(arrays))
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    arrays, meta = decode_archive(path.read_bytes())
    logger.debug("checkpoint {} loaded ({} entries)", path, len(arrays))
    return arrays, meta
