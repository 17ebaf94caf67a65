"""
表单结构解析器 - 配置

所有配置数据类：生成器、编码器、解码器、模型、优化器、训练与运行时配置，
以及 TOML 配置文件的加载与 ``section.key=value`` 覆盖。
"""

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .models import FormParserError


class ConfigError(FormParserError):
    """配置错误"""
    pass


def _range(data: dict, key: str, default: Tuple[int, int]) -> Tuple[int, int]:
    value = data.get(key, default)
    return (int(value[0]), int(value[1]))


def _check_range(problems: List[str], name: str, value: Tuple[int, int], low: int = 0) -> None:
    if value[0] < low or value[0] > value[1]:
        problems.append(f"{name} must be a non-empty range with minimum >= {low}, got {list(value)}")


def _check_prob(problems: List[str], name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        problems.append(f"{name} must be in [0, 1], got {value}")


# ============== 合成语料生成配置 ==============

@dataclass
class GenConfig:
    """合成表单生成配置"""
    seed: int = 0
    n_docs: int = 100
    units_per_doc: Tuple[int, int] = (8, 60)
    kvps: Tuple[int, int] = (2, 5)
    choice_groups: Tuple[int, int] = (1, 2)
    entities: Tuple[int, int] = (0, 0)
    others: Tuple[int, int] = (0, 2)
    choices_per_group: Tuple[int, int] = (2, 4)
    entity_types: Tuple[str, ...] = ()
    p_nest: float = 0.3
    max_depth: int = 2
    p_titleless: float = 0.2
    jitter: float = 0.002
    token_dropout: float = 0.0
    max_retries: int = 50
    page_width: float = 850.0
    page_height: float = 1100.0

    def validate(self) -> List[str]:
        problems: List[str] = []
        if self.n_docs < 0:
            problems.append("n_docs must be >= 0")
        _check_range(problems, "units_per_doc", self.units_per_doc, low=1)
        for name in ("kvps", "choice_groups", "entities", "others"):
            _check_range(problems, name, getattr(self, name))
        _check_range(problems, "choices_per_group", self.choices_per_group, low=1)
        for name in ("p_nest", "p_titleless", "token_dropout"):
            _check_prob(problems, name, getattr(self, name))
        if self.max_depth < 1:
            problems.append("max_depth must be >= 1")
        if self.jitter < 0:
            problems.append("jitter must be >= 0")
        if self.max_retries < 1:
            problems.append("max_retries must be >= 1")
        if self.entities[1] > 0 and not self.entity_types:
            problems.append("entities requested but entity_types is empty")
        if self.page_width <= 0 or self.page_height <= 0:
            problems.append("page size must be positive")
        return problems

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_docs": self.n_docs,
            "units_per_doc": list(self.units_per_doc),
            "kvps": list(self.kvps),
            "choice_groups": list(self.choice_groups),
            "entities": list(self.entities),
            "others": list(self.others),
            "choices_per_group": list(self.choices_per_group),
            "entity_types": list(self.entity_types),
            "p_nest": self.p_nest,
            "max_depth": self.max_depth,
            "p_titleless": self.p_titleless,
            "jitter": self.jitter,
            "token_dropout": self.token_dropout,
            "max_retries": self.max_retries,
            "page_width": self.page_width,
            "page_height": self.page_height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        d = cls()
        return cls(
            seed=int(data.get("seed", d.seed)),
            n_docs=int(data.get("n_docs", d.n_docs)),
            units_per_doc=_range(data, "units_per_doc", d.units_per_doc),
            kvps=_range(data, "kvps", d.kvps),
            choice_groups=_range(data, "choice_groups", d.choice_groups),
            entities=_range(data, "entities", d.entities),
            others=_range(data, "others", d.others),
            choices_per_group=_range(data, "choices_per_group", d.choices_per_group),
            entity_types=tuple(data.get("entity_types", d.entity_types)),
            p_nest=float(data.get("p_nest", d.p_nest)),
            max_depth=int(data.get("max_depth", d.max_depth)),
            p_titleless=float(data.get("p_titleless", d.p_titleless)),
            jitter=float(data.get("jitter", d.jitter)),
            token_dropout=float(data.get("token_dropout", d.token_dropout)),
            max_retries=int(data.get("max_retries", d.max_retries)),
            page_width=float(data.get("page_width", d.page_width)),
            page_height=float(data.get("page_height", d.page_height)),
        )


# ============== 网络结构配置 ==============

@dataclass
class EncoderConfig:
    """单元编码器配置（完整规模: d_model=768, n_heads=12, d_ffn=2048）"""
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 4096
    d_pos: int = 64
    d_text: int = 64
    d_kind: int = 16
    geom_freqs: int = 8  # 坐标正弦特征的频率数，0 表示只用原始坐标

    def validate(self) -> List[str]:
        problems = []
        if self.geom_freqs < 0:
            problems.append("encoder.geom_freqs must be >= 0")
        if self.n_heads >= 1 and self.d_model % self.n_heads != 0:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_heads", "d_ffn", "vocab_size", "d_pos", "d_text", "d_kind"):
            if getattr(self, name) < 1:
                problems.append(f"encoder.{name} must be >= 1")
        if self.n_layers < 0:
            problems.append("encoder.n_layers must be >= 0")
        return problems

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        d = cls()
        return cls(**{f.name: int(data.get(f.name, getattr(d, f.name))) for f in fields(cls)})


@dataclass
class DecoderConfig:
    """关系解码器配置"""
    n_layers: int = 3
    n_heads: int = 4
    d_ffn: int = 256
    d_level: int = 16
    max_level: int = 16

    def validate(self) -> List[str]:
        problems = []
        for name in ("n_heads", "d_ffn", "d_level", "max_level"):
            if getattr(self, name) < 1:
                problems.append(f"decoder.{name} must be >= 1")
        if self.n_layers < 0:
            problems.append("decoder.n_layers must be >= 0")
        return problems

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "DecoderConfig":
        d = cls()
        return cls(**{f.name: int(data.get(f.name, getattr(d, f.name))) for f in fields(cls)})


@dataclass
class ModelConfig:
    """
    模型配置

    K 为每个子单元的候选父单元数；head_hidden 为关系头宽度（完整规模 1024）。
    use_* 开关对应组件消融。
    """
    k: int = 5
    head_hidden: int = 256
    score_mode: str = "log"  # log / prob
    use_encoder: bool = True
    use_decoder: bool = True
    use_tle: bool = True
    use_tam: bool = True
    use_text: bool = True
    use_geometry: bool = True
    entity_types: Tuple[str, ...] = ()

    def validate(self) -> List[str]:
        problems = []
        if self.k < 1:
            problems.append("model.k must be >= 1")
        if self.head_hidden < 1:
            problems.append("model.head_hidden must be >= 1")
        if self.score_mode not in ("log", "prob"):
            problems.append(f"model.score_mode must be 'log' or 'prob', got '{self.score_mode}'")
        if not (self.use_text or self.use_geometry):
            problems.append("at least one of use_text / use_geometry must be enabled")
        return problems

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["entity_types"] = list(self.entity_types)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        d = cls()
        return cls(
            k=int(data.get("k", d.k)),
            head_hidden=int(data.get("head_hidden", d.head_hidden)),
            score_mode=str(data.get("score_mode", d.score_mode)),
            use_encoder=bool(data.get("use_encoder", d.use_encoder)),
            use_decoder=bool(data.get("use_decoder", d.use_decoder)),
            use_tle=bool(data.get("use_tle", d.use_tle)),
            use_tam=bool(data.get("use_tam", d.use_tam)),
            use_text=bool(data.get("use_text", d.use_text)),
            use_geometry=bool(data.get("use_geometry", d.use_geometry)),
            entity_types=tuple(data.get("entity_types", d.entity_types)),
        )


# ============== 优化与训练配置 ==============

@dataclass
class AdamConfig:
    """Adam 超参数"""
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def validate(self) -> List[str]:
        problems = []
        if self.lr < 0:
            problems.append("adam.lr must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"adam.{name} must be in [0, 1)")
        if self.eps <= 0:
            problems.append("adam.eps must be > 0")
        if self.weight_decay < 0:
            problems.append("adam.weight_decay must be >= 0")
        return problems

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "AdamConfig":
        d = cls()
        return cls(**{f.name: float(data.get(f.name, getattr(d, f.name))) for f in fields(cls)})


OHEM_HEADS = ("proposal_parent", "proposal_type", "refine", "final_type")


@dataclass
class TrainConfig:
    """训练配置"""
    epochs: int = 30
    warmup_epochs: int = 1
    lr_scale: float = 50.0
    accum: int = 8
    ohem_pos: int = 32
    ohem_neg: int = 32
    ohem_heads: Tuple[str, ...] = ("proposal_type", "final_type")
    seed: int = 0
    holdout_fraction: float = 0.1
    max_steps: int = 0  # 0 表示不限制
    eval_every: int = 1
    progress: bool = True

    def validate(self) -> List[str]:
        problems = []
        for name in ("epochs", "accum", "ohem_pos", "ohem_neg", "eval_every"):
            if getattr(self, name) < 1:
                problems.append(f"train.{name} must be >= 1")
        if self.warmup_epochs < 0:
            problems.append("train.warmup_epochs must be >= 0")
        if self.lr_scale <= 0:
            problems.append("train.lr_scale must be > 0")
        if self.max_steps < 0:
            problems.append("train.max_steps must be >= 0")
        _check_prob(problems, "train.holdout_fraction", self.holdout_fraction)
        unknown = [h for h in self.ohem_heads if h not in OHEM_HEADS]
        if unknown:
            problems.append(f"train.ohem_heads has unknown heads {unknown}; choose from {OHEM_HEADS}")
        return problems

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["ohem_heads"] = list(self.ohem_heads)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        d = cls()
        return cls(
            epochs=int(data.get("epochs", d.epochs)),
            warmup_epochs=int(data.get("warmup_epochs", d.warmup_epochs)),
            lr_scale=float(data.get("lr_scale", d.lr_scale)),
            accum=int(data.get("accum", d.accum)),
            ohem_pos=int(data.get("ohem_pos", d.ohem_pos)),
            ohem_neg=int(data.get("ohem_neg", d.ohem_neg)),
            ohem_heads=tuple(data.get("ohem_heads", d.ohem_heads)),
            seed=int(data.get("seed", d.seed)),
            holdout_fraction=float(data.get("holdout_fraction", d.holdout_fraction)),
            max_steps=int(data.get("max_steps", d.max_steps)),
            eval_every=int(data.get("eval_every", d.eval_every)),
            progress=bool(data.get("progress", d.progress)),
        )


@dataclass
class RuntimeConfig:
    """运行时配置"""
    jobs: int = 1
    log_level: str = "INFO"
    precision: str = "float32"

    def validate(self) -> List[str]:
        problems = []
        if self.jobs < 1:
            problems.append("runtime.jobs must be >= 1")
        if self.precision not in ("float32", "float64"):
            problems.append(f"runtime.precision must be float32 or float64, got '{self.precision}'")
        if self.log_level.upper() not in ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"):
            problems.append(f"runtime.log_level '{self.log_level}' is not a log level")
        return problems

    def to_dict(self) -> dict:
        return {"jobs": self.jobs, "log_level": self.log_level, "precision": self.precision}

    @classmethod
    def from_dict(cls, data: dict) -> "RuntimeConfig":
        d = cls()
        return cls(
            jobs=int(data.get("jobs", d.jobs)),
            log_level=str(data.get("log_level", d.log_level)),
            precision=str(data.get("precision", d.precision)),
        )


# ============== 顶层配置 ==============

@dataclass
class ProjectConfig:
    """项目配置：各部分配置的聚合"""
    generator: GenConfig = field(default_factory=GenConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    SECTIONS = ("generator", "encoder", "decoder", "model", "adam", "train", "runtime")

    def validate(self) -> List[str]:
        problems = []
        for name in self.SECTIONS:
            problems.extend(getattr(self, name).validate())
        if self.decoder.n_heads >= 1 and self.encoder.d_model % self.decoder.n_heads != 0:
            problems.append(
                f"encoder.d_model {self.encoder.d_model} not divisible by decoder.n_heads {self.decoder.n_heads}"
            )
        return problems

    def check(self) -> "ProjectConfig":
        """校验配置，有问题时抛出 ConfigError"""
        problems = self.validate()
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectConfig":
        _reject_unknown(data)
        return cls(
            generator=GenConfig.from_dict(data.get("generator", {})),
            encoder=EncoderConfig.from_dict(data.get("encoder", {})),
            decoder=DecoderConfig.from_dict(data.get("decoder", {})),
            model=ModelConfig.from_dict(data.get("model", {})),
            adam=AdamConfig.from_dict(data.get("adam", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            runtime=RuntimeConfig.from_dict(data.get("runtime", {})),
        )

    def to_json(self) -> str:
        """序列化为JSON字符串"""
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, json_str: str) -> "ProjectConfig":
        """从JSON字符串反序列化"""
        return cls.from_dict(json.loads(json_str))

    def with_overrides(self, overrides: Dict[str, Any]) -> "ProjectConfig":
        """按 ``section.key`` 覆盖配置项，返回新配置"""
        data = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ConfigError(f"unknown configuration key '{dotted}'")
            data[section][key] = value
        return ProjectConfig.from_dict(data)


_SECTION_TYPES = {
    "generator": GenConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "model": ModelConfig,
    "adam": AdamConfig,
    "train": TrainConfig,
    "runtime": RuntimeConfig,
}


def _reject_unknown(data: dict) -> None:
    for section, values in data.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown configuration section '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"configuration section '{section}' must be a table")
        defaults = _SECTION_TYPES[section]()
        known = {f.name for f in fields(_SECTION_TYPES[section])}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown configuration key '{section}.{key}'")
            problem = _type_problem(value, getattr(defaults, key))
            if problem:
                raise ConfigError(f"{section}.{key}: {problem}, got {value!r}")


def _type_problem(value: Any, default: Any) -> Optional[str]:
    """按默认值的类型检查配置值；合法时返回 None"""
    if isinstance(default, bool):
        return None if isinstance(value, bool) else "expected true or false"
    if isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        return None if ok else "expected an integer"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else "expected a number"
    if isinstance(default, str):
        return None if isinstance(value, str) else "expected a string"
    if not isinstance(value, (list, tuple)):
        return "expected an array"
    if default and all(isinstance(x, int) for x in default):
        # 整数区间 [最小, 最大]
        ok = len(value) == 2 and all(isinstance(x, int) and not isinstance(x, bool) for x in value)
        return None if ok else "expected [min, max] integers"
    return None if all(isinstance(x, str) for x in value) else "expected an array of strings"


def parse_value(text: str) -> Any:
    """将命令行上的值按 TOML 语法解析，失败时当作字符串"""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_assignments(items: Iterable[str]) -> Dict[str, Any]:
    """解析 ``section.key=value`` 形式的覆盖项"""
    result: Dict[str, Any] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        result[key.strip()] = parse_value(value.strip())
    return result


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> ProjectConfig:
    """
    加载配置：内置默认值 < 配置文件 < 覆盖项

    Raises:
        ConfigError: 文件无法解析、含未知键或配置不合法
    """
    config = ProjectConfig()
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        config = ProjectConfig.from_dict(data)
    if overrides:
        config = config.with_overrides(overrides)
    return config.check()


def derive(config: ProjectConfig, **sections: Any) -> ProjectConfig:
    """以关键字参数替换整段配置，便于测试构造"""
    return replace(config, **sections)
