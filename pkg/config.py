#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
設定模組 - 執行設定的載入、驗證與回寫

功能：
1. RunConfig：場景、方法 (CM / GALS)、CM 參數、時間參數、輸出設定
2. 場景預設值（swirl2d / deform3d / mandelbrot / opencurves / mosaic / custom）
3. 從 key=value 純文字檔 (python-dotenv) 與命令列覆寫載入
4. 回寫完整設定 config.env（可直接重跑）
5. 環境變數：CM_OUTPUT_DIR（預設輸出目錄）、CM_LOG_LEVEL（預設日誌等級）
"""

import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from cm_core import CmConfig
from gals import GalsConfig
from hermite import Boundary

load_dotenv()

logger = logging.getLogger(__name__)

# ============================================
# 環境變數
# ============================================

OUTPUT_DIR = os.getenv('CM_OUTPUT_DIR', './output')
LOG_LEVEL = os.getenv('CM_LOG_LEVEL', 'INFO')

CONFIG_FILE = "config.env"


class ConfigError(ValueError):
    """設定錯誤（附上出錯的 key）"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class Scenario(str, Enum):
    SWIRL_2D = "swirl2d"
    DEFORM_3D = "deform3d"
    MANDELBROT = "mandelbrot"
    OPEN_CURVES = "opencurves"
    MOSAIC = "mosaic"
    CUSTOM = "custom"


class Method(str, Enum):
    CM = "cm"
    GALS = "gals"


# 只對 CM 方法有意義的 key（method=gals 時不得明確指定）
CM_ONLY_KEYS = {
    "nc", "nf_init", "nf_min", "nf_max", "e1", "e2", "gamma",
    "dynamic_grid", "keep_map_ledger", "checkpoint_every", "remap",
}

# 只對 GALS 方法有意義的 key
GALS_ONLY_KEYS = {"ng"}

LIST_KEYS = {"snapshot_times", "set_center", "tracer_points"}


# ============================================
# 場景預設值
# ============================================

SCENARIO_PRESETS: Dict[Scenario, Dict[str, Any]] = {
    Scenario.SWIRL_2D: {
        "dims": 2, "period": 16.0, "final_time": 16.0,
        "nc": 32, "nf_init": 32, "nf_min": 16, "nf_max": 512,
        "e1": 5e-6, "e2": 1e-4, "dynamic_grid": True, "ng": 256,
        "set_center": [0.5, 0.75], "set_radius": 0.15,
        "snapshot_times": [4.0, 8.0, 12.0, 16.0], "resolution": 1024,
    },
    Scenario.DEFORM_3D: {
        "dims": 3, "period": 2.0, "final_time": 2.0,
        "nc": 16, "nf_init": 64, "nf_min": 64, "nf_max": 64,
        "e1": 1e-4, "e2": 1e-4, "dynamic_grid": False, "ng": 64,
        "set_center": [0.35, 0.35, 0.35], "set_radius": 0.15,
        "snapshot_times": [1.0, 2.0], "resolution": 96,
    },
    Scenario.MANDELBROT: {
        "dims": 2, "period": 16.0, "final_time": 16.0,
        "nc": 32, "nf_init": 1024, "nf_min": 1024, "nf_max": 1024,
        "e1": 1e-7, "e2": 1e-4, "dynamic_grid": False, "ng": 1024,
        "snapshot_times": [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0], "resolution": 1024,
    },
    Scenario.OPEN_CURVES: {
        "dims": 2, "period": 4.0, "final_time": 4.0,
        "nc": 32, "nf_init": 32, "nf_min": 16, "nf_max": 512,
        "e1": 5e-6, "e2": 1e-4, "dynamic_grid": True, "ng": 256,
        "snapshot_times": [2.0, 4.0], "resolution": 1024,
    },
    Scenario.MOSAIC: {
        "dims": 2, "period": 2.0, "final_time": 2.0,
        "nc": 32, "nf_init": 512, "nf_min": 512, "nf_max": 512,
        "e1": 1e-9, "e2": 1e-4, "dynamic_grid": False, "ng": 512,
        "boundary": "periodic", "dt": 2.0 / 2048,
        "mosaic_kx": 3, "mosaic_ky": 3, "mosaic_stagger": True,
        "snapshot_times": [0.25, 0.5, 1.0, 1.5, 2.0], "resolution": 512,
    },
    Scenario.CUSTOM: {
        "dims": 2, "period": 1.0, "final_time": 1.0,
        "set_center": [0.5, 0.5], "set_radius": 0.15,
    },
}


class RunConfig(BaseModel):
    """
    一次實驗的完整設定

    key 名稱即 key=value 設定檔與命令列覆寫使用的名稱。
    """

    scenario: Scenario = Scenario.SWIRL_2D
    method: Method = Method.CM
    label: str = ""

    # CM / 網格
    dims: int = Field(2, ge=2, le=3)
    nc: int = Field(32, ge=1)
    nf_init: int = Field(32, ge=1)
    nf_min: int = Field(16, ge=1)
    nf_max: int = Field(512, ge=1)
    e1: float = Field(5e-6, gt=0.0)
    e2: float = Field(1e-4, gt=0.0)
    gamma: int = Field(1, ge=1)
    dt: Optional[float] = Field(None, gt=0.0)
    cfl_default: float = Field(1.0, gt=0.0)
    epsilon_rel: float = Field(1e-4, gt=0.0, lt=0.5)
    boundary: Boundary = Boundary.CLAMPED
    dynamic_grid: bool = True
    keep_map_ledger: bool = False
    remap: bool = True

    # GALS 基準
    ng: int = Field(256, ge=1)

    # 時間
    period: float = Field(16.0, gt=0.0)
    final_time: float = Field(16.0, ge=0.0)

    # 初始集合
    set_center: List[float] = Field(default_factory=lambda: [0.5, 0.75])
    set_radius: float = Field(0.15, gt=0.0)
    mosaic_kx: int = Field(3, ge=1)
    mosaic_ky: int = Field(3, ge=1)
    mosaic_stagger: bool = False
    mandel_max_iter: int = Field(300, ge=1)
    tracer_points: List[float] = Field(default_factory=list)

    # 自訂速度場："module:function"，簽名 fn(x: (m, d), t) -> (m, d)
    velocity: Optional[str] = None

    # 輸出
    output_dir: str = OUTPUT_DIR
    snapshot_times: List[float] = Field(default_factory=list)
    resolution: int = Field(512, ge=2)
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0
    parallel: int = Field(0, ge=0)

    @field_validator(*sorted(LIST_KEYS), mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.replace(",", " ").split()]
        return value

    @field_validator("boundary", "scenario", "method", mode="before")
    @classmethod
    def _lower(cls, value):
        return value.lower() if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check(self):
        # CmConfig 的不變量（Nf 範圍與 2 的冪次比例）
        try:
            self.cm_config()
        except ValidationError as e:
            raise ValueError(e.errors()[0]["msg"]) from None
        if self.scenario is Scenario.CUSTOM and not self.velocity:
            raise ValueError("custom 場景需要 velocity=module:function")
        if self.scenario in (Scenario.SWIRL_2D, Scenario.DEFORM_3D, Scenario.CUSTOM):
            if len(self.set_center) != self.dims:
                raise ValueError(f"set_center 需要 {self.dims} 個座標")
        if len(self.tracer_points) % self.dims:
            raise ValueError(f"tracer_points 長度必須是 {self.dims} 的倍數")
        return self

    def cm_config(self) -> CmConfig:
        """核心使用的 CmConfig；remap=false 時 E1 = ∞（不做 remap 的對照組）"""
        return CmConfig(
            dims=self.dims,
            nc=self.nc,
            nf_init=self.nf_init,
            nf_min=self.nf_min,
            nf_max=self.nf_max,
            e1=self.e1 if self.remap else math.inf,
            e2=self.e2,
            gamma=self.gamma,
            dt=self.dt,
            cfl_default=self.cfl_default,
            epsilon_rel=self.epsilon_rel,
            boundary=self.boundary,
            dynamic_grid=self.dynamic_grid,
            keep_map_ledger=self.keep_map_ledger,
        )

    def gals_config(self) -> GalsConfig:
        return GalsConfig(epsilon_rel=self.epsilon_rel, dt=self.dt, cfl_default=self.cfl_default)

    def tracers(self) -> List[Tuple[float, ...]]:
        pts = self.tracer_points
        return [tuple(pts[i:i + self.dims]) for i in range(0, len(pts), self.dims)]

    def run_dir(self) -> Path:
        name = self.label or f"{self.scenario.value}_{self.method.value}"
        return Path(self.output_dir) / name


# ============================================
# 載入與回寫
# ============================================

def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    """["key=value", ...] → dict"""
    parsed = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "覆寫格式必須是 key=value")
        key, value = item.split("=", 1)
        parsed[key.strip()] = value.strip()
    return parsed


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    """
    套用場景預設值並驗證

    values 中明確指定的 key 優先於場景預設值。
    """
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(unknown[0], "未知的設定 key")

    method = str(values.get("method", Method.CM.value)).lower()
    if method == Method.GALS.value:
        forbidden = sorted(set(values) & CM_ONLY_KEYS)
        if forbidden:
            raise ConfigError(forbidden[0], "method=gals 不接受 CM 專用參數")

    try:
        scenario = Scenario(str(values.get("scenario", Scenario.SWIRL_2D.value)).lower())
    except ValueError:
        raise ConfigError("scenario", f"未知的場景: {values.get('scenario')}") from None

    merged = {**SCENARIO_PRESETS[scenario], **values, "scenario": scenario}
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first.get("loc") else "config"
        raise ConfigError(key, first["msg"]) from e


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    讀取 key=value 設定檔，再套用命令列覆寫

    Args:
        path: 設定檔路徑（None 表示只用預設值與覆寫）
        overrides: ["e1=1e-6", "nc=64", ...]
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"找不到設定檔: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    values.update(parse_overrides(overrides))
    cfg = build_run_config(values)
    logger.debug(f"設定已載入: {cfg.scenario.value} / {cfg.method.value}")
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def save_run_config(cfg: RunConfig, directory: Union[str, Path]) -> Path:
    """寫出完整設定 config.env（method=gals 時略過 CM 專用 key，保持可重新載入）"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILE
    skip = CM_ONLY_KEYS if cfg.method is Method.GALS else GALS_ONLY_KEYS
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in cfg.model_dump().items():
            if key in skip or value is None:
                continue
            fh.write(f'{key}="{_format_value(value)}"\n')
    return path
