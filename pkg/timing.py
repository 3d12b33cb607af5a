#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
計時模組 - 對應成本模型的分段計時

功能：
1. PhaseTimer：以單調時鐘累計 footpoints / interpolation / particles / remapping 各段時間
2. 計數器（夾回的 footpoint 數、Nf 飽和次數等）
3. TimingReport：彙整步數、remap 次數、平均 remap 間隔 M 與每節點成本常數
"""

import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

import pandas as pd
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

PHASES = ("footpoints", "interpolation", "particles", "remapping")


def mean_steps_between_remaps(steps: int, remaps: int) -> float:
    """M = steps / max(1, remaps)"""
    return steps / max(1, remaps)


class PhaseTimer:
    """分段計時器（time.perf_counter）"""

    def __init__(self):
        self.seconds: Dict[str, float] = {phase: 0.0 for phase in PHASES}
        self.counters: Dict[str, int] = defaultdict(int)
        self._started = time.perf_counter()

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start

    def count(self, name: str, amount: int = 1):
        self.counters[name] += int(amount)

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self._started


class TimingReport(BaseModel):
    """
    分段計時報告

    c_footpoint / c_interp 為每步每節點的實測秒數，對應成本模型中的 C1 / C2。
    """

    footpoints: float = 0.0
    interpolation: float = 0.0
    particles: float = 0.0
    remapping: float = 0.0
    total: float = 0.0
    steps: int = 0
    remaps: int = 0
    mean_steps_between_remaps: float = Field(0.0, description="M = steps / max(1, remaps)")
    c_footpoint: float = 0.0
    c_interp: float = 0.0
    clamped_footpoints: int = 0
    saturations: int = 0

    @classmethod
    def from_timer(
        cls,
        timer: PhaseTimer,
        steps: int,
        remaps: int,
        nodes: int,
        components: int,
        total: Optional[float] = None,
    ) -> "TimingReport":
        work = max(1, steps * nodes)
        total = timer.elapsed if total is None else total
        phases = {phase: timer.seconds.get(phase, 0.0) for phase in PHASES}
        # 分段時間總和不得超過總時間
        total = max(total, sum(phases.values()))
        return cls(
            **phases,
            total=total,
            steps=steps,
            remaps=remaps,
            mean_steps_between_remaps=mean_steps_between_remaps(steps, remaps),
            c_footpoint=phases["footpoints"] / work,
            c_interp=phases["interpolation"] / (work * max(1, components)),
            clamped_footpoints=timer.counters.get("clamped_footpoints", 0),
            saturations=timer.counters.get("saturations", 0),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.model_dump()])
