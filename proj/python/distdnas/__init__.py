"""Python front end for the distdnas native core.

Configs and results are plain dicts; the native module exchanges them as
JSON text.
"""

from __future__ import annotations

import json
from typing import Any

from . import _core
from ._core import ConfigError, DivergenceError, Error, IoError, ParseError

__all__ = [
    "ConfigError",
    "DivergenceError",
    "Error",
    "IoError",
    "ParseError",
    "Pipeline",
    "auc",
    "config_hash",
    "count_flops",
    "default_config",
    "discretize",
    "log_loss",
    "normalized_entropy",
    "resolve_config",
    "synthetic_day_summary",
]


def default_config() -> dict[str, Any]:
    return json.loads(_core.default_config())


def resolve_config(config: dict[str, Any]) -> dict[str, Any]:
    return json.loads(_core.resolve_config(json.dumps(config)))


def config_hash(config: dict[str, Any]) -> str:
    return _core.config_hash(json.dumps(config))


def log_loss(p, y) -> float:
    return _core.log_loss(list(p), list(y))


def auc(scores, y) -> float:
    return _core.auc(list(scores), list(y))


def normalized_entropy(p, y) -> float:
    return _core.normalized_entropy(list(p), list(y))


def count_flops(arch: dict[str, Any], supernet: dict[str, Any], stacks: int = 1) -> dict[str, int]:
    return json.loads(_core.count_flops(json.dumps(arch), json.dumps(supernet), stacks))


def discretize(arch: dict[str, Any], theta: float) -> dict[str, Any]:
    return json.loads(_core.discretize(json.dumps(arch), theta))


def synthetic_day_summary(synth: dict[str, Any], day: int) -> dict[str, Any]:
    return json.loads(_core.synthetic_day_summary(json.dumps(synth), day))


class Pipeline:
    """Artifact-producing stages writing into ``config["out"]``."""

    def __init__(self, config: dict[str, Any]):
        self._p = _core.Pipeline(json.dumps(config))

    @property
    def config(self) -> dict[str, Any]:
        return json.loads(self._p.config())

    def synth(self) -> None:
        self._p.synth()

    def importance(self) -> dict[str, Any]:
        return json.loads(self._p.importance())

    def search(self) -> dict[str, Any]:
        return json.loads(self._p.search())

    def discretize(self) -> str:
        return self._p.discretize()

    def train(self) -> dict[str, Any]:
        return json.loads(self._p.train())

    def eval(self) -> dict[str, Any]:
        return json.loads(self._p.eval())

    def recurring(self) -> list[dict[str, Any]]:
        return json.loads(self._p.recurring())

    def frontier(self) -> str:
        return self._p.frontier()

    def write_manifest(self, command: str) -> None:
        self._p.write_manifest(command)

    def artifacts(self) -> dict[str, str]:
        return dict(self._p.artifacts())
