from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from pathlib import Path
from typing import Any

import jsonschema

from .consts import consts
from .errors import DataError, ValidationError


class Config(Mapping[str, Any]):
    """Flat key-value settings: packaged defaults, then a user file, then overrides."""

    def __init__(self, values: Mapping[str, Any]):
        self._values = dict(values)

    @staticmethod
    def _read(path: Path) -> dict[str, Any]:
        try:
            with open(path, encoding="utf-8") as file:
                data = json.load(file)
        except OSError as exc:
            raise DataError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"config file {path} must hold a JSON object")
        return data

    @classmethod
    def schema(cls) -> dict[str, Any]:
        return cls._read(consts.schema_path)

    @classmethod
    def defaults(cls) -> Config:
        return cls(cls._read(consts.config_path))

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> Config:
        values = cls._read(consts.config_path)
        if path is not None:
            values.update(cls._read(Path(path)))
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        config = cls(values)
        config.validate()
        return config

    def validate(self) -> None:
        try:
            jsonschema.validate(self._values, self.schema())
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "config"
            raise ValidationError(f"{where}: {exc.message}") from exc
        if 1440 % self._values["interval_minutes"]:
            raise ValidationError("interval_minutes must divide 1440")

    def replace(self, **changes: Any) -> Config:
        values = dict(self._values)
        values.update(changes)
        config = Config(values)
        config.validate()
        return config

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)
