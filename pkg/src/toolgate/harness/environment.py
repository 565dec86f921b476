"""Deterministic record-collection environment for harness runs.

All tool effects are field-level mutations on named collections, every
mutation is logged, and snapshot/restore is exact, so task success can be
judged by deep state equality and replay can be proven side-effect free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..values import Value, deep_copy


@dataclass(frozen=True)
class Mutation:
    collection: str
    key: str
    field: str
    old: Value
    new: Value


class Environment:
    def __init__(self, collections: dict[str, dict[str, dict]]):
        self.collections = deep_copy(collections)
        self.mutation_log: list[Mutation] = []

    @staticmethod
    def from_file(path: str | Path) -> "Environment":
        with open(path, "r", encoding="utf-8") as fh:
            return Environment(json.load(fh))

    def lookup(self, collection: str, key: Value) -> Optional[Value]:
        records = self.collections.get(collection)
        if records is None or not isinstance(key, str):
            return None
        record = records.get(key)
        return deep_copy(record) if record is not None else None

    def set_field(self, collection: str, key: str, field: str, value: Value) -> None:
        record = self.collections[collection][key]
        self.mutation_log.append(
            Mutation(collection, key, field, deep_copy(record.get(field)), deep_copy(value))
        )
        record[field] = deep_copy(value)

    def state(self) -> dict[str, dict[str, dict]]:
        return deep_copy(self.collections)

    def snapshot(self) -> dict[str, dict[str, dict]]:
        return self.state()

    def restore(self, snapshot: dict[str, dict[str, dict]]) -> None:
        self.collections = deep_copy(snapshot)
        self.mutation_log.clear()


class EnvironmentDataAccess:
    """Live read-only view of an Environment for predicate lookups."""

    def __init__(self, env: Environment):
        self.env = env

    def lookup(self, collection: str, key: Value) -> Optional[Value]:
        return self.env.lookup(collection, key)


class FixtureDataAccess:
    """Static collections loaded from a JSON fixture file.

    A fixture snapshot does not see upstream mutations; bind collections to
    read-only upstream tools when live state matters.
    """

    def __init__(self, collections: dict[str, dict[str, dict]]):
        self.collections = collections

    @staticmethod
    def from_file(path: str | Path) -> "FixtureDataAccess":
        with open(path, "r", encoding="utf-8") as fh:
            return FixtureDataAccess(json.load(fh))

    def lookup(self, collection: str, key: Value) -> Optional[Value]:
        records = self.collections.get(collection)
        if records is None or not isinstance(key, str):
            return None
        record = records.get(key)
        return deep_copy(record) if record is not None else None
