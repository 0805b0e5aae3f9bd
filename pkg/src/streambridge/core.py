"""Shared domain types: stream keys, endpoint addresses, and rank grouping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_PORT = 6379


class InvalidArgument(ValueError):
    pass


class StreamKeyError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"malformed stream key {key!r}: {reason}")
        self.key = key


def _check_field_name(field_name: str) -> None:
    if not isinstance(field_name, str) or not field_name:
        raise InvalidArgument("field_name must be a nonempty string")
    if ":" in field_name:
        raise InvalidArgument(f"field_name {field_name!r} must not contain ':'")


def assign_group(rank: int, world_size: int, num_endpoints: int) -> int:
    """Map a rank to its endpoint group.

    Groups are contiguous rank blocks whose sizes differ by at most one;
    ``floor(rank * num_endpoints / world_size)``.
    """
    if world_size < 1:
        raise InvalidArgument(f"world_size must be >= 1, got {world_size}")
    if not 0 <= rank < world_size:
        raise InvalidArgument(f"rank {rank} outside [0, {world_size})")
    if not 1 <= num_endpoints <= world_size:
        raise InvalidArgument(
            f"num_endpoints must be in [1, {world_size}], got {num_endpoints}"
        )
    return rank * num_endpoints // world_size


def make_stream_key(field_name: str, rank: int) -> str:
    _check_field_name(field_name)
    if isinstance(rank, bool) or not isinstance(rank, int) or rank < 0:
        raise InvalidArgument(f"rank must be a non-negative integer, got {rank!r}")
    return f"{field_name}:{rank}"


def parse_stream_key(key: str) -> tuple[str, int]:
    if key.count(":") != 1:
        raise StreamKeyError(key, "expected exactly one ':'")
    name, rank_text = key.split(":")
    if not name:
        raise StreamKeyError(key, "empty field name")
    if not rank_text or not rank_text.isascii() or not rank_text.isdigit():
        raise StreamKeyError(key, "rank is not a decimal integer")
    rank = int(rank_text)
    # reject "p:007" so that make/parse stays a bijection
    if str(rank) != rank_text:
        raise StreamKeyError(key, "rank has leading zeros")
    return name, rank


@dataclass(frozen=True)
class EndpointAddress:
    host: str
    port: int = DEFAULT_PORT

    def __post_init__(self):
        if not self.host:
            raise InvalidArgument("endpoint host must be nonempty")
        if not 1 <= self.port <= 65535:
            raise InvalidArgument(f"port {self.port} outside [1, 65535]")

    @classmethod
    def parse(cls, text: str) -> "EndpointAddress":
        text = text.strip()
        host, sep, port = text.rpartition(":")
        if not sep:
            return cls(text)
        try:
            return cls(host, int(port))
        except ValueError as exc:
            raise InvalidArgument(f"bad endpoint address {text!r}") from exc

    def __str__(self):
        return f"{self.host}:{self.port}"


def parse_endpoint_list(text: str) -> list[EndpointAddress]:
    """Parse ``host:port,host:port`` into addresses."""
    items = [item for item in text.split(",") if item.strip()]
    if not items:
        raise InvalidArgument("endpoint list is empty")
    return [EndpointAddress.parse(item) for item in items]


@dataclass(frozen=True)
class FieldDescriptor:
    field_name: str
    rank: int
    world_size: int
    element_count: int

    def __post_init__(self):
        _check_field_name(self.field_name)
        if self.world_size < 1:
            raise InvalidArgument("world_size must be >= 1")
        if not 0 <= self.rank < self.world_size:
            raise InvalidArgument(f"rank {self.rank} outside [0, {self.world_size})")
        if self.element_count < 1:
            raise InvalidArgument("element_count must be >= 1")

    @property
    def stream_key(self) -> str:
        return make_stream_key(self.field_name, self.rank)


@dataclass(frozen=True)
class GroupMap:
    world_size: int
    endpoints: tuple[EndpointAddress, ...]

    def __init__(self, world_size: int, endpoints: Sequence[EndpointAddress]):
        endpoints = tuple(endpoints)
        if world_size < 1:
            raise InvalidArgument("world_size must be >= 1")
        if not 1 <= len(endpoints) <= world_size:
            raise InvalidArgument(
                f"need between 1 and {world_size} endpoints, got {len(endpoints)}"
            )
        object.__setattr__(self, "world_size", world_size)
        object.__setattr__(self, "endpoints", endpoints)

    def group_of(self, rank: int) -> int:
        return assign_group(rank, self.world_size, len(self.endpoints))

    def endpoint_for(self, rank: int) -> EndpointAddress:
        return self.endpoints[self.group_of(rank)]

    def members(self, group_id: int) -> range:
        ranks = [r for r in range(self.world_size) if self.group_of(r) == group_id]
        return range(ranks[0], ranks[-1] + 1) if ranks else range(0)


@dataclass(eq=False)
class StreamRecord:
    """One timestep of one stream's field data.

    ``produced_at`` is a ``time.monotonic_ns()`` reading. Equality compares
    payloads bit-for-bit so NaN payloads round-trip as equal.
    """

    stream_key: str
    step: int
    payload: np.ndarray
    produced_at: int = 0

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float64)
        if self.payload.ndim != 1:
            raise InvalidArgument("payload must be one-dimensional")
        if self.step < 0:
            raise InvalidArgument("step must be >= 0")

    def __eq__(self, other):
        if not isinstance(other, StreamRecord):
            return NotImplemented
        return (
            self.stream_key == other.stream_key
            and self.step == other.step
            and self.produced_at == other.produced_at
            and self.payload.tobytes() == other.payload.tobytes()
        )

    def __repr__(self):
        return (
            f"StreamRecord({self.stream_key!r}, step={self.step}, "
            f"n={self.payload.size}, produced_at={self.produced_at})"
        )
