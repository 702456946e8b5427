"""Interconnect model of a simulated multi-device node.

Devices sit in PCIe domains, domains hang off I/O hubs (IOH).  Peer-to-peer
access only works between devices under the same IOH; anything else is staged
through host memory.  Every transfer the comm layer performs is accounted in a
:class:`TransferLedger` so that routing and scaling properties can be checked
on byte counts instead of wall-clock time.
"""

from __future__ import annotations

import enum
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from .errors import ConfigError, UsageError

HOST = "host"

Endpoint = Union[int, str]


class PathKind(enum.Enum):
    ON_DEVICE = "OnDevice"
    PEER_TO_PEER = "PeerToPeer"
    HOST_STAGED = "HostStaged"
    HOST_TO_DEVICE = "HostToDevice"
    DEVICE_TO_HOST = "DeviceToHost"

    def __str__(self) -> str:
        return self.value


# nominal throughput per path class in bytes/s; reporting metadata only
DEFAULT_BANDWIDTH = {
    PathKind.ON_DEVICE: 150e9,
    PathKind.PEER_TO_PEER: 5.0e9,
    PathKind.HOST_STAGED: 2.5e9,
    PathKind.HOST_TO_DEVICE: 5.5e9,
    PathKind.DEVICE_TO_HOST: 5.0e9,
}


@dataclass(frozen=True)
class Topology:
    """Immutable description of devices, PCIe domains and IOH groups.

    Parameters
    ----------
    device_count : int
        Number of devices in the node.
    pcie_domain_of : tuple of int
        Rank-indexed PCIe domain ids.
    ioh_of : tuple of int
        Domain-indexed IOH ids.
    """

    device_count: int
    pcie_domain_of: Tuple[int, ...]
    ioh_of: Tuple[int, ...]
    bandwidth: Dict[PathKind, float] = field(default_factory=lambda: dict(DEFAULT_BANDWIDTH), compare=False)

    def __post_init__(self):
        if self.device_count < 1:
            raise ConfigError("devices", "device count must be >= 1")
        if len(self.pcie_domain_of) != self.device_count:
            raise ConfigError(
                "pcie_domains",
                f"expected {self.device_count} domain ids, got {len(self.pcie_domain_of)}",
            )
        for d in self.pcie_domain_of:
            if d < 0 or d >= len(self.ioh_of):
                raise ConfigError("ioh", f"PCIe domain {d} has no IOH entry")

    @classmethod
    def single(cls, device_count: int) -> "Topology":
        """All devices in one PCIe domain under one IOH."""
        return cls(device_count, (0,) * device_count, (0,))

    @classmethod
    def octo(cls) -> "Topology":
        """The 8-device node: 2 IOHs x 2 PCIe domains x 2 devices."""
        return cls(8, (0, 0, 1, 1, 2, 2, 3, 3), (0, 0, 1, 1))

    @classmethod
    def from_text(cls, text: str) -> "Topology":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        unknown = set(values) - {"devices", "pcie_domains", "ioh"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown topology key")
        if "devices" not in values:
            raise ConfigError("devices", "missing")
        try:
            n = int(values["devices"])
        except ValueError:
            raise ConfigError("devices", f"not an integer: {values['devices']!r}") from None
        if "pcie_domains" not in values:
            return cls.single(n)
        domains = _int_list("pcie_domains", values["pcie_domains"])
        if "ioh" in values:
            ioh = _int_list("ioh", values["ioh"])
        else:
            ioh = (0,) * (max(domains) + 1)
        return cls(n, domains, ioh)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Topology":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return (
            f"devices = {self.device_count}\n"
            f"pcie_domains = {','.join(map(str, self.pcie_domain_of))}\n"
            f"ioh = {','.join(map(str, self.ioh_of))}\n"
        )

    def check_rank(self, rank: int) -> None:
        if not isinstance(rank, (int,)) or isinstance(rank, bool) or not 0 <= rank < self.device_count:
            raise UsageError(f"unknown device rank {rank!r} (topology has {self.device_count} devices)")

    def domain(self, rank: int) -> int:
        self.check_rank(rank)
        return self.pcie_domain_of[rank]

    def ioh(self, rank: int) -> int:
        return self.ioh_of[self.domain(rank)]

    def peer_accessible(self, a: int, b: int) -> bool:
        return self.ioh(a) == self.ioh(b)

    def resolve_path(self, src: Endpoint, dst: Endpoint) -> PathKind:
        if src == HOST and dst == HOST:
            raise UsageError("host-to-host transfers are not device transfers")
        if src == HOST:
            self.check_rank(dst)
            return PathKind.HOST_TO_DEVICE
        if dst == HOST:
            self.check_rank(src)
            return PathKind.DEVICE_TO_HOST
        self.check_rank(src)
        self.check_rank(dst)
        if src == dst:
            return PathKind.ON_DEVICE
        if self.peer_accessible(src, dst):
            return PathKind.PEER_TO_PEER
        return PathKind.HOST_STAGED

    def peer_sets(self, ranks: Iterable[int]) -> Dict[int, list]:
        """Group ``ranks`` by IOH, each group sorted ascending."""
        groups: Dict[int, list] = defaultdict(list)
        for r in sorted(ranks):
            groups[self.ioh(r)].append(r)
        return dict(sorted(groups.items()))


def _int_list(key: str, value: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {value!r}") from None


@dataclass
class LedgerTotals:
    bytes: int = 0
    count: int = 0


class TransferLedger:
    """Thread-safe accumulator of bytes moved, keyed by (src, dst, path kind)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: Dict[Tuple[Endpoint, Endpoint, PathKind], LedgerTotals] = {}
        self.host_combines = 0

    def record(self, src: Endpoint, dst: Endpoint, kind: PathKind, nbytes: int) -> None:
        if nbytes < 0:
            raise UsageError("transfer size must be non-negative")
        with self._lock:
            tot = self._entries.setdefault((src, dst, kind), LedgerTotals())
            tot.bytes += int(nbytes)
            tot.count += 1

    def note_host_combine(self) -> None:
        with self._lock:
            self.host_combines += 1

    def reset(self) -> None:
        with self._lock:
            self._entries.clear()
            self.host_combines = 0

    def entries(self):
        with self._lock:
            return {k: LedgerTotals(v.bytes, v.count) for k, v in self._entries.items()}

    def query(
        self,
        kind: Optional[PathKind] = None,
        *,
        src: Optional[Endpoint] = None,
        dst: Optional[Endpoint] = None,
        endpoint: Optional[Endpoint] = None,
    ) -> LedgerTotals:
        """Sum all records matching every given filter.

        ``endpoint`` matches records where it is either the source or the
        destination.
        """
        out = LedgerTotals()
        for (s, d, k), tot in self.entries().items():
            if kind is not None and k != kind:
                continue
            if src is not None and s != src:
                continue
            if dst is not None and d != dst:
                continue
            if endpoint is not None and endpoint not in (s, d):
                continue
            out.bytes += tot.bytes
            out.count += tot.count
        return out

    def cross_device_bytes(self) -> int:
        return sum(
            t.bytes
            for (_, _, k), t in self.entries().items()
            if k in (PathKind.PEER_TO_PEER, PathKind.HOST_STAGED)
        )

    def by_kind(self) -> Dict[PathKind, LedgerTotals]:
        return {k: self.query(k) for k in PathKind}
