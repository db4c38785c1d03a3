from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class QuorumSystem:
    """Grid biquorum: rows are read quorums, columns are write quorums.

    Swapping the two classes (``rows_read=False``) gives the transposed
    configuration; every row still meets every column in one server.
    """

    grid: tuple[tuple[str, ...], ...]
    rows_read: bool = True

    @classmethod
    def from_servers(cls, servers: Sequence[str], rows: int = 3, cols: int = 3,
                     rows_read: bool = True) -> "QuorumSystem":
        if len(servers) != rows * cols:
            raise ValueError(f"need {rows * cols} servers for a {rows}x{cols} grid, "
                             f"got {len(servers)}")
        if len(set(servers)) != len(servers):
            raise ValueError("server ids must be distinct")
        grid = tuple(tuple(servers[r * cols:(r + 1) * cols]) for r in range(rows))
        return cls(grid, rows_read)

    @property
    def rows(self) -> list[tuple[str, ...]]:
        return list(self.grid)

    @property
    def columns(self) -> list[tuple[str, ...]]:
        return [tuple(row[c] for row in self.grid) for c in range(len(self.grid[0]))]

    @property
    def read_quorums(self) -> list[tuple[str, ...]]:
        return self.rows if self.rows_read else self.columns

    @property
    def write_quorums(self) -> list[tuple[str, ...]]:
        return self.columns if self.rows_read else self.rows

    @property
    def servers(self) -> list[str]:
        return [s for row in self.grid for s in row]

    def position(self, server: str) -> tuple[int, int]:
        for r, row in enumerate(self.grid):
            if server in row:
                return r, row.index(server)
        raise KeyError(server)

    def read_quorum_order(self, server: str) -> list[tuple[str, ...]]:
        """Read quorums to try from ``server``: its own first, then the rest in order."""
        return self._rotated(self.read_quorums, server)

    def write_quorum_order(self, server: str) -> list[tuple[str, ...]]:
        return self._rotated(self.write_quorums, server)

    @staticmethod
    def _rotated(quorums, server):
        start = next((i for i, q in enumerate(quorums) if server in q), 0)
        return quorums[start:] + quorums[:start]
