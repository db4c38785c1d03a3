from __future__ import annotations

from typing import NamedTuple


class Tag(NamedTuple):
    """Version of a value: ordered by counter, ties broken by client id."""

    counter: int
    client_id: int

    def next_for(self, client_id: int) -> "Tag":
        return Tag(self.counter + 1, client_id)

    def __str__(self):
        return f"{self.counter}.{self.client_id}"

    @classmethod
    def parse(cls, text: str) -> "Tag":
        counter, client_id = text.split(".")
        return cls(int(counter), int(client_id))


ZERO_TAG = Tag(0, 0)
