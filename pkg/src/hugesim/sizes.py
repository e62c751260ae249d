"""Page size classes and address-space constants."""

from __future__ import annotations

import enum

FRAME_SHIFT = 12
FRAME_BYTES = 1 << FRAME_SHIFT
MAX_ORDER = 18
REGION_ORDER = MAX_ORDER
REGION_FRAMES = 1 << REGION_ORDER
LEAF_ORDER = 9
LEAF_PAGES = 1 << LEAF_ORDER

KB = 1 << 10
MB = 1 << 20
GB = 1 << 30


WALK_LEVELS = {0: 4, 9: 3, 18: 2}
LABELS = {0: "4KB", 9: "2MB", 18: "1GB"}


class PageSize(enum.IntEnum):
    """x86-64 page sizes. The value is the buddy order."""

    BASE_4K = 0
    LARGE_2M = 9
    HUGE_1G = 18

    @property
    def order(self) -> int:
        return int(self.value)

    @property
    def frames(self) -> int:
        return 1 << self.value

    @property
    def nbytes(self) -> int:
        return FRAME_BYTES << self.value

    @property
    def walk_levels(self) -> int:
        # 4 levels for 4KB, one fewer per larger size
        return WALK_LEVELS[self._value_]

    @property
    def label(self) -> str:
        return LABELS[self._value_]

    @classmethod
    def parse(cls, text: str | int | "PageSize") -> "PageSize":
        if isinstance(text, PageSize):
            return text
        if isinstance(text, int):
            return cls(text)
        key = text.strip().upper()
        for size in cls:
            if key in (size.label, size.name, str(size.value)):
                return size
        raise ValueError(f"unknown page size {text!r}")


ALL_SIZES = (PageSize.BASE_4K, PageSize.LARGE_2M, PageSize.HUGE_1G)


def align_down(value: int, order: int) -> int:
    return value & ~((1 << order) - 1)


def is_aligned(value: int, order: int) -> bool:
    return value & ((1 << order) - 1) == 0
