"""Margin-gated reordering of the primary ranked list by secondary ranks.

Repeated bubble passes walk pairs ``(position i, position i+j)`` of the
working primary list. A pair is swapped when the secondary list disagrees
strongly enough: with ``a``/``b`` the 1-based secondary ranks of the two
objects, the swap fires iff ``a > b + alpha + j``. Larger ``alpha`` trusts
the primary list more; at ``alpha = eta`` the gap can never be exceeded
(``a - b <= eta - 1 < eta + j``), so the primary order survives untouched.

Objects missing from the secondary list take rank ``eta + 1``, treating them
as weakly dis-preferred without forcing swaps among themselves. Passes repeat
until none fires, with a hard cap of ``eta**2`` passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # circular at runtime: matcher imports fuse
    from .matcher import RankedList


@dataclass(frozen=True)
class FusionParams:
    alpha: int
    eta: int

    def __post_init__(self) -> None:
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if not 0 <= self.alpha <= self.eta:
            raise ValueError(f"alpha={self.alpha} out of range [0, {self.eta}]")


def fuse(v_pri: "RankedList", v_sec: "RankedList", params: FusionParams) -> "RankedList":
    """Reorder ``v_pri`` using ``v_sec`` ranks; entries keep their scores."""
    from .matcher import RankedList

    eta = params.eta
    alpha = params.alpha
    for name, lst in (("primary", v_pri), ("secondary", v_sec)):
        if len(lst) > eta:
            raise ValueError(f"{name} list length {len(lst)} exceeds eta={eta}")
        ids = lst.object_ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"{name} list is not object-deduplicated")

    sec_rank = {obj: pos for pos, obj in enumerate(v_sec.object_ids(), start=1)}
    absent = eta + 1
    working = list(v_pri.entries)
    n = len(working)

    for _ in range(eta * eta):
        swapped = False
        i = 1
        while i < eta / 2:
            j = 1
            while j <= eta - i:
                if i + j <= n:
                    a = sec_rank.get(working[i - 1].object_id, absent)
                    b = sec_rank.get(working[i + j - 1].object_id, absent)
                    if a > b + alpha + j:
                        working[i - 1], working[i + j - 1] = (
                            working[i + j - 1],
                            working[i - 1],
                        )
                        swapped = True
                j += 1
            i += 1
        if not swapped:
            break

    return RankedList(entries=tuple(working), eta=eta)
