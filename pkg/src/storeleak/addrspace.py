"""Virtual/physical address spaces backed by a binary buddy allocator.

Physical memory is modeled as bare frame numbers; no data bytes are stored.
The allocator hands out 4 kB pages under three policies (contiguous,
fragmented, mixed) and supports utilization churn so that fragmentation
experiments behave like a long-running system: blocks are filled and freed
at seeded random positions, and buddy coalescing is the only way free
space ever merges back together.

The ``pagemap_*`` methods form the privileged oracle. Attack code must
never call them; they exist so tests can verify what the timing channel
recovered. ``translate`` is different: it models the hardware TLB walk and
is used by the pipeline simulator itself.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from .errors import InvalidConfigError, OutOfMemoryError, PageFaultError

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
ALIAS_BITS = 20
ALIAS_MASK = (1 << ALIAS_BITS) - 1


@dataclass(frozen=True)
class PhysicalAddress:
    value: int

    def page_offset(self) -> int:
        return self.value & (PAGE_SIZE - 1)

    def frame(self) -> int:
        return self.value >> PAGE_SHIFT

    def alias20(self) -> int:
        """The 20 low address bits, i.e. the quantity the timing channel leaks."""
        return self.value & ALIAS_MASK


@dataclass(frozen=True)
class VirtualAddress:
    value: int

    def page_offset(self) -> int:
        return self.value & (PAGE_SIZE - 1)

    def vpn(self) -> int:
        return self.value >> PAGE_SHIFT


class PolicyKind(enum.Enum):
    CONTIGUOUS = "contiguous"
    FRAGMENTED = "fragmented"
    MIXED = "mixed"


@dataclass(frozen=True)
class AllocPolicy:
    kind: PolicyKind
    seed: int = 0
    # Fraction of pages served as physically consecutive runs under MIXED.
    contiguous_fraction: float = 0.5
    # Run-length bounds (pages) for the MIXED policy segments.
    contiguous_run_pages: tuple[int, int] = (1024, 3072)
    fragmented_run_pages: tuple[int, int] = (128, 768)

    @staticmethod
    def contiguous(seed: int = 0) -> "AllocPolicy":
        return AllocPolicy(PolicyKind.CONTIGUOUS, seed)

    @staticmethod
    def fragmented(seed: int = 0) -> "AllocPolicy":
        return AllocPolicy(PolicyKind.FRAGMENTED, seed)

    @staticmethod
    def mixed(seed: int = 0, fraction: float = 0.5) -> "AllocPolicy":
        return AllocPolicy(PolicyKind.MIXED, seed, contiguous_fraction=fraction)


class _BuddyAllocator:
    """Binary buddy allocator over ``frames`` 4 kB frames.

    Free lists are kept per order as swap-pop lists with a position index so
    random picks and removals stay O(1). Blocks are always power-of-two
    sized and aligned to their size.
    """

    def __init__(self, frames: int):
        self.frames = frames
        self.max_order = frames.bit_length() - 1
        self._free: list[list[int]] = [[] for _ in range(self.max_order + 1)]
        self._pos: list[dict[int, int]] = [{} for _ in range(self.max_order + 1)]
        self.free_frames = frames
        # Cover [0, frames) with maximal aligned blocks.
        start = 0
        remaining = frames
        while remaining:
            order = remaining.bit_length() - 1
            while start & ((1 << order) - 1):
                order -= 1
            self._push(order, start)
            start += 1 << order
            remaining -= 1 << order

    # -- free-list primitives -------------------------------------------

    def _push(self, order: int, start: int) -> None:
        lst = self._free[order]
        self._pos[order][start] = len(lst)
        lst.append(start)

    def _remove(self, order: int, start: int) -> None:
        lst = self._free[order]
        pos = self._pos[order]
        i = pos.pop(start)
        last = lst.pop()
        if last != start:
            lst[i] = last
            pos[last] = i

    def _is_free(self, order: int, start: int) -> bool:
        return start in self._pos[order]

    def free_blocks(self) -> list[tuple[int, int]]:
        """All free blocks as (start, n_frames), unsorted."""
        out = []
        for order, lst in enumerate(self._free):
            size = 1 << order
            out.extend((s, size) for s in lst)
        return out

    # -- allocation ------------------------------------------------------

    def alloc(self, order: int, rng: random.Random | None = None) -> int:
        """Allocate a block of 2**order frames.

        Splits the smallest sufficient block; picks the lowest-addressed
        candidate, or a seeded-random one when ``rng`` is given.
        """
        for o in range(order, self.max_order + 1):
            if self._free[o]:
                lst = self._free[o]
                if rng is None:
                    start = min(lst)
                else:
                    start = lst[rng.randrange(len(lst))]
                self._remove(o, start)
                while o > order:
                    o -= 1
                    self._push(o, start + (1 << o))
                self.free_frames -= 1 << order
                return start
        raise OutOfMemoryError(f"no free block of order {order}")

    def alloc_at(self, start: int, order: int) -> None:
        """Carve the specific aligned block [start, start + 2**order) out of
        whatever free block contains it."""
        for o in range(order, self.max_order + 1):
            cand = start & ~((1 << o) - 1)
            if self._is_free(o, cand):
                self._remove(o, cand)
                while o > order:
                    o -= 1
                    half = 1 << o
                    if start & half:
                        self._push(o, cand)
                        cand += half
                    else:
                        self._push(o, cand + half)
                self.free_frames -= 1 << order
                return
        raise OutOfMemoryError(f"block at frame {start} order {order} is not free")

    def alloc_frame_anywhere(self, rng: random.Random) -> int:
        """Allocate one frame chosen uniformly over all free frames."""
        if self.free_frames == 0:
            raise OutOfMemoryError("no free frames")
        target = rng.randrange(self.free_frames)
        acc = 0
        for order, lst in enumerate(self._free):
            span = len(lst) << order
            if target < acc + span:
                idx = (target - acc) >> order
                offset = (target - acc) & ((1 << order) - 1)
                frame = lst[idx] + offset
                self.alloc_at(frame, 0)
                return frame
            acc += span
        raise AssertionError("free frame accounting out of sync")

    def largest_free_block(self) -> tuple[int, int] | None:
        for order in range(self.max_order, -1, -1):
            if self._free[order]:
                return min(self._free[order]), order
        return None

    def free(self, start: int, order: int) -> None:
        """Return a block and coalesce with its buddy as far as possible."""
        self.free_frames += 1 << order
        while order < self.max_order:
            buddy = start ^ (1 << order)
            if buddy + (1 << order) > self.frames or not self._is_free(order, buddy):
                break
            self._remove(order, buddy)
            start = min(start, buddy)
            order += 1
        self._push(order, start)

    def largest_free_run_interval(self) -> tuple[int, int] | None:
        """Longest run of consecutive free frames (merging adjacent blocks),
        as (start, n_frames). Lowest start wins ties."""
        runs = _merge_runs(self.free_blocks())
        if not runs:
            return None
        return max(runs, key=lambda r: (r[1], -r[0]))

    def largest_free_run(self) -> int:
        interval = self.largest_free_run_interval()
        return interval[1] if interval else 0


def _merge_runs(blocks: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Merge adjacent (start, n_frames) blocks into maximal free runs."""
    if not blocks:
        return []
    blocks = sorted(blocks)
    runs = []
    cur_start, cur_len = blocks[0]
    for start, size in blocks[1:]:
        if start == cur_start + cur_len:
            cur_len += size
        else:
            runs.append((cur_start, cur_len))
            cur_start, cur_len = start, size
    runs.append((cur_start, cur_len))
    return runs


def _binary_runs(start: int, n: int) -> list[tuple[int, int]]:
    """Split the frame run [start, start+n) into aligned power-of-two blocks."""
    out = []
    pos = start
    left = n
    while left:
        align = pos & -pos
        if pos == 0:
            align = 1 << left.bit_length()
        size = 1 << (left.bit_length() - 1)
        size = min(size, align)
        # Greedy from the left keeps every piece aligned to its own size.
        while size > left:
            size >>= 1
        out.append((pos, size.bit_length() - 1))
        pos += size
        left -= size
    return out


# Utilization churn parameters, frozen from scripts/calibrate_utilization.py.
#
# Regular churn allocates small blocks (weighted orders) and frees some of
# them again. Two long-lived-workload effects are layered on top:
#
# * pin bursts: a transient bulk fill sweeps the largest free run and
#   leaves behind single-frame pins every _PIN_STRIDE frames, destroying
#   that run's continuity in one atomic event. Burst probability scales
#   with occupancy squared, so a lightly used system keeps its large runs.
# * demand tail: before returning, medium free runs (large enough to hold
#   a row-hammer target, too small to survive real allocation pressure)
#   are consumed the same way. Free runs therefore end up bimodal: crumbs
#   below _DEMAND_TAIL_MIN_RUN or intact runs above _DEMAND_TAIL_MAX_RUN.
_CHURN_ORDERS = (0, 1, 2, 3, 4)
_CHURN_ORDER_WEIGHTS = (8, 6, 4, 2, 1)
_CHURN_FREE_P = 0.25
# Burst hazard per allocated frame fraction, scaled by occupancy^2 so a
# lightly loaded system almost never loses its large runs. Expected bursts
# while filling to utilization U are ~ rate * U^4 / 4 independent of the
# space size.
_CHURN_BURST_RATE = 25.0
_PIN_STRIDE = 64
_DEMAND_TAIL_MIN_RUN = 130
_DEMAND_TAIL_MAX_RUN = 1024


class AddressSpace:
    """A single task's virtual address space over simulated physical memory."""

    def __init__(self, frames: int, seed: int = 0):
        if frames < 1:
            raise InvalidConfigError("physical_frame_count must be >= 1")
        self.physical_frame_count = frames
        self.seed = seed
        self._buddy = _BuddyAllocator(frames)
        self._mapping: dict[int, int] = {}
        self._pages: list[VirtualAddress] = []
        self._next_vpn = 0
        self._rng = random.Random(seed)
        # Allocation groups so a probe allocation can be freed wholesale.
        self._groups: dict[int, tuple[list[int], list[tuple[int, int]]]] = {}
        self._churn_blocks: list[tuple[int, int]] = []

    # -- basic queries ----------------------------------------------------

    @property
    def pages(self) -> list[VirtualAddress]:
        """All mapped pages, in allocation order."""
        return self._pages

    @property
    def free_frames(self) -> int:
        return self._buddy.free_frames

    @property
    def utilization(self) -> float:
        return 1.0 - self._buddy.free_frames / self.physical_frame_count

    def translate(self, va: VirtualAddress) -> PhysicalAddress:
        """Hardware page-table walk. Offset bits pass through untranslated."""
        pfn = self._mapping.get(va.vpn())
        if pfn is None:
            raise PageFaultError(f"vpn {va.vpn():#x} is not mapped")
        return PhysicalAddress((pfn << PAGE_SHIFT) | va.page_offset())

    # -- allocation -------------------------------------------------------

    def _map_frames(self, frames: list[int]) -> list[VirtualAddress]:
        vas = []
        for pfn in frames:
            vpn = self._next_vpn
            self._next_vpn += 1
            self._mapping[vpn] = pfn
            va = VirtualAddress(vpn << PAGE_SHIFT)
            self._pages.append(va)
            vas.append(va)
        return vas

    def _alloc_contiguous_frames(self, n: int) -> tuple[list[int], list[tuple[int, int]]]:
        """Serve n frames from the largest free runs first."""
        frames: list[int] = []
        blocks: list[tuple[int, int]] = []
        runs = sorted(_merge_runs(self._buddy.free_blocks()),
                      key=lambda r: (-r[1], r[0]))
        for start, length in runs:
            if len(frames) >= n:
                break
            take = min(n - len(frames), length)
            for bstart, border in _binary_runs(start, take):
                self._buddy.alloc_at(bstart, border)
                blocks.append((bstart, border))
            frames.extend(range(start, start + take))
        if len(frames) < n:
            raise OutOfMemoryError(f"allocating {n} pages: memory exhausted")
        return frames, blocks

    def _alloc_fragmented_frames(self, n: int, rng: random.Random) -> tuple[list[int], list[tuple[int, int]]]:
        frames = []
        blocks = []
        for _ in range(n):
            f = self._buddy.alloc_frame_anywhere(rng)
            frames.append(f)
            blocks.append((f, 0))
        return frames, blocks

    def alloc_pages(self, n: int, policy: AllocPolicy) -> list[VirtualAddress]:
        """Map n fresh virtual pages according to the allocation policy."""
        if n < 1:
            raise InvalidConfigError("page count must be >= 1")
        if n > self._buddy.free_frames:
            raise OutOfMemoryError(
                f"requested {n} pages, only {self._buddy.free_frames} frames free")
        rng = random.Random(policy.seed)
        frames: list[int] = []
        blocks: list[tuple[int, int]] = []
        if policy.kind is PolicyKind.CONTIGUOUS:
            frames, blocks = self._alloc_contiguous_frames(n)
        elif policy.kind is PolicyKind.FRAGMENTED:
            frames, blocks = self._alloc_fragmented_frames(n, rng)
        else:
            while len(frames) < n:
                left = n - len(frames)
                if rng.random() < policy.contiguous_fraction:
                    run = rng.randint(*policy.contiguous_run_pages)
                    f, b = self._alloc_contiguous_frames(min(run, left))
                else:
                    run = rng.randint(*policy.fragmented_run_pages)
                    f, b = self._alloc_fragmented_frames(min(run, left), rng)
                frames.extend(f)
                blocks.extend(b)
        vas = self._map_frames(frames)
        self._groups[vas[0].vpn()] = ([va.vpn() for va in vas], blocks)
        return vas

    def free_pages(self, vas: list[VirtualAddress]) -> None:
        """Release a whole allocation previously returned by alloc_pages."""
        key = vas[0].vpn()
        if key not in self._groups:
            raise InvalidConfigError("free_pages expects the list returned by alloc_pages")
        vpns, blocks = self._groups.pop(key)
        if vpns != [va.vpn() for va in vas]:
            self._groups[key] = (vpns, blocks)
            raise InvalidConfigError("free_pages expects the exact allocation group")
        for vpn in vpns:
            del self._mapping[vpn]
        vpn_set = set(vpns)
        self._pages = [p for p in self._pages if p.vpn() not in vpn_set]
        for start, order in blocks:
            self._buddy.free(start, order)

    # -- utilization churn --------------------------------------------------

    def _free_random_churn_block(self, rng: random.Random) -> int:
        i = rng.randrange(len(self._churn_blocks))
        start, order = self._churn_blocks[i]
        self._churn_blocks[i] = self._churn_blocks[-1]
        self._churn_blocks.pop()
        self._buddy.free(start, order)
        return 1 << order

    def _pin_run(self, start: int, length: int) -> int:
        """Leave single-frame pins every _PIN_STRIDE frames across a free run,
        breaking it into sub-threshold crumbs. Returns frames consumed."""
        taken = 0
        for frame in range(start, start + length, _PIN_STRIDE):
            try:
                self._buddy.alloc_at(frame, 0)
            except OutOfMemoryError:
                continue
            self._churn_blocks.append((frame, 0))
            taken += 1
        return taken

    def _demand_tail(self) -> int:
        """Consume medium free runs, as sustained allocation pressure would."""
        taken = 0
        for start, length in _merge_runs(self._buddy.free_blocks()):
            if _DEMAND_TAIL_MIN_RUN <= length < _DEMAND_TAIL_MAX_RUN:
                taken += self._pin_run(start, length)
        return taken

    def set_utilization(self, fraction: float, seed: int = 0) -> None:
        """Fill or free random churn blocks until occupancy is within 1%.

        Buddy merging is the only coalescing, so raising utilization and
        lowering it again leaves the free lists fragmented.
        """
        if not 0.0 <= fraction <= 1.0:
            raise InvalidConfigError("utilization fraction must be in [0, 1]")
        rng = random.Random(seed)
        n = self.physical_frame_count
        target = round(fraction * n)
        tol = max(1, n // 100)
        occupied = n - self._buddy.free_frames

        if target == 0:
            while self._churn_blocks:
                self._free_random_churn_block(rng)
            return

        while occupied < target - tol:
            if self._churn_blocks and rng.random() < _CHURN_FREE_P:
                occupied -= self._free_random_churn_block(rng)
                continue
            order = rng.choices(_CHURN_ORDERS, weights=_CHURN_ORDER_WEIGHTS)[0]
            try:
                start = self._buddy.alloc(order, rng)
            except OutOfMemoryError:
                start = self._buddy.alloc_frame_anywhere(rng)
                order = 0
            self._churn_blocks.append((start, order))
            occupied += 1 << order
            pressure = occupied / n
            hazard = _CHURN_BURST_RATE * pressure ** 3 * (1 << order) / n
            if rng.random() < hazard:
                run = self._buddy.largest_free_run_interval()
                if run is not None and run[1] >= _DEMAND_TAIL_MIN_RUN:
                    occupied += self._pin_run(*run)

        # Interleave the demand tail with downward adjustment: freeing blocks
        # can expose fresh medium runs, and the tail pins must not push the
        # occupancy outside the tolerance.
        for _ in range(4):
            while occupied > target + tol and self._churn_blocks:
                occupied -= self._free_random_churn_block(rng)
            added = self._demand_tail()
            occupied += added
            if occupied <= target + tol:
                break

    def largest_contiguous_run(self) -> int:
        """Oracle-side: exact longest free run, in frames."""
        return self._buddy.largest_free_run()

    def free_block_snapshot(self) -> list[tuple[int, int]]:
        """Oracle-side: all free (start, n_frames) blocks, sorted."""
        return sorted(self._buddy.free_blocks())

    # -- privileged pagemap oracle (tests/verification only) ---------------

    def pagemap_frame(self, va: VirtualAddress) -> int:
        pfn = self._mapping.get(va.vpn())
        if pfn is None:
            raise PageFaultError(f"vpn {va.vpn():#x} is not mapped")
        return pfn

    def pagemap_items(self) -> list[tuple[int, int]]:
        return sorted(self._mapping.items())

    def pagemap_csv(self, fileobj) -> None:
        fileobj.write("vpn,pfn\n")
        for vpn, pfn in self.pagemap_items():
            fileobj.write(f"{vpn},{pfn}\n")


def new_address_space(frames: int, seed: int = 0) -> AddressSpace:
    if frames < 1:
        raise InvalidConfigError("physical_frame_count must be >= 1")
    return AddressSpace(frames, seed)
