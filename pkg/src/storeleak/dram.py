"""DRAM bank mapping, the row-conflict timing channel, contiguous-memory
detection, and the double-sided row-hammer pipeline.

Bank/rank/channel selection is folded into one bank index computed by XOR
masks over physical-address bits. Masks never touch bits 18..19, so moving
one row offset (256 kB) forward stays in the same bank and rows fill banks
sequentially; upper mask bits beyond the 20 leaked ones carry the residual
entropy ``n`` that drives co-location probability. The exact mask layout is
configuration, not behavior: co-location depends only on ``n``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .addrspace import AddressSpace, AllocPolicy, PhysicalAddress, VirtualAddress
from .errors import AttackInfeasibleError, InvalidConfigError
from .leak import DEFAULT_WINDOW, TimingTrace, _scan_pages, detect_peaks
from .mob import Mob

ROW_HIT_CYCLES = 200.0
ROW_CONFLICT_CYCLES = 300.0  # paper-anchored: ~100 cycles above a hit
ROW_ACTIVATION_CYCLES = 250.0
SAME_BANK_THRESHOLD = 0.5 * (ROW_HIT_CYCLES + ROW_CONFLICT_CYCLES)

ALIAS_PERIOD_PAGES = 256  # 2^20 / 4 kB


def make_bank_masks(unknown_bits: int, bank_bits: int = 4) -> tuple[int, ...]:
    """XOR masks realizing ``unknown_bits`` of entropy above bit 20.

    Low contributions come from bits 6..17 only, keeping bits 18..19 (the
    row index of a 256 kB row offset) out of the hash.
    """
    if not 0 <= unknown_bits <= bank_bits:
        raise InvalidConfigError("unknown_bits must be within the bank index width")
    low_pairs = ((6, 13), (7, 14), (8, 15), (9, 16), (10, 17))
    masks = []
    for j in range(bank_bits):
        mask = 0
        for bit in low_pairs[j % len(low_pairs)]:
            mask |= 1 << bit
        if j < unknown_bits:
            mask |= 1 << (20 + j)
        masks.append(mask)
    return tuple(masks)


@dataclass(frozen=True)
class DramGeometry:
    name: str
    mapping_masks: tuple[int, ...]
    mapping_bits_total: int
    row_size_bytes: int = 8192
    row_offset_bytes: int = 262144

    def __post_init__(self):
        if self.row_offset_bytes & (self.row_offset_bytes - 1):
            raise InvalidConfigError("row_offset_bytes must be a power of two")
        for mask in self.mapping_masks:
            if mask & (0b11 << 18):
                raise InvalidConfigError(
                    "bank masks must not use bits 18..19 (rows are sequential per bank)")
        rank = 0
        basis: list[int] = []
        for mask in self.mapping_masks:
            row = mask >> 20 << 20
            for b in basis:
                row = min(row, row ^ b)
            if row:
                basis.append(row)
                rank += 1
        if rank != self.unknown_bits:
            raise InvalidConfigError(
                f"masks carry {rank} unknown upper bits, config says {self.unknown_bits}")

    @property
    def unknown_bits(self) -> int:
        return max(0, self.mapping_bits_total - 20)

    @property
    def banks(self) -> int:
        return 1 << len(self.mapping_masks)


def bank_of(geometry: DramGeometry, pa: PhysicalAddress) -> int:
    bank = 0
    for bit, mask in enumerate(geometry.mapping_masks):
        bank |= ((pa.value & mask).bit_count() & 1) << bit
    return bank


def row_of(geometry: DramGeometry, pa: PhysicalAddress) -> int:
    return pa.value // geometry.row_offset_bytes


@dataclass
class RowBufferState:
    """Per-bank open row; at most one row is open per bank."""

    open_rows: dict[int, int] = field(default_factory=dict)

    def reset(self) -> None:
        self.open_rows.clear()


def access_timed(state: RowBufferState, geometry: DramGeometry,
                 pa: PhysicalAddress) -> float:
    """Simulated access latency through the row buffer; updates the open row."""
    bank = bank_of(geometry, pa)
    row = row_of(geometry, pa)
    opened = state.open_rows.get(bank)
    if opened == row:
        cycles = ROW_HIT_CYCLES
    elif opened is None:
        cycles = ROW_ACTIVATION_CYCLES
    else:
        cycles = ROW_CONFLICT_CYCLES
    state.open_rows[bank] = row
    return cycles


def same_bank_probe(state: RowBufferState, geometry: DramGeometry,
                    pa_a: PhysicalAddress, pa_b: PhysicalAddress) -> bool:
    """Attack-side bank co-location test via row-conflict timing.

    Alternating accesses keep evicting each other's row iff the addresses
    share a bank (in different rows), which shows as the conflict latency.
    """
    access_timed(state, geometry, pa_a)
    access_timed(state, geometry, pa_b)
    t = access_timed(state, geometry, pa_a)
    return t >= SAME_BANK_THRESHOLD


def colocation_probability(geometry: DramGeometry, space: AddressSpace,
                           trials: int, seed: int = 0) -> float:
    """Empirical probability that two 20-bit-aliased pages share a bank."""
    if trials < 1:
        raise InvalidConfigError("trials must be >= 1")
    rng = random.Random(seed)
    frames = space.physical_frame_count
    hits = 0
    state = RowBufferState()
    for _ in range(trials):
        while True:
            f1 = rng.randrange(frames)
            f2 = (rng.randrange(max(1, frames >> 8)) << 8) | (f1 & 0xFF)
            if f1 >> 6 != f2 >> 6:  # different rows, or the probe sees a hit
                break
        state.reset()
        if same_bank_probe(state, geometry,
                           PhysicalAddress(f1 << 12), PhysicalAddress(f2 << 12)):
            hits += 1
    return hits / trials


# -- contiguous-memory detection ------------------------------------------------


@dataclass
class ContiguousRegion:
    start_page: int
    length_pages: int
    peak_pages: list[int]


def detect_contiguous(trace: TimingTrace, min_peaks: int = 3,
                      spacing: int = ALIAS_PERIOD_PAGES,
                      threshold: float = 200.0) -> list[ContiguousRegion]:
    """Report page regions whose aliasing peaks repeat at exactly the
    20-bit period: physically contiguous memory produces one peak every
    ``spacing`` pages, fragmented memory does not."""
    peaks = detect_peaks(trace, threshold=threshold).peak_pages
    regions: list[ContiguousRegion] = []
    chain = [peaks[0]] if peaks else []
    for prev, cur in zip(peaks, peaks[1:]):
        if cur - prev == spacing:
            chain.append(cur)
        else:
            if len(chain) >= min_peaks:
                regions.append(ContiguousRegion(chain[0], chain[-1] - chain[0] + 1,
                                                list(chain)))
            chain = [cur]
    if len(chain) >= min_peaks:
        regions.append(ContiguousRegion(chain[0], chain[-1] - chain[0] + 1, list(chain)))
    return regions


# -- bit-flip model and the hammer pipeline --------------------------------------


@dataclass(frozen=True)
class FlipModel:
    """Threshold-plus-linear flip response, deterministic under the seed.

    No cell flips below ``threshold_hammers``. Beyond it, each susceptible
    cell flips once its fixed per-cell draw falls under
    ``susceptible_fraction * min(1, per_cell_flip_rate * excess)``, which
    plateaus once the excess saturates the rate.
    """

    threshold_hammers: int = 50_000_000
    per_cell_flip_rate: float = 2.2e-9
    susceptible_fraction: float = 2e-3
    seed: int = 0

    def flip_probability(self, hammers: int) -> float:
        excess = max(0, hammers - self.threshold_hammers)
        return self.susceptible_fraction * min(1.0, self.per_cell_flip_rate * excess)

    def sample_flips(self, row: int, row_bits: int, hammers: int) -> list["FlipEvent"]:
        p = self.flip_probability(hammers)
        if p <= 0.0:
            return []
        rng = random.Random((self.seed << 24) ^ row)
        flips = []
        for bit in range(row_bits):
            u = rng.random()
            direction = "0to1" if rng.random() < 0.5 else "1to0"
            if u < p:
                flips.append(FlipEvent(row, bit, direction))
        return flips


@dataclass(frozen=True)
class FlipEvent:
    row: int
    bit_offset: int
    direction: str

    def as_dict(self) -> dict:
        return {"row": self.row, "bit_offset": self.bit_offset,
                "direction": self.direction}


@dataclass
class RowhammerReport:
    flips: list[FlipEvent]
    victim_row: int
    aggressor_rows: tuple[int, int]
    region_start_page: int
    region_length_pages: int
    hammers: int

    def as_dict(self) -> dict:
        return {
            "victim_row": self.victim_row,
            "aggressor_rows": list(self.aggressor_rows),
            "region_start_page": self.region_start_page,
            "region_length_pages": self.region_length_pages,
            "hammers": self.hammers,
            "flips": [f.as_dict() for f in self.flips],
        }


ROW_PAGES = 64  # pages per 256 kB row offset


def _confirm_row_trio(space: AddressSpace, geometry: DramGeometry,
                      pages, base: int) -> bool:
    """Same-bank check for pages (base, base+64, base+128) via row conflicts."""
    pas = [space.translate(pages[base + d * ROW_PAGES]) for d in range(3)]
    state = RowBufferState()
    return (same_bank_probe(state, geometry, pas[0], pas[1])
            and same_bank_probe(state, geometry, pas[1], pas[2])
            and same_bank_probe(state, geometry, pas[0], pas[2]))


def double_sided_rowhammer(space: AddressSpace, mob: Mob, geometry: DramGeometry,
                           flip_model: FlipModel, hammers: int,
                           probe_pages: int = 4096, window: int = DEFAULT_WINDOW,
                           engine: str = "mob",
                           min_region_pages: int = 130) -> RowhammerReport:
    """End-to-end double-sided attack: find contiguous memory with the
    aliasing scan, confirm a same-bank row trio over the row-conflict
    channel, then hammer the outer rows and sample flips in the middle one.
    """
    pages = space.alloc_pages(probe_pages + 1, AllocPolicy.contiguous())
    trace = _scan_pages(space, mob, pages[:probe_pages], pages[probe_pages],
                        window, engine)
    regions = [r for r in detect_contiguous(trace)
               if r.length_pages >= min_region_pages]
    if not regions:
        raise AttackInfeasibleError(
            f"no contiguous region of {min_region_pages}+ pages detected")
    region = max(regions, key=lambda r: r.length_pages)

    trio_base = None
    for anchor in region.peak_pages[:8]:
        for delta in (0, ROW_PAGES, 2 * ROW_PAGES, 3 * ROW_PAGES):
            base = anchor + delta
            if base + 2 * ROW_PAGES > region.start_page + region.length_pages - 1:
                continue
            if _confirm_row_trio(space, geometry, pages, base):
                trio_base = base
                break
        if trio_base is not None:
            break
    if trio_base is None:
        raise AttackInfeasibleError("no same-bank row trio confirmed in the region")

    rows = [row_of(geometry, space.translate(pages[trio_base + d * ROW_PAGES]))
            for d in range(3)]
    victim = rows[1]
    row_bits = geometry.row_size_bytes * 8
    flips = flip_model.sample_flips(victim, row_bits, hammers)
    return RowhammerReport(flips, victim, (rows[0], rows[2]),
                           region.start_page, region.length_pages, hammers)


# -- fragmentation sweep ----------------------------------------------------------


@dataclass
class SweepRecord:
    utilization: float
    oracle_available: bool
    leak_available: bool
    largest_free_run: int


def _oracle_has_run(space: AddressSpace, pages, min_frames: int) -> bool:
    frames = [space.pagemap_frame(va) for va in pages]
    run = 1
    for a, b in zip(frames, frames[1:]):
        run = run + 1 if b == a + 1 else 1
        if run >= min_frames:
            return True
    return min_frames <= 1


def fragmentation_sweep(space: AddressSpace, mob: Mob, utilizations,
                        seed: int = 0, probe_pages: int = 8192,
                        scans: int = 3, window: int = DEFAULT_WINDOW,
                        engine: str = "fast",
                        min_run_frames: int = 130) -> list[SweepRecord]:
    """Walk the utilization schedule; at each step allocate a probe buffer and
    report whether a hammerable run exists per the pagemap oracle and per the
    aliasing-scan detector."""
    records = []
    for i, util in enumerate(utilizations):
        space.set_utilization(util, seed=seed * 1000003 + i)
        largest = space.largest_contiguous_run()
        budget = space.free_frames - 64
        n_probe = min(probe_pages, budget - scans)
        oracle_avail = False
        leak_avail = False
        if n_probe >= window + 2:
            probe = space.alloc_pages(n_probe, AllocPolicy.contiguous(seed=i))
            loads = space.alloc_pages(scans, AllocPolicy.fragmented(seed=seed + 7 * i))
            oracle_avail = _oracle_has_run(space, probe, min_run_frames)
            for s in range(scans):
                mob.drain_all()
                trace = _scan_pages(space, mob, probe, loads[s], window, engine)
                if detect_contiguous(trace):
                    leak_avail = True
                    break
            space.free_pages(loads)
            space.free_pages(probe)
        records.append(SweepRecord(util, oracle_avail, leak_avail, largest))
    return records
