"""Timing-only recovery of physical-address aliasing from the store buffer.

The scan fills the store buffer with page-aligned stores to a sliding
window of candidate pages and times one speculative load from a fixed
probe page. Pages whose physical frame shares the probe's 20 low address
bits stall the load with the stepped latency modeled in :mod:`.mob`; the
detector turns those stalls back into page identities.

Everything in this module infers from latencies and counter values only.
Address translation happens inside the simulated hardware path (the store
and load wrappers); the pagemap oracle is never consulted here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .addrspace import AddressSpace, AllocPolicy, PhysicalAddress, VirtualAddress
from .errors import InvalidConfigError, ScanBudgetError
from .mob import AliasClass, CounterSample, Mob, step_latency

DEFAULT_WINDOW = 64
DEFAULT_PEAK_THRESHOLD = 200.0


@dataclass(frozen=True)
class TraceEntry:
    page: int
    cycles: float
    counters: CounterSample


@dataclass
class TimingTrace:
    """Per-page load latency plus counter samples for one scan."""

    entries: list[TraceEntry]
    window: int
    load_page: int
    store_buffer_size: int

    def cycles(self) -> list[float]:
        return [e.cycles for e in self.entries]

    def pages(self) -> list[int]:
        return [e.page for e in self.entries]

    def to_csv(self, fileobj) -> None:
        fileobj.write("page,cycles,stalls_ldm_pending,address_alias\n")
        for e in self.entries:
            fileobj.write(f"{e.page},{e.cycles:g},{e.counters.stalls_ldm_pending:g},"
                          f"{e.counters.address_alias}\n")

    def with_cycles(self, cycles: Sequence[float]) -> "TimingTrace":
        entries = [TraceEntry(e.page, c, e.counters)
                   for e, c in zip(self.entries, cycles)]
        return TimingTrace(entries, self.window, self.load_page, self.store_buffer_size)


@dataclass
class PeakRun:
    """One contiguous stretch of elevated latency."""

    start: int
    end: int  # inclusive page index
    aliased_pages: list[int]
    step_count: int
    truncated_start: bool = False
    truncated_end: bool = False


@dataclass
class PeakReport:
    runs: list[PeakRun]
    load_page: int
    threshold: float
    baseline: float

    @property
    def peak_pages(self) -> list[int]:
        return [p for run in self.runs for p in run.aliased_pages]

    @property
    def step_counts(self) -> list[int]:
        return [run.step_count for run in self.runs]

    @property
    def groups(self) -> list[list[int]]:
        """Pages grouped by inferred alias equivalence. Every peak in a single
        trace matched the same probe page, so one trace yields one group."""
        pages = self.peak_pages
        return [pages] if pages else []

    def spacings(self) -> list[int]:
        pages = self.peak_pages
        return [b - a for a, b in zip(pages, pages[1:])]


def median_traces(traces: Sequence[TimingTrace]) -> TimingTrace:
    """Combine repeated scans of the same pages by per-page median latency."""
    if not traces:
        raise InvalidConfigError("median_traces needs at least one trace")
    base = traces[0]
    n = len(base.entries)
    if any(len(t.entries) != n for t in traces):
        raise InvalidConfigError("traces must cover identical page ranges")
    meds = []
    for i in range(n):
        vals = sorted(t.entries[i].cycles for t in traces)
        k = len(vals)
        meds.append(vals[k // 2] if k % 2 else 0.5 * (vals[k // 2 - 1] + vals[k // 2]))
    return base.with_cycles(meds)


# -- scanning ---------------------------------------------------------------


def _scan_pages(space: AddressSpace, mob: Mob, pages: Sequence[VirtualAddress],
                load_va: VirtualAddress, window: int, engine: str = "mob") -> TimingTrace:
    sb = mob.effective_store_buffer_size
    if window < sb:
        raise InvalidConfigError(f"window {window} must be >= store buffer size {sb}")
    if len(pages) <= window:
        raise InvalidConfigError("need more candidate pages than the window size")
    if engine == "mob":
        entries = []
        load_pa = space.translate(load_va)
        for p in range(window, len(pages)):
            for i in range(window, -1, -1):
                va = pages[p - i]
                mob.issue_store(va, space.translate(va))
            out = mob.speculative_load(load_va, load_pa)
            entries.append(TraceEntry(p, out.cycles, out.counters))
            mob.drain_all()
        return TimingTrace(entries, window, -1, sb)
    if engine == "fast":
        return _scan_pages_fast(space, mob, pages, load_va, window)
    raise InvalidConfigError(f"unknown scan engine {engine!r}")


def _scan_pages_fast(space: AddressSpace, mob: Mob, pages: Sequence[VirtualAddress],
                     load_va: VirtualAddress, window: int) -> TimingTrace:
    """Closed-form replay of the window scan.

    Page-aligned windows make every pending store loosenet-true, so the
    outcome depends only on the youngest 20-bit match inside the pending
    window. Equivalence with the instruction-level engine is pinned by a
    property test.
    """
    p = mob.params
    sb = mob.effective_store_buffer_size
    steps = mob.effective_steps
    frames = [space.translate(va).frame() for va in pages]
    fx = space.translate(load_va).frame()
    bound = max(0, (window + 1) - sb)

    entries = []
    matches = [i for i, f in enumerate(frames) if (f - fx) & 0xFF == 0]
    mi = 0
    last_match = -1
    for pg in range(window, len(pages)):
        while mi < len(matches) and matches[mi] <= pg:
            last_match = matches[mi]
            mi += 1
        oldest = pg - sb + 1
        if steps > 0 and last_match >= oldest:
            m = last_match - oldest
            step = min(steps - 1, (m * steps) // sb)
            cycles = step_latency(p.peak_cycles, p.plateau_cycles, steps, step)
            alias = step
        else:
            cycles = p.load_4k_class_cycles
            alias = sb
        counters = CounterSample(max(0.0, cycles - p.base_load_cycles), alias, bound)
        entries.append(TraceEntry(pg, cycles, counters))
    return TimingTrace(entries, window, -1, sb)


def aliasing_scan(space: AddressSpace, mob: Mob, page_count: int,
                  window: int = DEFAULT_WINDOW, load_index: int | None = None,
                  engine: str = "mob") -> TimingTrace:
    """Run the sliding-window scan over the space's first ``page_count`` pages.

    ``load_index`` selects the probe page and must lie outside the scanned
    range; it defaults to the page right after it.
    """
    if page_count <= window:
        raise InvalidConfigError("page_count must exceed the window size")
    if load_index is None:
        load_index = page_count
    if 0 <= load_index < page_count:
        raise InvalidConfigError("the probe page must be outside the scanned range")
    if len(space.pages) <= load_index:
        raise InvalidConfigError(
            f"space has {len(space.pages)} pages allocated, need {load_index + 1}")
    pages = space.pages[:page_count]
    trace = _scan_pages(space, mob, pages, space.pages[load_index], window, engine)
    trace.load_page = load_index
    return trace


# -- peak detection -----------------------------------------------------------


def _median(values: Sequence[float]) -> float:
    vals = sorted(values)
    k = len(vals)
    return vals[k // 2] if k % 2 else 0.5 * (vals[k // 2 - 1] + vals[k // 2])


def _distinct_levels(values: Iterable[float], tolerance: float) -> int:
    vals = sorted(set(values))
    if not vals:
        return 0
    if tolerance <= 0:
        return len(vals)
    count = 1
    anchor = vals[0]
    for v in vals[1:]:
        if v - anchor > tolerance:
            count += 1
            anchor = v
    return count


def detect_peaks(trace: TimingTrace, threshold: float = DEFAULT_PEAK_THRESHOLD,
                 baseline: float | None = None, margin: float = 50.0,
                 decrease_margin: float = 0.0,
                 level_tolerance: float = 0.0) -> PeakReport:
    """Group elevated-latency runs into peaks and recover the aliased pages.

    Three inferences are exact and therefore sound: a run starts at the page
    whose store first enters the pending window; a strict latency drop marks
    a younger match resetting the step ladder at its own page; and the last
    match of a run sits exactly one buffer-length before the run's end. A
    masked match (entering within the same quantized step as the active one,
    with further matches after it) is not individually recoverable from the
    trace and is intentionally not guessed at.

    Runs touching either end of the trace are flagged truncated; a truncated
    end pins no last match and a truncated start contributes no start page.
    """
    entries = trace.entries
    if not entries:
        return PeakReport([], trace.load_page, threshold, 0.0)
    cycles = [e.cycles for e in entries]
    pages = [e.page for e in entries]
    if baseline is None:
        baseline = _median(cycles)
    elevated = [c > baseline + margin for c in cycles]
    trigger = [c >= baseline + threshold for c in cycles]
    sb = trace.store_buffer_size

    runs: list[PeakRun] = []
    i = 0
    n = len(entries)
    while i < n:
        if not elevated[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and elevated[j + 1]:
            j += 1
        if any(trigger[k] for k in range(i, j + 1)):
            truncated_start = i == 0
            truncated_end = j == n - 1
            aliased: list[int] = []
            if not truncated_start:
                aliased.append(pages[i])
            for k in range(i + 1, j + 1):
                if cycles[k] < cycles[k - 1] - decrease_margin:
                    aliased.append(pages[k])
            if not truncated_end:
                anchor = pages[j] - sb + 1
                if anchor > (aliased[-1] if aliased else -1):
                    aliased.append(anchor)
            step_count = _distinct_levels(cycles[i:j + 1], level_tolerance)
            runs.append(PeakRun(pages[i], pages[j], aliased, step_count,
                                truncated_start, truncated_end))
        i = j + 1
    return PeakReport(runs, trace.load_page, threshold, baseline)


# -- higher-level recovery -----------------------------------------------------


def recover_aliased_pool(space: AddressSpace, mob: Mob, pool_target: int,
                         window: int = DEFAULT_WINDOW, batch_pages: int = 2048,
                         max_scan_pages: int | None = None, seed: int = 0,
                         engine: str = "fast",
                         stats: dict | None = None) -> list[VirtualAddress]:
    """Collect ``pool_target`` pages that all share the probe page's 20 low
    physical-address bits, allocating and scanning batches on demand."""
    if pool_target < 1:
        raise InvalidConfigError("pool_target must be >= 1")
    if max_scan_pages is None:
        max_scan_pages = pool_target * 256 * 6 + 8 * batch_pages
    probe = space.alloc_pages(1, AllocPolicy.fragmented(seed ^ 0x9E3779B9))[0]
    pool: list[VirtualAddress] = []
    scanned = 0
    batch_index = 0
    while len(pool) < pool_target:
        if scanned >= max_scan_pages:
            raise ScanBudgetError(
                f"scanned {scanned} pages, found {len(pool)}/{pool_target}")
        batch = space.alloc_pages(batch_pages, AllocPolicy.fragmented(seed + batch_index))
        batch_index += 1
        mob.drain_all()
        trace = _scan_pages(space, mob, batch, probe, window, engine)
        scanned += len(batch)
        report = detect_peaks(trace)
        for page in report.peak_pages:
            pool.append(batch[page])
            if len(pool) == pool_target:
                break
    if stats is not None:
        stats["pages_scanned"] = scanned
        stats["probe_page"] = probe
    return pool


def pairwise_alias_test(space: AddressSpace, mob: Mob, candidate: VirtualAddress,
                        probe: VirtualAddress) -> bool:
    """Timing-only check that two pages share their 20 low physical bits.

    Two stores to the candidate page give the probe load two loosenet hits,
    so a 20-bit match classifies as the stepped stall and nothing else does.
    """
    mob.drain_all()
    pa = space.translate(candidate)
    mob.issue_store(candidate, pa)
    mob.issue_store(candidate, pa)
    out = mob.speculative_load(probe, space.translate(probe))
    mob.drain_all()
    return out.aliasing_class is AliasClass.ONE_MB


def group_by_mutual_alias(space: AddressSpace, mob: Mob,
                          pages: Sequence[VirtualAddress]) -> list[list[VirtualAddress]]:
    """Partition pages into alias classes using only mutual timing evidence."""
    groups: list[list[VirtualAddress]] = []
    for va in pages:
        for group in groups:
            if pairwise_alias_test(space, mob, va, group[0]):
                group.append(va)
                break
        else:
            groups.append([va])
    return groups


# -- microbenchmark probes ------------------------------------------------------


def _synthetic_addresses(sb: int) -> tuple[int, int, list[int]]:
    """(load_pa, aliased_pa, filler_pas): page-aligned, same offset, fillers
    differ from the load in bits 12..19."""
    load_pa = 0x40000000
    aliased_pa = load_pa + (1 << 20)
    fillers = []
    i = 1
    while len(fillers) < sb:
        pa = load_pa + (i << 12)
        if (pa >> 12) & 0xFF != (load_pa >> 12) & 0xFF:
            fillers.append(pa)
        i += 1
    return load_pa, aliased_pa, fillers


def depth_probe(mob: Mob, filler_kind: str,
                counts: Sequence[int]) -> list[tuple[int, int]]:
    """Surviving step levels after running filler instructions between the
    stores and the load, for each filler count."""
    sb = mob.effective_store_buffer_size
    load_pa, aliased_pa, fillers = _synthetic_addresses(sb)
    load_va = VirtualAddress(0x7F0000000000)
    results = []
    for count in counts:
        levels = set()
        for pos in range(sb):
            mob.drain_all()
            for j in range(sb):
                pa = aliased_pa if j == pos else fillers[j]
                mob.issue_store(VirtualAddress(0x600000000000 + (j << 12)),
                                PhysicalAddress(pa))
            mob.drain(filler_kind, count)
            out = mob.speculative_load(load_va, PhysicalAddress(load_pa))
            if out.aliasing_class is AliasClass.ONE_MB:
                levels.add(out.cycles)
        mob.drain_all()
        results.append((count, len(levels)))
    return results


def latency_class_samples(mob: Mob, samples_per_class: int = 200) -> dict[str, list[float]]:
    """Load latencies for the four aliasing scenarios, sampled from the buffer
    model: no aliasing at all, store-store offset sharing only, load-store
    offset sharing, and a full window holding a 20-bit match at peak position."""
    sb = mob.effective_store_buffer_size
    load_pa_val, aliased_pa, fillers = _synthetic_addresses(sb)
    load_va = VirtualAddress(0x7F0000000000)
    load_pa = PhysicalAddress(load_pa_val)

    def run(setup) -> list[float]:
        out = []
        for _ in range(samples_per_class):
            mob.drain_all()
            setup()
            out.append(mob.speculative_load(load_va, load_pa).cycles)
        mob.drain_all()
        return out

    def store(j: int, pa: int) -> None:
        mob.issue_store(VirtualAddress(0x610000000000 + (j << 12)), PhysicalAddress(pa))

    def no_alias() -> None:
        for j in range(sb):
            store(j, 0x50000000 + (j << 12) + ((j % 63 + 1) << 6))

    def store_store() -> None:
        other_offset = (load_pa_val ^ 0x800) & 0xFFF
        for j in range(sb):
            store(j, (0x50000000 + (j << 12)) | other_offset)

    def load_store() -> None:
        for j in range(sb):
            store(j, fillers[j])

    def one_mb_peak() -> None:
        store(0, aliased_pa)
        for j in range(1, sb):
            store(j, fillers[j])

    return {
        "no_alias": run(no_alias),
        "store_store_4k": run(store_store),
        "load_store_4k": run(load_store),
        "one_mb": run(one_mb_peak),
    }


def noisy_detect_margins(sigma: float, repeats: int = 1) -> tuple[float, float, float]:
    """(elevation margin, decrease margin, level tolerance) for detect_peaks
    on traces carrying Gaussian noise, median-combined over ``repeats``."""
    if sigma <= 0:
        return 50.0, 0.0, 0.0
    effective = 1.2533 * sigma / repeats ** 0.5  # stdev of a sample median
    return 50.0 + 3.0 * effective, max(25.0, 5.0 * effective), 4.0 * effective


def context_switch_probe(mob: Mob, kernel_load_alias: bool, kernel_steps: int,
                         alias_entry_rank: int = 0,
                         no_store_cycles: float = 250.0,
                         store_pressure_cycles: float = 150.0,
                         step_cycles: float = 100.0) -> float:
    """Simulated latency of one privileged load right after a context switch.

    With an empty buffer the call costs the bare syscall baseline. Pending
    stores add flat pressure; if the privileged load's address additionally
    aliases a pending entry, the stall is quantized into ``kernel_steps``
    levels by the entry's age rank (0 = oldest pending, the tallest stall).
    """
    if kernel_steps < 1:
        raise InvalidConfigError("kernel_steps must be >= 1")
    pending = mob.pending_count
    if pending == 0:
        return no_store_cycles
    sb = mob.effective_store_buffer_size
    cycles = no_store_cycles + store_pressure_cycles * pending / sb
    if not kernel_load_alias:
        return cycles
    if not 0 <= alias_entry_rank < pending:
        raise InvalidConfigError("alias_entry_rank must index a pending entry")
    step = min(kernel_steps - 1, (alias_entry_rank * kernel_steps) // sb)
    return cycles + step_cycles * (kernel_steps - step)
