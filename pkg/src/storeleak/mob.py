"""Memory-order-buffer model: pending stores and speculative-load timing.

The model keeps a circular buffer of pending stores and classifies every
speculative load against it through the staged dependency check:

* loosenet  - page-offset comparison (bits 11..0),
* finenet   - partial physical tag comparison (bits 19..12),
* 20-bit physical match - the union of both, which is the leaking condition.

A load whose 20 low physical-address bits match a pending store stalls for
a quantized number of extra cycles. The stall is largest when the matching
store is the oldest pending entry and decays in ``steps`` discrete levels
as the match sits closer to the load. The carry-chain position is mapped to
a step index proportionally over the (effective) buffer capacity, so a
partially drained buffer exposes proportionally fewer surviving levels.

Latencies are deterministic class means; any measurement noise is injected
by the experiment harness, never here.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .addrspace import PhysicalAddress, VirtualAddress
from .errors import InvalidConfigError

PAGE_MASK = 0xFFF
ALIAS_MASK = 0xFFFFF


def _default_drain_rates() -> dict[str, float]:
    # Stores committed per filler instruction. With a 56-entry buffer these
    # rates put the full drain at 1000 adds / 4000 nops.
    return {"nop": 56 / 4000, "add": 56 / 1000, "leal": 56 / 2000}


@dataclass(frozen=True)
class MicroArchParams:
    """Per-microarchitecture timing and capacity parameters."""

    name: str
    store_buffer_size: int
    steps: int
    base_load_cycles: float = 30.0
    store_4k_class_cycles: float = 100.0
    load_4k_class_cycles: float = 200.0
    peak_cycles: float = 1200.0
    plateau_cycles: float = 300.0
    drain_per_instruction: dict[str, float] = field(default_factory=_default_drain_rates)
    hyperthreading: bool = False

    def __post_init__(self):
        if self.store_buffer_size < 1:
            raise InvalidConfigError("store_buffer_size must be >= 1")
        if not 0 <= self.steps <= self.store_buffer_size:
            raise InvalidConfigError("steps must satisfy 0 <= steps <= store_buffer_size")
        chain = (self.base_load_cycles, self.store_4k_class_cycles,
                 self.load_4k_class_cycles, self.plateau_cycles, self.peak_cycles)
        if not all(a < b for a, b in zip(chain, chain[1:])):
            raise InvalidConfigError(
                "latency classes must satisfy base < store4k < load4k < plateau < peak")


class AliasClass(enum.Enum):
    NO_ALIAS = "no_alias"
    STORE_STORE_4K = "store_store_4k"
    LOAD_STORE_4K = "load_store_4k"
    ONE_MB = "one_mb"


def step_latency(peak: float, plateau: float, steps: int, step_index: int) -> float:
    """Latency of one quantized stall level; step 0 is the full peak and the
    last step lands exactly on the plateau."""
    if steps <= 1:
        return peak
    t = step_index / (steps - 1)
    return peak - t * (peak - plateau)


@dataclass(frozen=True)
class CounterSample:
    """Simulated performance-counter values sampled at one load."""

    stalls_ldm_pending: float
    address_alias: int
    bound_on_stores: int


@dataclass(frozen=True)
class LoadOutcome:
    cycles: float
    aliasing_class: AliasClass
    counters: CounterSample


@dataclass
class DisambiguatorState:
    """Saturating-counter predictor keyed by load page.

    A saturated counter lets the load bypass the loosenet check; the
    late-stage 20-bit match is unaffected by prediction.
    """

    threshold: int = 16
    table: dict[int, int] = field(default_factory=dict)
    predictions: int = 0
    mispredictions: int = 0

    @property
    def watchdog_misprediction_rate(self) -> float:
        return self.mispredictions / self.predictions if self.predictions else 0.0


def disambiguator_predict(state: DisambiguatorState, load_va: VirtualAddress) -> bool:
    state.predictions += 1
    return state.table.get(load_va.vpn(), 0) >= state.threshold


def disambiguator_update(state: DisambiguatorState, load_va: VirtualAddress,
                         false_dependency: bool) -> None:
    key = load_va.vpn()
    if false_dependency:
        if state.table.get(key, 0) >= state.threshold:
            state.mispredictions += 1
        state.table[key] = 0
    else:
        state.table[key] = min(state.threshold, state.table.get(key, 0) + 1)


class Mob:
    """A single hardware thread's store buffer and dependency-check logic."""

    def __init__(self, params: MicroArchParams,
                 disambiguator: DisambiguatorState | None = None):
        self.params = params
        self.disambiguator = disambiguator
        self._hyperthreading = params.hyperthreading
        self._pending: deque[tuple[int, int, int]] = deque()  # (age, va, pa)
        self._next_age = 0
        self.committed = 0
        self._bound_since_load = 0

    # -- capacity ---------------------------------------------------------

    @property
    def effective_store_buffer_size(self) -> int:
        size = self.params.store_buffer_size
        return size // 2 if self._hyperthreading else size

    @property
    def effective_steps(self) -> int:
        steps = self.params.steps
        return steps // 2 if self._hyperthreading else steps

    def set_hyperthreading(self, enabled: bool) -> None:
        """Split (or restore) the buffer between two logical threads."""
        self._hyperthreading = enabled
        self._commit_overflow()

    @property
    def pending_count(self) -> int:
        return len(self._pending)

    def pending_entries(self) -> list[tuple[int, int, int]]:
        """(age, va, pa) tuples, oldest first. For inspection and tests."""
        return list(self._pending)

    # -- store side -------------------------------------------------------

    def _commit_overflow(self) -> None:
        cap = self.effective_store_buffer_size
        while len(self._pending) > cap:
            self._pending.popleft()
            self.committed += 1

    def issue_store(self, va: VirtualAddress, pa: PhysicalAddress) -> None:
        if len(self._pending) >= self.effective_store_buffer_size:
            self._bound_since_load += 1
        self._pending.append((self._next_age, va.value, pa.value))
        self._next_age += 1
        self._commit_overflow()

    def drain(self, filler_kind: str, count: int) -> None:
        """Commit the oldest entries as if ``count`` filler instructions ran."""
        if count < 0:
            raise InvalidConfigError("filler count must be >= 0")
        try:
            rate = self.params.drain_per_instruction[filler_kind]
        except KeyError:
            raise InvalidConfigError(f"unknown filler kind {filler_kind!r}") from None
        commits = min(int(count * rate), len(self._pending))
        for _ in range(commits):
            self._pending.popleft()
        self.committed += commits

    def drain_all(self) -> None:
        self.committed += len(self._pending)
        self._pending.clear()

    def reset(self) -> None:
        self._pending.clear()
        self._next_age = 0
        self.committed = 0
        self._bound_since_load = 0

    # -- dependency checks --------------------------------------------------

    @staticmethod
    def loosenet(load_pa: PhysicalAddress, entry_pa: PhysicalAddress) -> bool:
        """First stage: page offsets equal."""
        return (load_pa.value & PAGE_MASK) == (entry_pa.value & PAGE_MASK)

    @staticmethod
    def finenet(load_pa: PhysicalAddress, entry_pa: PhysicalAddress) -> bool:
        """Second stage: partial physical tag, bits 19..12."""
        return ((load_pa.value >> 12) & 0xFF) == ((entry_pa.value >> 12) & 0xFF)

    def _step_cycles(self, step_index: int) -> float:
        p = self.params
        return step_latency(p.peak_cycles, p.plateau_cycles,
                            self.effective_steps, step_index)

    def speculative_load(self, load_va: VirtualAddress,
                         load_pa: PhysicalAddress) -> LoadOutcome:
        """Classify one speculative load against the pending stores.

        The returned latency is the class mean; the sampled counters are
        the loosenet/stall/store-pressure events for this load.
        """
        p = self.params
        load_off = load_pa.value & PAGE_MASK
        load_alias = load_pa.value & ALIAS_MASK

        bypass = False
        if self.disambiguator is not None:
            bypass = disambiguator_predict(self.disambiguator, load_va)

        loose_ages = []
        youngest_match_age = -1
        for age, _va, pa in self._pending:
            if pa & PAGE_MASK == load_off:
                loose_ages.append(age)
                if pa & ALIAS_MASK == load_alias and age > youngest_match_age:
                    youngest_match_age = age

        n_loose = len(loose_ages)
        steps = self.effective_steps
        if n_loose == 0:
            klass, cycles = AliasClass.NO_ALIAS, p.base_load_cycles
            offsets: dict[int, int] = {}
            for _age, _va, pa in self._pending:
                off = pa & PAGE_MASK
                count = offsets.get(off, 0) + 1
                offsets[off] = count
                if count >= 2:
                    klass, cycles = AliasClass.STORE_STORE_4K, p.store_4k_class_cycles
                    break
            alias_events = 0
        elif n_loose == 1 or youngest_match_age < 0 or steps == 0:
            # A lone loosenet hit never produces the stepped stall, even on a
            # full 20-bit match; architectures with no measured steps resolve
            # the match without an observable peak.
            klass, cycles = AliasClass.LOAD_STORE_4K, p.load_4k_class_cycles
            alias_events = n_loose
            if bypass:
                cycles = p.base_load_cycles
                alias_events = 0
        else:
            older = sum(1 for age in loose_ages if age < youngest_match_age)
            cap = self.effective_store_buffer_size
            step_index = min(steps - 1, (older * steps) // cap)
            klass, cycles = AliasClass.ONE_MB, self._step_cycles(step_index)
            alias_events = step_index

        counters = CounterSample(
            stalls_ldm_pending=max(0.0, cycles - p.base_load_cycles),
            address_alias=alias_events,
            bound_on_stores=self._bound_since_load,
        )
        self._bound_since_load = 0

        if self.disambiguator is not None and not bypass:
            disambiguator_update(self.disambiguator, load_va, false_dependency=n_loose >= 1)

        return LoadOutcome(cycles, klass, counters)
