"""Inclusive last-level cache model and eviction-set search algorithms.

The cache is sets x ways x slices with an XOR-mask slice hash over
physical-address bits. The eviction test is idealized: a candidate list
evicts a witness iff it contains at least ``ways`` lines congruent with it
(same set index and slice). Search-cost accounting charges one test per
eviction check and ``len(candidates) + 1`` simulated accesses per test;
reliability problems are modeled by an explicit per-test flip probability
plus the abort budget, not by replacement-policy traffic.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .addrspace import AddressSpace, AllocPolicy, PhysicalAddress, VirtualAddress
from .errors import InsufficientPoolError, InvalidConfigError

LINE_SHIFT = 6


@dataclass(frozen=True)
class CacheGeometry:
    name: str
    sets_per_slice: int
    ways: int
    slices: int
    slice_hash: tuple[int, ...]  # one XOR mask per slice-index bit
    line_bytes: int = 64

    def __post_init__(self):
        if self.sets_per_slice & (self.sets_per_slice - 1):
            raise InvalidConfigError("sets_per_slice must be a power of two")
        if len(self.slice_hash) != (self.slices - 1).bit_length():
            raise InvalidConfigError("need one slice mask per slice-index bit")

    @property
    def set_bits(self) -> int:
        return self.sets_per_slice.bit_length() - 1

    @property
    def total_sets(self) -> int:
        return self.sets_per_slice * self.slices

    @property
    def page_aligned_classes(self) -> int:
        """Distinct (set, slice) classes reachable by page-aligned addresses."""
        return (self.sets_per_slice >> (12 - LINE_SHIFT)) * self.slices


def set_and_slice(geometry: CacheGeometry, pa: PhysicalAddress) -> tuple[int, int]:
    value = pa.value
    set_idx = (value >> LINE_SHIFT) & (geometry.sets_per_slice - 1)
    slice_idx = 0
    for bit, mask in enumerate(geometry.slice_hash):
        slice_idx |= ((value & mask).bit_count() & 1) << bit
    return set_idx, slice_idx


def congruence_class(geometry: CacheGeometry, pa: PhysicalAddress) -> int:
    s, sl = set_and_slice(geometry, pa)
    return (sl << geometry.set_bits) | s


def evicts(geometry: CacheGeometry, space: AddressSpace, witness: VirtualAddress,
           candidates: Sequence[VirtualAddress]) -> bool:
    """Idealized LRU fill: do the candidates cover the witness's set?"""
    target = congruence_class(geometry, space.translate(witness))
    hits = 0
    for va in candidates:
        if congruence_class(geometry, space.translate(va)) == target:
            hits += 1
            if hits >= geometry.ways:
                return True
    return False


def expected_congruence_probability(geometry: CacheGeometry, gamma: int) -> float:
    """Probability that a random address is congruent with a fixed witness
    when their low ``gamma`` physical bits are known to match.

    Unknown set-index bits each cost a factor two; the residual slice
    uncertainty is the GF(2) rank of the slice masks restricted to bits
    at or above ``gamma``.
    """
    c_bits = LINE_SHIFT + geometry.set_bits
    unknown_set_bits = max(0, c_bits - gamma)
    basis: list[int] = []
    for mask in geometry.slice_hash:
        row = mask >> gamma << gamma
        for b in basis:
            row = min(row, row ^ b)
        if row:
            basis.append(row)
    return 2.0 ** -(unknown_set_bits + len(basis))


@dataclass
class EvictionSet:
    addresses: list[VirtualAddress]
    target: tuple[int, int]  # (set index, slice index)

    def as_dict(self) -> dict:
        return {"set": self.target[0], "slice": self.target[1],
                "addresses": [hex(va.value) for va in self.addresses]}


@dataclass
class SearchStats:
    tests: int = 0
    accesses: int = 0
    pool_size: int = 0
    base_sets: int = 0
    success: bool = False
    aborted: bool = False

    @property
    def model_time(self) -> int:
        return self.accesses


@dataclass
class EvictionSearchResult:
    sets: list[EvictionSet]
    stats: SearchStats

    def found_classes(self) -> set[tuple[int, int]]:
        return {s.target for s in self.sets}


def enumerate_offset_sets(geometry: CacheGeometry, space: AddressSpace,
                          base: EvictionSet) -> list[EvictionSet]:
    """The 63 sibling sets reached by enumerating address bits 6..11."""
    out = []
    for j in range(1, 64):
        addresses = [VirtualAddress(va.value + (j << LINE_SHIFT)) for va in base.addresses]
        pa = space.translate(addresses[0])
        out.append(EvictionSet(addresses, set_and_slice(geometry, pa)))
    return out


class _Tester:
    """Eviction testing with cost accounting and optional seeded noise."""

    def __init__(self, geometry: CacheGeometry, space: AddressSpace,
                 stats: SearchStats, rounds: int = 1, flip_probability: float = 0.0,
                 seed: int = 0):
        self.geometry = geometry
        self.space = space
        self.stats = stats
        self.rounds = rounds
        self.flip_probability = flip_probability
        self.rng = random.Random(seed)
        self._classes: dict[int, int] = {}

    def class_of(self, va: VirtualAddress) -> int:
        cached = self._classes.get(va.value)
        if cached is None:
            cached = congruence_class(self.geometry, self.space.translate(va))
            self._classes[va.value] = cached
        return cached

    def check(self, truth: bool, n_candidates: int) -> bool:
        """One logical eviction test: majority vote over ``rounds`` repeats."""
        votes = 0
        for _ in range(self.rounds):
            self.stats.tests += 1
            self.stats.accesses += n_candidates + 1
            result = truth
            if self.flip_probability and self.rng.random() < self.flip_probability:
                result = not result
            votes += result
        return 2 * votes > self.rounds

    def evicted_by_candidates(self, witness: VirtualAddress,
                              members: Sequence[VirtualAddress],
                              congruent: int | None = None) -> bool:
        if congruent is None:
            wcls = self.class_of(witness)
            congruent = sum(1 for va in members if self.class_of(va) == wcls)
        return self.check(congruent >= self.geometry.ways, len(members))

    def evicted_by_set(self, addr: VirtualAddress,
                       set_classes: Counter) -> bool:
        truth = set_classes.get(self.class_of(addr), 0) >= self.geometry.ways
        return self.check(truth, self.geometry.ways)


def _contract(tester: _Tester, members: list[VirtualAddress], witness_class: int,
              batched: bool) -> tuple[list[VirtualAddress], list[VirtualAddress]]:
    """Shrink a working candidate set to a minimal eviction set.

    Addresses are removed (in batches when ``batched``) and re-added when
    the set stops evicting; what remains undecided shrinks until only the
    essential members are kept. Returns (kept, removed).
    """
    ways = tester.geometry.ways
    pending = list(members)
    pending_congruent = sum(1 for va in pending if tester.class_of(va) == witness_class)
    kept: list[VirtualAddress] = []
    kept_congruent = 0
    removed: list[VirtualAddress] = []
    batch = max(1, (len(pending) - ways) // 2) if batched else 1
    while pending:
        k = min(batch, len(pending)) if batched else 1
        chunk = pending[-k:]
        del pending[-k:]
        chunk_congruent = sum(1 for va in chunk if tester.class_of(va) == witness_class)
        pending_congruent -= chunk_congruent
        still = tester.check(pending_congruent + kept_congruent >= ways,
                             len(pending) + len(kept))
        if still:
            removed.extend(chunk)
        elif k == 1:
            kept.append(chunk[0])
            kept_congruent += chunk_congruent
        else:
            pending.extend(chunk)
            pending_congruent += chunk_congruent
            batch = max(1, k // 2)
    return kept, removed


def _base_set(geometry: CacheGeometry, wcls: int,
              members: list[VirtualAddress]) -> EvictionSet:
    set_idx = wcls & (geometry.sets_per_slice - 1)
    slice_idx = wcls >> geometry.set_bits
    return EvictionSet(members, (set_idx, slice_idx))


def _search(geometry: CacheGeometry, space: AddressSpace,
            pool: list[VirtualAddress], seed: int, test_budget: int | None,
            improved: bool, target_classes: int) -> EvictionSearchResult:
    """Expand/contract/collect over a page-aligned pool.

    The improved variant batches contract removals and reuses the removed
    addresses as the next round's initial candidate set instead of paying
    for a fresh expansion.
    """
    stats = SearchStats(pool_size=len(pool))
    tester = _Tester(geometry, space, stats)
    rng = random.Random(seed)
    remaining = list(pool)
    rng.shuffle(remaining)
    found: dict[int, EvictionSet] = {}
    carryover: list[VirtualAddress] = []

    def over_budget() -> bool:
        return test_budget is not None and stats.tests > test_budget

    while len(found) < target_classes:
        members: list[VirtualAddress] = list(carryover)
        counts = Counter(tester.class_of(va) for va in members)
        carryover = []
        witness = None
        while not over_budget() and remaining:
            t = remaining.pop()
            if tester.check(counts[tester.class_of(t)] >= geometry.ways, len(members)):
                witness = t
                break
            members.append(t)
            counts[tester.class_of(t)] += 1
        if witness is None:
            remaining.extend(members)
            stats.aborted = True
            break
        wcls = tester.class_of(witness)
        kept, removed = _contract(tester, members, wcls, batched=improved)
        if len(kept) != geometry.ways:
            remaining.extend(removed)
            remaining.extend(kept)
            continue
        found[wcls] = _base_set(geometry, wcls, kept)
        set_classes = Counter(tester.class_of(va) for va in kept)
        if improved:
            carryover = [va for va in removed
                         if not tester.evicted_by_set(va, set_classes)]
            remaining = [va for va in remaining
                         if not tester.evicted_by_set(va, set_classes)]
        else:
            remaining.extend(removed)
            remaining = [va for va in remaining
                         if not tester.evicted_by_set(va, set_classes)]
            rng.shuffle(remaining)

    stats.base_sets = len(found)
    stats.success = len(found) >= target_classes and not stats.aborted
    return EvictionSearchResult(list(found.values()), stats)


# Abort budget for the search over a 4096-page pool. Healthy runs measure
# 382k-405k tests (scripts/calibrate_eviction_budget.py); aborting at ~1.5x
# models giving up once the search runs far past its statistical expectation.
DEFAULT_CLASSIC_TEST_BUDGET = 600_000


def find_eviction_sets_classic(geometry: CacheGeometry, space: AddressSpace,
                               pool_pages: int, seed: int = 0,
                               test_budget: int | None = DEFAULT_CLASSIC_TEST_BUDGET,
                               ) -> EvictionSearchResult:
    """Expand/contract/collect search over a fresh page-aligned pool."""
    pool = space.alloc_pages(pool_pages, AllocPolicy.fragmented(seed))
    return _search(geometry, space, pool, seed, test_budget,
                   improved=False, target_classes=geometry.page_aligned_classes)


def find_eviction_sets_improved(geometry: CacheGeometry, space: AddressSpace,
                                pool_pages: int, seed: int = 0,
                                test_budget: int | None = DEFAULT_CLASSIC_TEST_BUDGET,
                                ) -> EvictionSearchResult:
    """Classic search plus contract batching and removed-address reuse."""
    pool = space.alloc_pages(pool_pages, AllocPolicy.fragmented(seed))
    return _search(geometry, space, pool, seed, test_budget,
                   improved=True, target_classes=geometry.page_aligned_classes)


def find_eviction_sets_aa(geometry: CacheGeometry, space: AddressSpace,
                          aliased_pool: Sequence[VirtualAddress], rounds: int = 1,
                          flip_probability: float = 0.0, seed: int = 0,
                          ) -> EvictionSearchResult:
    """Partition a mutually 20-bit-aliased pool into per-slice eviction sets.

    All pool members already share the set index, so only the slice
    separates them; each slice with enough members yields one base set.
    Noisy mode repeats every eviction test ``rounds`` times and takes the
    majority. Bits 6..11 enumeration on the results gives full coverage.
    """
    if len(aliased_pool) < geometry.slices * geometry.ways:
        raise InsufficientPoolError(
            f"pool of {len(aliased_pool)} below {geometry.slices} x {geometry.ways}")
    stats = SearchStats(pool_size=len(aliased_pool))
    tester = _Tester(geometry, space, stats, rounds=rounds,
                     flip_probability=flip_probability, seed=seed)
    remaining = list(aliased_pool)
    found: list[EvictionSet] = []
    seen_classes: set[int] = set()
    misses = 0
    while len(remaining) > geometry.ways and len(found) < geometry.slices \
            and misses <= len(remaining):
        witness = remaining.pop(0)
        if not tester.evicted_by_candidates(witness, remaining):
            remaining.append(witness)
            misses += 1
            continue
        wcls = tester.class_of(witness)
        kept, removed = _contract(tester, remaining, wcls, batched=True)
        if len(kept) != geometry.ways or wcls in seen_classes:
            remaining = removed + kept + [witness]
            misses += 1
            continue
        misses = 0
        seen_classes.add(wcls)
        found.append(_base_set(geometry, wcls, kept))
        set_classes = Counter(tester.class_of(va) for va in kept)
        remaining = [va for va in removed + [witness]
                     if not tester.evicted_by_set(va, set_classes)]
    stats.base_sets = len(found)
    stats.success = len(found) == geometry.slices
    return EvictionSearchResult(found, stats)
