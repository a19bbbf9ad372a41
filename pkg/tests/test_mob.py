import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storeleak.addrspace import PhysicalAddress, VirtualAddress
from storeleak.errors import InvalidConfigError
from storeleak.mob import (AliasClass, DisambiguatorState, MicroArchParams, Mob,
                           disambiguator_predict, disambiguator_update)

PAGE = 1 << 12
MB = 1 << 20


def make_mob(params: MicroArchParams) -> Mob:
    return Mob(params)


def pa(value: int) -> PhysicalAddress:
    return PhysicalAddress(value)


def va(value: int) -> VirtualAddress:
    return VirtualAddress(value)


LOAD_PA = 0x40000000  # page-aligned probe target


def filler_pa(j: int) -> int:
    """Same page offset as the load, differing in bits 12..19."""
    value = LOAD_PA + ((j + 1) << 12)
    assert (value >> 12) & 0xFF != (LOAD_PA >> 12) & 0xFF
    return value


def fill_window(mob: Mob, aliased_rank: int | None):
    """Issue a full buffer of loosenet-true stores; the 20-bit-matching one
    sits at ``aliased_rank`` entries from the oldest end (None = no match)."""
    sb = mob.effective_store_buffer_size
    for j in range(sb):
        value = LOAD_PA + MB if j == aliased_rank else filler_pa(j)
        mob.issue_store(va(0x100000 + j * PAGE), pa(value))


# -- reference model used as the independent oracle ---------------------------


def reference_outcome(params: MicroArchParams, pending: list[int], load_pa: int):
    """Straight-line reimplementation of the classification contract.

    ``pending`` holds physical addresses oldest-first (already capped to the
    buffer size). Returns (class name, cycles).
    """
    off = load_pa & 0xFFF
    loose = [p for p in pending if (p & 0xFFF) == off]
    matches = [i for i, p in enumerate(loose) if (p & 0xFFFFF) == (load_pa & 0xFFFFF)]
    if not loose:
        seen = {}
        for p in pending:
            seen[p & 0xFFF] = seen.get(p & 0xFFF, 0) + 1
        if any(c >= 2 for c in seen.values()):
            return "store_store_4k", params.store_4k_class_cycles
        return "no_alias", params.base_load_cycles
    if len(loose) == 1 or not matches or params.steps == 0:
        return "load_store_4k", params.load_4k_class_cycles
    older = matches[-1]  # loose[] is oldest-first, so the index counts older entries
    step = min(params.steps - 1, older * params.steps // params.store_buffer_size)
    unit = (params.peak_cycles - params.plateau_cycles) / (params.steps - 1)
    return "one_mb", params.peak_cycles - step * unit


# -- frozen latency-class examples ---------------------------------------------


def test_no_alias_is_base_latency(kabylake):
    mob = make_mob(kabylake)
    for j in range(10):
        mob.issue_store(va(j * PAGE), pa(0x7000000 + j * PAGE + (j + 1) * 64))
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.NO_ALIAS
    assert out.cycles == 30


def test_store_store_4k_class(kabylake):
    mob = make_mob(kabylake)
    for j in range(4):
        mob.issue_store(va(j * PAGE), pa(0x7000800 + j * PAGE))
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.STORE_STORE_4K
    assert out.cycles == 100


def test_load_store_4k_class(kabylake):
    mob = make_mob(kabylake)
    fill_window(mob, aliased_rank=None)
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.LOAD_STORE_4K
    assert out.cycles == 200


def test_peak_when_match_is_oldest(kabylake):
    mob = make_mob(kabylake)
    fill_window(mob, aliased_rank=0)
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.ONE_MB
    assert out.cycles >= 1200
    assert out.counters.address_alias == 0  # zero at the maximal peak


def test_single_match_gives_no_peak(kabylake):
    mob = make_mob(kabylake)
    mob.issue_store(va(0x100000), pa(LOAD_PA + MB))
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.LOAD_STORE_4K
    assert out.cycles == 200


def test_exactly_steps_distinct_levels(presets):
    for name in ("kabylake-r", "haswell", "nehalem"):
        params = presets.get_microarch(name)
        mob = make_mob(params)
        levels = set()
        for rank in range(params.store_buffer_size):
            mob.drain_all()
            fill_window(mob, aliased_rank=rank)
            out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
            assert out.aliasing_class is AliasClass.ONE_MB
            levels.add(out.cycles)
        assert len(levels) == params.steps


def test_latency_monotone_in_match_age(kabylake):
    mob = make_mob(kabylake)
    last = float("inf")
    for rank in range(kabylake.store_buffer_size):
        mob.drain_all()
        fill_window(mob, aliased_rank=rank)
        out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
        assert out.cycles <= last  # younger match never increases latency
        last = out.cycles
    assert last == kabylake.plateau_cycles


def test_steps_zero_arch_never_peaks(presets):
    core2 = presets.get_microarch("core2")
    mob = make_mob(core2)
    fill_window(mob, aliased_rank=0)
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.LOAD_STORE_4K


# -- store buffer mechanics -----------------------------------------------------


def test_issue_store_overflow_commits_oldest(kabylake):
    mob = make_mob(kabylake)
    for j in range(64):
        mob.issue_store(va(j * PAGE), pa(filler_pa(j)))
    assert mob.pending_count == 56
    assert mob.committed == 8
    ages = [age for age, _, _ in mob.pending_entries()]
    assert ages == sorted(ages) and len(set(ages)) == len(ages)
    assert ages[0] == 8  # the eight oldest were committed


def test_drain_rates(kabylake):
    mob = make_mob(kabylake)
    for j in range(56):
        mob.issue_store(va(j * PAGE), pa(filler_pa(j)))
    mob.drain("add", 500)
    assert mob.pending_count == 56 - 28
    mob.drain("add", 0)
    assert mob.pending_count == 28
    mob.drain("nop", 4000)
    assert mob.pending_count == 0
    with pytest.raises(InvalidConfigError):
        mob.drain("mul", 1)


def test_drain_add_1000_empties_full_buffer(kabylake):
    mob = make_mob(kabylake)
    fill_window(mob, aliased_rank=0)
    mob.drain("add", 1000)
    assert mob.pending_count == 0
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.NO_ALIAS


def test_hyperthreading_halves(presets):
    for name, steps in (("kabylake-r", 22), ("sandybridge-i5", 12)):
        params = presets.get_microarch(name)
        mob = make_mob(params)
        mob.set_hyperthreading(True)
        assert mob.effective_steps == steps // 2
        assert mob.effective_store_buffer_size == params.store_buffer_size // 2
        mob.set_hyperthreading(False)
        assert mob.effective_steps == steps
        assert mob.effective_store_buffer_size == params.store_buffer_size


def test_bound_on_stores_counts_full_buffer_pressure(kabylake):
    mob = make_mob(kabylake)
    for j in range(65):
        mob.issue_store(va(j * PAGE), pa(filler_pa(j % 56)))
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.counters.bound_on_stores == 65 - 56
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.counters.bound_on_stores == 0  # delta since previous load


def test_counters_track_latency(kabylake):
    mob = make_mob(kabylake)
    fill_window(mob, aliased_rank=10)
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.counters.stalls_ldm_pending == out.cycles - 30
    assert out.counters.address_alias == 10 * 22 // 56


# -- loosenet / finenet unit checks ----------------------------------------------


def test_loosenet_offset_comparison():
    assert Mob.loosenet(pa(0x12345000), pa(0x98765000))
    assert not Mob.loosenet(pa(0x12345000), pa(0x98765040))
    assert Mob.loosenet(pa(0x12345123), pa(0x123))


def test_finenet_bits_19_12():
    assert Mob.finenet(pa(0x000AB000), pa(0xFFFAB000))
    assert not Mob.finenet(pa(0x000AB000), pa(0x000AC000))
    # alias20-equal implies finenet-true
    assert Mob.finenet(pa(0x12345678), pa(0x12345678 + (1 << 20)))


def test_single_finenet_true_in_full_buffer_classifies_one_mb(kabylake):
    mob = make_mob(kabylake)
    fill_window(mob, aliased_rank=17)
    entries = mob.pending_entries()
    fine_hits = sum(1 for _, _, p in entries if Mob.finenet(pa(LOAD_PA), pa(p)))
    assert fine_hits == 1
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.ONE_MB


# -- offset blindness: virtual page numbers are irrelevant ------------------------


def test_virtual_page_shuffle_leaves_outcomes_identical(kabylake):
    import random as _r
    rng = _r.Random(5)
    pas = [filler_pa(j) for j in range(40)] + [LOAD_PA + 3 * MB]
    rng.shuffle(pas)
    vas_a = [0x100000 + j * PAGE for j in range(len(pas))]
    vas_b = list(vas_a)
    rng.shuffle(vas_b)
    outs = []
    for vset in (vas_a, vas_b):
        mob = make_mob(kabylake)
        for v, p in zip(vset, pas):
            mob.issue_store(va(v), pa(p))
        outs.append(mob.speculative_load(va(0x9999000), pa(LOAD_PA)))
    assert outs[0] == outs[1]


# -- property sweep against the reference model ----------------------------------


@settings(deadline=None, max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 255), st.booleans()),
                min_size=0, max_size=70),
       st.integers(0, 1))
def test_matches_reference_model(kabylake, specs, load_kind):
    """Random buffer contents against an independent reimplementation of the
    classification contract."""
    load = LOAD_PA | (0x40 if load_kind else 0)
    mob = make_mob(kabylake)
    pending = []
    for same_offset, tag, match in specs:
        if match:
            value = (load & 0xFFFFF) | ((tag + 1) << 20)
        elif same_offset:
            value = (load & 0xFFF) | (((tag & 0xFE) ^ 0x52) << 12) | (tag << 21)
            if (value & 0xFFFFF) == (load & 0xFFFFF):
                value ^= 1 << 13
        else:
            value = ((load ^ 0x800) & 0xFFF) | (tag << 12)
        mob.issue_store(va(0x100000 + len(pending) * PAGE), pa(value))
        pending.append(value)
        if len(pending) > 56:
            pending.pop(0)
    expected_class, expected_cycles = reference_outcome(kabylake, pending, load)
    out = mob.speculative_load(va(0x9999000), pa(load))
    assert out.aliasing_class.value == expected_class
    assert out.cycles == pytest.approx(expected_cycles)


@settings(deadline=None, max_examples=120)
@given(st.integers(0, 55), st.integers(1, 55), st.data())
def test_single_loosenet_hit_never_one_mb(kabylake, pos, n_other, data):
    """Exactly one loosenet-true pending store never classifies as the
    stepped stall, even on a full 20-bit match."""
    mob = make_mob(kabylake)
    pos = min(pos, n_other)
    matches = data.draw(st.booleans())
    other_offset = (LOAD_PA ^ 0x700) & 0xFFF
    k = 0
    for j in range(n_other + 1):
        if j == pos:
            value = LOAD_PA + MB if matches else filler_pa(0)
        else:
            value = other_offset | ((0x600 + k) << 12)
            k += 1
        mob.issue_store(va(0x100000 + j * PAGE), pa(value))
    out = mob.speculative_load(va(0x9999000), pa(LOAD_PA))
    assert out.aliasing_class is not AliasClass.ONE_MB
    assert out.cycles == 200


# -- memory disambiguator ----------------------------------------------------------


def test_disambiguator_saturation_and_reset():
    state = DisambiguatorState(threshold=4)
    target = va(0x5000)
    assert not disambiguator_predict(state, target)
    for _ in range(4):
        disambiguator_update(state, target, false_dependency=False)
    assert disambiguator_predict(state, target)
    disambiguator_update(state, target, false_dependency=True)
    assert not disambiguator_predict(state, target)
    assert state.watchdog_misprediction_rate > 0


def test_saturated_prediction_does_not_suppress_peak(kabylake):
    state = DisambiguatorState(threshold=3)
    mob = Mob(kabylake, disambiguator=state)
    probe = va(0x9999000)
    for _ in range(3):  # clean loads saturate the counter
        mob.speculative_load(probe, pa(LOAD_PA))
    assert disambiguator_predict(state, probe)
    fill_window(mob, aliased_rank=0)
    out = mob.speculative_load(probe, pa(LOAD_PA))
    assert out.aliasing_class is AliasClass.ONE_MB
    assert out.cycles >= 1200


def test_prediction_bypasses_loosenet_stall(kabylake):
    state = DisambiguatorState(threshold=2)
    mob = Mob(kabylake, disambiguator=state)
    probe = va(0x9999000)
    for _ in range(2):
        mob.speculative_load(probe, pa(LOAD_PA))
    fill_window(mob, aliased_rank=None)
    out = mob.speculative_load(probe, pa(LOAD_PA))
    assert out.cycles == 30  # loosenet check skipped


def test_param_validation():
    with pytest.raises(InvalidConfigError):
        MicroArchParams("bad", store_buffer_size=8, steps=9)
    with pytest.raises(InvalidConfigError):
        MicroArchParams("bad", 8, 4, base_load_cycles=500.0)
