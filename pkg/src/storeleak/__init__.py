"""Deterministic model of speculative store-to-load dependency resolution and
the physical-address-recovery attacks it enables: aliasing scans, eviction-set
construction, DRAM bank co-location, contiguous-memory detection, and
double-sided row hammering."""

from .addrspace import (AddressSpace, AllocPolicy, PhysicalAddress, PolicyKind,
                        VirtualAddress, new_address_space)
from .analysis import CorrelationReport, correlate_counters, histogram_classes, pearson
from .cache import (CacheGeometry, EvictionSet, EvictionSearchResult, evicts,
                    expected_congruence_probability, find_eviction_sets_aa,
                    find_eviction_sets_classic, find_eviction_sets_improved,
                    set_and_slice)
from .config import default_presets, load_presets
from .dram import (DramGeometry, FlipModel, RowBufferState, access_timed, bank_of,
                   colocation_probability, detect_contiguous,
                   double_sided_rowhammer, fragmentation_sweep, row_of)
from .errors import (AttackInfeasibleError, InsufficientPoolError,
                     InvalidConfigError, OutOfMemoryError, PageFaultError,
                     ScanBudgetError, StoreleakError, UndefinedCorrelationError)
from .leak import (PeakReport, TimingTrace, aliasing_scan, context_switch_probe,
                   depth_probe, detect_peaks, pairwise_alias_test,
                   recover_aliased_pool)
from .mob import (AliasClass, CounterSample, DisambiguatorState, LoadOutcome,
                  MicroArchParams, Mob, disambiguator_predict, disambiguator_update)

__version__ = "0.1.0"
