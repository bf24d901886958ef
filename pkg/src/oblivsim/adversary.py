"""What an untrusted observer can and cannot learn from a trace.

Three checks, all standing on the observable projection of a trace
(timestamp, call kind, payload length):

* shape comparison: two runs under the same configuration should be
  indistinguishable event for event;
* target uniformity: a chi-square test that padding traffic hits its
  candidate blocks uniformly, so offsets carry no signal;
* rate accounting: per-endpoint bytes per time window, which should sit
  at the shaped rate regardless of workload.

Comparing traces recorded under different configurations is refused
outright; a shape difference between different configurations is
expected and means nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import stats as _scipy_stats

from .errors import InsufficientDataError, ParameterError, TraceConfigMismatch
from .trace import CallKind, HostTrace

MIN_UNIFORMITY_SAMPLES = 1000
MIN_EXPECTED_PER_BIN = 5


# ---------------------------------------------------------------------------
# Shape comparison.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceVerdict:
    shape_equal: bool
    first_divergence: int | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.shape_equal


def compare_traces(a: HostTrace, b: HostTrace) -> TraceVerdict:
    """Event-for-event equality of the observable projections."""
    if a.meta != b.meta:
        raise TraceConfigMismatch(
            f"recording configurations differ: {a.meta!r} vs {b.meta!r}")
    sa, sb = a.shape(), b.shape()
    n = min(len(sa), len(sb))
    for i in range(n):
        if sa[i] != sb[i]:
            return TraceVerdict(
                False, i, f"event {i}: {sa[i]!r} vs {sb[i]!r}")
    if len(sa) != len(sb):
        return TraceVerdict(
            False, n, f"lengths differ: {len(sa)} vs {len(sb)} events")
    return TraceVerdict(True, None, f"{len(sa)} events, identical shape")


# ---------------------------------------------------------------------------
# Uniformity of padding targets.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformityResult:
    p_value: float
    n_samples: int
    n_bins: int

    def uniform_at(self, alpha: float = 0.01) -> bool:
        return self.p_value > alpha


def uniformity_test(samples, domain, min_samples: int = MIN_UNIFORMITY_SAMPLES
                    ) -> UniformityResult:
    """Chi-square goodness of fit of ``samples`` against the uniform
    distribution over ``domain``.

    Adjacent domain values are pooled into bins large enough that every
    bin expects at least five observations, the usual validity floor
    for the chi-square approximation.
    """
    domain = sorted(set(domain))
    if len(domain) < 2:
        raise ParameterError("uniformity needs a domain of at least two values")
    samples = list(samples)
    if len(samples) < min_samples:
        raise InsufficientDataError(
            f"{len(samples)} samples; need at least {min_samples}")
    index = {v: i for i, v in enumerate(domain)}
    counts = [0] * len(domain)
    for s in samples:
        i = index.get(s)
        if i is None:
            raise ParameterError(f"sample {s!r} outside the stated domain")
        counts[i] += 1

    n, d = len(samples), len(domain)
    group = 1 if n >= MIN_EXPECTED_PER_BIN * d else math.ceil(
        MIN_EXPECTED_PER_BIN * d / n)
    observed = [sum(counts[i:i + group]) for i in range(0, d, group)]
    sizes = [min(group, d - i) for i in range(0, d, group)]
    if len(observed) > 1 and n * sizes[-1] / d < MIN_EXPECTED_PER_BIN:
        observed[-2] += observed[-1]
        sizes[-2] += sizes[-1]
        observed.pop()
        sizes.pop()
    if len(observed) < 2:
        raise ParameterError("domain pooled down to a single bin; "
                             "need more samples for this domain size")
    expected = [n * s / d for s in sizes]
    _chi2, p = _scipy_stats.chisquare(observed, expected)
    return UniformityResult(float(p), n, len(observed))


def dummy_disk_offsets(trace: HostTrace) -> list[int]:
    """Ground-truth helper: offsets of padding disk traffic. Only
    calibration code may use this; the flag is not observable."""
    return [e.offset for e in trace.events
            if e.dummy and e.kind in (CallKind.DISK_READ, CallKind.DISK_WRITE)]


# ---------------------------------------------------------------------------
# Rate accounting.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateSeries:
    endpoint: int
    window_ns: int
    bytes_per_window: tuple[int, ...]
    mean_bps: float


def rate_report(trace: HostTrace, window_ns: int = 1_000_000_000,
                elapsed_ns: int | None = None) -> dict[int, RateSeries]:
    """Outbound bytes per endpoint per time window."""
    if window_ns <= 0:
        raise ParameterError("window must be positive")
    writes = trace.of_kind(CallKind.NET_WRITE)
    if not writes:
        return {}
    if elapsed_ns is None:
        elapsed_ns = (max(e.ts for e in writes) // window_ns + 1) * window_ns
    n_windows = max(1, math.ceil(elapsed_ns / window_ns))
    per_ep: dict[int, list[int]] = {}
    for e in writes:
        if e.ts >= elapsed_ns:
            continue
        buckets = per_ep.setdefault(e.offset, [0] * n_windows)
        buckets[e.ts // window_ns] += e.payload_len
    return {
        ep: RateSeries(ep, window_ns, tuple(buckets),
                       sum(buckets) * 8 * 1_000_000_000 / elapsed_ns)
        for ep, buckets in sorted(per_ep.items())
    }
