"""Streaming quantile-rank normalization over weighted cluster-centre buffers.

Each input feature is tracked by a :class:`FeatureSketch`: a fixed-size sorted
buffer of representative raw values ("centres") with one mass value per centre.
The first ``p`` samples of a stream seed the buffers (sorted values, unit
masses); from then on each incoming value

1. picks the closest centre,
2. hands the centre's previous mass to that centre and its neighbour on the
   far side of the value, split by relative distance, plus one new unit of
   mass for the incoming value,
3. overwrites the chosen centre with the incoming value, and
4. reads off its approximate quantile rank: the mass at or below the chosen
   centre divided by the total mass.

A per-sample multiplicative discount on all masses controls how quickly old
observations are forgotten, so the rank map can follow a drifting
distribution. Everything is single-pass: a value is folded in exactly once and
never revisited.

All arithmetic is 64-bit floating point; with a discount of ``eta`` the total
mass per feature after each normalized sample is exactly
``eta * (previous_total + 1)`` up to rounding.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

__all__ = [
    "CaseTag",
    "FeatureSketch",
    "NormalizerState",
    "QuantileNormalizer",
    "UpdateTrace",
]

SERIALIZATION_VERSION = 1


class NormalizerState(Enum):
    """Lifecycle of a :class:`QuantileNormalizer`."""

    WARMUP = "warmup"
    READY = "ready"


class CaseTag(Enum):
    """Which branch of the mass-splitting rule fired for one update."""

    GEQ = "geq"  # value >= chosen centre, left neighbour received the split
    LT = "lt"  # value < chosen centre, right neighbour received the split
    BOUNDARY_MISSING = "boundary_missing"  # no neighbour on the far side


@dataclass(frozen=True)
class UpdateTrace:
    """Introspection record emitted by :meth:`FeatureSketch.split_update`.

    ``percentage`` is the fraction of the old mass handed to the neighbour;
    it is 0 whenever the incoming value lands exactly on the chosen centre or
    the neighbour is missing, and never exceeds 1.
    """

    feature_index: int
    chosen_idx: int
    case_tag: CaseTag
    percentage: float
    old_weight: float


class FeatureSketch:
    """Weighted cluster-centre buffer for one feature.

    ``centres`` is kept non-decreasing across updates and ``weights`` holds
    one non-negative mass per centre.  The buffer length is fixed at
    construction time.
    """

    __slots__ = ("centres", "weights", "discount")

    def __init__(
        self,
        centres: Iterable[float],
        weights: Iterable[float],
        discount: float = 1.0,
    ) -> None:
        centres = [float(c) for c in centres]
        weights = [float(w) for w in weights]
        if len(centres) < 2:
            raise ValueError("a sketch needs at least 2 centres")
        if len(centres) != len(weights):
            raise ValueError(
                f"centres and weights lengths differ: {len(centres)} != {len(weights)}"
            )
        if not all(math.isfinite(c) for c in centres):
            raise ValueError("centres must be finite")
        if any(b < a for a, b in zip(centres, centres[1:])):
            raise ValueError("centres must be non-decreasing")
        if not all(math.isfinite(w) and w >= 0.0 for w in weights):
            raise ValueError("weights must be finite and non-negative")
        if not 0.0 < discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {discount}")
        self.centres = centres
        self.weights = weights
        self.discount = float(discount)

    @classmethod
    def from_warmup(cls, values: Iterable[float], discount: float = 1.0) -> "FeatureSketch":
        """Build a sketch from warm-up values: sorted centres, unit weights."""
        values = sorted(float(v) for v in values)
        return cls(values, [1.0] * len(values), discount)

    @property
    def size(self) -> int:
        return len(self.centres)

    def total_weight(self) -> float:
        return sum(self.weights)

    def nearest_centre(self, value: float) -> int:
        """Index of the centre closest to ``value`` in absolute distance.

        Ties resolve to the smallest index, including ties produced by
        duplicate centres.
        """
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("value must be finite")
        centres = self.centres
        pos = bisect.bisect_left(centres, value)
        if pos == 0:
            idx = 0
        elif pos == len(centres):
            idx = len(centres) - 1
        else:
            # centres[pos-1] < value <= centres[pos]; <= keeps the left index
            # when value sits exactly on the midpoint.
            if value - centres[pos - 1] <= centres[pos] - value:
                idx = pos - 1
            else:
                idx = pos
        # Equal distances form a contiguous run (duplicate centres, or distinct
        # centres whose rounded distances collide); report the run's first index.
        dist = abs(centres[idx] - value)
        while idx > 0 and abs(centres[idx - 1] - value) == dist:
            idx -= 1
        return idx

    def split_update(self, value: float, idx: int, feature_index: int = 0) -> UpdateTrace:
        """Fold ``value`` into the buffer at centre ``idx``.

        ``idx`` must come from :meth:`nearest_centre` for the same value; that
        precondition is what keeps the centres sorted after the overwrite.
        The old mass of the chosen centre is split between the chosen slot and
        the neighbour on the far side of the value, proportional to relative
        distance, and one unit of mass is added for the value itself.  Total
        mass therefore grows by exactly 1.
        """
        value = float(value)
        centres = self.centres
        weights = self.weights
        if not 0 <= idx < len(centres):
            raise IndexError(f"centre index {idx} out of range [0, {len(centres)})")
        old_weight = weights[idx]

        if value >= centres[idx]:
            neighbour = idx - 1
            tag = CaseTag.GEQ if neighbour >= 0 else CaseTag.BOUNDARY_MISSING
        else:
            neighbour = idx + 1
            tag = CaseTag.LT if neighbour < len(centres) else CaseTag.BOUNDARY_MISSING

        if tag is CaseTag.BOUNDARY_MISSING:
            percentage = 0.0
            weights[idx] = old_weight + 1.0
        else:
            numer = abs(centres[idx] - value)
            denom = abs(centres[neighbour] - value)
            # denom == 0 forces numer == 0 (sorted centres); take the 0/0 limit.
            percentage = numer / denom if denom > 0.0 else 0.0
            weights[idx] = (1.0 - percentage) * old_weight + 1.0
            weights[neighbour] += percentage * old_weight

        centres[idx] = value
        return UpdateTrace(feature_index, idx, tag, percentage, old_weight)

    def quantile_of(self, idx: int) -> float:
        """Mass at or below centre ``idx`` as a fraction of total mass, in (0, 1]."""
        weights = self.weights
        if not 0 <= idx < len(weights):
            raise IndexError(f"centre index {idx} out of range [0, {len(weights)})")
        prefix = 0.0
        total = 0.0
        for j, w in enumerate(weights):
            total += w
            if j == idx:
                prefix = total
        if total <= 0.0:
            raise ValueError("total weight is zero; sketch state is corrupt")
        return prefix / total

    def snapshot_quantile(self, value: float) -> float:
        """Quantile rank of ``value`` under the current state, without mutation."""
        return self.quantile_of(self.nearest_centre(value))

    def apply_discount(self) -> None:
        """Multiply every weight by the discount factor."""
        eta = self.discount
        self.weights = [w * eta for w in self.weights]


class QuantileNormalizer:
    """Maps raw sample vectors to approximate quantile ranks, single-pass.

    The normalizer starts in ``WARMUP`` and collects ``p`` samples via
    :meth:`ingest_warmup`; the ``p``-th sample seeds one
    :class:`FeatureSketch` per dimension and flips the state to ``READY``.
    From then on :meth:`normalize` folds each sample into the sketches and
    returns its per-feature quantile ranks, applying the weight discount once
    per sample after all features are processed.

    Instances are stateful single-writer objects: never mutate one from two
    threads at once.  Read-only queries (:meth:`snapshot_normalize`) are safe
    for concurrent readers only while no writer is active.
    """

    def __init__(self, p: int, eta: float, n: int) -> None:
        if not isinstance(p, int) or isinstance(p, bool) or p < 2:
            raise ValueError(f"p must be an integer >= 2, got {p!r}")
        if not isinstance(eta, (int, float)) or not 0.0 < float(eta) <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {eta!r}")
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise ValueError(f"n must be an integer >= 1, got {n!r}")
        self.p = p
        self.eta = float(eta)
        self.n = n
        self.sketches: list[FeatureSketch] = []
        self.warmup_buffer: list[list[float]] = []
        self._state = NormalizerState.WARMUP

    @property
    def state(self) -> NormalizerState:
        return self._state

    @property
    def is_ready(self) -> bool:
        return self._state is NormalizerState.READY

    def _check_sample(self, sample: Sequence[float]) -> list[float]:
        vec = [float(v) for v in sample]
        if len(vec) != self.n:
            raise ValueError(f"expected {self.n} components, got {len(vec)}")
        if not all(math.isfinite(v) for v in vec):
            raise ValueError(
                "sample contains non-finite components; impute missing values first"
            )
        return vec

    def ingest_warmup(self, sample: Sequence[float]) -> NormalizerState:
        """Buffer one warm-up sample; the p-th one initializes the sketches.

        Returns the state after ingestion so callers can detect readiness.
        """
        if self._state is not NormalizerState.WARMUP:
            raise RuntimeError("warm-up already complete; use normalize()")
        vec = self._check_sample(sample)
        self.warmup_buffer.append(vec)
        if len(self.warmup_buffer) == self.p:
            self.sketches = [
                FeatureSketch.from_warmup(
                    [row[j] for row in self.warmup_buffer], self.eta
                )
                for j in range(self.n)
            ]
            self._state = NormalizerState.READY
        return self._state

    def normalize(self, sample: Sequence[float]) -> list[float]:
        """Fold one sample into the sketches and return its quantile ranks.

        Each output component is in (0, 1] and includes the sample's own unit
        of mass.  The discount is applied once, after all features of the
        sample are processed.
        """
        if self._state is not NormalizerState.READY:
            raise RuntimeError(
                "normalizer is still warming up; feed it p samples via ingest_warmup()"
            )
        vec = self._check_sample(sample)
        out: list[float] = []
        for j, value in enumerate(vec):
            sk = self.sketches[j]
            idx = sk.nearest_centre(value)
            sk.split_update(value, idx, feature_index=j)
            out.append(sk.quantile_of(idx))
        self.discount_all()
        return out

    def snapshot_normalize(self, sample: Sequence[float]) -> list[float]:
        """Quantile ranks under the current state, with no mutation at all."""
        if self._state is not NormalizerState.READY:
            raise RuntimeError("normalizer is still warming up")
        vec = self._check_sample(sample)
        return [sk.snapshot_quantile(v) for sk, v in zip(self.sketches, vec)]

    def discount_all(self) -> None:
        """Multiply every weight of every sketch by the discount factor."""
        if self._state is not NormalizerState.READY:
            raise RuntimeError("normalizer is still warming up")
        for sk in self.sketches:
            sk.apply_discount()

    def to_dict(self) -> dict:
        """Checkpoint the full normalizer state as a plain JSON-able dict."""
        doc: dict = {
            "version": SERIALIZATION_VERSION,
            "p": self.p,
            "eta": self.eta,
            "n": self.n,
            "state": self._state.value,
            "sketches": [
                {"centres": list(sk.centres), "weights": list(sk.weights)}
                for sk in self.sketches
            ],
        }
        if self._state is NormalizerState.WARMUP:
            doc["warmup_buffer"] = [list(row) for row in self.warmup_buffer]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "QuantileNormalizer":
        version = doc.get("version")
        if version != SERIALIZATION_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version!r}")
        norm = cls(doc["p"], doc["eta"], doc["n"])
        state = NormalizerState(doc["state"])
        if state is NormalizerState.READY:
            sketches = doc["sketches"]
            if len(sketches) != norm.n:
                raise ValueError(
                    f"checkpoint holds {len(sketches)} sketches for n={norm.n}"
                )
            norm.sketches = [
                FeatureSketch(entry["centres"], entry["weights"], norm.eta)
                for entry in sketches
            ]
            norm._state = NormalizerState.READY
        else:
            for row in doc.get("warmup_buffer", []):
                norm.ingest_warmup(row)
        return norm

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "QuantileNormalizer":
        return cls.from_dict(json.loads(text))
