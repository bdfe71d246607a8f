"""Hot page pressure and greedy demotion/promotion planning.

HP is kept in integer bytes. Demoting or promoting a region moves HP by
``psr * S_huge``, which is ``untouched_base_regions * 4096`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import BASE_PAGE, FRAMES_PER_HUGE, HUGE_PAGE
from .monitor import FineGrainReport, PsrRecord


@dataclass(frozen=True)
class PolicyConfig:
    f_use: float = 0.85
    psr_lower_bound: float = 0.5
    s_tot: int = 0
    huge_page_bytes: int = HUGE_PAGE

    def __post_init__(self):
        if not 0.0 < self.f_use <= 1.0:
            raise ValueError(f"f_use must lie in (0, 1], got {self.f_use}")
        if not 0.0 <= self.psr_lower_bound <= 1.0:
            raise ValueError(f"psr_lower_bound must lie in [0, 1], got {self.psr_lower_bound}")
        if self.s_tot < 0:
            raise ValueError("s_tot must be non-negative")
        if self.huge_page_bytes != HUGE_PAGE:
            raise ValueError("only 2 MiB huge pages are modeled")

    @property
    def budget(self) -> int:
        """Expected-usage budget ``s_tot * f_use`` in whole bytes."""
        return int(Fraction(self.s_tot) * Fraction(self.f_use))


@dataclass(frozen=True)
class HotPagePressure:
    hp: int


@dataclass
class Plan:
    demote: list[tuple[int, float]] = field(default_factory=list)
    promote: list[tuple[int, float]] = field(default_factory=list)
    hp_before: int = 0
    hp_after: int = 0

    def rows(self):
        for region, psr in self.demote:
            yield {"region": region, "action": "demote", "psr": psr,
                   "hp_before": self.hp_before, "hp_after": self.hp_after}
        for region, psr in self.promote:
            yield {"region": region, "action": "promote", "psr": psr,
                   "hp_before": self.hp_before, "hp_after": self.hp_after}


def _hp_value(hp):
    return hp.hp if isinstance(hp, HotPagePressure) else int(hp)


def _shift(untouched: int) -> int:
    return untouched * BASE_PAGE


def init_hot_page_pressure(s_hot: int, config: PolicyConfig) -> HotPagePressure:
    if s_hot > config.s_tot:
        raise ValueError(f"hot size {s_hot} exceeds total memory {config.s_tot}")
    return HotPagePressure(s_hot - config.budget)


def _below_bound(rec: PsrRecord, config: PolicyConfig) -> bool:
    return Fraction(rec.untouched, FRAMES_PER_HUGE) < Fraction(config.psr_lower_bound)


def plan_demotions(hp, psr_records, config: PolicyConfig) -> Plan:
    """Demote in non-increasing PSR order until HP drops to zero or below."""
    hp = _hp_value(hp)
    plan = Plan(hp_before=hp, hp_after=hp)
    if hp <= 0:
        return plan
    candidates = sorted((r for r in psr_records if not _below_bound(r, config)),
                        key=lambda r: (-r.untouched, r.region))
    for rec in candidates:
        if hp <= 0:
            break
        hp -= _shift(rec.untouched)
        plan.demote.append((rec.region, rec.psr))
    plan.hp_after = hp
    return plan


def plan_promotions(hp, candidates, config: PolicyConfig) -> Plan:
    """Promote base-mapped regions in non-decreasing PSR order while HP
    stays at or below zero; stop at the first candidate that would push it
    above."""
    hp = _hp_value(hp)
    plan = Plan(hp_before=hp, hp_after=hp)
    if hp >= 0:
        return plan
    for rec in sorted(candidates, key=lambda r: (r.untouched, r.region)):
        if hp + _shift(rec.untouched) > 0:
            break
        hp += _shift(rec.untouched)
        plan.promote.append((rec.region, rec.psr))
    plan.hp_after = hp
    return plan


def region_psr(region: int, touched: int) -> PsrRecord:
    """PSR of a base-mapped 2 MiB region from its touched-frame count."""
    if not 0 <= touched <= FRAMES_PER_HUGE:
        raise ValueError(f"touched count {touched} out of range")
    return PsrRecord(region, FRAMES_PER_HUGE - touched)


def fixed_threshold_plan(reports: list[FineGrainReport], threshold: int,
                         base_regions: list[PsrRecord] = (), hp=0) -> Plan:
    """Fixed-count comparator: demote huge regions with at most ``threshold``
    touched base regions, promote base regions with more."""
    if not 0 <= threshold <= FRAMES_PER_HUGE:
        raise ValueError(f"threshold {threshold} outside [0, 512]")
    hp = _hp_value(hp)
    plan = Plan(hp_before=hp)
    for rep in sorted(reports, key=lambda r: r.region):
        if rep.valid and rep.n_s <= threshold:
            untouched = FRAMES_PER_HUGE - rep.n_s
            plan.demote.append((rep.region, untouched / FRAMES_PER_HUGE))
            hp -= _shift(untouched)
    for rec in sorted(base_regions, key=lambda r: r.region):
        if FRAMES_PER_HUGE - rec.untouched > threshold:
            plan.promote.append((rec.region, rec.psr))
            hp += _shift(rec.untouched)
    plan.hp_after = hp
    return plan
