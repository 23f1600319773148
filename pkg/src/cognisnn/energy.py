"""Operation-count energy estimate: E_sop per spike-driven accumulate, E_mac per real MAC."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidArgumentError
from .net import GATES, CogniSNN, SpikeStats, spike_statistics

E_SOP_PJ = 0.9
E_MAC_PJ = 4.6


@dataclass
class GateEnergy:
    gate: str
    sop: float
    mac: float
    energy_pj: float

    def to_line(self) -> str:
        return f"gate={self.gate} sop={self.sop!r} mac={self.mac!r} energy_pj={self.energy_pj!r}"


@dataclass
class EnergyReport:
    stats: SpikeStats
    energy_pj: float
    e_sop: float
    e_mac: float
    comparison: list[GateEnergy] = field(default_factory=list)

    def to_text(self) -> str:
        s = self.stats
        lines = [
            f"e_sop_pj={self.e_sop!r} e_mac_pj={self.e_mac!r} samples={s.samples} time_steps={s.time_steps}",
            f"sop={s.sop!r} mac={s.mac!r} stem_mac={s.stem_mac!r} aggregation_mac={s.aggregation_mac!r}",
            f"energy_pj={self.energy_pj!r} energy_per_sample_pj={self.energy_pj / max(s.samples, 1)!r}",
            f"stem_rate={s.stem_rate!r}",
        ]
        lines += [f"node={v} rate={s.node_rates[v]!r} max={s.node_max[v]!r} sop={s.node_sop[v]!r}"
                  for v in sorted(s.node_rates)]
        lines += [c.to_line() for c in self.comparison]
        return "\n".join(lines) + "\n"


def energy_of(stats: SpikeStats, e_sop: float = E_SOP_PJ, e_mac: float = E_MAC_PJ) -> float:
    return e_sop * stats.sop + e_mac * stats.mac


def energy_report(model: CogniSNN, x, task: str | None = None, e_sop: float = E_SOP_PJ,
                  e_mac: float = E_MAC_PJ, compare: tuple[str, ...] = ("OR", "ADD")) -> EnergyReport:
    """Spike statistics of ``model`` on ``x[T, N, C, H, W]`` priced in picojoules.

    ``compare`` re-runs the same weights with each listed gate swapped in.
    """
    if not (e_sop > 0 and e_mac > 0):
        raise InvalidArgumentError(f"energy constants must be positive, got e_sop={e_sop}, e_mac={e_mac}")
    unknown = [g for g in compare if g not in GATES]
    if unknown:
        raise InvalidArgumentError(f"unknown gates {unknown}")
    stats = spike_statistics(model, x, task)
    report = EnergyReport(stats, energy_of(stats, e_sop, e_mac), e_sop, e_mac)
    for gate in compare:
        other = stats if gate == model.config.gate else spike_statistics(model.with_gate(gate), x, task)
        report.comparison.append(GateEnergy(gate, other.sop, other.mac, energy_of(other, e_sop, e_mac)))
    return report
