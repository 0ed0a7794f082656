"""Theoretical energy: SOPs = rate * T * FLOPs, 77 fJ per SOP, 12.5 pJ per FLOP.

FLOPs are counted as multiply-accumulates (one per weight use).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .neurons import SpikeRecord

E_SOP = 77e-15  # J per synaptic operation
E_FLOP = 12.5e-12  # J per FLOP (MAC)


@dataclass
class LayerEnergy:
    name: str
    flops: int
    source: str | None
    firing_rate: float | None
    sops: float


@dataclass
class EnergyReport:
    time_steps: int
    layers: list = field(default_factory=list)

    @property
    def spiking_layers(self) -> list:
        return [l for l in self.layers if l.source is not None]

    @property
    def analog_layers(self) -> list:
        return [l for l in self.layers if l.source is None]

    @property
    def total_sops(self) -> float:
        return sum(l.sops for l in self.spiking_layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def snn_joules(self) -> float:
        return E_SOP * self.total_sops

    @property
    def ann_joules(self) -> float:
        return E_FLOP * self.total_flops

    @property
    def analog_flops(self) -> int:
        return sum(l.flops for l in self.analog_layers)

    @property
    def analog_mac_joules(self) -> float:
        """Analog-input layers counted as MACs on every step."""
        return E_FLOP * self.analog_flops * self.time_steps

    @property
    def analog_sop_joules(self) -> float:
        """Analog-input layers counted as SOPs at rate 1."""
        return E_SOP * self.analog_flops * self.time_steps

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "flops_MAC", "input_from", "firing_rate", "SOPs_G", "snn_energy_mJ", "ann_energy_mJ"])
        for l in self.layers:
            w.writerow([
                l.name, l.flops, l.source or "analog",
                "" if l.firing_rate is None else repr(l.firing_rate),
                repr(l.sops / 1e9), repr(E_SOP * l.sops * 1e3), repr(E_FLOP * l.flops * 1e3),
            ])
        w.writerow(["total", self.total_flops, "", "", repr(self.total_sops / 1e9),
                    repr(self.snn_joules * 1e3), repr(self.ann_joules * 1e3)])
        return buf.getvalue()

    def summary(self) -> str:
        return "\n".join([
            f"time_steps: {self.time_steps}",
            f"total_SOPs_G: {self.total_sops / 1e9:.6g}",
            f"total_FLOPs_G: {self.total_flops / 1e9:.6g}",
            f"snn_energy_mJ: {self.snn_joules * 1e3:.6g}",
            f"ann_energy_mJ: {self.ann_joules * 1e3:.6g}",
            f"analog_input_FLOPs_G: {self.analog_flops / 1e9:.6g}",
            f"analog_input_as_MAC_mJ: {self.analog_mac_joules * 1e3:.6g}",
            f"analog_input_as_SOP_mJ: {self.analog_sop_joules * 1e3:.6g}",
        ]) + "\n"


def count_flops(net) -> list:
    """``(layer, MACs per sample, feeding spiking layer)`` for every weight layer."""
    return net.flops()


def measure_firing_rate(record: SpikeRecord, count_mode: str = "magnitude") -> dict:
    """Per spiking layer: spike magnitude (or nonzero count) per neuron per step."""
    if count_mode not in ("magnitude", "nonzero"):
        raise ValueError("count_mode must be 'magnitude' or 'nonzero'")
    if not record.layers:
        raise ValueError("spike record is empty")
    return {name: record.firing_rate(name, count_mode) for name in record.layers}


def estimate_energy(flops: list, rates: dict, time_steps: int) -> EnergyReport:
    report = EnergyReport(time_steps)
    for name, count, source in flops:
        if source is None:
            report.layers.append(LayerEnergy(name, count, None, None, 0.0))
            continue
        rate = rates[source]
        report.layers.append(LayerEnergy(name, count, source, rate, rate * time_steps * count))
    return report


def sops_to_mj(sops: float) -> float:
    return E_SOP * sops * 1e3
