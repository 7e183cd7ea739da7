"""Run metrics: nearest-rank percentiles, goodput, and the JSON/CSV output files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .noc import DEFAULT_CLOCK_HZ, FLIT_BITS

SCHEMA_VERSION = 1
NOC_CEILING_GBPS = FLIT_BITS * DEFAULT_CLOCK_HZ / 1e9


def nearest_rank(values: Sequence[float], q: float) -> float:
    """The ceil(q/100 * n)-th smallest value (1-based), q in (0, 100]."""
    if not values:
        raise ValueError("no samples")
    if not 0 < q <= 100:
        raise ValueError("percentile must be in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


def goodput_bps(payload_bytes: int, cycles: float, clock_hz: float = DEFAULT_CLOCK_HZ) -> float:
    if cycles <= 0:
        return 0.0
    return payload_bytes * 8 * clock_hz / cycles


@dataclass
class Metrics:
    workload: str
    requests: int
    answered: int
    dropped: int
    in_flight: int
    cycles: int
    goodput_bps: float
    request_rate: float
    latency_median: float
    latency_p99: float
    latency_min: float
    latency_max: float
    clock_hz: float = DEFAULT_CLOCK_HZ
    utilization: dict = field(default_factory=dict)
    drop_reasons: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def goodput_gbps(self) -> float:
        return self.goodput_bps / 1e9

    @property
    def latency_median_ns(self) -> float:
        return self.latency_median * 1e9 / self.clock_hz

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["goodput_gbps"] = self.goodput_gbps
        d["latency_median_ns"] = self.latency_median_ns
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Metrics":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {d.get('schema_version')!r}")
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


def compute_metrics(samples: Sequence[float], *, workload: str = "", payload_bytes: int = 0,
                    cycles: Optional[int] = None, requests: Optional[int] = None,
                    dropped: int = 0, in_flight: int = 0, clock_hz: float = DEFAULT_CLOCK_HZ,
                    utilization: Optional[dict] = None, drop_reasons: Optional[dict] = None,
                    extra: Optional[dict] = None) -> Metrics:
    """Summarize per-request latency samples (cycles).

    ``payload_bytes`` is the goodput-bearing size of one answered request and
    ``cycles`` the measurement span; without it goodput and rate are zero.
    """
    if not samples:
        raise ValueError("compute_metrics needs at least one sample")
    answered = len(samples)
    span = cycles or 0
    rate = answered * clock_hz / span if span else 0.0
    return Metrics(
        workload=workload,
        requests=requests if requests is not None else answered + dropped + in_flight,
        answered=answered,
        dropped=dropped,
        in_flight=in_flight,
        cycles=span,
        goodput_bps=goodput_bps(payload_bytes * answered, span, clock_hz) if span else 0.0,
        request_rate=rate,
        latency_median=nearest_rank(samples, 50),
        latency_p99=nearest_rank(samples, 99),
        latency_min=min(samples),
        latency_max=max(samples),
        clock_hz=clock_hz,
        utilization=dict(utilization or {}),
        drop_reasons=dict(drop_reasons or {}),
        extra=dict(extra or {}),
    )


def write_outputs(outdir, metrics: Metrics, samples: Sequence[tuple], *,
                  traces: Optional[dict[str, list[dict]]] = None) -> Path:
    """metrics.json, samples.csv and traces/<name>.jsonl under ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_json(), indent=2, sort_keys=True) + "\n")
    with open(out / "samples.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["request", "ingress_cycle", "egress_cycle", "latency_cycles"])
        w.writerows(samples)
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for name, records in traces.items():
            with open(tdir / f"{name}.jsonl", "w") as f:
                for rec in records:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def write_curve_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("empty curve")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
