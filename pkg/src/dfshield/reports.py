"""Serializable evaluation results."""
import json
import math
from dataclasses import asdict, dataclass, field


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _parse_num(v):
    return float(v) if isinstance(v, str) else v


@dataclass
class RobustnessReport:
    clean_accuracy: float
    n_samples: int
    entries: list = field(default_factory=list)

    def add(self, attack, norm, eps, iterations, accuracy):
        self.entries.append({"attack": attack, "norm": norm, "eps": float(eps),
                             "iterations": int(iterations), "accuracy": float(accuracy)})

    def accuracy(self, iterations, eps=None):
        for e in self.entries:
            if e["iterations"] == iterations and (eps is None or e["eps"] == eps):
                return e["accuracy"]
        raise KeyError((iterations, eps))

    def to_dict(self):
        return {"clean_accuracy": self.clean_accuracy, "n_samples": self.n_samples,
                "entries": [{k: _num(v) for k, v in e.items()} for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        entries = [{**e, "eps": _parse_num(e["eps"])} for e in d["entries"]]
        return cls(d["clean_accuracy"], d["n_samples"], entries)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class DiversityReport:
    recall: float
    coverage: float
    ndb: int
    jsd: float
    k: int
    bins: int
    significance: float

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class SurfaceGrid:
    axis: list
    values: list
    seeds: tuple
    radius: float

    @property
    def resolution(self):
        return len(self.axis)

    def center(self):
        m = self.resolution // 2
        return self.values[m][m]

    def to_csv(self):
        """Header row of axis coordinates, then one row per first-axis value."""
        lines = ["a\\b," + ",".join(repr(float(b)) for b in self.axis)]
        for a, row in zip(self.axis, self.values):
            lines.append(repr(float(a)) + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def to_ppm(self):
        """8-bit binary PPM (P6) heat map: low loss blue, high loss red."""
        flat = [v for row in self.values for v in row]
        lo, hi = min(flat), max(flat)
        span = hi - lo if hi > lo else 1.0
        r = self.resolution
        pix = bytearray()
        for row in self.values:
            for v in row:
                level = int(round(255 * (v - lo) / span))
                pix += bytes((level, 0, 255 - level))
        return f"P6\n{r} {r}\n255\n".encode("ascii") + bytes(pix)
