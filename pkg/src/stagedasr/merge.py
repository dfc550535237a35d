"""Linear checkpoint interpolation and ratio-sweep evaluation.

`merge(base, tuned, lam)` weights the tuned model by `lam` and the base
model by `1 - lam`, uniformly over every parameter. Endpoints are exact
copies; lineage records both parents and the ratio so the merge tree can
be reconstructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelParams

DEFAULT_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def _check_compatible(base: ModelParams, tuned: ModelParams) -> None:
    if base.hp != tuned.hp:
        raise ConfigError("cannot merge: hyperparameters differ "
                          f"({base.hp} vs {tuned.hp})")
    if set(base.tensors) != set(tuned.tensors):
        raise ConfigError("cannot merge: parameter name sets differ")
    for name, t in base.tensors.items():
        if t.shape != tuned.tensors[name].shape:
            raise ConfigError(f"cannot merge: shape mismatch for {name}")


def merge(base: ModelParams, tuned: ModelParams, lam: float) -> ModelParams:
    """Elementwise (1-lam)*base + lam*tuned over every parameter."""
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"merge ratio must be in [0, 1], got {lam}")
    _check_compatible(base, tuned)
    if lam == 0.0:
        out = base.copy()
    elif lam == 1.0:
        out = tuned.copy()
    else:
        out = base.copy()
        for name, t in out.tensors.items():
            t.data[...] = (1.0 - lam) * base.tensors[name].data \
                + lam * tuned.tensors[name].data
    out.lineage = list(tuned.lineage) + [
        f"merge lambda={lam:g} base=[{'>'.join(base.lineage)}]"]
    return out


@dataclass
class SweepRow:
    ratio: float
    metrics: dict | None
    error: str | None = None


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        keys = []
        for r in self.rows:
            if r.metrics:
                keys = list(r.metrics)
                break
        lines = [",".join(["ratio"] + keys + ["error"])]
        for r in self.rows:
            vals = [f"{r.metrics[k]:.4f}" if r.metrics else "" for k in keys]
            lines.append(",".join([f"{r.ratio:g}"] + vals + [r.error or ""]))
        return "\n".join(lines) + "\n"


def ratio_sweep(base: ModelParams, tuned: ModelParams, ratios, eval_fn) -> SweepResult:
    """Evaluate `eval_fn(merged) -> dict` at each ratio; per-row failures
    are recorded and the sweep continues."""
    result = SweepResult()
    for lam in ratios:
        if not (0.0 <= lam <= 1.0):
            raise ConfigError(f"sweep ratio {lam} outside [0, 1]")
        try:
            merged = merge(base, tuned, float(lam))
            result.rows.append(SweepRow(float(lam), dict(eval_fn(merged))))
        except Exception as exc:  # keep sweeping past a bad row
            result.rows.append(SweepRow(float(lam), None, f"{type(exc).__name__}: {exc}"))
    return result
