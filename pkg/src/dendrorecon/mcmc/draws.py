"""Container for posterior draws with convergence checks and persistence."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from ..models import ModelSpec
from .diagnostics import effective_sample_size, split_rhat

__all__ = ["PosteriorDraws", "ConvergenceError", "N_MONITORED_CLIMATE"]

N_MONITORED_CLIMATE = 20
_SCALARS = ("beta2", "sigma_y", "sigma_eta", "sigma_x", "mu_x", "mu_gamma")


class ConvergenceError(RuntimeError):
    """Raised when a summary is requested from chains that failed the R-hat gate."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class PosteriorDraws:
    """Draws shaped ``(chains, saved, ...)`` in model coordinates.

    ``draws["x_mis"]`` holds climate at the years flagged in ``missing``.
    """

    model: str
    years: np.ndarray
    missing: np.ndarray
    draws: dict
    config: Any = None
    spec: ModelSpec | None = None
    acceptance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return int(self.draws["beta2"].shape[0])

    @property
    def n_saved(self) -> int:
        return int(self.draws["beta2"].shape[1])

    @property
    def missing_years(self) -> np.ndarray:
        return self.years[self.missing]

    @property
    def rhat_threshold(self) -> float:
        return float(getattr(self.config, "rhat_threshold", 1.05))

    def __getitem__(self, name) -> np.ndarray:
        return self.draws[name]

    def pooled(self, name) -> np.ndarray:
        """Draws of ``name`` with chains concatenated."""
        a = self.draws[name]
        return a.reshape((-1,) + a.shape[2:])

    def mean(self, name) -> np.ndarray:
        return self.pooled(name).mean(axis=0)

    def monitored(self) -> dict:
        """Quantities the convergence gate checks, each shaped ``(chains, saved)``."""
        out = {k: self.draws[k] for k in _SCALARS if k in self.draws}
        xm = self.draws["x_mis"]
        m = xm.shape[2]
        if m:
            idx = np.unique(np.linspace(0, m - 1, min(N_MONITORED_CLIMATE, m)).round().astype(int))
            years = self.missing_years
            for i in idx:
                out[f"x[{int(years[i])}]"] = xm[:, :, i]
        return out

    def diagnostics(self) -> dict:
        out = {}
        for name, arr in self.monitored().items():
            out[name] = {"rhat": split_rhat(arr), "ess": effective_sample_size(arr)}
        return out

    def max_rhat(self) -> float:
        vals = [d["rhat"] for d in self.diagnostics().values()]
        vals = [v for v in vals if np.isfinite(v)] or [float("nan")]
        return float(max(vals))

    @property
    def converged(self) -> bool:
        diag = self.diagnostics()
        return all(d["rhat"] <= self.rhat_threshold for d in diag.values())

    def reconstruction_summary(self, force: bool = False) -> dict:
        """Posterior median with central 50% and 95% intervals for missing-year climate.

        Raises ``ConvergenceError`` when any monitored R-hat exceeds the
        threshold, unless ``force``.
        """
        diag = self.diagnostics()
        bad = {k: v["rhat"] for k, v in diag.items() if not v["rhat"] <= self.rhat_threshold}
        if bad and not force:
            worst = max(bad, key=lambda k: bad[k] if np.isfinite(bad[k]) else np.inf)
            raise ConvergenceError(
                f"R-hat above {self.rhat_threshold} for {len(bad)} monitored quantities "
                f"(worst {worst}: {bad[worst]:.3f}); run longer chains or pass force",
                diagnostics=diag,
            )
        x = self.pooled("x_mis")
        q = np.quantile(x, [0.5, 0.25, 0.75, 0.025, 0.975], axis=0)
        return {
            "year": self.missing_years.copy(),
            "median": q[0],
            "lo50": q[1],
            "hi50": q[2],
            "lo95": q[3],
            "hi95": q[4],
            "converged": not bad,
        }

    def interval(self, level: float) -> tuple:
        x = self.pooled("x_mis")
        tail = (1.0 - level) / 2.0
        return np.quantile(x, tail, axis=0), np.quantile(x, 1.0 - tail, axis=0)

    # -- persistence -------------------------------------------------------------

    def _meta(self) -> dict:
        meta = {"model": self.model, **self.meta}
        if self.spec is not None:
            meta["spec"] = self.spec.to_dict()
        if self.config is not None:
            meta["sampler"] = asdict(self.config)
        return meta

    def save(self, path) -> None:
        arrays = {f"draw_{k}": np.asarray(v, dtype="<f8") for k, v in self.draws.items()}
        arrays["years"] = np.asarray(self.years, dtype="<i8")
        arrays["missing"] = np.asarray(self.missing, dtype=bool)
        if self.acceptance is not None:
            arrays["acceptance"] = np.asarray(self.acceptance, dtype="<f8")
        arrays["meta"] = np.array(json.dumps(self._meta(), sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        from .sampler import SamplerConfig

        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            draws = {k[len("draw_"):]: z[k] for k in z.files if k.startswith("draw_")}
            years = z["years"]
            missing = z["missing"]
            acc = z["acceptance"] if "acceptance" in z.files else None
        spec = ModelSpec.from_dict(meta.pop("spec")) if "spec" in meta else None
        config = SamplerConfig(**meta.pop("sampler")) if "sampler" in meta else None
        model = meta.pop("model")
        return cls(model=model, years=years, missing=missing, draws=draws, config=config,
                   spec=spec, acceptance=acc, meta=meta)

    def write_csv(self, path) -> None:
        """Scalar draws in long form: chain, draw, then one column per scalar."""
        names = [k for k, v in self.draws.items() if v.ndim == 2]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["chain", "draw", *names]) + "\n")
            for c in range(self.n_chains):
                for s in range(self.n_saved):
                    vals = [f"{self.draws[k][c, s]:.6g}" for k in names]
                    fh.write(f"{c},{s}," + ",".join(vals) + "\n")
