"""Flattened parameter layout and per-chain draw archives.

Every stored iteration is one row of a float matrix whose columns follow
a fixed naming scheme (``sigma_eps``, ``beta_mean.c.k``, ``lambda_mean.c.k``,
``sigma_beta.c.k``, ``sigma_lambda.c.k``, ``K.c``, ``nu.c``, ``I.c.k``,
``psi.i``, ``beta.i.k``, ``lambda.i.k``).  Class and subject indices are
1-based in column names; coefficient indices start at 0 for the intercept.
``sigma_eps`` stores the residual *standard deviation*.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .model import ModelState

__all__ = ["ParamLayout", "ChainDraws", "layout_from_columns"]


@dataclass(frozen=True)
class ParamLayout:
    """Column layout of a flattened model state for K, C, N."""

    max_changepoints: int
    n_classes: int
    n_subjects: int

    def __post_init__(self):
        K, C, N = self.max_changepoints, self.n_classes, self.n_subjects
        names = ["sigma_eps"]
        names += [f"beta_mean.{c}.{k}" for c in range(1, C + 1) for k in range(K + 2)]
        names += [f"lambda_mean.{c}.{k}" for c in range(1, C + 1) for k in range(1, K + 1)]
        names += [f"sigma_beta.{c}.{k}" for c in range(1, C + 1) for k in range(K + 2)]
        names += [f"sigma_lambda.{c}.{k}" for c in range(1, C + 1) for k in range(1, K + 1)]
        names += [f"K.{c}" for c in range(1, C + 1)]
        names += [f"nu.{c}" for c in range(1, C + 1)]
        names += [f"I.{c}.{k}" for c in range(1, C + 1) for k in range(1, K + 1)]
        names += [f"psi.{i}" for i in range(1, N + 1)]
        names += [f"beta.{i}.{k}" for i in range(1, N + 1) for k in range(K + 2)]
        names += [f"lambda.{i}.{k}" for i in range(1, N + 1) for k in range(1, K + 1)]
        object.__setattr__(self, "_names", tuple(names))

        slices = {}
        pos = 0

        def take(name, count):
            nonlocal pos
            slices[name] = slice(pos, pos + count)
            pos += count

        take("sigma_eps", 1)
        take("beta_mean", C * (K + 2))
        take("lambda_mean", C * K)
        take("sigma_beta", C * (K + 2))
        take("sigma_lambda", C * K)
        take("count", C)
        take("nu", C)
        take("indicators", C * K)
        take("psi", N)
        take("beta", N * (K + 2))
        take("lam", N * K)
        object.__setattr__(self, "_slices", slices)
        object.__setattr__(self, "n_params", pos)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def block(self, name: str) -> slice:
        return self._slices[name]

    def view(self, rows: np.ndarray, name: str) -> np.ndarray:
        """Block of ``rows`` reshaped to its natural (rows, ...) shape."""
        K, C, N = self.max_changepoints, self.n_classes, self.n_subjects
        shapes = {
            "sigma_eps": (),
            "beta_mean": (C, K + 2),
            "lambda_mean": (C, K),
            "sigma_beta": (C, K + 2),
            "sigma_lambda": (C, K),
            "count": (C,),
            "nu": (C,),
            "indicators": (C, K),
            "psi": (N,),
            "beta": (N, K + 2),
            "lam": (N, K),
        }
        flat = rows[..., self.block(name)]
        return flat.reshape(rows.shape[:-1] + shapes[name])

    def class_level_columns(self) -> list[int]:
        """Indices of the continuous population/class parameters.

        This is the parameter vector used for convergence diagnostics:
        discrete blocks and subject-level effects are excluded.
        """
        idx = []
        for name in ("sigma_eps", "beta_mean", "lambda_mean", "sigma_beta", "sigma_lambda", "nu"):
            sl = self.block(name)
            idx.extend(range(sl.start, sl.stop))
        return idx

    def flatten_into(self, row: np.ndarray, s: ModelState) -> None:
        """Write a ModelState into a preallocated row (class labels 1-based)."""
        row[self.block("sigma_eps")] = math.sqrt(s.resid_var)
        row[self.block("beta_mean")] = s.beta_mean.ravel()
        row[self.block("lambda_mean")] = s.cp_mean.ravel()
        row[self.block("sigma_beta")] = s.beta_sd.ravel()
        row[self.block("sigma_lambda")] = s.cp_sd.ravel()
        row[self.block("count")] = s.n_active
        row[self.block("nu")] = s.mixing
        row[self.block("indicators")] = s.indicators.ravel()
        row[self.block("psi")] = s.membership + 1
        row[self.block("beta")] = s.beta.ravel()
        row[self.block("lam")] = s.lam.ravel()

    def unflatten(self, row: np.ndarray) -> ModelState:
        K, C, N = self.max_changepoints, self.n_classes, self.n_subjects
        get = lambda name: row[self.block(name)]
        return ModelState(
            resid_var=float(get("sigma_eps")[0]) ** 2,
            mixing=get("nu").copy(),
            membership=get("psi").astype(int) - 1,
            beta_mean=get("beta_mean").reshape(C, K + 2).copy(),
            beta_sd=get("sigma_beta").reshape(C, K + 2).copy(),
            cp_mean=get("lambda_mean").reshape(C, K).copy(),
            cp_sd=get("sigma_lambda").reshape(C, K).copy(),
            n_active=get("count").astype(int),
            indicators=get("indicators").reshape(C, K).astype(int),
            beta=get("beta").reshape(N, K + 2).copy(),
            lam=get("lam").reshape(N, K).copy(),
        )


def layout_from_columns(columns) -> ParamLayout:
    """Reconstruct a layout from a stored CSV header."""
    C = 0
    K = 0
    N = 0
    for name in columns:
        m = re.fullmatch(r"K\.(\d+)", name)
        if m:
            C = max(C, int(m.group(1)))
        m = re.fullmatch(r"lambda_mean\.\d+\.(\d+)", name)
        if m:
            K = max(K, int(m.group(1)))
        m = re.fullmatch(r"psi\.(\d+)", name)
        if m:
            N = max(N, int(m.group(1)))
    layout = ParamLayout(max_changepoints=K, n_classes=C, n_subjects=N)
    if list(layout.names) != list(columns):
        raise ValueError("column header does not match the canonical layout")
    return layout


@dataclass
class ChainDraws:
    """Post-burn-in draws of one chain, one flattened state per row."""

    layout: ParamLayout
    states: np.ndarray  # (n_stored, n_params)
    chain_id: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_stored(self) -> int:
        return self.states.shape[0]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.layout.names

    def state_at(self, row: int) -> ModelState:
        return self.layout.unflatten(self.states[row])

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.states, name)

    def copy(self) -> "ChainDraws":
        return ChainDraws(
            layout=self.layout,
            states=self.states.copy(),
            chain_id=self.chain_id,
            seed=self.seed,
            meta=dict(self.meta),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.states:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, chain_id: int = 0, seed: int = 0) -> "ChainDraws":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        layout = layout_from_columns(header)
        states = np.array(rows, dtype=float).reshape(len(rows), layout.n_params)
        return cls(layout=layout, states=states, chain_id=chain_id, seed=seed)
