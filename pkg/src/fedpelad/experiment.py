"""Batch runner: one pretrained base, every strategy, tidy CSV/Markdown artifacts."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ExperimentConfig
from .csi import Dataset, build_dataset
from .federation import (
    ConfigError,
    ExperimentHistory,
    FederationState,
    RoundRecord,
    Strategy,
    closed_form_cuc,
    pretrain_centralized,
    run_federation,
)
from .lora import Autoencoder, base_digest, build_autoencoder, model_to_bytes, param_digest

log = logging.getLogger(__name__)

_MODEL_INIT_STREAM = 0xA1
SWEEP_AXES = ("rank", "alpha_ratio", "lr_ratio")
_AXIS_ALIASES = {"r": "rank", "rank": "rank", "alpha_ratio": "alpha_ratio", "lr_ratio": "lr_ratio"}


def atomic_write(path: str | Path, data: str | bytes) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            mode = "wb" if isinstance(data, bytes) else "w"
            with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


@dataclass
class Prepared:
    """Datasets and pretrained base shared by every strategy of one experiment."""

    datasets: list[Dataset]
    base: Autoencoder
    dataset_digests: list[str]
    base_digest: str


def prepare(cfg: ExperimentConfig) -> Prepared:
    m = cfg.model
    datasets = [build_dataset(cc, cfg.data.samples_per_ue) for cc in cfg.channel_configs()]
    model = build_autoencoder(
        m.n_delay, m.n_tx, m.gamma, m.hidden, m.lora_layers,
        cfg.lora.rank, cfg.lora.alpha_ratio * cfg.lora.rank,
        np.random.default_rng([cfg.run.seed, _MODEL_INIT_STREAM]),
    )
    base = pretrain_centralized(model, datasets, cfg.run.pretrain_epochs, cfg.fed.lr, cfg.fed.batch_size, cfg.run.seed)
    enc_params = [p for layer in base.encoder.layers for p in (layer.w, layer.bias)]
    digest = param_digest(enc_params) + ":" + base_digest(base.decoder)
    return Prepared(datasets, base, [d.digest() for d in datasets], digest)


def fedavg_reference_cuc(base: Autoencoder, cfg: ExperimentConfig) -> int:
    """FedAvg's ledger total for this config, from parameter counts."""
    return closed_form_cuc(base, Strategy.FEDAVG, cfg.fed.rounds, cfg.fed.ues)


@dataclass
class ComparisonRow:
    strategy: Strategy
    rounds: int
    cuc_total: int
    cuc_fedavg: int
    nmse_db_avg: float
    nmse_db: list[float]

    @property
    def rcuc(self) -> Fraction:
        return Fraction(self.cuc_total, self.cuc_fedavg)


@dataclass
class ReportBundle:
    histories: dict[Strategy, ExperimentHistory]
    comparison: list[ComparisonRow]
    paths: dict[str, Path] = field(default_factory=dict)


def comparison_rows(histories: Mapping[Strategy, ExperimentHistory], cuc_fedavg: int) -> list[ComparisonRow]:
    return [
        ComparisonRow(s, h.final.round, h.cuc_total, cuc_fedavg, h.final.nmse_db_avg, list(h.final.nmse_db))
        for s, h in histories.items()
    ]


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    n_ues = len(rows[0].nmse_db)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "rounds", "cuc_total", "cuc_fedavg", "rcuc", "nmse_db_avg"]
               + [f"nmse_db_ue{k}" for k in range(n_ues)])
    for r in rows:
        w.writerow([r.strategy.value, r.rounds, r.cuc_total, r.cuc_fedavg, f"{float(r.rcuc):.6f}",
                    f"{r.nmse_db_avg:.6f}"] + [f"{x:.6f}" for x in r.nmse_db])
    return buf.getvalue()


def comparison_markdown(rows: Sequence[ComparisonRow]) -> str:
    n_ues = len(rows[0].nmse_db)
    head = ["Method"] + [f"UE{k} (dB)" for k in range(n_ues)] + ["Avg (dB)", "rCUC"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r.strategy.value] + [f"{x:.2f}" for x in r.nmse_db]
        cells += [f"{r.nmse_db_avg:.2f}", f"{100 * float(r.rcuc):.2f}%"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_curve(histories: Mapping[Strategy, ExperimentHistory]) -> str:
    """Long-format CSV of (cuc, avg NMSE dB) points, one series per strategy.

    The zero-cost round-0 point is left out so every series is strictly
    increasing in cuc and has one point per round.
    """
    if not histories:
        raise ConfigError("no histories to plot")
    buf = io.StringIO()
    buf.write("strategy,round,cuc,nmse_db_avg\n")
    for s, h in histories.items():
        for r in h.records[1:]:
            buf.write(f"{Strategy(s).value},{r.round},{r.cuc_cumulative},{r.nmse_db_avg:.6f}\n")
    return buf.getvalue()


def _manifest(cfg: ExperimentConfig, prep: Prepared, cuc_fedavg: int, extra: dict | None = None) -> str:
    body = {
        "seed": cfg.run.seed,
        "ues": cfg.fed.ues,
        "rounds": cfg.fed.rounds,
        "rank": cfg.lora.rank,
        "alpha_ratio": cfg.lora.alpha_ratio,
        "lr_ratio": cfg.fed.lr_ratio,
        "pretrain_epochs": cfg.run.pretrain_epochs,
        "cuc_fedavg": cuc_fedavg,
        "dataset_sha256": prep.dataset_digests,
        "base_sha256": prep.base_digest,
    }
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


RoundObserver = Callable[[Strategy, FederationState, RoundRecord], None]


def run_experiment(
    cfg: ExperimentConfig,
    prepared: Prepared | None = None,
    on_round: RoundObserver | None = None,
) -> ReportBundle:
    """Pretrain once, run every requested strategy from a copy of that base, write artifacts.

    ``on_round(strategy, state, record)`` is called after every round; it
    must not mutate ``state``.
    """
    prep = prepared if prepared is not None else prepare(cfg)
    hyper = cfg.hyper()
    out = Path(cfg.run.out_dir)
    histories: dict[Strategy, ExperimentHistory] = {}
    paths: dict[str, Path] = {}
    for s in cfg.fed.strategies:
        log.info("running %s", s.value)
        observer = None if on_round is None else (lambda st, rec, s=s: on_round(s, st, rec))
        h = run_federation(prep.base.copy(), prep.datasets, s, hyper, cfg.run.seed, observer)
        histories[s] = h
        paths[f"history_{s.value}"] = atomic_write(out / f"history_{s.value}.csv", h.to_csv())

    cuc_fedavg = (
        histories[Strategy.FEDAVG].cuc_total if Strategy.FEDAVG in histories else fedavg_reference_cuc(prep.base, cfg)
    )
    rows = comparison_rows(histories, cuc_fedavg)
    paths["comparison"] = atomic_write(out / "comparison.csv", comparison_csv(rows))
    paths["comparison_md"] = atomic_write(out / "comparison.md", comparison_markdown(rows))
    paths["curve"] = atomic_write(out / "curve.csv", emit_curve(histories))
    paths["base"] = atomic_write(out / "base.fpmd", model_to_bytes(prep.base))
    paths["manifest"] = atomic_write(
        out / "manifest.json",
        _manifest(cfg, prep, cuc_fedavg, {"strategies": [s.value for s in histories]}),
    )
    return ReportBundle(histories, rows, paths)


def parse_axis(spec: str) -> tuple[str, tuple[float, ...]]:
    """``"r=2,4,8"`` -> ``("rank", (2, 4, 8))``."""
    if "=" not in spec:
        raise ConfigError(f"axis spec {spec!r} must look like name=v1,v2,...")
    name, raw = (s.strip() for s in spec.split("=", 1))
    if name not in _AXIS_ALIASES:
        raise ConfigError(f"unknown sweep axis {name!r}; expected one of r, alpha_ratio, lr_ratio")
    name = _AXIS_ALIASES[name]
    conv = int if name == "rank" else float
    try:
        values = tuple(conv(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value in axis {name}: {exc}") from None
    if not values:
        raise ConfigError(f"axis {name} has no values")
    return name, values


@dataclass
class SweepCell:
    rank: int
    alpha_ratio: float
    lr_ratio: float
    cuc_total: int
    cuc_fedavg: int
    nmse_db_avg: float

    @property
    def rcuc(self) -> Fraction:
        return Fraction(self.cuc_total, self.cuc_fedavg)


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    buf.write("rank,alpha_ratio,lr_ratio,cuc_total,cuc_fedavg,rcuc,nmse_db_avg\n")
    for c in cells:
        buf.write(f"{c.rank},{c.alpha_ratio:g},{c.lr_ratio:g},{c.cuc_total},{c.cuc_fedavg},"
                  f"{float(c.rcuc):.6f},{c.nmse_db_avg:.6f}\n")
    return buf.getvalue()


def sweep(
    cfg: ExperimentConfig,
    axes: Mapping[str, Sequence[float]],
    strategy: Strategy = Strategy.FEDPELAD,
    prepared: Prepared | None = None,
) -> list[SweepCell]:
    """Cartesian grid over rank / alpha_ratio / lr_ratio, all cells sharing one pretrained base."""
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ConfigError("empty sweep grid")
    for name in axes:
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}")
    names = list(axes)
    cells_cfg = [cfg.with_overrides(**dict(zip(names, combo))) for combo in itertools.product(*axes.values())]
    prep = prepared if prepared is not None else prepare(cfg)
    cuc_fedavg = fedavg_reference_cuc(prep.base, cfg)
    cells = []
    for c in cells_cfg:
        log.info("sweep cell r=%d alpha/r=%g lr_ratio=%g", c.lora.rank, c.lora.alpha_ratio, c.fed.lr_ratio)
        h = run_federation(prep.base.copy(), prep.datasets, strategy, c.hyper(), c.run.seed)
        cells.append(SweepCell(c.lora.rank, c.lora.alpha_ratio, c.fed.lr_ratio, h.cuc_total, cuc_fedavg,
                               h.final.nmse_db_avg))
    out = Path(cfg.run.out_dir)
    atomic_write(out / "sweep_grid.csv", sweep_csv(cells))
    atomic_write(out / "sweep_manifest.json",
                 _manifest(cfg, prep, cuc_fedavg, {"axes": {k: list(v) for k, v in axes.items()},
                                                   "strategy": Strategy(strategy).value}))
    return cells


def report(in_dir: str | Path) -> str:
    """Rebuild the comparison table from a run directory, rechecking every rCUC from its integers."""
    in_dir = Path(in_dir)
    path = in_dir / "comparison.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; is this a run output directory?")
    rows = []
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            row = ComparisonRow(
                Strategy(rec["strategy"]), int(rec["rounds"]), int(rec["cuc_total"]), int(rec["cuc_fedavg"]),
                float(rec["nmse_db_avg"]),
                [float(v) for k, v in rec.items() if k.startswith("nmse_db_ue")],
            )
            if f"{float(row.rcuc):.6f}" != rec["rcuc"]:
                raise ValueError(f"{path}: rcuc for {row.strategy.value} does not match its ledger integers")
            hist = in_dir / f"history_{row.strategy.value}.csv"
            if hist.is_file():
                last = hist.read_text().strip().splitlines()[-1].split(",")
                if int(last[2]) != row.cuc_total:
                    raise ValueError(f"{hist}: final cuc {last[2]} disagrees with comparison.csv")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path} has no rows")
    return comparison_markdown(rows)
