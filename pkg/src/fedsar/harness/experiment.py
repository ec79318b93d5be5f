"""Run one configured experiment and write its output files.

Output directory layout::

    config.yaml    resolved configuration
    rounds.csv     per-round ACC/ASR/F1 and defense diagnostics
    health.csv     one row per (round, client)
    summary.json   final ACC, ASR, macro-F1, AUC-RA
    timings.csv    per-round wall-clock seconds (not deterministic)
    timings.json   mean latencies
    model.fsrp     final global parameters

Everything except the two timing files is byte-identical across reruns of
the same config.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsar import model as nn
from fedsar.harness.config import ExperimentConfig, dump_config
from fedsar.harness.metrics import auc_ra
from fedsar.harness.simulation import RoundMetrics, build_federation, initial_state, run_rounds

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "acc", "asr", "macro_f1", "mask_density", "tau", "xi", "zeta")
HEALTH_COLUMNS = ("round", "client_id", "malicious", "selected", "health", "weight")
TIMING_COLUMNS = ("round", "client_time_s", "server_time_s")
DETERMINISTIC_FILES = ("config.yaml", "rounds.csv", "health.csv", "summary.json", "model.fsrp")


@dataclass
class ExperimentResult:
    out_dir: Path
    history: list[RoundMetrics]
    summary: dict
    params: nn.ModelParams


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_round_metrics(out: Path, history: list[RoundMetrics]) -> None:
    _write_csv(out / "rounds.csv", ROUND_COLUMNS, (
        (m.round, m.acc, m.asr, m.macro_f1, m.mask_density, m.tau, m.xi, m.zeta) for m in history
    ))
    _write_csv(out / "health.csv", HEALTH_COLUMNS, (
        (m.round, c.client_id, c.malicious, c.selected, c.health, c.weight)
        for m in history for c in m.clients
    ))
    _write_csv(out / "timings.csv", TIMING_COLUMNS, (
        (m.round, m.client_time_s, m.server_time_s) for m in history
    ))


def summarize(fed, params: nn.ModelParams, history: list[RoundMetrics]) -> dict:
    last = history[-1]
    auc = auc_ra(params, fed.test, fed.cfg.auc_looks, fed.root.child("auc-ra"))
    return {
        "rounds": last.round,
        "acc": last.acc,
        "asr": last.asr,
        "macro_f1": last.macro_f1,
        "auc_ra": auc,
        "malicious_clients": list(fed.malicious),
        "fallback_rounds": [m.round for m in history if m.fallback],
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, on_round=None) -> ExperimentResult:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    fed = build_federation(cfg)
    log.info("seed %d, aggregator %s, malicious clients %s", cfg.seed, cfg.aggregator, fed.malicious)
    state, history = run_rounds(fed, initial_state(fed), on_round=on_round)

    write_round_metrics(out, history)
    summary = summarize(fed, state.global_params, history)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    timings = {
        "mean_client_time_s": float(np.mean([m.client_time_s for m in history])),
        "mean_server_time_s": float(np.mean([m.server_time_s for m in history])),
    }
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "model.fsrp").write_bytes(nn.params_to_bytes(state.global_params))
    return ExperimentResult(out, history, summary, state.global_params)
