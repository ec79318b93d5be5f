"""Command-line entry point: ``fedsar simulate|sweep|ablate|verify|export-data``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import yaml

from fedsar.errors import ConfigurationError, RoundError
from fedsar.harness.config import ExperimentConfig, config_from_dict, load_config, with_overrides

log = logging.getLogger("fedsar")

SWEEP_KEYS = {
    "levels": "defense.levels",
    "xi": "defense.xi",
    "tau": "defense.tau_percentile",
    "alpha": "data.alpha",
    "malicious": "attack.malicious_fraction",
    "poison": "attack.ratio",
}
ABLATIONS = {
    "full": {},
    "no_fdci": {"ablation.no_fdci": True},
    "no_naat": {"ablation.no_naat": True},
    "no_dhat": {"ablation.no_dhat": True},
}


def _parse_value(text: str):
    return yaml.safe_load(text)


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    overrides = _parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return with_overrides(cfg, **overrides) if overrides else cfg


def _progress(m) -> None:
    log.info("round %3d  acc=%.3f  asr=%.3f  f1=%.3f  mask=%.3f  xi=%.3f",
             m.round, m.acc, m.asr, m.macro_f1, m.mask_density, m.xi)


def _run(cfg: ExperimentConfig, out_dir) -> dict:
    from fedsar.harness.experiment import run_experiment

    result = run_experiment(cfg, out_dir, on_round=_progress)
    return result.summary


def cmd_simulate(args) -> int:
    cfg = _base_config(args)
    summary = _run(cfg, cfg.output_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _grid(specs) -> list[tuple[tuple[str, object], ...]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigurationError(f"grid axis {spec!r} is not NAME=v1,v2,...")
        name, values = spec.split("=", 1)
        key = SWEEP_KEYS.get(name.strip(), name.strip())
        axes.append([(key, _parse_value(v)) for v in values.split(",") if v.strip()])
    return list(itertools.product(*axes))


def cmd_sweep(args) -> int:
    base = _base_config(args)
    cells = _grid(args.grid)
    if not cells:
        raise ConfigurationError("sweep needs at least one --grid axis")
    root = Path(args.out or base.output_dir)
    # Validate every cell before running any of them.
    configs = []
    for cell in cells:
        name = "_".join(f"{k.split('.')[-1]}={v}" for k, v in cell)
        configs.append((name, with_overrides(base, **dict(cell))))
    rows = []
    for name, cfg in configs:
        log.info("sweep cell %s", name)
        summary = _run(cfg, root / name)
        rows.append({"cell": name, **{k: summary[k] for k in ("acc", "asr", "macro_f1", "auc_ra")}})
    _print_table(rows)
    return 0


def cmd_ablate(args) -> int:
    base = _base_config(args)
    if base.aggregator != "nadafd":
        base = with_overrides(base, aggregator="nadafd")
    root = Path(args.out or base.output_dir)
    rows = []
    for name, flags in ABLATIONS.items():
        summary = _run(with_overrides(base, **flags), root / name)
        rows.append({"cell": name, **{k: summary[k] for k in ("acc", "asr", "macro_f1", "auc_ra")}})
    _print_table(rows)
    return 0


def cmd_verify(args) -> int:
    from fedsar.harness.selfcheck import run_all

    failed = 0
    for check in run_all(quick=args.quick):
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.detail}")
        failed += not check.passed
    return 1 if failed else 0


def cmd_export_data(args) -> int:
    from fedsar.datasim import export_jsonl
    from fedsar.harness.simulation import build_federation

    cfg = _base_config(args)
    fed = build_federation(cfg)
    out = Path(args.out or cfg.output_dir)
    for name, chips in (("train", fed.train), ("test", fed.test), ("probe", fed.probe)):
        path = export_jsonl(chips, out / f"{name}.jsonl")
        print(f"{name}: {len(chips)} chips -> {path}")
    shards = {str(i): [int(j) for j in s] for i, s in enumerate(fed.shards)}
    (out / "partition.json").write_text(json.dumps({"malicious": list(fed.malicious), "shards": shards}) + "\n",
                                        encoding="utf-8")
    return 0


def _print_table(rows) -> None:
    width = max(len(r["cell"]) for r in rows)
    print(f"{'cell':<{width}}  {'acc':>6}  {'asr':>6}  {'f1':>6}  {'auc_ra':>6}")
    for r in rows:
        print(f"{r['cell']:<{width}}  {r['acc']:6.3f}  {r['asr']:6.3f}  {r['macro_f1']:6.3f}  {r['auc_ra']:6.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides output_dir)"):
        p.add_argument("-c", "--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. defense.xi=0.1 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("-o", "--out", help=out_help)

    common(sub.add_parser("simulate", help="run one experiment"))
    p = sub.add_parser("sweep", help="grid over defense/data/attack parameters")
    common(p, "root directory; one subdirectory per cell")
    p.add_argument("--grid", action="append", default=[], metavar="NAME=v1,v2",
                   help=f"axis; NAME is a dotted key or one of {', '.join(SWEEP_KEYS)}")
    common(sub.add_parser("ablate", help="full / -FDCI / -NAAT / -DHAT"), "root directory")
    p = sub.add_parser("verify", help="contraction check and numeric property suite")
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")
    common(sub.add_parser("export-data", help="dump generated chips as JSON lines"))
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
    "export-data": cmd_export_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except RoundError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
