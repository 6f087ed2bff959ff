"""Run experiments from config files, write round CSVs, drive strategy grids.

Command line (installed as ``fedlora-sim``)::

    fedlora-sim simulate CONFIG [key=value | --key value ...]
    fedlora-sim gridrun  CONFIG --strategies CoDesign Random GD:Bottleneck --seeds 0 1 2
    fedlora-sim validate CONFIG
    fedlora-sim costs    CONFIG [--c-bar X] [--json]

Set ``FEDLORA_SIM_OUTPUT`` to redirect every run directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import Pattern
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, parse_config, parse_overrides, serialize_config
from .errors import ConfigError
from .federation import RoundRecord, run_experiment
from .metrics import (
    CostModelInputs,
    backward_cost,
    comm_cost,
    fim_overhead,
    memory_proxy,
)

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "round", "strategy", "seed", "selected", "maps", "layer_probs", "delta_norms",
    "head_delta_norm", "train_loss", "accuracy", "loss", "fim_refreshed",
    "backward_ours", "backward_full", "comm_ours", "comm_full",
    "mem_trainable_params", "mem_activation_slots", "notes",
)
_NUMERIC = (
    "head_delta_norm", "train_loss", "accuracy", "loss", "backward_ours", "backward_full",
    "comm_ours", "comm_full", "mem_trainable_params", "mem_activation_slots",
)


def _g(x) -> str:
    return f"{float(x):.6g}"


def record_row(rec: RoundRecord) -> dict:
    maps = []
    for i in rec.selected:
        m = rec.maps.get(i)
        maps.append("X" if m is None else "".join(str(int(b)) for b in m))
    row = {
        "round": rec.round,
        "strategy": rec.strategy,
        "seed": rec.seed,
        "selected": " ".join(str(i) for i in rec.selected),
        "maps": " ".join(maps),
        "layer_probs": " ".join(f"{p:.6f}" for p in rec.layer_probs),
        "delta_norms": " ".join(_g(v) for v in rec.delta_norms),
        "fim_refreshed": int(rec.fim_refreshed),
        "notes": " | ".join(rec.notes),
    }
    row["head_delta_norm"] = _g(rec.head_delta_norm)
    row["train_loss"] = _g(rec.train_loss)
    row["accuracy"] = _g(rec.accuracy)
    row["loss"] = _g(rec.loss)
    for k in ("backward_ours", "backward_full", "comm_ours", "comm_full",
              "mem_trainable_params", "mem_activation_slots"):
        row[k] = _g(rec.costs.get(k, float("nan")))
    return row


def emit_csv(records, path) -> Path:
    """Header plus one row per round. Floats at 6 significant digits; maps as 0/1 strings."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow(record_row(rec))
    return path


def read_csv(path) -> list[dict]:
    """Parse a round CSV back into typed fields."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row = dict(row)
            row["round"] = int(row["round"])
            row["seed"] = int(row["seed"])
            row["fim_refreshed"] = bool(int(row["fim_refreshed"]))
            row["selected"] = [int(v) for v in row["selected"].split()]
            row["maps"] = row["maps"].split()
            row["layer_probs"] = [float(v) for v in row["layer_probs"].split()]
            row["delta_norms"] = [float(v) for v in row["delta_norms"].split()]
            for k in _NUMERIC:
                row[k] = float(row[k])
            out.append(row)
    return out


# --- strategies and runs ---------------------------------------------------

def parse_strategy(spec: str) -> tuple[str, str | None]:
    """``"GD:Bottleneck"`` -> ``("GD", "Bottleneck")``; ``"Random"`` -> ``("Random", None)``."""
    for sep in (":", "-"):
        if sep in spec:
            name, pattern = spec.split(sep, 1)
            Pattern(pattern)
            return name, pattern
    return spec, None


def config_for_strategy(config: ExperimentConfig, spec: str) -> ExperimentConfig:
    name, pattern = parse_strategy(spec)
    sched = {"strategy": name}
    if pattern is not None:
        sched["base_pattern"] = pattern
    return config.with_overrides({f"schedule.{k}": v for k, v in sched.items()}).validate()


def run_label(config: ExperimentConfig) -> str:
    sc = config.schedule
    if sc.strategy == "GD":
        return f"GD-{sc.base_pattern}"
    return sc.strategy


def run_one(config: ExperimentConfig, seed: int, root: Path) -> tuple[Path, list[RoundRecord]]:
    """One (strategy, seed) cell: writes ``<root>/<strategy>_<seed>/rounds.csv``."""
    run_dir = root / f"{run_label(config)}_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(serialize_config(config.replace(seeds=(seed,))))
    every = config.federation.checkpoint_every

    def on_round(rec, state):
        if every and (rec.round + 1) % every == 0:
            save_checkpoint(state.params, run_dir / f"theta_round{rec.round + 1}.ckpt")

    records = run_experiment(config, seed, on_round=on_round).records
    emit_csv(records, run_dir / "rounds.csv")
    return run_dir, records


@dataclass
class GridResult:
    summary: list[dict]
    failures: list[tuple[str, int, str]] = field(default_factory=list)
    finals: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _final_accuracy(records) -> float:
    for rec in reversed(records):
        if not math.isnan(rec.accuracy):
            return rec.accuracy
    return float("nan")


def run_grid(config: ExperimentConfig, strategies, seeds, root=None) -> GridResult:
    """Every (strategy, seed) cell plus ``summary.csv`` with mean/std final accuracy.

    A failing cell is logged and recorded; the grid carries on.
    """
    root = Path(root or config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    result = GridResult(summary=[])
    for spec in strategies:
        accs = []
        try:
            cfg = config_for_strategy(config, spec)
        except (ConfigError, ValueError) as exc:
            for seed in seeds:
                result.failures.append((spec, int(seed), str(exc)))
            cfg = None
        if cfg is not None:
            for seed in seeds:
                try:
                    _, records = run_one(cfg, int(seed), root)
                except Exception as exc:  # noqa: BLE001 - grid must survive a bad cell
                    log.error("cell %s seed %s failed: %s", spec, seed, exc)
                    result.failures.append((spec, int(seed), "".join(traceback.format_exception_only(exc)).strip()))
                    continue
                acc = _final_accuracy(records)
                accs.append(acc)
                result.finals[(spec, int(seed))] = acc
        arr = np.array(accs, dtype=np.float64)
        result.summary.append({
            "strategy": spec,
            "n_ok": len(accs),
            "n_failed": len(seeds) - len(accs),
            "acc_mean": _g(arr.mean()) if accs else "nan",
            "acc_std": _g(arr.std(ddof=1)) if len(accs) > 1 else _g(0.0) if accs else "nan",
        })
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["strategy", "n_ok", "n_failed", "acc_mean", "acc_std"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(result.summary)
    if result.failures:
        with open(root / "failures.txt", "w") as fh:
            for spec, seed, msg in result.failures:
                fh.write(f"{spec}\t{seed}\t{msg}\n")
    return result


# --- analytic costs --------------------------------------------------------

def cost_report(config: ExperimentConfig, c_bar: float | None = None) -> dict:
    """Cost estimates for a config without training anything."""
    mc, fc = config.model, config.federation
    profile = config.profile
    if c_bar is None:
        c_bar = float(np.dot(profile.levels, profile.ratios))
    inputs = CostModelInputs(
        tau=fc.tau, l=mc.l, d=mc.frozen_params_per_layer, R=mc.lora_params_per_layer,
        N=config.data.n_train / fc.n, s=fc.s, c_bar=c_bar, N_FIM=config.proxy.size,
        T_FIM=config.schedule.T_FIM, T=max(fc.T, 1),
    )
    bw = backward_cost(inputs)
    cc = comm_cost(inputs)
    mem = {}
    for c in profile.levels:
        mask = np.zeros(mc.l, dtype=np.int8)
        mask[:c] = 1
        mem[c] = memory_proxy(mc, mask, fc.batch_size)
    return {
        "l": mc.l,
        "d": inputs.d,
        "R": inputs.R,
        "N": inputs.N,
        "s": inputs.s,
        "c_bar": c_bar,
        "backward_full": bw["full"],
        "backward_ours": bw["ours"],
        "backward_ratio": bw["ratio"],
        "comm_full": cc["full"],
        "comm_ours": cc["ours"],
        "comm_map_term": cc["map_term"],
        "comm_ratio": cc["ratio"],
        "fim_overhead": fim_overhead(inputs),
        "memory_by_level": {str(c): v for c, v in mem.items()},
    }


# --- CLI -------------------------------------------------------------------

def _split_overrides(extra: list[str]) -> dict:
    """Accept both ``key=value`` and ``--key value`` forms."""
    items = []
    it = iter(extra)
    for tok in it:
        if tok.startswith("--"):
            key = tok[2:]
            if "=" in key:
                items.append(key)
            else:
                try:
                    items.append(f"{key}={next(it)}")
                except StopIteration:
                    raise ConfigError([f"override {tok} has no value"]) from None
        else:
            items.append(tok)
    return parse_overrides(items)


def _load(path, extra) -> ExperimentConfig:
    return parse_config(path, _split_overrides(extra))


def _cmd_simulate(args, extra) -> int:
    config = _load(args.config, extra)
    root = Path(config.output_dir)
    for seed in config.seeds:
        run_dir, records = run_one(config, seed, root)
        print(f"{run_dir}: final accuracy {_g(_final_accuracy(records))}")
    return 0


def _cmd_gridrun(args, extra) -> int:
    config = _load(args.config, extra)
    seeds = args.seeds if args.seeds else list(config.seeds)
    strategies = args.strategies or [run_label(config)]
    res = run_grid(config, strategies, seeds)
    for row in res.summary:
        print(f"{row['strategy']}: {row['acc_mean']} +/- {row['acc_std']} ({row['n_ok']} ok, {row['n_failed']} failed)")
    return 0 if res.ok else 1


def _cmd_validate(args, extra) -> int:
    _load(args.config, extra)
    print("config OK")
    return 0


def _cmd_costs(args, extra) -> int:
    config = _load(args.config, extra)
    rep = cost_report(config, args.c_bar)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return 0
    for k, v in rep.items():
        if k == "memory_by_level":
            for c, m in v.items():
                print(f"memory[c={c}]: trainable_params={m['trainable_params']} activation_slots={m['activation_slots']}")
        else:
            print(f"{k}: {v!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlora-sim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("simulate", help="run every configured seed")
    sp.add_argument("config")
    sp.set_defaults(func=_cmd_simulate)
    gp = sub.add_parser("gridrun", help="strategy x seed grid with summary.csv")
    gp.add_argument("config")
    gp.add_argument("--strategies", nargs="+", default=None)
    gp.add_argument("--seeds", nargs="+", type=int, default=None)
    gp.set_defaults(func=_cmd_gridrun)
    vp = sub.add_parser("validate", help="check a config and exit")
    vp.add_argument("config")
    vp.set_defaults(func=_cmd_validate)
    cp = sub.add_parser("costs", help="analytic compute/communication estimates")
    cp.add_argument("config")
    cp.add_argument("--c-bar", type=float, default=None, help="mean trainable layers per client")
    cp.add_argument("--json", action="store_true")
    cp.set_defaults(func=_cmd_costs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
