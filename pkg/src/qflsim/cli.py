"""Command-line front end: single runs, sweeps, diagnostics and partition audits."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .aggregators import RECORD_NAMES
from .analysis import accuracy_drop
from .attacks import normalize_kind
from .data import DatasetSpec, load_dataset
from .federation import (
    ExperimentResult,
    FederationConfig,
    dirichlet_partition,
    malicious_ids,
    run_experiment,
    stream,
    TAG_PARTITION,
)
from .model import Batch
from .qsim import ConfigurationError

log = logging.getLogger(__name__)

RESULT_HEADER = ("round", "seed", "dataset", "attack", "defense", "q", "rho", "accuracy", "loss", "deviation", "b_norm")
SUMMARY_HEADER = (
    "dataset", "attack", "defense", "q", "rho", "n_seeds", "n_rows", "mean_accuracy", "std_accuracy",
    "final_accuracy_mean", "final_accuracy_std", "baseline_final_accuracy", "accuracy_drop", "mean_loss",
    "mean_b_norm", "status",
)
PAPER_SCALE = {"n_clients": 20, "rounds": 100}
PAPER_SEEDS = (0, 1, 2, 3, 4)
DESK_SEEDS = (0, 1, 2)


def fmt(value) -> str:
    """Stable text for CSV cells: shortest round-trip repr for floats, empty for missing."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "nan" if v != v else repr(v)
    return str(value)


@dataclass(frozen=True)
class ExperimentGrid:
    attacks: tuple[str, ...] = ("grover",)
    defenses: tuple[str, ...] = ("fedavg",)
    q_values: tuple[float, ...] = (0.0, 0.2)
    rho_values: tuple[float, ...] = (0.9,)
    seeds: tuple[int, ...] = DESK_SEEDS

    def cells(self) -> list[tuple[str, str, float, float]]:
        """Cartesian product in declaration order: attack, defense, q, rho."""
        return [(a, d, q, r) for a in self.attacks for d in self.defenses for q in self.q_values for r in self.rho_values]


@dataclass
class ResultRow:
    round: int
    seed: int
    dataset: str
    attack: str
    defense: str
    q: float
    rho: float
    accuracy: float
    loss: float
    deviation: float | None
    b_norm: float

    def cells(self) -> list[str]:
        return [fmt(getattr(self, name)) for name in RESULT_HEADER]


@dataclass
class CellSummary:
    dataset: str
    attack: str
    defense: str
    q: float
    rho: float
    n_seeds: int = 0
    n_rows: int = 0
    mean_accuracy: float | None = None
    std_accuracy: float | None = None
    final_accuracy_mean: float | None = None
    final_accuracy_std: float | None = None
    baseline_final_accuracy: float | None = None
    accuracy_drop: float | None = None
    mean_loss: float | None = None
    mean_b_norm: float | None = None
    status: str = "ok"

    def cells(self) -> list[str]:
        return [fmt(getattr(self, name)) for name in SUMMARY_HEADER]


@dataclass
class GridResult:
    rows: list[ResultRow] = field(default_factory=list)
    summary: list[CellSummary] = field(default_factory=list)
    finals: dict[tuple, dict[int, float]] = field(default_factory=dict)
    baselines: dict[tuple[str, int], float] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    log_lines: list[str] = field(default_factory=list)


def rows_from_result(res: ExperimentResult, cfg: FederationConfig) -> list[ResultRow]:
    attack = cfg.attack.kind if cfg.m else "none"
    return [
        ResultRow(r.round, cfg.seed, cfg.dataset.id, attack, RECORD_NAMES[cfg.defense], cfg.q,
                  cfg.attack.poison_prob, r.accuracy, r.loss, r.deviation, r.b_norm)
        for r in res.records
    ]


def round_log_lines(res: ExperimentResult, cfg: FederationConfig) -> list[str]:
    lines = []
    for r in res.records:
        entry = {
            "seed": cfg.seed, "attack": cfg.attack.kind, "defense": RECORD_NAMES[cfg.defense], "q": cfg.q,
            "rho": cfg.attack.poison_prob, "round": r.round, "accuracy": r.accuracy, "loss": r.loss,
            "b_norm": r.b_norm, "deviation": r.deviation, "delta_norms": {str(k): v for k, v in r.delta_norms.items()},
            "poisoned": {str(k): v for k, v in r.poisoned.items()}, "benign_norm_mean": r.benign_norm_mean,
            "benign_norm_std": r.benign_norm_std, "clip_radius": r.clip_radius, "skipped": list(r.skipped),
            "accepted": r.accepted,
        }
        if r.craft_traces:
            entry["craft"] = {
                str(k): {name: (float(v) if np.isscalar(v) else np.asarray(v).tolist()) for name, v in tr.items()
                         if name in ("anomaly", "intensity", "target_norm", "noise_sigma", "h_star", "u", "u_perp")}
                for k, tr in r.craft_traces.items()
            }
        lines.append(json.dumps(entry, sort_keys=True))
    return lines


def run_diagnostics(res: ExperimentResult) -> dict:
    """Per-run audit summary: perturbation-bound checks, deviation and margin statistics."""
    checked = [r.lemma1 for r in res.records if r.lemma1 is not None]
    out = {
        "lemma1_rounds": len(checked),
        "lemma1_violations": res.lemma1_violations,
        "lemma1_max_ratio": max((b / bound for b, bound, _ in checked if bound > 0), default=None),
    }
    if res.deviations:
        out["max_deviation"] = max(res.deviations)
    if res.margin_stats is not None:
        m = res.margin_stats
        out.update(lipschitz=m.lipschitz, drift=m.drift, band_fraction=m.band_fraction, flip_fraction=m.flip_fraction)
    return out


def _cell_config(base: FederationConfig, attack: str, defense: str, q: float, rho: float, seed: int) -> FederationConfig:
    return dataclasses.replace(
        base, q=q, seed=seed, defense=defense,
        attack=dataclasses.replace(base.attack, kind=normalize_kind(attack), poison_prob=rho),
    )


def _run_job(job: tuple[FederationConfig, tuple[Batch, Batch, str] | None]) -> ExperimentResult:
    cfg, data = job
    return run_experiment(cfg, data)


def run_grid(grid: ExperimentGrid, base: FederationConfig, data: tuple[Batch, Batch, str] | None = None,
             jobs: int = 1) -> GridResult:
    """Run every cell for every seed plus each defense's attacker-free baseline.

    Baselines (q=0) depend only on (defense, seed) and are shared across cells.
    A failing run marks its cell with the error and the grid continues.
    """
    cells = grid.cells()
    baseline_keys = sorted({(d, s) for _, d, _, _ in cells for s in grid.seeds},
                           key=lambda k: (grid.defenses.index(k[0]), grid.seeds.index(k[1])))
    plan: list[tuple[tuple, FederationConfig]] = [
        (("base", d, s), _cell_config(base, "none", d, 0.0, base.attack.poison_prob, s)) for d, s in baseline_keys
    ]
    for a, d, q, r in cells:
        if q == 0.0:
            continue
        for s in grid.seeds:
            plan.append((("cell", a, d, q, r, s), _cell_config(base, a, d, q, r, s)))

    datasets: dict[int, tuple[Batch, Batch, str]] = {}

    def dataset_for(seed: int):
        if data is not None:
            return data
        if seed not in datasets:
            datasets[seed] = load_dataset(base.dataset, seed)
        return datasets[seed]

    outcomes: dict[tuple, ExperimentResult | Exception] = {}
    job_list = [(cfg, dataset_for(cfg.seed)) for _, cfg in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_job, job) for job in job_list]
            for (key, _), fut in zip(plan, futures):
                try:
                    outcomes[key] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    outcomes[key] = exc
    else:
        for (key, _), job in zip(plan, job_list):
            try:
                outcomes[key] = _run_job(job)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.error("grid run %s failed: %s", key, exc)
                outcomes[key] = exc

    out = GridResult()
    configs = dict(plan)
    for d, s in baseline_keys:
        res = outcomes[("base", d, s)]
        if isinstance(res, ExperimentResult):
            out.baselines[(d, s)] = res.final_accuracy
    source = None
    diagnostics: dict[str, dict] = {}
    for a, d, q, r in cells:
        summary = CellSummary(base.dataset.id, normalize_kind(a) if q > 0 else "none", RECORD_NAMES[d], q, r)
        finals: dict[int, float] = {}
        cell_rows: list[ResultRow] = []
        errors = []
        for s in grid.seeds:
            key = ("base", d, s) if q == 0.0 else ("cell", a, d, q, r, s)
            res = outcomes[key]
            if isinstance(res, Exception):
                errors.append(f"seed {s}: {type(res).__name__}: {res}")
                continue
            cfg = configs[key]
            if q == 0.0:
                cfg = _cell_config(base, "none", d, 0.0, r, s)
            source = source or res.data_source
            rows = rows_from_result(res, cfg)
            if q == 0.0:
                for row in rows:
                    row.attack = "none"
            cell_rows.extend(rows)
            out.log_lines.extend(round_log_lines(res, cfg))
            finals[s] = res.final_accuracy
            diagnostics[f"{summary.attack}/{summary.defense}/q={q}/rho={r}/seed={s}"] = run_diagnostics(res)
        out.rows.extend(cell_rows)
        out.finals[(a, d, q, r)] = finals
        summary.n_seeds = len(finals)
        summary.n_rows = len(cell_rows)
        if cell_rows:
            accs = np.array([row.accuracy for row in cell_rows])
            summary.mean_accuracy = float(accs.mean())
            summary.std_accuracy = float(accs.std())
            summary.mean_loss = float(np.mean([row.loss for row in cell_rows]))
            summary.mean_b_norm = float(np.mean([row.b_norm for row in cell_rows]))
        if finals:
            f = np.array(list(finals.values()))
            summary.final_accuracy_mean = float(f.mean())
            summary.final_accuracy_std = float(f.std())
            base_vals = [out.baselines[(d, s)] for s in finals if (d, s) in out.baselines]
            if base_vals and len(base_vals) == len(finals):
                summary.baseline_final_accuracy = float(np.mean(base_vals))
                summary.accuracy_drop = accuracy_drop(summary.baseline_final_accuracy, summary.final_accuracy_mean)
        if errors:
            summary.status = "error: " + "; ".join(errors)
        out.summary.append(summary)
    out.manifest = {
        "config": cfgmod.echo(base),
        "grid": {
            "attacks": list(grid.attacks), "defenses": list(grid.defenses), "q_values": list(grid.q_values),
            "rho_values": list(grid.rho_values), "seeds": list(grid.seeds),
        },
        "malicious_ids": {
            f"q={q}/seed={s}": list(malicious_ids(s, q, base.n_clients)) for q in grid.q_values for s in grid.seeds
        },
        "data_source": source,
        "baselines": {f"{RECORD_NAMES[d]}/seed={s}": v for (d, s), v in out.baselines.items()},
        "diagnostics": diagnostics,
    }
    return out


def emit_results(result: GridResult, out_dir) -> dict[str, Path]:
    """Write results.csv, summary.csv, manifest.json and rounds.jsonl into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "manifest": out / "manifest.json",
        "log": out / "rounds.jsonl",
    }
    texts = {
        "results": _csv_text(RESULT_HEADER, [r.cells() for r in result.rows]),
        "summary": _csv_text(SUMMARY_HEADER, [c.cells() for c in result.summary]),
        "manifest": json.dumps(result.manifest, sort_keys=True, indent=2) + "\n",
        "log": "".join(line + "\n" for line in result.log_lines),
    }
    for name, path in paths.items():
        try:
            path.write_text(texts[name])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    return paths


def _csv_text(header: Sequence[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# argument handling


def _split(values: str, conv):
    return tuple(conv(v.strip()) for v in values.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qflsim", description="Quantum federated learning attack simulator")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--dataset", help="mnist | mnist8x8 | cifar10 | synthetic_blobs")
        p.add_argument("--attack", help="none | grover | pauli | bitflip | signflip (comma list for sweep)")
        p.add_argument("--defense", help="fedavg | krum | mkrum | foolsgold | mudhog | flguardian (comma list for sweep)")
        p.add_argument("--q", help="malicious fraction (comma list for sweep)")
        p.add_argument("--rho", help="poisoning probability (comma list for sweep)")
        p.add_argument("--rounds", type=int)
        p.add_argument("--clients", type=int)
        p.add_argument("--seed", help="seed (comma list for sweep)")
        p.add_argument("--out", type=Path, default=Path("qflsim-out"))
        p.add_argument("--paper-scale", action="store_true", help="K=20, T=100, 5 seeds, full dataset")
        p.add_argument("--shots", type=int, help="estimate expectations from this many shots")
        p.add_argument("--shadow", choices=("off", "honest", "silent"), help="attack-free twin for deviation")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs in a sweep")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="one configuration, one or more seeds"))
    common(sub.add_parser("sweep", help="attack x defense x q x rho grid"))
    chk = sub.add_parser("check", help="invariant and diagnostic suite")
    chk.add_argument("--cases", type=int, default=100)
    chk.add_argument("--seed", type=int, default=0)
    ps = sub.add_parser("partition-stats", help="per-client class histograms of the Dirichlet split")
    common(ps)
    ps.add_argument("--alpha", type=float)
    return parser


def resolve(args: argparse.Namespace) -> tuple[FederationConfig, ExperimentGrid]:
    entries = cfgmod.read_file(args.config) if args.config else {}
    cfg = cfgmod.build_config(entries)
    grid_keys = cfgmod.grid_entries(entries)
    if args.paper_scale:
        cfg = dataclasses.replace(cfg, **PAPER_SCALE,
                                  dataset=dataclasses.replace(cfg.dataset, train_size=None, test_size=None))
    if args.dataset:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, id=args.dataset))
    if args.rounds is not None:
        cfg = dataclasses.replace(cfg, rounds=args.rounds)
    if args.clients is not None:
        cfg = dataclasses.replace(cfg, n_clients=args.clients)
    if args.shots is not None:
        cfg = dataclasses.replace(cfg, shots=args.shots)
    if getattr(args, "shadow", None):
        cfg = dataclasses.replace(cfg, shadow=args.shadow)
    attacks = _split(args.attack, str) if args.attack else tuple(grid_keys.get("attacks", [cfg.attack.kind]))
    defenses = _split(args.defense, str) if args.defense else tuple(grid_keys.get("defenses", [cfg.defense]))
    qs = _split(args.q, float) if args.q else tuple(float(v) for v in grid_keys.get("q_values", [cfg.q]))
    rhos = _split(args.rho, float) if args.rho else tuple(
        float(v) for v in grid_keys.get("rho_values", [cfg.attack.poison_prob]))
    if args.seed:
        seeds = _split(args.seed, int)
    elif "seeds" in grid_keys:
        seeds = tuple(int(v) for v in grid_keys["seeds"])
    elif args.verb == "sweep":
        seeds = PAPER_SEEDS if args.paper_scale else DESK_SEEDS
    else:
        seeds = (cfg.seed,)
    cfg = dataclasses.replace(
        cfg, q=qs[0], seed=seeds[0], defense=defenses[0],
        attack=dataclasses.replace(cfg.attack, kind=normalize_kind(attacks[0]), poison_prob=rhos[0]),
    )
    return cfg, ExperimentGrid(tuple(attacks), tuple(defenses), qs, rhos, seeds)


def cmd_partition_stats(args, cfg: FederationConfig) -> int:
    train, _, source = load_dataset(cfg.dataset, cfg.seed)
    alpha = args.alpha if args.alpha is not None else cfg.dirichlet_alpha
    parts = dirichlet_partition(train.labels, cfg.n_clients, alpha, stream(cfg.seed, TAG_PARTITION))
    classes = train.n_classes
    rows = []
    for k, idx in enumerate(parts):
        hist = np.bincount(train.labels[idx], minlength=classes)
        rows.append([str(k), str(idx.size)] + [str(int(c)) for c in hist])
    props = np.array([np.bincount(train.labels[idx], minlength=classes) / idx.size for idx in parts])
    text = _csv_text(["client", "n"] + [f"class_{c}" for c in range(classes)], rows)
    sys.stdout.write(text)
    sys.stdout.write(f"# source={source} alpha={alpha} mean_class_proportion_variance={props.var(axis=1).mean()!r}\n")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "check":
            from .checks import run_checks

            results = run_checks(cases=args.cases, seed=args.seed)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            return 0 if all(ok for _, ok, _ in results) else 1
        cfg, grid = resolve(args)
        if args.verb == "partition-stats":
            return cmd_partition_stats(args, cfg)
        result = run_grid(grid, cfg, jobs=args.jobs)
        paths = emit_results(result, args.out)
        for cell in result.summary:
            drop = "" if cell.accuracy_drop is None else f" drop={cell.accuracy_drop:.2f}"
            print(f"{cell.attack:>8} {cell.defense:>16} q={cell.q:<5} rho={cell.rho:<4} "
                  f"final={fmt(cell.final_accuracy_mean)}{drop} {cell.status}")
        print(f"wrote {paths['results']}")
        return 0 if all(c.status == "ok" for c in result.summary) else 1
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
