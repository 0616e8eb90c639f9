"""Paired multi-episode experiments with persistent, replayable run artifacts.

A run directory holds ``config.txt``, ``episodes.jsonl`` (one record per
episode and cell), ``summary.json`` and one ``curves_<cell>.csv`` per cell.
Everything in it is a deterministic function of the resolved config, so two
runs with the same config are byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..backbone import MlpParams, PretrainConfig, init_mlp, load_params, pretrain
from ..episodes import (
    DomainShift,
    LabeledDataset,
    SyntheticDomainSpec,
    generate_base_dataset,
    generate_novel_dataset,
    load_idx_dataset,
    sample_episode,
)
from ..errors import (
    AggregationError,
    ConfigurationError,
    DegenerateInputError,
    EstimationError,
    FewShotError,
    NumericError,
    TrainingError,
)
from ..finetune import finetune_episode
from .aggregate import aggregate, paired
from .config import RunConfig, parse_assignments, build_config

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "support_loss", "support_acc", "query_loss", "query_acc")
ABORTS = (TrainingError, NumericError, DegenerateInputError, EstimationError)


class ReplayMismatch(FewShotError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"replay mismatch in {field}" + (f": {detail}" if detail else ""))
        self.field = field


# ---------------------------------------------------------------------------
# data and backbone


@dataclass
class Workspace:
    novel: LabeledDataset
    backbone: MlpParams
    base: LabeledDataset | None = None


def synthetic_spec(cfg: RunConfig) -> SyntheticDomainSpec:
    shift = None
    if cfg.shift_offset or cfg.shift_anisotropy != 1.0:
        shift = DomainShift.random(cfg.dim, cfg.shift_seed, cfg.shift_offset, cfg.shift_anisotropy)
    return SyntheticDomainSpec(
        dim=cfg.dim,
        num_base_classes=cfg.base_classes,
        num_novel_classes=cfg.novel_classes,
        cluster_spread=cfg.cluster_spread,
        domain_shift=shift,
        contamination_rate=cfg.contamination,
        mean_scale=cfg.mean_scale,
    )


def load_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Return ``(base, novel)`` datasets for the configured source."""
    if cfg.dataset == "synthetic":
        spec = synthetic_spec(cfg)
        base = generate_base_dataset(spec, cfg.base_per_class, cfg.data_seed) if cfg.base_classes else None
        novel = generate_novel_dataset(spec, cfg.novel_per_class, cfg.data_seed + 1)
        return base, novel
    full = load_idx_dataset(cfg.idx_images, cfg.idx_labels)
    return full.subset(cfg.base_labels), full.subset(cfg.novel_labels)


def prepare_backbone(cfg: RunConfig, base: LabeledDataset | None, in_dim: int) -> MlpParams:
    if cfg.backbone:
        net = load_params(cfg.backbone)
        if net.in_dim != in_dim:
            raise ConfigurationError(f"checkpoint expects {net.in_dim}-d inputs, data is {in_dim}-d")
        return net
    net = init_mlp(in_dim, cfg.hidden, cfg.feature_dim, cfg.init_seed)
    if base is None or len(base) == 0:
        log.warning("no base classes configured; using an untrained backbone")
        return net
    pcfg = PretrainConfig(cfg.pretrain_lr, cfg.pretrain_epochs, cfg.pretrain_batch, cfg.pretrain_momentum, cfg.pretrain_seed)
    return pretrain(net, base, pcfg)


def prepare(cfg: RunConfig) -> Workspace:
    base, novel = load_data(cfg)
    return Workspace(novel, prepare_backbone(cfg, base, novel.dim), base)


# ---------------------------------------------------------------------------
# episodes


def episode_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def cell_name(row: str, shots: str | None = None) -> str:
    return row if shots is None else f"{shots}shot/{row}"


def _shots_value(shots: str):
    parts = [int(p) for p in shots.split("-")]
    return parts[0] if len(parts) == 1 else (parts[0], parts[1])


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def run_episode_cells(ws: Workspace, cfg: RunConfig, cells: list[tuple[str, str, str]], index: int) -> list[dict]:
    """Finetune one episode index under every ``(cell, row, shots)`` entry.

    Cells sharing a shot setting see the exact same episode.
    """
    seed = episode_seed(cfg.seed, index)
    episodes = {}
    records = []
    for cell, row, shots in cells:
        if shots not in episodes:
            episodes[shots] = sample_episode(ws.novel, cfg.ways, _shots_value(shots), cfg.queries, seed)
        ep = episodes[shots]
        rec = {
            "cell": cell,
            "row": row,
            "shots": shots,
            "episode": index,
            "seed": seed,
            "fingerprint": ep.fingerprint(),
            "classes": list(ep.classes),
            "support_index": ep.support_index.tolist(),
            "query_index": ep.query_index.tolist(),
        }
        try:
            res = finetune_episode(ep, ws.backbone, cfg.finetune_config(row, seed))
        except ABORTS as exc:
            rec.update(status="aborted", error=str(exc), traces=[{k: _clean(v) for k, v in t.as_dict().items()} for t in getattr(exc, "traces", [])])
        else:
            rec.update(
                status="ok",
                query_accuracy=res.query_accuracy,
                query_loss=res.query_loss,
                temperature=res.temperature,
                traces=[{k: _clean(v) for k, v in t.as_dict().items()} for t in res.traces],
            )
        records.append(rec)
    return records


_WORKER: tuple | None = None


def _init_worker(ws, cfg, cells):
    global _WORKER
    _WORKER = (ws, cfg, cells)


def _worker_job(index: int) -> list[dict]:
    ws, cfg, cells = _WORKER
    return run_episode_cells(ws, cfg, cells, index)


def iter_records(ws: Workspace, cfg: RunConfig, cells: list[tuple[str, str, str]]):
    """Yield per-episode record lists in episode-index order, whatever the worker count."""
    indices = range(cfg.episodes)
    if cfg.workers == 1:
        for i in indices:
            yield run_episode_cells(ws, cfg, cells, i)
        return
    with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(ws, cfg, cells)) as pool:
        yield from pool.map(_worker_job, indices, chunksize=max(1, cfg.episodes // (4 * cfg.workers)))


# ---------------------------------------------------------------------------
# summaries


def _curves(records: list[dict]) -> list[dict]:
    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        return []
    rows = []
    for e in range(len(ok[0]["traces"])):
        entry = {"epoch": e + 1}
        for key in CURVE_COLUMNS[1:]:
            vals = [r["traces"][e][key] for r in ok if r["traces"][e].get(key) is not None]
            entry[key] = math.fsum(vals) / len(vals) if vals else None
        rows.append(entry)
    return rows


def comparisons_for(kind: str, cfg: RunConfig) -> list[tuple[str, str, str]]:
    """``(name, before_cell, after_cell)`` triples reported in the summary."""
    if kind == "ablate":
        rows = list(cfg.rows)
        out = [(f"{b} -> {a}", b, a) for b, a in zip(rows[:-1], rows[1:])]
        if len(rows) > 2:
            out.append((f"{rows[0]} -> {rows[-1]}", rows[0], rows[-1]))
        return out
    if kind == "shots":
        out = []
        for k in cfg.shot_list:
            full = cell_name(cfg.row, str(k))
            out.append((f"{k}shot gain over none", cell_name("none", str(k)), full))
            out.append((f"{k}shot gain over B", cell_name("B", str(k)), full))
        return out
    return []


def cells_for(kind: str, cfg: RunConfig) -> list[tuple[str, str, str]]:
    """``(cell, row, shots)`` triples evaluated on every episode index."""
    if kind == "ablate":
        return [(r, r, cfg.shots) for r in cfg.rows]
    if kind == "shots":
        rows = list(dict.fromkeys(["none", "B", cfg.row]))
        return [(cell_name(r, str(k)), r, str(k)) for k in cfg.shot_list for r in rows]
    return [(cfg.row, cfg.row, cfg.shots)]


def summarize(kind: str, cfg: RunConfig, records: list[dict]) -> dict:
    by_cell: dict[str, list[dict]] = {}
    for rec in records:
        by_cell.setdefault(rec["cell"], []).append(rec)
    cells = {}
    for name, recs in by_cell.items():
        ok = [r for r in recs if r["status"] == "ok"]
        entry = {
            "row": recs[0]["row"],
            "shots": recs[0]["shots"],
            "episodes": len(recs),
            "excluded": len(recs) - len(ok),
        }
        try:
            entry["accuracy"] = aggregate([r["query_accuracy"] for r in ok]).as_dict()
            entry["final_support_loss"] = aggregate([r["traces"][-1]["support_loss"] for r in ok]).as_dict()
        except AggregationError as exc:
            entry["accuracy"] = None
            entry["note"] = str(exc)
        entry["curves"] = _curves(recs)
        cells[name] = entry

    comps = {}
    for name, before, after in comparisons_for(kind, cfg):
        a = {r["episode"]: r for r in by_cell.get(before, []) if r["status"] == "ok"}
        b = {r["episode"]: r for r in by_cell.get(after, []) if r["status"] == "ok"}
        common = sorted(set(a) & set(b))
        try:
            agg = paired([a[i]["query_accuracy"] for i in common], [b[i]["query_accuracy"] for i in common])
            comps[name] = {"before": before, "after": after, **agg.as_dict()}
        except AggregationError as exc:
            comps[name] = {"before": before, "after": after, "note": str(exc)}
    return {
        "artifact_version": __version__,
        "kind": kind,
        "config": cfg.as_dict(),
        "cells": cells,
        "comparisons": comps,
    }


def curves_csv(curves: list[dict]) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for c in curves:
        lines.append(",".join("" if c[k] is None else repr(c[k]) for k in CURVE_COLUMNS))
    return "\n".join(lines) + "\n"


def curve_filename(cell: str) -> str:
    return f"curves_{cell.replace('/', '_')}.csv"


def check_pairing(records: list[dict]) -> None:
    """Cells with the same shot setting must have logged identical episodes."""
    seen: dict[tuple[str, int], tuple] = {}
    for rec in records:
        key = (rec["shots"], rec["episode"])
        log_entry = (rec["fingerprint"], rec["support_index"], rec["query_index"])
        if seen.setdefault(key, log_entry) != log_entry:
            raise ReplayMismatch(f"episodes[{rec['episode']}].{rec['cell']}.fingerprint", "episode streams differ")


# ---------------------------------------------------------------------------
# run directories


def new_run_dir(out: Path) -> Path:
    """Create the next free ``run-NNNN`` directory; existing runs are never touched."""
    out.mkdir(parents=True, exist_ok=True)
    k = 1
    while True:
        path = out / f"run-{k:04d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            k += 1


def _write_new(path: Path, text: str) -> None:
    with open(path, "x") as f:
        f.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


@dataclass
class RunResult:
    directory: Path | None
    summary: dict
    records: list[dict]


def execute(kind: str, cfg: RunConfig, out: Path | None = None, ws: Workspace | None = None) -> RunResult:
    """Run every episode for ``kind`` ("run", "ablate" or "shots") and persist the artifacts."""
    cfg.validate()
    if ws is None:
        ws = prepare(cfg)
    cells = cells_for(kind, cfg)
    run_dir = new_run_dir(Path(out)) if out is not None else None
    records: list[dict] = []
    sink = open(run_dir / "episodes.jsonl", "x") if run_dir else None
    try:
        if run_dir:
            _write_new(run_dir / "config.txt", cfg.to_text())
        for batch in iter_records(ws, cfg, cells):
            for rec in batch:
                if sink:
                    sink.write(json.dumps(rec, separators=(",", ":"), allow_nan=False) + "\n")
                records.append(rec)
            if batch and batch[0]["episode"] % 50 == 0:
                log.info("%s: episode %d/%d", kind, batch[0]["episode"] + 1, cfg.episodes)
    finally:
        if sink:
            sink.close()
    check_pairing(records)
    summary = summarize(kind, cfg, records)
    if run_dir:
        _write_new(run_dir / "summary.json", dump_json(summary))
        for name, cell in summary["cells"].items():
            _write_new(run_dir / curve_filename(name), curves_csv(cell["curves"]))
    return RunResult(run_dir, summary, records)


def run_ablation_suite(cfg: RunConfig, out=None, ws: Workspace | None = None) -> RunResult:
    """All ablation rows on the same episode stream."""
    return execute("ablate", cfg, out, ws)


def run_shot_sweep(cfg: RunConfig, shot_list=None, out=None, ws: Workspace | None = None) -> RunResult:
    """Baseline, plain finetuning and ``cfg.row`` at each shot count."""
    if shot_list is not None:
        cfg = cfg.replace(shot_list=tuple(shot_list))
    return execute("shots", cfg, out, ws)


# ---------------------------------------------------------------------------
# replay


def _compare(expected, actual, path: str) -> None:
    if isinstance(expected, dict) and isinstance(actual, dict):
        for key in list(expected) + [k for k in actual if k not in expected]:
            if key not in expected or key not in actual:
                raise ReplayMismatch(f"{path}.{key}".lstrip("."), "field missing")
            _compare(expected[key], actual[key], f"{path}.{key}")
        return
    if isinstance(expected, list) and isinstance(actual, list):
        if len(expected) != len(actual):
            raise ReplayMismatch(path.lstrip("."), f"length {len(actual)} != {len(expected)}")
        for i, (e, a) in enumerate(zip(expected, actual)):
            _compare(e, a, f"{path}[{i}]")
        return
    if type(expected) is not type(actual) or expected != actual:
        raise ReplayMismatch(path.lstrip("."), f"recorded {actual!r}, recomputed {expected!r}")


def read_records(path: Path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ReplayMismatch(f"episodes.jsonl:{lineno}", exc.msg) from None
    return records


def replay(run_dir) -> dict:
    """Recompute the summary and curves from ``episodes.jsonl`` and require exact equality."""
    run_dir = Path(run_dir)
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        records = read_records(run_dir / "episodes.jsonl")
        config_text = (run_dir / "config.txt").read_text()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{run_dir} is not a run directory ({exc.filename} missing)") from None
    cfg = build_config(parse_assignments(config_text.splitlines(), str(run_dir / "config.txt")))
    if summary.get("config") != cfg.as_dict():
        _compare(cfg.as_dict(), summary.get("config", {}), "config")
    check_pairing(records)
    recomputed = summarize(summary.get("kind", ""), cfg, records)
    # version is informational: a newer release may replay an older record
    recomputed["artifact_version"] = summary.get("artifact_version")
    _compare(recomputed, summary, "")
    for name, cell in recomputed["cells"].items():
        path = run_dir / curve_filename(name)
        if not path.exists() or path.read_text() != curves_csv(cell["curves"]):
            raise ReplayMismatch(path.name, "curve file differs from the episode records")
    return recomputed
