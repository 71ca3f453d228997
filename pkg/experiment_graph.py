"""
Ablation grid for omni-conditions training.

Each cell is an independent seeded training run whose only difference from
the base config is its TrainPlan triple or its training subset:

- tdata_<p>: every audio-eligible clip plus p% of the text-only clips
- order_IA / order_IPA / order_IAP: which conditions each stage trains
- ratio_A>P / ratio_A<P: stage-3 keep ratios (0.5, 0.25) vs (0.25, 0.5)
- audio_<p>: audio keep ratio sweep at T = 0.9

Paired cells are also compared seed by seed (ablation_directions).
Finished (cell, seed) runs are cached on disk, keyed by the config hash.
"""

import os
import json
import hashlib
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from omnidesk.config import CACHE_DIR, ENABLE_CACHE, OMNI_THREADS, RunConfig, TrainPlan, apply_thread_limit, setup_logging
from omnidesk.errors import ConfigError, OmniError
from omnidesk.synth_eval import evaluate_model
from omnidesk.training import (
    ClipRecord,
    TrainingData,
    create_train_state,
    load_training_data,
    route_clip,
    run_stages,
    validation_loss,
)

logger = logging.getLogger(__name__)

TDATA_FRACTIONS = {"tdata_0": 0.0, "tdata_25": 0.25, "tdata_50": 0.5, "tdata_100": 1.0}
ORDERS = {
    "order_IA": (["text"], ["text", "audio"], ["text", "audio"]),
    "order_IPA": (["text"], ["text", "pose"], ["text", "audio", "pose"]),
    "order_IAP": (["text"], ["text", "audio"], ["text", "audio", "pose"]),
}
RATIOS = {"ratio_A>P": (0.5, 0.25), "ratio_A<P": (0.25, 0.5)}
AUDIO_SWEEP = {"audio_10": 0.1, "audio_50": 0.5, "audio_90": 0.9}
TABLE_GROUPS = [("T-Data", TDATA_FRACTIONS), ("Order", ORDERS), ("Ratio", RATIOS), ("Audio ratio", AUDIO_SWEEP)]
KNOWN_CELLS = {name for _, cells in TABLE_GROUPS for name in cells}
POSE_TOLERANCE_PX = 1.0
# (check, cell, baseline, metric, comparison): the cell should beat the baseline seed by seed
DIRECTIONS = [
    ("text_data_helps_audio", "tdata_100", "tdata_0", "audio_loss", "le"),
    ("audio_ratio_above_pose", "ratio_A>P", "ratio_A<P", "val_loss", "le"),
    ("audio_before_pose_audio", "order_IAP", "order_IPA", "audio_loss", "lt"),
    ("audio_before_pose_pose", "order_IAP", "order_IPA", "pose_err", "near"),
]


# Cache implementation
def get_cache_key(config_hash: str, cell: str, seed: int) -> str:
    """Generate a cache key from the run config, cell and seed."""
    return hashlib.md5(f"{config_hash}:{cell}:{seed}".encode()).hexdigest()


def get_from_cache(cache_key: str) -> Optional[Dict[str, Any]]:
    """Try to get a finished cell result from the cache."""
    if not ENABLE_CACHE:
        return None

    cache_file = CACHE_DIR / f"{cache_key}.json"
    if cache_file.exists():
        try:
            with open(cache_file, "r") as f:
                cache_data = json.load(f)
            logger.info(f"Cache hit for key {cache_key[:8]}...")
            return cache_data["result"]
        except Exception as e:
            logger.warning(f"Error reading cache: {str(e)}")
    return None


def save_to_cache(cache_key: str, result: Dict[str, Any]) -> None:
    """Save a successful cell result to the cache."""
    if not ENABLE_CACHE or result.get("status") != "ok":
        return

    try:
        CACHE_DIR.mkdir(parents=True, exist_ok=True)
        with open(CACHE_DIR / f"{cache_key}.json", "w") as f:
            json.dump({"result": result, "timestamp": datetime.now().isoformat()}, f)
        logger.info(f"Saved to cache: {cache_key[:8]}...")
    except Exception as e:
        logger.warning(f"Error saving to cache: {str(e)}")


# Cell definitions
def cell_plans(cell: str, base: List[TrainPlan], steps: int) -> List[TrainPlan]:
    """The three TrainPlans a cell trains with."""
    plans = [plan.model_copy(update={"steps": steps}) for plan in base]
    if cell in ORDERS:
        return [plan.model_copy(update={"active": list(active)}) for plan, active in zip(plans, ORDERS[cell])]
    if cell in RATIOS:
        audio, pose = RATIOS[cell]
        return [plan.model_copy(update={"ratio_audio": audio, "ratio_pose": pose}) for plan in plans]
    if cell in AUDIO_SWEEP:
        return [plan.model_copy(update={"ratio_text": 0.9, "ratio_audio": AUDIO_SWEEP[cell]}) for plan in plans]
    if cell in TDATA_FRACTIONS:
        return plans
    raise ConfigError(f"unknown ablation cell {cell}", problems=[f"ablation.cells: {cell}"])


def cell_records(cell: str, records: List[ClipRecord], seed: int) -> List[ClipRecord]:
    """Training subset for a cell; only the T-Data cells drop clips."""
    if cell not in TDATA_FRACTIONS:
        return records
    audio = [r for r in records if "audio" in route_clip(r)]
    text_only = [r for r in records if "audio" not in route_clip(r)]
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(text_only))
    keep = int(round(TDATA_FRACTIONS[cell] * len(text_only)))
    return audio + [text_only[i] for i in sorted(order[:keep])]


def run_cell(cfg: RunConfig, cell: str, seed: int, out_dir: Path) -> Dict[str, Any]:
    """Train one cell from scratch and score it on the held-out split."""
    cfg = cfg.model_copy(update={
        "seed": seed,
        "plans": cell_plans(cell, cfg.plans, cfg.ablation.steps_per_stage),
    })
    data, cfg = load_training_data(cfg)
    val, _ = load_training_data(cfg, "heldout.jsonl", limit=cfg.ablation.val_clips)
    subset = TrainingData(records=cell_records(cell, data.records, seed), store=data.store, vocab=data.vocab)
    logger.info(f"Cell {cell} seed {seed}: {len(subset.records)} training clips")

    state = create_train_state(cfg, data.store.extractor.feature_dim)
    state, _ = run_stages(state, cfg, subset, out_dir / f"{cell}_seed{seed}", progress=False)

    result = {
        "cell": cell,
        "seed": seed,
        "status": "ok",
        "train_clips": len(subset.records),
        "audio_loss": validation_loss(state.model, val, cfg, "audio", seed=seed),
        "pose_loss": validation_loss(state.model, val, cfg, "pose", seed=seed),
    }
    if cfg.ablation.eval_clips:
        clips = [val.store.clip(r) for r in val.records[: cfg.ablation.eval_clips]]
        report = evaluate_model(state.model, clips, val.vocab, cfg.eval, seed=seed)
        result["sync_corr"] = report.sync_corr
        result["pose_err"] = (report.per_mode.get("pose") or {}).get("pose_err", report.pose_err)
    return result


def _run_job(payload: Tuple[str, str, int, str]) -> Dict[str, Any]:
    """Process-pool entry: rebuild the config and run one cell, never raising."""
    cfg_json, cell, seed, out_dir = payload
    setup_logging()
    cfg = RunConfig.model_validate_json(cfg_json)
    try:
        return run_cell(cfg, cell, seed, Path(out_dir))
    except OmniError as e:
        logger.error(f"Cell {cell} seed {seed} failed: {e.message}")
        logger.debug(traceback.format_exc())
        return {"cell": cell, "seed": seed, "status": e.code, "error": e.message}
    except Exception as e:
        logger.error(f"Cell {cell} seed {seed} failed: {str(e)}")
        logger.debug(traceback.format_exc())
        return {"cell": cell, "seed": seed, "status": "RUNTIME_ERROR", "error": str(e)}


def worker_count(requested: int) -> int:
    cap = OMNI_THREADS or os.cpu_count() or 1
    return max(1, min(requested, cap))


def run_ablation(cfg: RunConfig, out_dir: Path, jobs: int = 1) -> pd.DataFrame:
    """
    Run every (cell, seed) of ``cfg.ablation`` and write ``ablation_runs.csv``,
    ``ablation_table.csv`` and ``ablation_directions.csv``. Failed cells are
    recorded and the grid continues.

    Returns:
        The per-cell comparison table
    """
    unknown = [c for c in cfg.ablation.cells if c not in KNOWN_CELLS]
    if unknown:
        raise ConfigError("unknown ablation cells", problems=[f"ablation.cells: {c}" for c in unknown])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.config_hash()
    results: Dict[Tuple[str, int], Dict[str, Any]] = {}
    pending = []
    for cell in cfg.ablation.cells:
        for seed in cfg.ablation.seeds:
            cached = get_from_cache(get_cache_key(config_hash, cell, seed))
            if cached:
                results[(cell, seed)] = cached
            else:
                pending.append((cfg.model_dump_json(), cell, seed, str(out_dir)))

    workers = worker_count(jobs)
    logger.info(f"Ablation: {len(pending)} run(s) to train, {len(results)} cached, {workers} worker(s)")
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=apply_thread_limit, initargs=(1,)) as pool:
            finished = list(pool.map(_run_job, pending))
    else:
        finished = [_run_job(job) for job in pending]
    for result in finished:
        results[(result["cell"], result["seed"])] = result
        save_to_cache(get_cache_key(config_hash, result["cell"], result["seed"]), result)

    ordered = [results[(c, s)] for c in cfg.ablation.cells for s in cfg.ablation.seeds]
    runs = pd.DataFrame(ordered)
    runs.to_csv(out_dir / "ablation_runs.csv", index=False)
    table = ablation_table(runs, cfg.ablation.cells)
    table.to_csv(out_dir / "ablation_table.csv", index=False)
    directions = ablation_directions(runs, cfg.ablation.cells)
    directions.to_csv(out_dir / "ablation_directions.csv", index=False)
    if len(directions):
        logger.info(f"Directional checks:\n{directions.to_string(index=False)}")
    logger.info(f"✅ Ablation table:\n{table.to_string(index=False)}")
    return table


def ablation_table(runs: pd.DataFrame, cells: List[str]) -> pd.DataFrame:
    """One row per cell, grouped by ablation axis, metrics averaged over seeds."""
    metrics = [m for m in ("audio_loss", "pose_loss", "sync_corr", "pose_err") if m in runs.columns]
    rows = []
    for group, members in TABLE_GROUPS:
        for cell in members:
            if cell not in cells:
                continue
            runs_for_cell = runs[runs["cell"] == cell]
            ok = runs_for_cell[runs_for_cell["status"] == "ok"]
            row = {"group": group, "cell": cell, "runs": len(ok), "failed": len(runs_for_cell) - len(ok)}
            for metric in metrics:
                values = pd.to_numeric(ok[metric], errors="coerce").dropna()
                row[metric] = float(values.mean()) if len(values) else float("nan")
            rows.append(row)
    return pd.DataFrame(rows, columns=["group", "cell", "runs", "failed", *metrics])


def ablation_directions(runs: pd.DataFrame, cells: List[str]) -> pd.DataFrame:
    """
    Seed-by-seed directional checks between paired cells.

    ``wins`` counts the seeds where the cell beats its baseline on the metric
    and ``holds`` is true when that happens in at least two of every three
    paired seeds. ``val_loss`` is audio_loss + pose_loss.
    """
    ok = runs[runs["status"] == "ok"].copy()
    if {"audio_loss", "pose_loss"} <= set(ok.columns):
        ok["val_loss"] = pd.to_numeric(ok["audio_loss"], errors="coerce") + pd.to_numeric(ok["pose_loss"], errors="coerce")
    rows = []
    for check, cell, baseline, metric, comparison in DIRECTIONS:
        if cell not in cells or baseline not in cells:
            continue
        row = {"check": check, "cell": cell, "baseline": baseline, "metric": metric, "seeds": 0, "wins": 0, "holds": False}
        if metric in ok.columns:
            paired = pd.concat({
                "cell": pd.to_numeric(ok[ok["cell"] == cell].set_index("seed")[metric], errors="coerce"),
                "baseline": pd.to_numeric(ok[ok["cell"] == baseline].set_index("seed")[metric], errors="coerce"),
            }, axis=1, join="inner").dropna()
            if comparison == "le":
                won = paired["cell"] <= paired["baseline"]
            elif comparison == "lt":
                won = paired["cell"] < paired["baseline"]
            else:
                won = (paired["cell"] - paired["baseline"]).abs() <= POSE_TOLERANCE_PX
            row["seeds"], row["wins"] = len(paired), int(won.sum())
            row["holds"] = bool(row["seeds"] and 3 * row["wins"] >= 2 * row["seeds"])
        rows.append(row)
    return pd.DataFrame(rows, columns=["check", "cell", "baseline", "metric", "seeds", "wins", "holds"])
