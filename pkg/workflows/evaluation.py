"""
Metric files and run summaries.

Every metric CSV has one row per training episode or evaluation record and a
`policy` column. export_summary() aggregates any number of them per policy: rows
are first averaged per seed, then mean, median and a 95% t-interval are taken
across seeds. Fewer than three seeds are flagged `low_confidence`.
"""

import json
import logging
import os
from typing import Dict, Iterable, List, Sequence

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

SUMMARY_METRICS = (
    "mean_reward",
    "mean_qoe",
    "hfqoe",
    "success_rate",
    "mean_t_u",
    "mean_t_e",
    "mean_t_d",
    "mean_t_r",
)
LOW_CONFIDENCE_SAMPLES = 3
SUMMARY_JSON = "summary.json"
SUMMARY_LONG_CSV = "summary_long.csv"
EXPLORATION_COLUMNS = ("episode", "slot", "chosen", "rank", "cai", "cai_mean", "cai_max")


def write_metrics(rows, path: str) -> str:
    """Write metric rows (list of dicts or DataFrame) as CSV. Output bytes depend only on the rows."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.debug(f"wrote {len(frame)} rows to {path}")
    return path



def exploration_table(rows: Iterable[dict], run_id: str, policy: str, seed: int) -> pd.DataFrame:
    """CAI exploration diagnostics, one row per explored slot, labelled like the metric rows."""
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        frame = pd.DataFrame(columns=list(EXPLORATION_COLUMNS))
    frame.insert(0, "seed", seed)
    frame.insert(0, "policy", policy)
    frame.insert(0, "run_id", run_id)
    return frame


def read_metrics(paths: Sequence[str]) -> pd.DataFrame:
    frames = []
    for path in paths:
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise ValueError(f"{path}: malformed metrics CSV ({e})") from e
        if "policy" not in frame.columns:
            raise ValueError(f"{path}: metrics CSV has no 'policy' column")
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def confidence_interval(values: np.ndarray, level: float = 0.95):
    """Two-sided t-interval of the mean; collapses to the mean for a single sample."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if values.size < 2:
        return mean, mean
    half = stats.t.ppf(0.5 + level / 2.0, values.size - 1) * values.std(ddof=1) / np.sqrt(values.size)
    return mean - float(half), mean + float(half)


def summarize_frame(frame: pd.DataFrame) -> Dict[str, dict]:
    metrics = [m for m in SUMMARY_METRICS if m in frame.columns]
    summary = {}
    for policy, group in frame.groupby("policy", sort=True):
        samples = group.groupby("seed")[metrics].mean() if "seed" in group.columns else group[metrics]
        n = int(len(samples))
        entry = {"samples": n, "low_confidence": n < LOW_CONFIDENCE_SAMPLES, "metrics": {}}
        for metric in metrics:
            values = samples[metric].dropna().to_numpy()
            if values.size == 0:
                continue
            low, high = confidence_interval(values)
            entry["metrics"][metric] = {
                "mean": float(values.mean()),
                "median": float(np.median(values)),
                "ci_low": low,
                "ci_high": high,
            }
        summary[str(policy)] = entry
    return summary


def summary_long_table(summary: Dict[str, dict]) -> pd.DataFrame:
    rows = []
    for policy, entry in summary.items():
        for metric, values in entry["metrics"].items():
            for statistic, value in values.items():
                rows.append({
                    "policy": policy,
                    "metric": metric,
                    "statistic": statistic,
                    "value": value,
                    "samples": entry["samples"],
                    "low_confidence": entry["low_confidence"],
                })
    return pd.DataFrame(rows, columns=["policy", "metric", "statistic", "value", "samples", "low_confidence"])


def export_summary(csv_paths: Iterable[str], output_dir: str = None) -> Dict[str, dict]:
    """
    Aggregate metric CSVs per policy.

    Args:
        csv_paths: One or more metric CSVs
        output_dir: If given, summary.json and summary_long.csv are written there

    Returns:
        {policy: {"samples", "low_confidence", "metrics": {metric: {mean, median, ci_low, ci_high}}}}
    """
    paths: List[str] = list(csv_paths)
    if not paths:
        raise ValueError("export_summary needs at least one CSV")
    summary = summarize_frame(read_metrics(paths))
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, SUMMARY_JSON), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        write_metrics(summary_long_table(summary), os.path.join(output_dir, SUMMARY_LONG_CSV))
        logger.info(f"summary of {len(paths)} file(s) written to {output_dir}")
    for policy, entry in summary.items():
        if entry["low_confidence"]:
            logger.warning(f"{policy}: only {entry['samples']} sample(s), interval is low-confidence")
    return summary


def slot_reward_table(slot_rewards: pd.DataFrame) -> pd.DataFrame:
    """Average reward per time slot and policy, one column per policy."""
    if slot_rewards.empty:
        return pd.DataFrame()
    table = slot_rewards.groupby(["slot", "policy"])["reward"].mean().unstack("policy")
    return table.reset_index()
