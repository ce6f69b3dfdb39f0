"""Result files of a run: results.csv, summary.json and the resolved config snapshot."""
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from typing import Any, Dict, Generator, List

import numpy as np
import pandas as pd
import yaml

from ura_feedback.models import ExperimentConfig

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.json"
SNAPSHOT_FILE = "config.yaml"


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


@contextmanager
def staged_files(out_dir: str, names: List[str]) -> Generator[Dict[str, str], None, None]:
    """
    Yields a mapping final name -> temporary path inside out_dir. The temporaries are
    renamed into place only if the block completes; otherwise they are removed. Files
    already in out_dir are set aside first and put back if any rename fails, so a run
    leaves either all new files or all old ones.
    """
    os.makedirs(out_dir, exist_ok=True)
    staged: Dict[str, str] = {}
    backups: Dict[str, str] = {}
    committed: List[str] = []
    try:
        for name in names:
            fd, staged[name] = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            os.close(fd)
        yield dict(staged)
        for name, tmp in staged.items():
            final = os.path.join(out_dir, name)
            if os.path.exists(final):
                backup = os.path.join(out_dir, f".{name}.previous")
                os.replace(final, backup)
                backups[final] = backup
            os.replace(tmp, final)
            committed.append(final)
    except BaseException:
        for final in committed:
            if final not in backups:
                os.remove(final)
        for final, backup in backups.items():
            os.replace(backup, final)
        for tmp in staged.values():
            if os.path.exists(tmp):
                os.remove(tmp)
        if backups or committed:
            logger.warning(f"Writing results to {out_dir} failed; previous files restored")
        raise
    for backup in backups.values():
        os.remove(backup)


def snapshot(cfg: ExperimentConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def write_results(out_dir: str, rows: pd.DataFrame, summary: Dict[str, Any],
                  configs: List[ExperimentConfig]) -> Dict[str, str]:
    """Write all three files or none of them. Returns the final paths."""
    with staged_files(out_dir, [RESULTS_FILE, SUMMARY_FILE, SNAPSHOT_FILE]) as paths:
        rows.to_csv(paths[RESULTS_FILE], index=False, float_format="%.10g")
        with open(paths[SUMMARY_FILE], "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
        with open(paths[SNAPSHOT_FILE], "w") as f:
            document = snapshot(configs[0]) if len(configs) == 1 else {"points": [snapshot(c) for c in configs]}
            yaml.safe_dump(document, f, sort_keys=True)

    final = {name: os.path.join(out_dir, name) for name in (RESULTS_FILE, SUMMARY_FILE, SNAPSHOT_FILE)}
    logger.info(f"Wrote {len(rows)} rows to {final[RESULTS_FILE]}")
    return final


def load_snapshot(path: str) -> List[ExperimentConfig]:
    """Parse a config.yaml snapshot back into the experiment configuration(s) it records."""
    with open(path, "r") as f:
        document = yaml.safe_load(f) or {}
    points = document["points"] if "points" in document else [document]
    return [ExperimentConfig.model_validate(p) for p in points]
