"""Plot-ready report artifacts: headered CSV tables, JSON fits and a run manifest.

Every writer goes through :func:`atomic_write`, and formatting is fixed
(``repr`` for floats, ``1``/``0`` for booleans, empty cells for missing
values) so reruns on the same inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
from pathlib import Path

from . import __version__


def atomic_write(path, text: str) -> Path:
    """Write through a temporary sibling file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    tmp.replace(path)
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if v.is_integer() and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    if hasattr(v, "item"):                  # numpy scalars
        return cell(v.item())
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([cell(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


# -- artifact tables ------------------------------------------------------------

def km_rows(curves: dict):
    """``curves`` maps stratum label to a curve; the pooled curve is usually ``ALL``."""
    for label in sorted(curves):
        for t, n, d, s in curves[label].to_rows():
            yield label, t, n, d, s


KM_HEADER = ("stratum", "time", "at_risk", "events", "survival")
KM_SUMMARY_HEADER = ("stratum", "n", "median", "q25", "q75")
PASS_RATE_HEADER = ("subject_code", "major_id", "n_enrolments", "n_attempters", "n_passes", "pass_rate",
                    "mean_time_to_first_pass")
BOTTLENECK_HEADER = ("subject_code", "pass_rate", "hr_dropout", "score", "validity")
SENTINEL_HEADER = ("subject_code", "major_id", "n_attempters", "failure_prevalence", "odds_ratio", "p_value",
                   "marginal_odds_ratio", "is_sentinel", "validity")
HEATMAP_HEADER = ("subject_code", "major_id", "log_odds_ratio", "validity")
TRANSITION_HEADER = ("group_by", "horizon_months", "group", "cohort", "n", "p_upper_same", "p_upper_other",
                     "p_dropout", "p_censored")
MULTI_MAJOR_HEADER = ("n_majors_during_cbc", "n_students", "proportion_students", "proportion_dropout",
                      "proportion_upper_same_major", "proportion_upper_other_major", "proportion_censored")
FLOW_HEADER = ("initial_major", "destination_major", "count", "row_proportion")


def km_csv(curves) -> str:
    return csv_text(KM_HEADER, km_rows(curves))


def pass_rates_csv(stats) -> str:
    return csv_text(PASS_RATE_HEADER, ((s.subject_code, s.major_id, s.n_enrolments, s.n_attempters, s.n_passes,
                                        s.pass_rate, s.mean_time_to_first_pass) for s in stats))


def bottlenecks_csv(scores) -> str:
    return csv_text(BOTTLENECK_HEADER, ((b.subject_code, b.pass_rate, b.hr_dropout, b.score, b.validity)
                                        for b in scores))


def sentinels_csv(flags) -> str:
    return csv_text(SENTINEL_HEADER, ((f.subject_code, f.major_id, f.n_attempters, f.failure_prevalence,
                                       f.odds_ratio, f.p_value, f.marginal_odds_ratio, f.is_sentinel,
                                       f.validity) for f in flags))


def heatmap_csv(rows) -> str:
    return csv_text(HEATMAP_HEADER, rows)


def transitions_csv(tables) -> str:
    """``tables`` is a list of ``(group_by, horizon, rows)``."""
    def gen():
        for group_by, horizon, rows in tables:
            for r in rows:
                yield (group_by, horizon, r.group, r.cohort, r.n, r.p_upper_same, r.p_upper_other, r.p_dropout,
                       r.p_censored)
    return csv_text(TRANSITION_HEADER, gen())


def multi_major_csv(rows) -> str:
    return csv_text(MULTI_MAJOR_HEADER, ((r.n_majors, r.n_students, r.proportion_students, r.proportion_dropout,
                                          r.proportion_upper_same, r.proportion_upper_other,
                                          r.proportion_censored) for r in rows))


def flows_csv(flows) -> str:
    return csv_text(FLOW_HEADER, flows.to_rows())


# -- manifest -------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_clean(config), sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(out_dir, artifacts: dict, config: dict, inputs=(), command: str = "") -> Path:
    """``manifest.json`` with input and artifact hashes plus the config echo.

    ``artifacts`` maps file name to the analysis that produced it.  The
    creation time is recorded here only, never inside an artifact.
    """
    out = Path(out_dir)
    chash = config_hash(config)
    doc = {
        "tool": "cbcfilter",
        "version": __version__,
        "command": command,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "config": config,
        "config_sha256": chash,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": [
            {"file": name, "analysis": analysis, "sha256": sha256_file(out / name), "config_sha256": chash}
            for name, analysis in sorted(artifacts.items())
        ],
    }
    return atomic_write(out / "manifest.json", json_text(doc))
