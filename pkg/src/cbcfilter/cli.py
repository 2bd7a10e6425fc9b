"""Command-line front end: ``validate``, ``build``, ``analyze`` and ``synth``.

Exit codes: 0 success, 1 finished with validity warnings, 2 fatal error.

A run configuration is a JSON object whose keys are the fields of
:class:`RunConfig` (unknown keys are an error).  Relative paths inside a
config file are resolved against the file's directory; command-line flags
override file values.  Example::

    {
      "events": "events.csv", "registrations": "registrations.csv", "catalog": "catalog.csv",
      "window_end": "2024-12", "inactivity_months": 36, "horizon_months": 36,
      "key_subjects": ["CAL1", "ALG"], "major_taxonomy": {"CIV": "ENGINEERING"},
      "min_attempters": 50,
      "sentinel": {"min_prevalence": 0.10, "min_odds_ratio": 2.0, "max_p_value": 0.01},
      "synth": {"n_students": 1000}
    }
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__, report
from .bottleneck import (OK, SentinelThresholds, bottleneck_table, or_heatmap, sentinel_scan,
                         subject_pass_rates)
from .errors import CbcError, EstimationError, IngestError, SynthError, TrajectoryError
from .ingest import (YearMonth, classify_cbc_subjects, level_map, parse_catalog, parse_events,
                     parse_registrations, validate_consistency)
from .survival import fit_exit_model, kaplan_meier, km_by_stratum, survival_samples
from .trajectory import (POST_2006, PRE_2006, TrajectoryConfig, build_dataset, read_records_csv,
                         write_records_csv)
from .transitions import initial_to_destination_flows, multi_major_outcomes, transition_matrix

EXIT_OK, EXIT_WARN, EXIT_FATAL = 0, 1, 2

ANALYSES = ("km", "cox", "passrates", "bottlenecks", "sentinels", "transitions", "flows")
COHORT_FILTER = {"pre": PRE_2006, "post": POST_2006, "all": None}
RECORDS_FILE = "student_records.csv"
PATH_FIELDS = ("events", "registrations", "catalog", "records", "out_dir")


@dataclass(frozen=True)
class RunConfig:
    events: str | None = None
    registrations: str | None = None
    catalog: str | None = None
    records: str | None = None
    out_dir: str = "."
    window_end: str | None = None           # "YYYY-MM"; None means the latest event
    inactivity_months: int = 36
    horizon_months: int = 36
    key_subjects: tuple[str, ...] = ()
    major_taxonomy: dict = field(default_factory=dict)
    cbc_whitelist: tuple[str, ...] = ()
    grace_months: int = 0
    cohort: str = "all"
    min_attempters: int = 50
    sentinel: dict = field(default_factory=dict)
    sentinel_failure: str = "any_attempt"
    excluded_field_groups: tuple[str, ...] = ("LANGUAGE",)
    seed: int | None = None
    threads: int = 1
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        kw = dict(d)
        for k in ("key_subjects", "cbc_whitelist", "excluded_field_groups"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if base_dir is not None:
            for k in PATH_FIELDS:
                if kw.get(k) is not None:
                    kw[k] = str(Path(base_dir) / kw[k])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc, base_dir=path.parent)

    def resolved(self) -> "RunConfig":
        kw = {k: str(Path(getattr(self, k)).resolve()) for k in PATH_FIELDS if getattr(self, k) is not None}
        return replace(self, **kw).validate()

    def validate(self) -> "RunConfig":
        if self.cohort not in COHORT_FILTER:
            raise ValueError(f"cohort must be one of {sorted(COHORT_FILTER)}")
        if self.window_end is not None:
            YearMonth.parse(self.window_end)
        if self.horizon_months <= 0 or self.inactivity_months < 0 or self.min_attempters < 1:
            raise ValueError("horizon must be positive, inactivity non-negative, min_attempters >= 1")
        self.thresholds()
        return self

    def thresholds(self) -> SentinelThresholds:
        extra = sorted(set(self.sentinel) - {"min_prevalence", "min_odds_ratio", "max_p_value"})
        if extra:
            raise ValueError(f"unknown sentinel keys {extra}")
        return SentinelThresholds(min_attempters=self.min_attempters, **self.sentinel)

    def trajectory_config(self) -> TrajectoryConfig:
        return TrajectoryConfig(
            inactivity_months=self.inactivity_months,
            window_end=YearMonth.parse(self.window_end) if self.window_end else None,
            key_subjects=tuple(self.key_subjects),
            major_taxonomy=dict(self.major_taxonomy),
            cbc_whitelist=tuple(self.cbc_whitelist),
            grace_months=self.grace_months,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# -- argument parsing ------------------------------------------------------------

def _global_flags(defaults) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=defaults)
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--out-dir", help="directory for artifacts (default: current directory)")
    p.add_argument("--seed", type=int, help="seed for synth")
    p.add_argument("--threads", type=int, help="accepted for compatibility; analyses run sequentially")
    p.add_argument("--cohort", choices=sorted(COHORT_FILTER), help="restrict records to one entry cohort")
    p.add_argument("--horizon", type=int, help="horizon in months for transition tables (default 36)")
    return p


def build_parser() -> argparse.ArgumentParser:
    # global flags may appear before or after the subcommand; the copy attached
    # to each subcommand suppresses defaults so it cannot clobber earlier values
    parser = argparse.ArgumentParser(prog="cbcfilter", parents=[_global_flags(None)],
                                     description="Trajectories through a shared first-year block.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    glob = _global_flags(argparse.SUPPRESS)

    def inputs(p, required=False):
        p.add_argument("--events", required=required)
        p.add_argument("--registrations", required=required)
        p.add_argument("--catalog", required=required)

    p = sub.add_parser("validate", parents=[glob], help="parse and check an input triple")
    inputs(p)
    p = sub.add_parser("build", parents=[glob], help="build the student records file")
    inputs(p)
    p = sub.add_parser("analyze", parents=[glob], help="run analyses on a records file")
    p.add_argument("which", choices=ANALYSES + ("all",))
    p.add_argument("--records")
    inputs(p)
    p = sub.add_parser("synth", parents=[glob], help="generate a synthetic input triple")
    p.add_argument("--n-students", type=int)
    p.add_argument("--calibrate", metavar="TARGETS_JSON", help="calibrate against aggregate targets first")
    return parser


def run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for flag, key in (("out_dir", "out_dir"), ("seed", "seed"), ("threads", "threads"),
                      ("cohort", "cohort"), ("horizon", "horizon_months"), ("events", "events"),
                      ("registrations", "registrations"), ("catalog", "catalog"), ("records", "records")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return replace(cfg, **over).resolved()


class Fatal(Exception):
    pass


def _say(msg):
    print(msg, file=sys.stderr)


# -- commands ------------------------------------------------------------------

def _parse_triple(cfg: RunConfig, need=("events", "registrations", "catalog")):
    parsers = {"events": parse_events, "registrations": parse_registrations, "catalog": parse_catalog}
    data, reports, fatal = {}, {}, []
    for name in need:
        path = getattr(cfg, name)
        if path is None:
            fatal.append({"file": name, "code": "MISSING_FILE", "message": f"no {name} file given"})
            continue
        try:
            data[name], rep = parsers[name](path)
            reports[name] = rep.to_dict()
        except IngestError as exc:
            fatal.append({"file": path, "code": exc.code, "message": str(exc)})
    return data, reports, fatal


def cmd_validate(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    data, reports, fatal = _parse_triple(cfg)
    doc = {"files": reports, "fatal": fatal}
    if not fatal:
        cbc = classify_cbc_subjects(data["catalog"], cfg.cbc_whitelist)
        cons = validate_consistency(data["events"], data["registrations"], cbc, cfg.grace_months)
        doc["consistency"] = cons.to_dict()
        doc["cbc_subjects"] = sorted(cbc)
    report.atomic_write(out / "validation_report.json", report.json_text(doc))
    _manifest(cfg, {"validation_report.json": "validate"}, "validate")
    for f in fatal:
        _say(f"fatal: {f['file']}: {f['message']}")
    return EXIT_FATAL if fatal else EXIT_OK


def _filter_cohort(records, cfg):
    want = COHORT_FILTER[cfg.cohort]
    return records if want is None else [r for r in records if r.cohort == want]


def cmd_build(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    data, _, fatal = _parse_triple(cfg)
    if fatal:
        for f in fatal:
            _say(f"fatal: {f['file']}: {f['message']}")
        return EXIT_FATAL
    try:
        records, summary = build_dataset(data["events"], data["registrations"], data["catalog"],
                                         cfg.trajectory_config())
    except TrajectoryError as exc:
        _say(f"fatal: {exc}")
        return EXIT_FATAL
    records = _filter_cohort(records, cfg)
    doc = summary.to_dict()
    doc["cohort_filter"] = cfg.cohort
    doc["records_written"] = len(records)
    if not records:
        _say(f"fatal: EMPTY_POPULATION: no records in cohort {cfg.cohort}")
        return EXIT_FATAL
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / f".{RECORDS_FILE}.tmp"
    write_records_csv(tmp, records)
    os.replace(tmp, out / RECORDS_FILE)
    report.atomic_write(out / "build_summary.json", report.json_text(doc))
    _manifest(cfg, {RECORDS_FILE: "build", "build_summary.json": "build"}, "build")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


class _Inputs:
    """Lazily parsed analysis inputs."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._records = self._events = self._catalog = None

    @property
    def records(self):
        if self._records is None:
            path = self.cfg.records or str(Path(self.cfg.out_dir) / RECORDS_FILE)
            if not Path(path).is_file():
                raise Fatal(f"records file not found: {path}")
            try:
                recs = _filter_cohort(read_records_csv(path), self.cfg)
            except TrajectoryError as exc:
                raise Fatal(str(exc)) from None
            if not recs:
                raise Fatal("EMPTY_POPULATION: no records to analyse")
            self._records = recs
        return self._records

    def _parse(self, name, parser):
        path = getattr(self.cfg, name)
        if path is None:
            raise Fatal(f"this analysis needs --{name}")
        try:
            return parser(path)[0]
        except IngestError as exc:
            raise Fatal(str(exc)) from None

    @property
    def events(self):
        if self._events is None:
            self._events = self._parse("events", parse_events)
        return self._events

    @property
    def catalog(self):
        if self._catalog is None:
            self._catalog = self._parse("catalog", parse_catalog)
        return self._catalog


def _pass_stats(inp: _Inputs):
    cbc = classify_cbc_subjects(inp.catalog, inp.cfg.cbc_whitelist)
    return subject_pass_rates(inp.events, set(cbc), inp.records, by_major=True, levels=level_map(inp.catalog))


def _run_km(inp, out):
    curves = dict(km_by_stratum(inp.records))
    curves["ALL"] = kaplan_meier(survival_samples(inp.records))
    summary = [(k, int(c.at_risk[0]), c.median, c.quartiles[0], c.quartiles[1]) for k, c in sorted(curves.items())]
    report.atomic_write(out / "km.csv", report.km_csv(curves))
    report.atomic_write(out / "km_summary.csv", report.csv_text(report.KM_SUMMARY_HEADER, summary))
    return ["km.csv", "km_summary.csv"], []


def _fit_or_flag(fn, *a, **kw):
    try:
        fit = fn(*a, **kw)
        doc = fit.to_dict()
        doc["validity"] = OK if fit.converged else "NON_CONVERGENCE"
    except EstimationError as exc:
        doc = {"validity": exc.code, "message": str(exc)}
    return doc


def _run_cox(inp, out):
    recs = inp.records
    single = len({r.cohort for r in recs}) == 1
    doc = {
        "strata": "destination_major",
        "exit_model": _fit_or_flag(fit_exit_model, recs, "none" if single else "categorical"),
    }
    if not single:
        doc["exit_model_linear_cohort"] = _fit_or_flag(fit_exit_model, recs, "linear")
    report.atomic_write(out / "cox.json", report.json_text(doc))
    warn = [f"cox {k}: {v['validity']}" for k, v in doc.items() if isinstance(v, dict) and v["validity"] != OK]
    return ["cox.json"], warn


def _run_passrates(inp, out):
    report.atomic_write(out / "pass_rates.csv", report.pass_rates_csv(_pass_stats(inp)))
    return ["pass_rates.csv"], []


def _run_bottlenecks(inp, out):
    rows = bottleneck_table(inp.records, _pass_stats(inp), inp.cfg.min_attempters)
    report.atomic_write(out / "bottlenecks.csv", report.bottlenecks_csv(rows))
    return ["bottlenecks.csv"], [f"bottleneck {b.subject_code}: {b.validity}" for b in rows if b.validity != OK]


def _run_sentinels(inp, out):
    cfg = inp.cfg
    cbc = classify_cbc_subjects(inp.catalog, cfg.cbc_whitelist)
    flags = sentinel_scan(inp.records, cbc, cfg.thresholds(), cfg.sentinel_failure,
                          excluded_field_groups=cfg.excluded_field_groups)
    report.atomic_write(out / "sentinels.csv", report.sentinels_csv(flags))
    report.atomic_write(out / "or_heatmap.csv", report.heatmap_csv(or_heatmap(flags)))
    return (["sentinels.csv", "or_heatmap.csv"],
            [f"sentinel {f.subject_code}/{f.major_id}: {f.validity}" for f in flags if f.validity != OK])


def _run_transitions(inp, out):
    h = inp.cfg.horizon_months
    split = inp.cfg.cohort == "all"
    tables = [(g, h, transition_matrix(inp.records, h, g, split_cohort=split))
              for g in ("destination_major", "initial_major")]
    report.atomic_write(out / "transitions.csv", report.transitions_csv(tables))
    report.atomic_write(out / "multi_major.csv", report.multi_major_csv(multi_major_outcomes(inp.records)))
    return ["transitions.csv", "multi_major.csv"], []


def _run_flows(inp, out):
    report.atomic_write(out / "flows.csv", report.flows_csv(initial_to_destination_flows(inp.records)))
    return ["flows.csv"], []


RUNNERS = {"km": _run_km, "cox": _run_cox, "passrates": _run_passrates, "bottlenecks": _run_bottlenecks,
           "sentinels": _run_sentinels, "transitions": _run_transitions, "flows": _run_flows}


def cmd_analyze(cfg: RunConfig, which: str) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inp = _Inputs(cfg)
    produced, warnings = {}, []
    try:
        for name in ANALYSES if which == "all" else (which,):
            files, warn = RUNNERS[name](inp, out)
            produced.update({f: name for f in files})
            warnings += warn
    except Fatal as exc:
        _say(f"fatal: {exc}")
        return EXIT_FATAL
    except (EstimationError, TrajectoryError) as exc:
        _say(f"fatal: {exc}")
        return EXIT_FATAL
    inputs = [p for p in (cfg.records or str(out / RECORDS_FILE), cfg.events, cfg.catalog) if p]
    _manifest(cfg, produced, f"analyze {which}", inputs)
    if warnings:
        _say(f"{len(warnings)} validity warnings; first: {warnings[0]}")
        return EXIT_WARN
    return EXIT_OK


def _synth_config(cfg: RunConfig, n_students):
    from .synth import SynthConfig, calibrated_config
    base = calibrated_config()
    if cfg.synth:
        base = SynthConfig.from_dict({**base.to_dict(), **cfg.synth})
    if cfg.seed is not None:
        base = replace(base, seed=cfg.seed)
    if n_students is not None:
        base = base.with_students(n_students)
    return base.validate()


def cmd_synth(cfg: RunConfig, n_students=None, targets_path=None) -> int:
    from .synth import (KEY_SUBJECTS, MAJOR_TAXONOMY, CalibrationFailed, CalibrationSearch,
                        CalibrationTargets, calibrate, generate_cohort)
    out = Path(cfg.out_dir)
    try:
        scfg = _synth_config(cfg, n_students)
        if targets_path:
            try:
                doc = json.loads(Path(targets_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise SynthError("INVALID_TARGETS", str(exc)) from None
            targets = CalibrationTargets.from_dict(doc)
            try:
                result = calibrate(targets, CalibrationSearch(base=scfg), log=_say)
            except CalibrationFailed as exc:
                report.atomic_write(out / "calibration.json", report.json_text(
                    {"status": "CALIBRATION_FAILED", **exc.best.to_dict()}))
                raise
            report.atomic_write(out / "calibration.json", report.json_text({"status": "OK", **result.to_dict()}))
            scfg = result.config
    except (SynthError, ValueError, TypeError) as exc:
        _say(f"fatal: {exc}")
        return EXIT_FATAL
    cohort = generate_cohort(scfg)
    paths = cohort.write(out)
    run = {
        "events": "events.csv", "registrations": "registrations.csv", "catalog": "catalog.csv",
        "window_end": str(scfg.window_end), "key_subjects": list(KEY_SUBJECTS),
        "major_taxonomy": dict(MAJOR_TAXONOMY),
    }
    report.atomic_write(out / "run_config.json", report.json_text(run))
    artifacts = {p.name: "synth" for p in paths.values()}
    artifacts["run_config.json"] = "synth"
    if targets_path:
        artifacts["calibration.json"] = "synth"
    _manifest(cfg, artifacts, "synth", extra={"synth_config": scfg.to_dict()})
    print(json.dumps({"students": len(cohort.student_ids), "events": cohort.n_events,
                      "registrations": cohort.n_registrations, "seed": scfg.seed}, sort_keys=True))
    return EXIT_OK


def _manifest(cfg, artifacts, command, inputs=(), extra=None):
    conf = cfg.to_dict()
    if extra:
        conf.update(extra)
    report.write_manifest(cfg.out_dir, artifacts, conf, inputs=inputs, command=command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = run_config(args)
    except (ValueError, TypeError) as exc:
        _say(f"fatal: invalid configuration: {exc}")
        return EXIT_FATAL
    if cfg.threads and cfg.threads > 1:
        _say("note: --threads > 1 accepted; analyses run sequentially")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.which)
        return cmd_synth(cfg, getattr(args, "n_students", None), getattr(args, "calibrate", None))
    except CbcError as exc:
        _say(f"fatal: {exc}")
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
