"""Seeded synthetic cohorts for exercising the whole pipeline.

Each simulated student enters in March of their entry year, registers in a
primary major (sometimes in extra majors too) and spends a first year
taking the level-1 subjects of that major, with up to three exam sittings
per subject.  From the end of that year on, two competing monthly hazards
share a common time shape:

* dropout: ``a[major][cohort]`` times the failure multipliers of every key
  subject failed, times a relief factor once an extra major is held;
* progression: ``exp(effect * (pass_rate - centre))``.

The time shape grows as a power of time since the end of the first year
and levels off at ``hazard_plateau_months``; a small slow-paced share of
students has both hazards damped, which gives the long right tail.

Under this construction the odds of ending in dropout rather than
progression equal the ratio of the two hazards, so a failure multiplier
is both the planted dropout hazard ratio and the planted odds ratio.
Progressors pass an upper-cycle subject in their destination major; leavers
simply stop producing events.

All randomness comes from :class:`~cbcfilter.rng.CounterRng`, one stream
per student and one fixed slot per decision.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import SynthError
from .ingest import (CATALOG_COLUMNS, EVENT_COLUMNS, REGISTRATION_COLUMNS, AcademicEvent, CatalogEntry,
                     DegreeRegistration, YearMonth, classify_cbc_subjects)
from .rng import CounterRng

PRE, POST = "PRE_2006", "POST_2006"
COHORTS = (PRE, POST)

ENGINEERING = ("BIO", "CIV", "COMP", "ELE", "ELN", "IND", "MEC", "QUIM")
MAJOR_TAXONOMY = {m: "ENGINEERING" for m in ENGINEERING}
MAJOR_TAXONOMY.update({"PROG": "PROGRAMMER", "AZU": "OTHER", "ILUM": "OTHER", "INF": "OTHER",
                       "MAT": "OTHER", "FIS": "OTHER"})

MAJOR_NAMES = {
    "IND": "Ingeniería Industrial",
    "COMP": "Ingeniería en Computación",
    "QUIM": "Ingeniería Química",
    "MEC": "Ingeniería Mecánica",
    "CIV": "Ingeniería Civil",
    "ELN": "Ingeniería Electrónica",
    "BIO": "Ingeniería Biomédica",
    "ELE": "Ingeniería Eléctrica",
    "AZU": "Tec. Univ. Tecnol. Azucarera",
    "PROG": "Programador Universitario",
    "ILUM": "Tec. Univ. en Iluminación",
    "INF": "Lic. en Informática",
    "MAT": "Lic. en Matemática",
    "FIS": "Lic. en Física",
}

# code -> (name, field group, semester of the first year it is taught in)
SUBJECTS = {
    "CAL1": ("Cálculo I", "MATH", 0),
    "ALG": ("Álgebra y Geometría Analítica", "MATH", 0),
    "FIS1": ("Física I", "PHYSICS", 1),
    "QGEN": ("Química General", "CHEMISTRY", 1),
    "IING": ("Introducción a la Ingeniería", "INTRO_ENGINEERING", 0),
    "RGRAF": ("Representación Gráfica", "INTRO_ENGINEERING", 1),
    "ECOMP": ("Elementos de Computación", "COMPUTING", 0),
    "LCOMP1": ("Laboratorio de Computación I", "COMPUTING", 1),
    "ING1": ("Inglés I", "LANGUAGE", 1),
    "SEMU": ("Seminario Universitario", "OTHER", 0),
    "CAL2": ("Cálculo II", "MATH", 1),
    "FIS2": ("Física II", "PHYSICS", 0),
    "TAZU": ("Taller de Tecnología Azucarera", "INTRO_ENGINEERING", 1),
}

KEY_SUBJECTS = ("CAL1", "ALG", "FIS1", "ECOMP")


def _curricula():
    eng = ("CAL1", "ALG", "FIS1", "QGEN", "IING", "RGRAF", "ING1", "SEMU")
    first = {m: eng for m in ENGINEERING}
    first["COMP"] = eng + ("ECOMP", "LCOMP1")
    first["ELN"] = eng + ("ECOMP",)
    first["PROG"] = ("CAL1", "ALG", "ECOMP", "LCOMP1", "ING1", "SEMU")
    first["INF"] = ("CAL1", "ALG", "ECOMP", "LCOMP1", "ING1", "SEMU")
    first["AZU"] = ("CAL1", "QGEN", "TAZU", "ING1", "SEMU")
    first["ILUM"] = ("CAL1", "ALG", "FIS1", "RGRAF", "LCOMP1", "SEMU")
    first["MAT"] = ("CAL1", "ALG", "CAL2", "ING1", "SEMU")
    first["FIS"] = ("CAL1", "ALG", "FIS1", "CAL2", "SEMU")
    upper = {m: ("CAL2", "FIS2") for m in ENGINEERING}
    upper["ILUM"] = ("FIS2",)
    upper["FIS"] = ("FIS2",)
    out = {}
    for m, subs in first.items():
        levels = {s: 1 for s in subs}
        for s in upper.get(m, ()):
            levels[s] = 2
        levels[f"{m}201"] = 2
        levels[f"{m}202"] = 2
        levels[f"{m}301"] = 3
        out[m] = levels
    return out


def default_catalog() -> tuple[CatalogEntry, ...]:
    rows = []
    for major, levels in _curricula().items():
        for code, level in levels.items():
            if code in SUBJECTS:
                name, group, _ = SUBJECTS[code]
            else:
                name, group = f"Asignatura {code[-3]} de {major} {code[-1]}", "OTHER"
            rows.append(CatalogEntry(code, name, group, major, level))
    return tuple(sorted(rows, key=lambda e: (e.subject_code, e.major_id)))


def default_major_mix():
    pre = {"IND": 726, "COMP": 1904, "QUIM": 1083, "MEC": 1302, "CIV": 2050, "ELN": 1588, "BIO": 470,
           "AZU": 310, "PROG": 1899, "ELE": 289, "ILUM": 250, "INF": 1150, "MAT": 450, "FIS": 452}
    post = {"IND": 1387, "COMP": 1143, "QUIM": 1105, "MEC": 1059, "CIV": 752, "ELN": 687, "BIO": 670,
            "AZU": 430, "PROG": 319, "ELE": 240, "ILUM": 350, "INF": 1150, "MAT": 400, "FIS": 402}
    return {c: {m: v / sum(d.values()) for m, v in sorted(d.items())} for c, d in ((PRE, pre), (POST, post))}


def default_pass_probability():
    eng = {"CAL1": 0.70, "ALG": 0.72, "FIS1": 0.70, "QGEN": 0.75, "IING": 0.90, "RGRAF": 0.85,
           "ECOMP": 0.70, "LCOMP1": 0.80, "ING1": 0.85, "SEMU": 0.95}
    per_major = {m: dict(eng) for m in ENGINEERING}
    per_major["COMP"]["ECOMP"] = 0.45
    per_major["PROG"] = {"CAL1": 0.48, "ALG": 0.50, "ECOMP": 0.60, "LCOMP1": 0.65, "ING1": 0.80, "SEMU": 0.95}
    per_major["INF"] = {"CAL1": 0.50, "ALG": 0.55, "ECOMP": 0.60, "LCOMP1": 0.04, "ING1": 0.80, "SEMU": 0.95}
    per_major["AZU"] = {"CAL1": 0.55, "QGEN": 0.60, "TAZU": 0.80, "ING1": 0.80, "SEMU": 0.95}
    per_major["ILUM"] = {"CAL1": 0.50, "ALG": 0.50, "FIS1": 0.50, "RGRAF": 0.20, "LCOMP1": 0.25, "SEMU": 0.95}
    per_major["MAT"] = {"CAL1": 0.75, "ALG": 0.75, "CAL2": 0.60, "ING1": 0.85, "SEMU": 0.95}
    per_major["FIS"] = {"CAL1": 0.75, "ALG": 0.75, "FIS1": 0.70, "CAL2": 0.60, "SEMU": 0.95}
    out = {}
    for m, subs in per_major.items():
        for s, p in subs.items():
            out.setdefault(s, {})[m] = p
    return {s: dict(sorted(d.items())) for s, d in sorted(out.items())}


def default_dropout_hazard():
    table1 = {"IND": (0.441, 0.523), "COMP": (0.643, 0.758), "QUIM": (0.605, 0.584),
              "MEC": (0.581, 0.658), "CIV": (0.576, 0.746), "ELN": (0.339, 0.672),
              "BIO": (0.368, 0.666), "AZU": (0.526, 0.414), "PROG": (0.805, 0.765),
              "ELE": (0.377, 0.600), "ILUM": (0.70, 0.70), "INF": (0.68, 0.70),
              "MAT": (0.65, 0.68), "FIS": (0.62, 0.66)}
    return {m: {PRE: round(p / (1 - p) / 2, 6), POST: round(q / (1 - q) / 2, 6)}
            for m, (p, q) in sorted(table1.items())}


def default_extra_candidates():
    out = {m: tuple(x for x in ENGINEERING if x != m) for m in ENGINEERING}
    out.update({"PROG": ("COMP", "INF"), "INF": ("PROG", "COMP", "MAT"), "AZU": ("QUIM", "IND"),
                "ILUM": ("ELE", "ELN"), "MAT": ("FIS", "INF"), "FIS": ("MAT", "ELN")})
    out["COMP"] = ("PROG", "ELN", "INF", "IND")
    return out


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_students: int = 24017
    major_mix: dict = field(default_factory=default_major_mix)
    pre_post_mix: float = 0.42
    entry_years: dict = field(default_factory=lambda: {PRE: (1995, 2005), POST: (2006, 2019)})
    entry_month: int = 3
    window_end: YearMonth = YearMonth(2024, 12)
    catalog: tuple = field(default_factory=default_catalog)
    subject_semester: dict = field(default_factory=lambda: {k: v[2] for k, v in SUBJECTS.items()})
    pass_probability: dict = field(default_factory=default_pass_probability)
    attempt_probability: float = 0.92
    retake_probability: float = 0.6
    dropout_hazard: dict = field(default_factory=default_dropout_hazard)
    hazard_scale: float = 0.025
    hazard_shape: float = 3.2
    hazard_plateau_months: int | None = 36       # time shape stops growing here
    slow_fraction: float = 0.06                  # share of students whose exit hazards are damped
    slow_factor: float = 0.12
    pass_rate_effect: float = 2.0
    pass_rate_centre: float = 0.7
    dropout_hazard_multiplier_on_failure: dict = field(default_factory=lambda: {
        "CAL1": 3.6, "ALG": 3.4, "FIS1": 1.6, "ECOMP": 1.5})
    failure_multiplier_by_major: dict = field(default_factory=lambda: {
        "CAL1": {"PROG": 3.96}, "ECOMP": {"COMP": 3.44}, "LCOMP1": {"ILUM": 6.71, "INF": 3.5},
        "RGRAF": {"ILUM": 7.87}})
    multi_major_probability: float = 0.13
    extra_major_weights: tuple = (0.889, 0.0929, 0.0162, 0.0019)
    extra_major_candidates: dict = field(default_factory=default_extra_candidates)
    same_date_probability: float = 0.6
    extra_major_window: int = 23
    relief_factor: float = 0.5
    switch_probability: float = 0.3
    activity_probability: float = 0.8
    first_year_months: int = 12
    late_registration_probability: float = 0.008
    unknown_registration_probability: float = 0.002
    reversed_date_probability: float = 0.002
    post_exit_months: int = 120
    target_events: int | None = None
    target_registrations: int | None = None

    # -- serialisation ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_end"] = str(self.window_end)
        d["catalog"] = [list(e) for e in self.catalog]
        d["entry_years"] = {k: list(v) for k, v in self.entry_years.items()}
        d["extra_major_weights"] = list(self.extra_major_weights)
        d["extra_major_candidates"] = {k: list(v) for k, v in self.extra_major_candidates.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SynthError("INVALID_CONFIG", f"unknown fields: {unknown}")
        kw = dict(d)
        try:
            if "window_end" in kw and not isinstance(kw["window_end"], YearMonth):
                kw["window_end"] = YearMonth.parse(str(kw["window_end"]))
            if "catalog" in kw:
                kw["catalog"] = tuple(CatalogEntry(*row[:4], int(row[4])) for row in kw["catalog"])
            if "entry_years" in kw:
                kw["entry_years"] = {k: tuple(int(x) for x in v) for k, v in kw["entry_years"].items()}
            if "extra_major_weights" in kw:
                kw["extra_major_weights"] = tuple(float(x) for x in kw["extra_major_weights"])
            if "extra_major_candidates" in kw:
                kw["extra_major_candidates"] = {k: tuple(v) for k, v in kw["extra_major_candidates"].items()}
        except (TypeError, ValueError) as exc:
            raise SynthError("INVALID_CONFIG", str(exc)) from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, **kw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def with_students(self, n: int) -> "SynthConfig":
        """Same behaviour at a different size; exact count targets are scaled along."""
        scale = n / self.n_students

        def sc(v):
            return None if v is None else int(round(v * scale))
        return replace(self, n_students=n, target_events=sc(self.target_events),
                       target_registrations=sc(self.target_registrations))

    # -- validation -------------------------------------------------------------

    def majors(self) -> tuple[str, ...]:
        return tuple(sorted({e.major_id for e in self.catalog}))

    def mix_for(self, cohort: str) -> dict:
        mix = self.major_mix
        if set(mix) <= set(COHORTS) and mix:
            return mix[cohort]
        return mix

    def failure_multiplier(self, subject: str, major: str) -> float:
        by_major = self.failure_multiplier_by_major.get(subject, {})
        if major in by_major:
            return float(by_major[major])
        return float(self.dropout_hazard_multiplier_on_failure.get(subject, 1.0))

    def validate(self) -> "SynthConfig":
        def bad(name, why):
            raise SynthError("INVALID_CONFIG", f"{name}: {why}")

        def prob(name, v):
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                bad(name, f"{v!r} is not a probability")

        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            bad("seed", "must be an unsigned 64-bit integer")
        if not isinstance(self.n_students, int) or self.n_students < 1:
            bad("n_students", "must be a positive integer")
        if not self.catalog:
            bad("catalog", "is empty")
        majors = set(self.majors())
        for c in COHORTS:
            mix = self.mix_for(c)
            if not mix:
                bad("major_mix", f"empty for {c}")
            for m, p in mix.items():
                prob(f"major_mix[{m}]", p)
                if m not in majors:
                    bad("major_mix", f"major {m!r} is not in the catalogue")
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                bad("major_mix", f"{c} probabilities sum to {sum(mix.values())!r}")
            lo, hi = self.entry_years[c]
            if lo > hi:
                bad("entry_years", f"{c} range is empty")
        for name in ("pre_post_mix", "attempt_probability", "retake_probability",
                     "multi_major_probability", "same_date_probability", "relief_factor",
                     "switch_probability", "activity_probability", "late_registration_probability",
                     "unknown_registration_probability", "reversed_date_probability"):
            prob(name, getattr(self, name))
        if self.late_registration_probability + self.unknown_registration_probability > 1:
            bad("late_registration_probability", "late and unknown probabilities exceed 1")
        for s, d in self.pass_probability.items():
            for m, p in d.items():
                prob(f"pass_probability[{s}][{m}]", p)
        for m, d in self.dropout_hazard.items():
            vals = d.values() if isinstance(d, dict) else [d]
            for v in vals:
                if not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                    bad(f"dropout_hazard[{m}]", f"{v!r} is not a non-negative hazard")
        for m in majors:
            if m not in self.dropout_hazard:
                bad("dropout_hazard", f"missing major {m!r}")
        for name in ("hazard_scale", "hazard_shape"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                bad(name, "must be positive")
        prob("slow_fraction", self.slow_fraction)
        if not (isinstance(self.slow_factor, (int, float)) and 0 < self.slow_factor <= 1):
            bad("slow_factor", "must lie in (0, 1]")
        pl = self.hazard_plateau_months
        if pl is not None and not (isinstance(pl, int) and pl > self.first_year_months):
            bad("hazard_plateau_months", "must be an integer after the first year")
        for s, m in self.dropout_hazard_multiplier_on_failure.items():
            if not m >= 1:
                bad(f"dropout_hazard_multiplier_on_failure[{s}]", "must be >= 1")
        for s, d in self.failure_multiplier_by_major.items():
            for m, v in d.items():
                if not v >= 1:
                    bad(f"failure_multiplier_by_major[{s}][{m}]", "must be >= 1")
        w = self.extra_major_weights
        if not w or any(x < 0 for x in w) or sum(w) <= 0:
            bad("extra_major_weights", "must be non-negative with a positive sum")
        if len(w) >= len(majors):
            bad("extra_major_weights", "more extra majors than available majors")
        if self.first_year_months < 12:
            bad("first_year_months", "exam sessions need at least 12 months")
        if self.extra_major_window < 1:
            bad("extra_major_window", "must be at least one month")
        for name in ("target_events", "target_registrations"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 0):
                bad(name, "must be a non-negative integer or null")
        return self


# -- generation ---------------------------------------------------------------------

# draw slots; every decision owns a distinct counter value
S_COHORT, S_YEAR, S_MAJOR, S_REGLEAD, S_LATE, S_LATE_MONTHS = range(6)
S_MULTI, S_NEXTRA, S_SWITCH, S_REVERSED, S_UPPER, S_PROG_GRADE = range(6, 12)
S_POSTREG_ORDER, S_PAD_ORDER, S_SLOW = 12, 13, 14
S_EXTRA_CHOICE, S_EXTRA_SAME, S_EXTRA_TIME = 20, 30, 40
S_POSTREG = 50
S_PAD = 100
S_SUBJECT = 1_000      # + 32 * subject index + detail
S_MONTH = 10_000       # + 4 * month + detail

SESSIONS = {0: (4, 8, 11), 1: (9, 11)}
ENROL_OFFSET = {0: 0, 1: 5}

K_ENROL, K_EXAM = 0, 1
R_NONE, R_PASS, R_FAIL = 0, 1, 2


class _Batches:
    def __init__(self):
        self.parts = []

    def add(self, sid, major, subject, kind, month, result, grade):
        n = len(sid)
        if n == 0:
            return
        b = np.broadcast_arrays
        cols = b(np.asarray(sid), np.asarray(major), np.asarray(subject), np.asarray(kind),
                 np.asarray(month), np.asarray(result), np.asarray(grade, dtype=float))
        self.parts.append([np.array(c) for c in cols])

    def columns(self):
        if not self.parts:
            return [np.zeros(0)] * 7
        return [np.concatenate([p[j] for p in self.parts]) for j in range(7)]


@dataclass
class SynthCohort:
    """Generated cohort in columnar form, plus the catalogue.

    Event columns: student index, major index, subject index, kind (0 ENROL,
    1 EXAM), absolute month (``year * 12 + month - 1``), result (0 none,
    1 pass, 2 fail), grade (NaN when absent).
    """

    config: SynthConfig
    majors: tuple[str, ...]
    subjects: tuple[str, ...]
    student_ids: tuple[str, ...]
    ev: dict
    reg: dict
    catalog: tuple
    truth: dict = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return int(self.ev["student"].size)

    @property
    def n_registrations(self) -> int:
        return int(self.reg["student"].size)

    def events(self) -> list[AcademicEvent]:
        e = self.ev
        sids, majors, subjects = self.student_ids, self.majors, self.subjects
        kinds = ("ENROL", "EXAM")
        results = ("NONE", "PASS", "FAIL")
        dates = _date_table(e["month"])
        grades = [None if math.isnan(g) else g for g in e["grade"].tolist()]
        return [
            AcademicEvent(sids[s], majors[m], subjects[j], kinds[k], dates[t], results[r], g)
            for s, m, j, k, t, r, g in zip(e["student"].tolist(), e["major"].tolist(), e["subject"].tolist(),
                                            e["kind"].tolist(), e["month"].tolist(), e["result"].tolist(),
                                            grades)
        ]

    def registrations(self) -> list[DegreeRegistration]:
        r = self.reg
        dates = _date_table(r["month"])
        return [DegreeRegistration(self.student_ids[s], self.majors[m], dates[t])
                for s, m, t in zip(r["student"].tolist(), r["major"].tolist(), r["month"].tolist())]

    def triple(self):
        return self.events(), self.registrations(), list(self.catalog)

    # -- writing ------------------------------------------------------------------

    def write(self, out_dir, provenance: bool = True) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"events": out / "events.csv", "registrations": out / "registrations.csv",
                 "catalog": out / "catalog.csv"}
        _atomic_write(paths["events"], self._events_text())
        _atomic_write(paths["registrations"], self._registrations_text())
        _atomic_write(paths["catalog"], _catalog_text(self.catalog))
        if provenance:
            paths["provenance"] = out / "provenance.json"
            _atomic_write(paths["provenance"], json.dumps(self.provenance(paths), indent=2,
                                                         sort_keys=True, ensure_ascii=False) + "\n")
        return paths

    def provenance(self, paths=None) -> dict:
        from . import __version__
        d = {
            "tool": "cbcfilter",
            "version": __version__,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "config_sha256": self.config.digest(),
            "counts": {"students": len(self.student_ids), "events": self.n_events,
                       "registrations": self.n_registrations, "catalog": len(self.catalog)},
        }
        if paths:
            d["files"] = {k: _sha256(p) for k, p in sorted(paths.items()) if k != "provenance"}
        return d

    def _events_text(self) -> str:
        e = self.ev
        sids = self.student_ids
        head = [f"{sids[s]},{m},{j}," for s, m, j in zip(
            e["student"].tolist(), *(np.array(t, dtype=object)[e[c]].tolist()
                                     for t, c in ((self.majors, "major"), (self.subjects, "subject"))))]
        kinds = ("ENROL,", "EXAM,")
        results = ("", "PASS", "FAIL")
        dates = _date_table(e["month"])
        grades = ["" if math.isnan(g) else f"{g:g}" for g in e["grade"].tolist()]
        lines = [",".join(EVENT_COLUMNS)]
        lines += [f"{h}{kinds[k]}{dates[t]},{results[r]},{g}" for h, k, t, r, g in zip(
            head, e["kind"].tolist(), e["month"].tolist(), e["result"].tolist(), grades)]
        return "\n".join(lines) + "\n"

    def _registrations_text(self) -> str:
        r = self.reg
        dates = _date_table(r["month"])
        lines = [",".join(REGISTRATION_COLUMNS)]
        lines += [f"{self.student_ids[s]},{self.majors[m]},{dates[t]}"
                  for s, m, t in zip(r["student"].tolist(), r["major"].tolist(), r["month"].tolist())]
        return "\n".join(lines) + "\n"


def _date_table(months):
    months = np.asarray(months)
    if months.size == 0:
        return {}
    return {int(t): YearMonth(int(t) // 12, int(t) % 12 + 1) for t in np.unique(months)}


def _catalog_text(catalog) -> str:
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CATALOG_COLUMNS)
    for e in catalog:
        w.writerow(tuple(e))
    return buf.getvalue()


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    tmp.replace(path)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _padded(table, majors, key):
    """Per-major lists as a rectangular index table plus lengths."""
    width = max(len(table.get(m, ())) for m in majors) or 1
    out = np.zeros((len(majors), width), dtype=np.int64)
    lens = np.zeros(len(majors), dtype=np.int64)
    for i, m in enumerate(majors):
        items = [key[x] for x in table.get(m, ())]
        out[i, :len(items)] = items
        lens[i] = len(items)
    return out, lens


def generate_cohort(config: SynthConfig | None = None) -> SynthCohort:
    """Simulate a cohort; a pure function of the configuration (seed included)."""
    cfg = (config or SynthConfig()).validate()
    rng = CounterRng(cfg.seed)
    n = cfg.n_students
    majors = cfg.majors()
    subjects = tuple(sorted({e.subject_code for e in cfg.catalog}))
    mi = {m: i for i, m in enumerate(majors)}
    si = {s: j for j, s in enumerate(subjects)}
    cbc = classify_cbc_subjects(cfg.catalog)
    level1 = {m: sorted(e.subject_code for e in cfg.catalog if e.major_id == m and e.year_level == 1)
              for m in majors}
    cbc_list = {m: [s for s in level1[m] if s in cbc] for m in majors}
    upper = {m: sorted(e.subject_code for e in cfg.catalog if e.major_id == m and e.year_level >= 2)
             for m in majors}
    for m in majors:
        if not cbc_list[m] and any(cfg.mix_for(c).get(m, 0) > 0 for c in COHORTS):
            raise SynthError("INVALID_CONFIG", f"catalog: major {m!r} has no CBC subject")
    cbc_tab, cbc_len = _padded(cbc_list, majors, si)
    up_tab, up_len = _padded(upper, majors, si)

    idx = np.arange(n)
    keys = rng.keys(idx)
    u = rng.uniform

    # entry and primary major
    post = u(keys, S_COHORT) < cfg.pre_post_mix
    lo = np.where(post, cfg.entry_years[POST][0], cfg.entry_years[PRE][0])
    hi = np.where(post, cfg.entry_years[POST][1], cfg.entry_years[PRE][1])
    year = lo + rng.integers(keys, S_YEAR, hi - lo + 1)
    entry = year * 12 + (cfg.entry_month - 1)
    end_abs = cfg.window_end.year * 12 + cfg.window_end.month - 1
    horizon = end_abs - entry
    major = np.zeros(n, dtype=np.int64)
    um = u(keys, S_MAJOR)
    for c, mask in ((PRE, ~post), (POST, post)):
        mix = cfg.mix_for(c)
        probs = np.array([mix.get(m, 0.0) for m in majors])
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        major[mask] = np.minimum(np.searchsorted(cum, um[mask], side="right"), len(majors) - 1)

    reg0 = entry - rng.integers(keys, S_REGLEAD, 4)
    ul = u(keys, S_LATE)
    late = ul < cfg.late_registration_probability
    unknown = ~late & (ul < cfg.late_registration_probability + cfg.unknown_registration_probability)
    lm = rng.integers(keys, S_LATE_MONTHS, 12)
    reg0 = np.where(late, entry + 1 + lm, reg0)
    reg0 = np.where(unknown, entry + 13 + lm, reg0)

    # extra majors
    w = np.array(cfg.extra_major_weights, dtype=float)
    cumw = np.cumsum(w / w.sum())
    cumw[-1] = 1.0
    multi = u(keys, S_MULTI) < cfg.multi_major_probability
    n_extra = np.where(multi, np.searchsorted(cumw, u(keys, S_NEXTRA), side="right") + 1, 0)
    n_extra = np.minimum(n_extra, len(w))
    big = 10 ** 6
    first_extra = np.full(n, -1)
    extra_from = np.full(n, big)
    reg_s, reg_m, reg_t = [idx], [major], [reg0]
    held = {}
    kmax = len(w)
    ch_u = [u(keys, S_EXTRA_CHOICE + k) for k in range(kmax)]
    same_u = [u(keys, S_EXTRA_SAME + k) for k in range(kmax)]
    time_u = [u(keys, S_EXTRA_TIME + k) for k in range(kmax)]
    ex_s, ex_m, ex_t = [], [], []
    for i in np.nonzero(n_extra)[0].tolist():
        prim = majors[major[i]]
        chosen = [prim]
        offsets = []
        for k in range(int(n_extra[i])):
            cands = [c for c in cfg.extra_major_candidates.get(prim, ()) if c in mi and c not in chosen]
            if not cands:
                cands = [c for c in majors if c not in chosen]
            pick = cands[min(int(ch_u[k][i] * len(cands)), len(cands) - 1)]
            chosen.append(pick)
            same = same_u[k][i] < cfg.same_date_probability and (not offsets or offsets[-1] == 0)
            if same:
                off = 0
            else:
                off = 1 + min(int(time_u[k][i] * cfg.extra_major_window), cfg.extra_major_window - 1)
                off = max(off, offsets[-1] if offsets else 0)
            offsets.append(off)
            ex_s.append(i)
            ex_m.append(mi[pick])
            ex_t.append(int(reg0[i]) if off == 0 else int(entry[i]) + off)
        first_extra[i] = mi[chosen[1]]
        extra_from[i] = offsets[0]
        held[i] = chosen
    reg_s.append(np.array(ex_s, dtype=np.int64))
    reg_m.append(np.array(ex_m, dtype=np.int64))
    reg_t.append(np.array(ex_t, dtype=np.int64))

    # first year: enrolments and exam sittings
    batches = _Batches()
    n_att = np.zeros(n)
    n_pass = np.zeros(n)
    mult = np.ones(n)
    reversed_ = u(keys, S_REVERSED) < cfg.reversed_date_probability
    rev_pending = reversed_.copy()
    for s in subjects:
        j = si[s]
        takers_major = np.array([s in level1[m] for m in majors])
        takers = takers_major[major]
        if not takers.any():
            continue
        t_idx = np.nonzero(takers)[0]
        k_t = keys[t_idx]
        base = S_SUBJECT + 32 * j
        sem = int(cfg.subject_semester.get(s, 0))
        sessions = SESSIONS[1 if sem else 0]
        attempt = u(k_t, base) < cfg.attempt_probability
        enrol_month = entry[t_idx] + ENROL_OFFSET[1 if sem else 0]
        mv = rev_pending[t_idx] & attempt
        enrol_month = np.where(mv, entry[t_idx] + sessions[0] + 1, enrol_month)
        rev_pending[t_idx[mv]] = False
        batches.add(t_idx, major[t_idx], j, K_ENROL, enrol_month, R_NONE, np.nan)
        p_major = np.array([cfg.pass_probability.get(s, {}).get(m, 0.7) for m in majors])
        p = p_major[major[t_idx]]
        trying = attempt.copy()
        passed = np.zeros(t_idx.size, dtype=bool)
        failed = np.zeros(t_idx.size, dtype=bool)
        for a, off in enumerate(sessions):
            ok = u(k_t, base + 2 + a) < p
            ug = u(k_t, base + 8 + a)
            grade = np.where(ok, 4 + np.minimum((ug * 7).astype(int), 6), np.minimum((ug * 4).astype(int), 3))
            sel = trying
            batches.add(t_idx[sel], major[t_idx[sel]], j, K_EXAM, entry[t_idx[sel]] + off,
                        np.where(ok[sel], R_PASS, R_FAIL), grade[sel].astype(float))
            passed |= sel & ok
            failed |= sel & ~ok
            trying = sel & ~ok & (u(k_t, base + 5 + a) < cfg.retake_probability)
        if s in cbc:
            n_att[t_idx] += attempt
            n_pass[t_idx] += passed
        m_major = np.array([cfg.failure_multiplier(s, m) for m in majors])
        mult[t_idx] *= np.where(failed, m_major[major[t_idx]], 1.0)
    pass_rate = np.divide(n_pass, n_att, out=np.zeros(n), where=n_att > 0)

    # competing monthly hazards after the first year
    a_tab = np.array([[_hazard(cfg.dropout_hazard[m], c) for c in COHORTS] for m in majors])
    a_i = a_tab[major, post.astype(int)]
    prog_i = np.exp(cfg.pass_rate_effect * (pass_rate - cfg.pass_rate_centre))
    alive = np.ones(n, dtype=bool)
    tau = np.full(n, -1)
    dropout = np.zeros(n, dtype=bool)
    m0 = cfg.first_year_months
    pace = np.where(u(keys, S_SLOW) < cfg.slow_fraction, cfg.slow_factor, 1.0)
    for t in range(m0, int(horizon.max()) + 1):
        live = np.nonzero(alive & (horizon >= t))[0]
        if live.size == 0:
            break
        k = keys[live]
        te = t if cfg.hazard_plateau_months is None else min(t, cfg.hazard_plateau_months)
        h = cfg.hazard_scale * ((te - m0 + 1) / 12.0) ** (cfg.hazard_shape - 1.0)
        rel = np.where(extra_from[live] <= t, cfg.relief_factor, 1.0)
        hp = h * pace[live]
        ld = hp * a_i[live] * mult[live] * rel
        lt = ld + hp * prog_i[live]
        ex = u(k, S_MONTH + 4 * t) < -np.expm1(-lt)
        dr = ex & (u(k, S_MONTH + 4 * t + 1) * lt < ld)
        tau[live[ex]] = t
        dropout[live[dr]] = True
        alive[live[ex]] = False
        stay, ks = live[~ex], k[~ex]
        act = u(ks, S_MONTH + 4 * t + 2) < cfg.activity_probability
        who, kw = stay[act], ks[act]
        cur = np.where(extra_from[who] <= t, first_extra[who], major[who])
        pick = rng.integers(kw, S_MONTH + 4 * t + 3, cbc_len[cur])
        batches.add(who, cur, cbc_tab[cur, pick], K_ENROL, entry[who] + t, R_NONE, np.nan)

    # progression: an upper-cycle enrolment and pass in the destination major
    prog = (tau >= 0) & ~dropout
    dest = major.copy()
    switch = prog & (extra_from < tau) & (u(keys, S_SWITCH) < cfg.switch_probability)
    dest[switch] = first_extra[switch]
    p_idx = np.nonzero(prog)[0]
    kp = keys[p_idx]
    dp = dest[p_idx]
    usub = up_tab[dp, rng.integers(kp, S_UPPER, up_len[dp])]
    batches.add(p_idx, dp, usub, K_ENROL, entry[p_idx] + tau[p_idx] - 1, R_NONE, np.nan)
    g = 4 + np.minimum((u(kp, S_PROG_GRADE) * 7).astype(int), 6)
    batches.add(p_idx, dp, usub, K_EXAM, entry[p_idx] + tau[p_idx], R_PASS, g.astype(float))

    base_regs = sum(len(x) for x in reg_s)
    base_events = sum(len(p[0]) for p in batches.parts)

    # post-exit registrations of progressors, up to the registration target
    if cfg.target_registrations is not None:
        need = cfg.target_registrations - base_regs
        if need < 0:
            raise SynthError("TARGET_UNREACHABLE",
                             f"{base_regs} registrations exceed target {cfg.target_registrations}")
        room = p_idx[entry[p_idx] + tau[p_idx] + 1 <= end_abs]
        if need and room.size == 0:
            raise SynthError("TARGET_UNREACHABLE", "no progressor can take a later registration")
        order = room[np.argsort(u(keys[room], S_POSTREG_ORDER), kind="stable")]
        ps, pm, pt = [], [], []
        for r in range(need):
            i = int(order[r % order.size])
            rnd = r // order.size
            have = held.setdefault(i, [majors[major[i]]])
            cands = [m for m in majors if m not in have]
            if not cands:
                raise SynthError("TARGET_UNREACHABLE", "registration target needs too many majors")
            ki = keys[i:i + 1]
            m = cands[int(rng.integers(ki, S_POSTREG + 2 * rnd, len(cands))[0])]
            have.append(m)
            gap = end_abs - (int(entry[i]) + int(tau[i]))
            when = int(entry[i]) + int(tau[i]) + 1 + int(rng.integers(ki, S_POSTREG + 2 * rnd + 1, min(12, gap))[0])
            ps.append(i)
            pm.append(mi[m])
            pt.append(when)
        reg_s.append(np.array(ps, dtype=np.int64))
        reg_m.append(np.array(pm, dtype=np.int64))
        reg_t.append(np.array(pt, dtype=np.int64))

    # post-exit upper-cycle activity of progressors, up to the event target
    if cfg.target_events is not None:
        need = cfg.target_events - base_events
        if need < 0:
            raise SynthError("TARGET_UNREACHABLE", f"{base_events} events exceed target {cfg.target_events}")
        per_month = 2 * up_len[dp]
        months = np.clip(np.minimum(cfg.post_exit_months, end_abs - entry[p_idx] - tau[p_idx]), 0, None)
        cap = per_month * months
        total = int(cap.sum())
        if need > total:
            raise SynthError("TARGET_UNREACHABLE", f"only room for {total} post-exit events, need {need}")
        if need:
            q = (cap * (need / total)).astype(np.int64)
            short = need - int(q.sum())
            order = np.argsort(u(kp, S_PAD_ORDER), kind="stable")
            order = order[q[order] < cap[order]]
            q[order[:short]] += 1
            rep = np.repeat(np.arange(p_idx.size), q)
            within = np.arange(rep.size) - np.repeat(np.cumsum(q) - q, q)
            pm_ = per_month[rep]
            slot = within % pm_
            month = entry[p_idx][rep] + tau[p_idx][rep] + 1 + within // pm_
            subj = up_tab[dp[rep], slot // 2]
            kind = slot % 2
            ok = u(kp[rep], S_PAD + within) < 0.8
            grade = np.where(kind == K_EXAM, np.where(ok, 4 + within % 7, within % 4), np.nan)
            result = np.where(kind == K_EXAM, np.where(ok, R_PASS, R_FAIL), R_NONE)
            batches.add(p_idx[rep], dp[rep], subj, kind, month, result, grade.astype(float))

    cols = batches.columns()
    names = ("student", "major", "subject", "kind", "month", "result", "grade")
    ev = {nm: c for nm, c in zip(names, cols)}
    for nm in names[:-1]:
        ev[nm] = ev[nm].astype(np.int64)
    order = np.lexsort((ev["grade"], ev["result"], ev["major"], ev["subject"], ev["kind"], ev["month"],
                        ev["student"]))
    ev = {k: v[order] for k, v in ev.items()}
    rs = np.concatenate(reg_s).astype(np.int64)
    rm = np.concatenate(reg_m).astype(np.int64)
    rt = np.concatenate(reg_t).astype(np.int64)
    ro = np.lexsort((rm, rt, rs))
    reg = {"student": rs[ro], "major": rm[ro], "month": rt[ro]}

    width = max(6, len(str(n)))
    sids = tuple(f"S{i + 1:0{width}d}" for i in range(n))
    truth = {
        "entry_month": entry, "major": major, "post": post, "tau": tau, "dropout": dropout,
        "destination": dest, "pass_rate": pass_rate, "multiplier": mult, "extra_from": extra_from,
        "n_extra": n_extra, "late_registration": late | unknown, "reversed": reversed_,
    }
    return SynthCohort(cfg, majors, subjects, sids, ev, reg, tuple(cfg.catalog), truth)


def _hazard(value, cohort):
    return float(value[cohort]) if isinstance(value, dict) else float(value)


# -- calibration -----------------------------------------------------------------------

DEFAULT_TOLERANCES = {
    "overall_dropout": 0.008,
    "dropout_by_major_cohort": 0.02,
    "dropout_by_n_majors": 0.03,
    "median_exit_months": 1.5,
    "proportion_multi_major": 0.01,
}


@dataclass(frozen=True)
class CalibrationTargets:
    """Aggregate targets; every family is optional.

    ``dropout_by_major_cohort`` maps destination major to ``{cohort: p}``,
    ``dropout_by_n_majors`` maps a major count to ``p``.
    """

    overall_dropout: float | None = None
    dropout_by_major_cohort: dict = field(default_factory=dict)
    dropout_by_n_majors: dict = field(default_factory=dict)
    median_exit_months: float | None = None
    proportion_multi_major: float | None = None
    tolerances: dict = field(default_factory=dict)

    def tolerance(self, family: str) -> float:
        return float(self.tolerances.get(family, DEFAULT_TOLERANCES[family]))

    def validate(self) -> "CalibrationTargets":
        def check(name, v, lo_open=False):
            if not (isinstance(v, (int, float)) and 0.0 <= v < 1.0):
                raise SynthError("INVALID_TARGETS", f"{name}: {v!r} is not a proportion in [0, 1)")
        if self.overall_dropout is not None:
            check("overall_dropout", self.overall_dropout)
        for m, d in self.dropout_by_major_cohort.items():
            for c, v in d.items():
                if c not in COHORTS:
                    raise SynthError("INVALID_TARGETS", f"unknown cohort {c!r}")
                check(f"dropout_by_major_cohort[{m}][{c}]", v)
        for k, v in self.dropout_by_n_majors.items():
            check(f"dropout_by_n_majors[{k}]", v)
        if self.proportion_multi_major is not None:
            check("proportion_multi_major", self.proportion_multi_major)
        if self.median_exit_months is not None and not self.median_exit_months > 0:
            raise SynthError("INVALID_TARGETS", "median_exit_months must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTargets":
        kw = dict(d)
        if "dropout_by_n_majors" in kw:
            kw["dropout_by_n_majors"] = {int(k): float(v) for k, v in kw["dropout_by_n_majors"].items()}
        try:
            return cls(**kw).validate()
        except TypeError as exc:
            raise SynthError("INVALID_TARGETS", str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_by_n_majors"] = {str(k): v for k, v in self.dropout_by_n_majors.items()}
        return d


def published_targets() -> CalibrationTargets:
    """Outcome aggregates of the reference faculty, used for the default calibration."""
    t1 = {"IND": (0.441, 0.523), "COMP": (0.643, 0.758), "QUIM": (0.605, 0.584),
          "MEC": (0.581, 0.658), "CIV": (0.576, 0.746), "ELN": (0.339, 0.672),
          "BIO": (0.368, 0.666), "AZU": (0.526, 0.414), "PROG": (0.805, 0.765),
          "ELE": (0.377, 0.600)}
    return CalibrationTargets(
        overall_dropout=0.605,
        dropout_by_major_cohort={m: {PRE: p, POST: q} for m, (p, q) in t1.items()},
        dropout_by_n_majors={1: 0.64, 2: 0.47, 3: 0.46},
        median_exit_months=24.0,
        proportion_multi_major=(2518 + 263 + 46 + 5) / 24017,
    )


def trajectory_config(cfg: SynthConfig):
    """Dataset-building configuration that matches a synthetic cohort."""
    from .trajectory import TrajectoryConfig
    return TrajectoryConfig(window_end=cfg.window_end, key_subjects=KEY_SUBJECTS,
                            major_taxonomy=dict(MAJOR_TAXONOMY))


def cohort_aggregates(records) -> dict:
    """The aggregates that calibration targets refer to, measured on built records."""
    from .survival import kaplan_meier, survival_samples
    records = list(records)
    n = len(records)
    drop = [r.cbc_outcome == "DROPOUT_CBC" for r in records]
    by_mc: dict = {}
    by_n: dict = {}
    for r, d in zip(records, drop):
        a = by_mc.setdefault(r.destination_major, {}).setdefault(r.cohort, [0, 0])
        a[0] += d
        a[1] += 1
        b = by_n.setdefault(r.n_majors_during_cbc, [0, 0])
        b[0] += d
        b[1] += 1
    samples = survival_samples(records)
    km = kaplan_meier(samples) if samples else None
    return {
        "n_records": n,
        "overall_dropout": sum(drop) / n,
        "dropout_by_major_cohort": {m: {c: v[0] / v[1] for c, v in sorted(d.items())}
                                    for m, d in sorted(by_mc.items())},
        "count_by_major_cohort": {m: {c: v[1] for c, v in sorted(d.items())} for m, d in sorted(by_mc.items())},
        "dropout_by_n_majors": {k: v[0] / v[1] for k, v in sorted(by_n.items())},
        "count_by_n_majors": {k: v[1] for k, v in sorted(by_n.items())},
        "median_exit_months": None if km is None else km.median,
        "proportion_multi_major": sum(v[1] for k, v in by_n.items() if k >= 2) / n,
    }


def simulate_records(cfg: SynthConfig):
    """Generate a cohort and build its student records in memory."""
    from .trajectory import build_dataset
    cohort = generate_cohort(cfg)
    events, regs, catalog = cohort.triple()
    return build_dataset(events, regs, catalog, trajectory_config(cfg))[0]


def residuals(targets: CalibrationTargets, agg: dict) -> dict[str, float]:
    """Achieved minus target, one entry per targeted quantity."""
    out = {}
    if targets.overall_dropout is not None:
        out["overall_dropout"] = agg["overall_dropout"] - targets.overall_dropout
    for m, d in sorted(targets.dropout_by_major_cohort.items()):
        for c, v in sorted(d.items()):
            got = agg["dropout_by_major_cohort"].get(m, {}).get(c)
            out[f"dropout_by_major_cohort/{m}/{c}"] = float("nan") if got is None else got - v
    for k, v in sorted(targets.dropout_by_n_majors.items()):
        got = agg["dropout_by_n_majors"].get(k)
        out[f"dropout_by_n_majors/{k}"] = float("nan") if got is None else got - v
    if targets.median_exit_months is not None:
        got = agg["median_exit_months"]
        out["median_exit_months"] = float("nan") if got is None else got - targets.median_exit_months
    if targets.proportion_multi_major is not None:
        out["proportion_multi_major"] = agg["proportion_multi_major"] - targets.proportion_multi_major
    return out


def _within(targets, res) -> bool:
    return all(
        math.isfinite(v) and abs(v) <= targets.tolerance(k.split("/")[0]) + 1e-12
        for k, v in res.items()
    )


def _badness(targets, res) -> float:
    worst = 0.0
    for k, v in res.items():
        if not math.isfinite(v):
            return math.inf
        worst = max(worst, abs(v) / targets.tolerance(k.split("/")[0]))
    return worst


def _odds(p):
    p = min(max(p, 1e-3), 1 - 1e-3)
    return p / (1 - p)


@dataclass(frozen=True)
class CalibrationSearch:
    base: SynthConfig = field(default_factory=SynthConfig)
    max_evaluations: int = 20
    damping: float = 1.0


@dataclass(frozen=True)
class CalibrationResult:
    config: SynthConfig
    residuals: dict
    aggregates: dict
    evaluations: int

    def to_dict(self) -> dict:
        return {"evaluations": self.evaluations, "residuals": self.residuals,
                "config": self.config.to_dict()}


class CalibrationFailed(SynthError):
    def __init__(self, message, best: CalibrationResult):
        super().__init__("CALIBRATION_FAILED", message)
        self.best = best


def _update(cfg: SynthConfig, targets: CalibrationTargets, agg: dict, damping: float) -> SynthConfig:
    """One multiplicative step on each parameter that owns a target."""
    def step(factor):
        return factor ** damping

    hazard = {m: ({c: _hazard(v, c) for c in COHORTS}) for m, v in cfg.dropout_hazard.items()}
    got = agg["dropout_by_major_cohort"]
    counts = agg["count_by_major_cohort"]
    covered = set()
    for m, d in targets.dropout_by_major_cohort.items():
        for c, want in d.items():
            covered.add((m, c))
            if m not in hazard:
                continue
            if want == 0:
                hazard[m][c] = 0.0
            elif c in got.get(m, {}):
                hazard[m][c] *= step(_odds(want) / _odds(got[m][c]))
    if targets.overall_dropout is not None:
        rest = [(m, c) for m in hazard for c in COHORTS if (m, c) not in covered]
        n_all = agg["n_records"]
        n_rest = sum(counts.get(m, {}).get(c, 0) for m, c in rest)
        if rest and n_rest:
            d_cov = sum(got[m][c] * counts[m][c] for m in got for c in got[m] if (m, c) in covered)
            d_rest = sum(got[m][c] * counts[m][c] for m, c in rest if c in got.get(m, {}))
            want = (targets.overall_dropout * n_all - d_cov) / n_rest
            have = d_rest / n_rest
            if targets.overall_dropout == 0:
                for m, c in rest:
                    hazard[m][c] = 0.0
            else:
                f = step(_odds(min(max(want, 0.01), 0.99)) / _odds(have))
                for m, c in rest:
                    hazard[m][c] *= f
    kw = {"dropout_hazard": hazard}

    multi = {k: v for k, v in targets.dropout_by_n_majors.items() if k >= 2}
    if multi:
        n_by = agg["count_by_n_majors"]
        d_by = agg["dropout_by_n_majors"]
        ks = [k for k in multi if k in n_by]
        if ks:
            tot = sum(n_by[k] for k in ks)
            want = sum(multi[k] * n_by[k] for k in ks) / tot
            have = sum(d_by[k] * n_by[k] for k in ks) / tot
            kw["relief_factor"] = min(1.0, cfg.relief_factor * step(_odds(want) / _odds(have)))
    if targets.proportion_multi_major is not None and agg["proportion_multi_major"] > 0:
        f = targets.proportion_multi_major / agg["proportion_multi_major"]
        kw["multi_major_probability"] = min(1.0, cfg.multi_major_probability * step(f))
    if targets.median_exit_months is not None and agg["median_exit_months"] is not None:
        m0 = cfg.first_year_months
        have = max(agg["median_exit_months"] - m0, 1.0)
        want = max(targets.median_exit_months - m0, 1.0)
        kw["hazard_scale"] = cfg.hazard_scale * step((have / want) ** cfg.hazard_shape)
    return replace(cfg, **kw)


def calibrate(targets: CalibrationTargets, search: CalibrationSearch | None = None,
              log=None) -> CalibrationResult:
    """Fixed-point search: simulate, compare, rescale the responsible parameters, repeat.

    Dropout targets move per-(major, cohort) dropout hazards on the odds
    scale; multi-major dropout moves the relief factor; the median exit time
    moves the hazard time scale.  Raises :class:`CalibrationFailed`
    (code CALIBRATION_FAILED) with the best residuals when the evaluation
    budget runs out or an updated configuration cannot be simulated.
    """
    targets = targets.validate()
    search = search or CalibrationSearch()
    cfg = search.base.validate()
    best = None
    for it in range(1, search.max_evaluations + 1):
        try:
            agg = cohort_aggregates(simulate_records(cfg))
        except SynthError as exc:
            if best is None:
                raise
            raise CalibrationFailed(f"evaluation {it} could not be simulated ({exc}); best residuals: "
                                    f"{ {k: round(v, 4) for k, v in best.residuals.items()} }", best) from None
        res = residuals(targets, agg)
        result = CalibrationResult(cfg, res, agg, it)
        if best is None or _badness(targets, res) < _badness(targets, best.residuals):
            best = result
        if log:
            log(f"evaluation {it}: worst scaled residual {_badness(targets, res):.3f}")
        if _within(targets, res):
            return result
        cfg = _update(cfg, targets, agg, search.damping)
    worst = {k: round(v, 4) for k, v in best.residuals.items()}
    raise CalibrationFailed(f"best residuals after {search.max_evaluations} evaluations: {worst}", best)


def calibrated_config() -> SynthConfig:
    """The shipped configuration, calibrated against :func:`published_targets`."""
    from importlib import resources
    text = resources.files("cbcfilter").joinpath("data/calibrated.json").read_text(encoding="utf-8")
    return SynthConfig.from_dict(json.loads(text)["config"])
