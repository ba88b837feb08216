"""Grading records, label encoding, fold plans and the synthetic corpus."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, SeededRng
from .tokenizer import SEQ_LEN, LexError, Vocabulary, encode, lex

log = logging.getLogger(__name__)

CSV_COLUMNS = ("submission_id", "query_id", "submitted_answer", "is_correct", "remark", "grade")


class DataError(ValueError):
    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = errors or []
        detail = "".join(f"\n  {e}" for e in self.errors)
        super().__init__(message + detail)


class Remark(enum.Enum):
    CORRECT = "Correct"
    PARTIALLY_CORRECT = "Partially Correct"
    UNINTERPRETABLE = "Uninterpretable"
    CHEATING = "Cheating"

    @property
    def index(self) -> int:
        return list(Remark).index(self)

    @classmethod
    def parse(cls, text: str) -> "Remark":
        key = " ".join(text.split()).casefold()
        for r in cls:
            if key in (r.value.casefold(), r.value.replace(" ", "").casefold(), r.name.casefold()):
                return r
        raise ValueError(f"unknown remark {text!r}")


@dataclass(frozen=True)
class SubmissionRecord:
    submission_id: str
    query_id: str
    submitted_answer: str
    is_correct: bool
    remark: Remark
    grade_percent: float

    def warnings(self) -> list[str]:
        out = []
        if self.remark is Remark.CORRECT and not self.is_correct:
            out.append(f"{self.submission_id}: remark Correct but is_correct is false")
        if self.is_correct and self.grade_percent != 100.0:
            out.append(f"{self.submission_id}: is_correct but grade is {self.grade_percent}, not 100")
        return out


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y_correct: int
    y_remark: np.ndarray
    y_grade: float
    submission_id: str = ""


def _parse_bool(text: str) -> bool:
    key = text.strip().lower()
    if key in ("1", "true"):
        return True
    if key in ("0", "false"):
        return False
    raise ValueError(f"is_correct must be one of 0/1/true/false, got {text!r}")


def _parse_grade(text: str) -> float:
    try:
        g = float(text)
    except ValueError:
        raise ValueError(f"unparseable grade {text!r}") from None
    if not math.isfinite(g) or not 0.0 <= g <= 100.0:
        raise ValueError(f"grade {text!r} outside [0, 100]")
    return g


def load_csv(path) -> list[SubmissionRecord]:
    """Read the grading CSV; any bad row fails the whole load."""
    records, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing header column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        start = reader.line_num + 1
        for row in reader:
            line = start
            start = reader.line_num + 1
            if not row:
                continue
            if len(row) != len(header):
                errors.append(f"line {line}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                rec = SubmissionRecord(
                    submission_id=row[col["submission_id"]],
                    query_id=row[col["query_id"]],
                    submitted_answer=row[col["submitted_answer"]],
                    is_correct=_parse_bool(row[col["is_correct"]]),
                    remark=Remark.parse(row[col["remark"]]),
                    grade_percent=_parse_grade(row[col["grade"]]),
                )
            except ValueError as exc:
                errors.append(f"line {line}: {exc}")
                continue
            for w in rec.warnings():
                log.warning("line %d: %s", line, w)
            records.append(rec)
    if errors:
        raise DataError(f"{path}: {len(errors)} bad row(s)", errors)
    return records


def csv_writer(fh):
    # CRLF terminator makes the writer quote fields holding a bare carriage return
    return csv.writer(fh, lineterminator="\r\n")


def write_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv_writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.submission_id, r.query_id, r.submitted_answer, int(r.is_correct), r.remark.value, repr(r.grade_percent)])


def to_example(rec: SubmissionRecord, vocab: Vocabulary, seq_len: int = SEQ_LEN, fold_literals: bool = True) -> LabeledExample:
    try:
        tokens = lex(rec.submitted_answer, fold_literals=fold_literals)
    except LexError as exc:
        raise LexError(f"submission {rec.submission_id}: {exc}", exc.offset) from exc
    one_hot = np.zeros(len(Remark), dtype=DTYPE)
    one_hot[rec.remark.index] = 1.0
    return LabeledExample(
        x=encode(tokens, vocab, seq_len),
        y_correct=int(rec.is_correct),
        y_remark=one_hot,
        y_grade=rec.grade_percent / 100.0,
        submission_id=rec.submission_id,
    )


def stack_examples(examples) -> dict[str, np.ndarray]:
    return {
        "x": np.stack([e.x for e in examples]),
        "y_correct": np.array([[e.y_correct] for e in examples], dtype=DTYPE),
        "y_remark": np.stack([e.y_remark for e in examples]),
        "y_grade": np.array([[e.y_grade] for e in examples], dtype=DTYPE),
    }


# -- fold plans ----------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    scheme: str
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.folds)

    @property
    def n(self) -> int:
        return sum(len(val) for _, val in self.folds)


def _plan_from_validation(vals: list[list[int]], n: int, scheme: str, seed) -> FoldPlan:
    folds = []
    for val in vals:
        vs = set(val)
        train = tuple(i for i in range(n) if i not in vs)
        folds.append((train, tuple(sorted(val))))
    return FoldPlan(tuple(folds), scheme, seed)


def kfold_split(n: int, k: int = 10, seed: int = 0) -> FoldPlan:
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of examples n={n}")
    order = SeededRng(seed).permutation(n)
    vals = [[int(i) for i in order[f::k]] for f in range(k)]
    return _plan_from_validation(vals, n, f"kfold({k})", seed)


def loo_split(n: int) -> FoldPlan:
    if n < 2:
        raise ValueError(f"leave-one-out needs at least 2 examples, got {n}")
    return _plan_from_validation([[i] for i in range(n)], n, "loo", None)


def class_weights(examples) -> dict[str, np.ndarray]:
    """Inverse-frequency weights n/(classes * n_c); absent classes get 0."""
    examples = list(examples)
    if not examples:
        raise ValueError("class_weights needs at least one example")
    n = len(examples)
    c_counts = np.bincount([e.y_correct for e in examples], minlength=2)
    r_counts = np.bincount([int(np.argmax(e.y_remark)) for e in examples], minlength=len(Remark))

    def weights(counts, label_names):
        w = np.zeros(len(counts), dtype=DTYPE)
        for i, c in enumerate(counts):
            if c == 0:
                log.warning("class %s has no examples; weight set to 0", label_names[i])
            else:
                w[i] = n / (len(counts) * c)
        return w

    return {
        "correct": weights(c_counts, ["incorrect", "correct"]),
        "remark": weights(r_counts, [r.value for r in Remark]),
    }


# -- synthetic corpus ----------------------------------------------------------
#
# Rule set v1. Every statement answers one of the tasks below.
#   Correct          all join predicates present, any formulation; grade 100
#   PartiallyCorrect comma join with one required join predicate dropped;
#                    grade uniform in [40, 80], two decimals
#   Uninterpretable  keyword clauses emitted out of order; grade 0
#   Cheating         verbatim copy of the answer key, which carries the
#                    key's marker column; grade 0
# Class is drawn per record with probabilities 0.40/0.35/0.20/0.05.

SYNTHETIC_RULESET_VERSION = 1
SYNTHETIC_MIX = (0.40, 0.35, 0.20, 0.05)


@dataclass(frozen=True)
class _Task:
    query_id: str
    select: tuple[str, ...]
    tables: tuple[tuple[str, str], ...]
    joins: tuple[str, ...]
    filters: tuple[str, ...]


TASKS = (
    _Task(
        "q1",
        ("p.first_name", "p.last_name"),
        (("professor", "p"), ("teaches", "t"), ("course", "c")),
        ("p.prof_id = t.prof_id", "t.course_id = c.course_id"),
        ("c.title = '{title}'",),
    ),
    _Task(
        "q2",
        ("s.student_name", "e.semester"),
        (("student", "s"), ("enrolled", "e")),
        ("s.student_id = e.student_id",),
        ("e.year > {year}",),
    ),
    _Task(
        "q3",
        ("m.title", "d.director_name"),
        (("movie", "m"), ("directs", "r"), ("director", "d")),
        ("m.movie_id = r.movie_id", "r.director_id = d.director_id"),
        ("m.year_released >= {year}",),
    ),
    _Task(
        "q4",
        ("o.order_num", "c.cust_name", "o.total"),
        (("orders", "o"), ("customer", "c")),
        ("o.cust_id = c.cust_id",),
        ("o.total > {amount}",),
    ),
)

_TITLES = ("Introduction to Programming", "Databases", "Operating Systems", "Compilers", "Networks")


def _fill(text: str, rng: SeededRng) -> str:
    return text.format(
        title=rng.choice(_TITLES),
        year=int(rng.integers(1950, 2024)),
        amount=int(rng.integers(10, 5000)),
    )


def _comma_join(task: _Task, joins, filters, select=None) -> str:
    sel = ", ".join(select or task.select)
    frm = ", ".join(f"{t} {a}" for t, a in task.tables)
    where = " AND ".join(list(joins) + list(filters))
    return f"SELECT {sel}\nFROM {frm}\nWHERE {where};"


def _join_on(task: _Task, filters) -> str:
    (t0, a0), *rest = task.tables
    parts = [f"FROM {t0} {a0}"]
    for (t, a), pred in zip(rest, task.joins):
        parts.append(f"JOIN {t} {a} ON {pred}")
    return f"SELECT {', '.join(task.select)}\n" + "\n".join(parts) + f"\nWHERE {' AND '.join(filters)};"


def _nested_in(task: _Task, filters) -> str:
    # outer table keeps its select list; remaining tables move into a subquery chain
    (t0, a0), *rest = task.tables
    outer_cols = [c for c in task.select if c.startswith(a0 + ".")] or [f"{a0}.*"]
    inner_from = ", ".join(f"{t} {a}" for t, a in rest)
    first_join = task.joins[0]
    left, right = (s.strip() for s in first_join.split("="))
    inner_where = " AND ".join(list(task.joins[1:]) + list(filters))
    return (
        f"SELECT {', '.join(outer_cols)}\nFROM {t0} {a0}\n"
        f"WHERE {left} IN (SELECT {right} FROM {inner_from} WHERE {inner_where});"
    )


def _correct(task: _Task, rng: SeededRng) -> str:
    filters = [_fill(f, rng) for f in task.filters]
    style = int(rng.integers(0, 3))
    if style == 0:
        return _comma_join(task, task.joins, filters)
    if style == 1:
        return _join_on(task, filters)
    return _nested_in(task, filters)


def _partial(task: _Task, rng: SeededRng) -> str:
    filters = [_fill(f, rng) for f in task.filters]
    drop = int(rng.integers(0, len(task.joins)))
    joins = [j for i, j in enumerate(task.joins) if i != drop]
    return _comma_join(task, joins, filters)


def _uninterpretable(task: _Task, rng: SeededRng) -> str:
    filters = [_fill(f, rng) for f in task.filters]
    frm = ", ".join(f"{t} {a}" for t, a in task.tables)
    where = " AND ".join(list(task.joins) + filters)
    sel = ", ".join(task.select)
    orders = (
        f"FROM {frm} SELECT {sel} WHERE {where};",
        f"WHERE {where} FROM {frm} SELECT {sel};",
        f"SELECT FROM {frm} WHERE {sel} {where};",
    )
    return orders[int(rng.integers(0, len(orders)))]


def _answer_key(task: _Task) -> str:
    filters = [f.format(title=_TITLES[0], year=2000, amount=100) for f in task.filters]
    select = list(task.select) + ["'KEY-v1' AS answer_key_marker"]
    return _comma_join(task, task.joins, filters, select)


def generate_synthetic(n: int, seed: int = 0) -> list[SubmissionRecord]:
    if n < 8:
        raise ValueError(f"synthetic corpus needs n >= 8, got {n}")
    rng = SeededRng(seed)
    remarks = list(Remark)
    out = []
    for i in range(n):
        task = TASKS[int(rng.integers(0, len(TASKS)))]
        remark = rng.choice(remarks, p=SYNTHETIC_MIX)
        if remark is Remark.CORRECT:
            sql, grade = _correct(task, rng), 100.0
        elif remark is Remark.PARTIALLY_CORRECT:
            sql, grade = _partial(task, rng), round(float(rng.uniform(40.0, 80.0, ())), 2)
        elif remark is Remark.UNINTERPRETABLE:
            sql, grade = _uninterpretable(task, rng), 0.0
        else:
            sql, grade = _answer_key(task), 0.0
        out.append(
            SubmissionRecord(
                submission_id=f"st{i:05d}-{task.query_id}",
                query_id=task.query_id,
                submitted_answer=sql,
                is_correct=remark is Remark.CORRECT,
                remark=remark,
                grade_percent=grade,
            )
        )
    return out
