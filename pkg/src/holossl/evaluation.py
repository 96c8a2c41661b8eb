"""Balanced accuracy, confusion matrices, the k-shot sweep and the shift table."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_write_text
from .fewshot import LabelledEmbeddings, fit_linear, fit_prototypes, head_scores, sample_episode

HEADS = ("linear", "prototype")
FIG2_COLUMNS = ("feature_source", "head", "k", "train_instrument", "test_instrument", "mean", "stdev", "lo", "hi")
TABLE1_COLUMNS = ("feature_source", "head", "k", "same_instrument", "shifted_instrument",
                  "same_mean", "shifted_mean", "drop")


def _index_labels(labels: Sequence, taxa: Sequence[str], what: str) -> np.ndarray:
    lookup = {t: i for i, t in enumerate(taxa)}
    try:
        return np.array([lookup[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"{what} label {exc.args[0]!r} is not in taxa") from None


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = true, columns = predicted
    taxa: list[str]

    def recalls(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        if (support == 0).any():
            missing = [t for t, s in zip(self.taxa, support) if s == 0]
            raise ValueError(f"recall undefined for taxa without true instances: {missing}")
        return np.diag(self.counts) / support

    def balanced_accuracy(self) -> float:
        return float(self.recalls().mean())

    def n_errors(self) -> int:
        return int(self.counts.sum() - np.trace(self.counts))


def confusion(true: Sequence, predicted: Sequence, taxa: Sequence[str]) -> ConfusionMatrix:
    if len(true) != len(predicted):
        raise ValueError("true and predicted label lists differ in length")
    t = _index_labels(true, taxa, "true")
    p = _index_labels(predicted, taxa, "predicted")
    c = len(taxa)
    counts = np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(counts, list(taxa))


def balanced_accuracy(true: Sequence, predicted: Sequence, taxa: Sequence[str]) -> float:
    """Unweighted mean of per-taxon recall."""
    return confusion(true, predicted, taxa).balanced_accuracy()


def _balanced_accuracy_idx(true: np.ndarray, pred: np.ndarray, n_taxa: int) -> float:
    counts = np.bincount(true * n_taxa + pred, minlength=n_taxa * n_taxa).reshape(n_taxa, n_taxa)
    return ConfusionMatrix(counts, [""] * n_taxa).balanced_accuracy()


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportEntry:
    feature_source: str
    head: str
    k: int
    train_instrument: str
    test_instrument: str
    draws: list[float]
    mean: float = field(init=False)
    stdev: float = field(init=False)

    def __post_init__(self):
        if not self.draws:
            raise ValueError("a report entry needs at least one draw")
        if any(not 0.0 <= d <= 1.0 for d in self.draws):
            raise ValueError("balanced accuracies must lie in [0, 1]")
        self.mean = statistics.fmean(self.draws)
        self.stdev = statistics.stdev(self.draws) if len(self.draws) > 1 else 0.0

    @property
    def key(self) -> tuple:
        return (self.feature_source, self.head, self.k, self.train_instrument, self.test_instrument)


@dataclass
class EvalReport:
    entries: list[ReportEntry]
    master_seed: int

    def get(self, feature_source: str, head: str, k: int, train: str, test: str) -> ReportEntry:
        for e in self.entries:
            if e.key == (feature_source, head, k, train, test):
                return e
        raise KeyError((feature_source, head, k, train, test))

    def to_json(self) -> str:
        return json.dumps({"master_seed": self.master_seed, "entries": [asdict(e) for e in self.entries]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        entries = [
            ReportEntry(e["feature_source"], e["head"], e["k"], e["train_instrument"], e["test_instrument"], e["draws"])
            for e in d["entries"]
        ]
        return cls(entries, d["master_seed"])

    def fig2_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIG2_COLUMNS)
        for e in self.entries:
            lo = max(0.0, e.mean - e.stdev)
            hi = min(1.0, e.mean + e.stdev)
            w.writerow([e.feature_source, e.head, e.k, e.train_instrument, e.test_instrument,
                        repr(e.mean), repr(e.stdev), repr(lo), repr(hi)])
        return buf.getvalue()


def draw_seed(master_seed: int, k: int, repeat: int) -> int:
    """Episode seed for draw ``repeat`` at ``k`` shots.

    Depends only on (master_seed, k, repeat), so every feature source and head
    sees the same support records, and adding configurations leaves existing
    draws untouched.
    """
    return int(np.random.SeedSequence([master_seed, k, repeat]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class HeadSettings:
    scale: float = 10.0
    l2: float = 1e-3
    linear_max_iter: int = 1000
    linear_tol: float = 1e-5
    linear_normalize: bool = False
    proto_epochs: int = 100
    proto_lr: float = 0.1


def sweep_k(
    sets: Mapping[tuple[str, str, str], LabelledEmbeddings],
    ks: Sequence[int],
    repeats: int,
    heads: Sequence[str] = HEADS,
    feature_sources: Sequence[str] | None = None,
    train_instrument: str = "P5",
    test_instruments: Sequence[str] = ("P5", "P4"),
    master_seed: int = 0,
    settings: HeadSettings | None = None,
) -> EvalReport:
    """Episodic few-shot evaluation over k, heads and feature sources.

    ``sets`` maps (feature_source, instrument, split) to embeddings. Support
    sets are drawn from the training split of ``train_instrument``; each fitted
    head is scored on the full test split of every test instrument.
    """
    settings = settings or HeadSettings()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for h in heads:
        if h not in HEADS:
            raise ValueError(f"unknown head {h!r}")
    if feature_sources is None:
        feature_sources = sorted({key[0] for key in sets})
    draws: dict[tuple, list[float]] = {}
    for source in feature_sources:
        train = _require(sets, (source, train_instrument, "train"))
        taxa = train.taxon_order()
        tests = {}
        for inst in test_instruments:
            test = _require(sets, (source, inst, "test"))
            tests[inst] = (test.vectors, _index_labels(test.taxa, taxa, "test"))
        for k in ks:
            for rep in range(repeats):
                ep = sample_episode(train, k, draw_seed(master_seed, k, rep), taxa)
                for h in heads:
                    if h == "linear":
                        head = fit_linear(ep.support_x, ep.support_y, taxa, settings.l2, settings.linear_max_iter,
                                          settings.linear_tol, settings.linear_normalize)
                    else:
                        head = fit_prototypes(ep.support_x, ep.support_y, taxa, settings.scale,
                                              settings.proto_epochs, settings.proto_lr)
                    for inst, (xq, yq) in tests.items():
                        pred = head_scores(head, xq).argmax(axis=1)
                        ba = _balanced_accuracy_idx(yq, pred, len(taxa))
                        draws.setdefault((source, h, k, train_instrument, inst), []).append(ba)
    entries = [ReportEntry(*key, d) for key, d in draws.items()]
    return EvalReport(entries, master_seed)


def _require(sets, key):
    if key not in sets:
        raise KeyError(f"no embeddings for (feature_source={key[0]!r}, instrument={key[1]!r}, split={key[2]!r})")
    return sets[key]


@dataclass
class ShiftRow:
    feature_source: str
    head: str
    k: int
    same_instrument: str
    shifted_instrument: str
    same_mean: float
    shifted_mean: float

    @property
    def drop(self) -> float:
        return self.same_mean - self.shifted_mean


def shift_comparison(report: EvalReport, head: str = "linear", k: int | None = None) -> list[ShiftRow]:
    """Same-instrument vs cross-instrument accuracy per feature source.

    Uses the largest k in the report unless ``k`` is given.
    """
    entries = [e for e in report.entries if e.head == head]
    if not entries:
        raise ValueError(f"report has no entries for head {head!r}")
    if k is None:
        k = max(e.k for e in entries)
    rows = []
    for source in dict.fromkeys(e.feature_source for e in entries):
        sel = [e for e in entries if e.feature_source == source and e.k == k]
        same = [e for e in sel if e.train_instrument == e.test_instrument]
        other = [e for e in sel if e.train_instrument != e.test_instrument]
        if not same or not other:
            raise ValueError(f"report lacks a same/shifted instrument pair for {source!r}, head {head!r}, k={k}")
        for o in other:
            rows.append(ShiftRow(source, head, k, same[0].test_instrument, o.test_instrument, same[0].mean, o.mean))
    return rows


def table1_csv(rows: Iterable[ShiftRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE1_COLUMNS)
    for r in rows:
        w.writerow([r.feature_source, r.head, r.k, r.same_instrument, r.shifted_instrument,
                    repr(r.same_mean), repr(r.shifted_mean), repr(r.drop)])
    return buf.getvalue()


def format_table1(rows: Iterable[ShiftRow]) -> str:
    lines = [f"{'features':<14}{'same':>10}{'shifted':>10}{'drop':>10}"]
    for r in rows:
        lines.append(f"{r.feature_source:<14}{100 * r.same_mean:>9.1f}%{100 * r.shifted_mean:>9.1f}%"
                     f"{100 * r.drop:>9.1f}%")
    return "\n".join(lines)


def write_report(report: EvalReport, out_dir: str | Path, head: str = "linear") -> None:
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "report.json", report.to_json())
    atomic_write_text(out_dir / "fig2.csv", report.fig2_csv())
    atomic_write_text(out_dir / "table1.csv", table1_csv(shift_comparison(report, head)))
