"""ROC/AUC, cross-entropy and normalised confusion matrices."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

CE_CLIP = 1e-12


@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def tpr_at(self, fpr: float) -> float:
        """Interpolated true-positive rate at a given false-positive rate."""
        return float(np.interp(fpr, self.fpr, self.tpr))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    npos = int(y.sum())
    if npos == 0 or npos == y.size:
        raise ValueError("roc_auc needs at least one positive and one negative label")
    return s, y


def roc_auc(scores, labels) -> RocResult:
    """ROC curve by threshold sweep and AUC as the Mann-Whitney statistic (ties count 1/2)."""
    s, y = _check_binary(scores, labels)
    npos = int(y.sum())
    nneg = y.size - npos
    r = rankdata(s)
    auc = (r[y].sum() - npos * (npos + 1) / 2.0) / (npos * nneg)

    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(ss)), ss.size - 1]
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(~yy)[last]
    tpr = np.r_[0.0, tp / npos]
    fpr = np.r_[0.0, fp / nneg]
    thr = np.r_[np.inf, ss[last]]
    return RocResult(thr, tpr, fpr, float(auc))


def mann_whitney_pairs(scores, labels) -> float:
    """Exhaustive pairwise AUC, O(P N)."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y], s[~y]
    d = pos[:, None] - neg[None, :]
    return float(((d > 0).sum() + 0.5 * (d == 0).sum()) / d.size)


def one_vs_rest(probs, cells, classes, m: int, valid=None):
    """Scores q[cell, m] and labels (class == m) at truth points.

    Points whose cell is outside ``valid`` (pruned or NODATA) are excluded.

    Returns
    -------
    scores, labels, n_excluded
    """
    probs = np.asarray(probs, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    classes = np.asarray(classes)
    keep = cells >= 0
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)[np.maximum(cells, 0)]
    keep &= np.all(np.isfinite(probs[np.maximum(cells, 0)]), axis=1)
    sc = probs[cells[keep], m]
    lab = (classes[keep] == m).astype(int)
    return sc, lab, int((~keep).sum())


def cross_entropy(probs, labels) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("cross_entropy of an empty set")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError("labels out of range")
    p = np.maximum(probs[np.arange(labels.size), labels], CE_CLIP)
    return float(-np.mean(np.log(p)))


def binary_cross_entropy(p, labels) -> float:
    p = np.asarray(p, dtype=float)
    return cross_entropy(np.column_stack([1.0 - p, p]), labels)


def confusion_binary(scores, labels, threshold: float = 0.5) -> np.ndarray:
    """Row-normalised confusion matrix [[TP, FN], [FP, TN]] rates.

    Row 0 is the positive (damaged) class, row 1 the negative class; a
    score at or above the threshold is a positive prediction.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pred = s >= threshold
    out = np.zeros((2, 2))
    for r, truth in enumerate((True, False)):
        n = int((y == truth).sum())
        if n:
            out[r, 0] = np.sum(pred & (y == truth)) / n
            out[r, 1] = np.sum(~pred & (y == truth)) / n
    return out


@dataclass
class ClassMetrics:
    cls: int
    auc_posterior: float
    auc_prior: float | None
    cross_entropy: float
    n_pos: int
    n_neg: int


@dataclass
class MetricsReport:
    node: str
    classes: list
    confusion: list
    threshold: float
    overall_cross_entropy: float
    n_points: int
    n_excluded: int
    damaged_auc_posterior: float | None = None
    damaged_auc_prior: float | None = None
    roc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("roc")
        return d


def evaluate_node(post, cells, classes, node: str = "BD", prior=None, valid=None, threshold: float = 0.5,
                  keep_roc: bool = False) -> MetricsReport:
    """One-vs-rest metrics for classes 1..M plus the binary damaged-vs-undamaged view."""
    post = np.asarray(post, dtype=float)
    K = post.shape[1]
    out, roc = [], {}
    for m in range(1, K):
        sc, lab, nex = one_vs_rest(post, cells, classes, m, valid)
        if lab.sum() == 0 or lab.sum() == lab.size:
            continue
        r = roc_auc(sc, lab)
        ap = None
        if prior is not None:
            ps, _, _ = one_vs_rest(prior, cells, classes, m, valid)
            ap = roc_auc(ps, lab).auc
        ce = binary_cross_entropy(np.clip(sc, 0, 1), lab)
        out.append(ClassMetrics(m, r.auc, ap, ce, int(lab.sum()), int(lab.size - lab.sum())))
        if keep_roc:
            roc[m] = r
    cells = np.asarray(cells, dtype=np.int64)
    keep = cells >= 0
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)[np.maximum(cells, 0)]
    keep &= np.all(np.isfinite(post[np.maximum(cells, 0)]), axis=1)
    pc = post[cells[keep]]
    lab = np.asarray(classes)[keep]
    dmg_score = 1.0 - pc[:, 0]
    dmg_lab = (lab > 0).astype(int)
    conf = confusion_binary(dmg_score, dmg_lab, threshold)
    dauc = dpa = None
    if 0 < dmg_lab.sum() < dmg_lab.size:
        dauc = roc_auc(dmg_score, dmg_lab).auc
        if prior is not None:
            dpa = roc_auc(1.0 - np.asarray(prior)[cells[keep], 0], dmg_lab).auc
    return MetricsReport(node, out, conf.tolist(), threshold, cross_entropy(np.clip(pc, 0, 1), lab),
                         int(keep.sum()), int((~keep).sum()), dauc, dpa, roc)


# --------------------------------------------------------------------------
# tables


def write_class_table(path, reports: list[MetricsReport]) -> None:
    """Per-class AUC / cross-entropy table (one row per node and class)."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["node", "class", "auc_posterior", "auc_prior", "cross_entropy", "n_pos", "n_neg"])
        for rep in reports:
            for c in rep.classes:
                wr.writerow([rep.node, c.cls, repr(c.auc_posterior), "" if c.auc_prior is None else repr(c.auc_prior),
                             repr(c.cross_entropy), c.n_pos, c.n_neg])


def read_class_table(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "node": r["node"], "class": int(r["class"]), "auc_posterior": float(r["auc_posterior"]),
                "auc_prior": None if r["auc_prior"] == "" else float(r["auc_prior"]),
                "cross_entropy": float(r["cross_entropy"]), "n_pos": int(r["n_pos"]), "n_neg": int(r["n_neg"]),
            })
    return rows


def write_prior_table(path, reports: list[MetricsReport]) -> None:
    """Damaged-vs-undamaged AUC of posterior and prior per node."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["node", "auc_posterior", "auc_prior"])
        for rep in reports:
            wr.writerow([rep.node, "" if rep.damaged_auc_posterior is None else repr(rep.damaged_auc_posterior),
                         "" if rep.damaged_auc_prior is None else repr(rep.damaged_auc_prior)])


def write_confusion(path, rep: MetricsReport) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["truth", "pred_damaged", "pred_undamaged"])
        wr.writerow(["damaged", repr(rep.confusion[0][0]), repr(rep.confusion[0][1])])
        wr.writerow(["undamaged", repr(rep.confusion[1][0]), repr(rep.confusion[1][1])])


def read_confusion(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(r[1]), float(r[2])] for r in rows])


def write_roc(path, roc: RocResult) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            wr.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def write_report_json(path, reports: list[MetricsReport]) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
