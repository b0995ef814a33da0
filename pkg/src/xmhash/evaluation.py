"""Retrieval metrics over Hamming rankings, CSV emission, and a Welch test.

A query's ranking is the whole database sorted by (Hamming distance,
database id) ascending. Relevance is label overlap, the same rule the
trainer's similarity oracle uses. Average precision of a query with no
relevant database item is defined as 0 and the query still counts in the
mean.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ContractError
from .hamming import CodeMatrix, RetrievalIndex, distances_to_all

# two-sample significance is a Welch (unequal-variance) t-test; the choice
# is stamped into every report header
TTEST_NAME = "welch"
ALPHA = 0.05


@dataclass(frozen=True)
class EvalReport:
    task: str
    r: int
    map: float
    topk_curve: tuple        # (k, precision) pairs, k strictly increasing
    per_query_ap: np.ndarray
    n_query: int
    n_db: int


def relevance(query_labels: np.ndarray, db_labels: np.ndarray) -> int:
    """1 when the two label vectors share an active label, else 0."""
    a = np.asarray(query_labels).ravel()
    b = np.asarray(db_labels).ravel()
    if a.size != b.size:
        raise ContractError(f"label vectors differ in length: {a.size} vs {b.size}")
    return int(np.any(a.astype(bool) & b.astype(bool)))


def average_precision(ranked_rel) -> float:
    """AP of one ranked 0/1 relevance list; 0 when nothing is relevant."""
    rel = np.asarray(ranked_rel, dtype=np.float64).ravel()
    if rel.size == 0:
        raise ContractError("ranking is empty")
    if not np.isin(rel, (0.0, 1.0)).all():
        raise ContractError("relevance entries must be 0 or 1")
    cum = np.cumsum(rel)
    total = cum[-1]
    if total == 0:
        return 0.0
    precision_at = cum / np.arange(1, rel.size + 1)
    return float(precision_at[rel > 0].sum() / total)


def evaluate(index: RetrievalIndex, query_codes: CodeMatrix,
             query_labels: np.ndarray, ks=(), task: str = "",
             map_cutoff: int | None = None) -> EvalReport:
    """mAP and precision@k for every query against the database index.

    ks must be strictly increasing and within [1, n_db]; an empty ks means
    mAP only. query_labels is (c, n_query) aligned with query_codes columns.
    map_cutoff, when given, truncates each ranking to its first map_cutoff
    entries before the average-precision computation (default: full ranking).
    """
    index.validate()
    query_codes.validate()
    if query_codes.r != index.codes.r:
        raise ContractError(
            f"query codes have r={query_codes.r} but database has r={index.codes.r}"
        )
    query_labels = np.asarray(query_labels)
    if query_labels.shape != (index.labels.shape[0], query_codes.n):
        raise ContractError(
            f"query labels shape {query_labels.shape} does not match "
            f"(c={index.labels.shape[0]}, n_query={query_codes.n})"
        )
    ks = tuple(int(k) for k in ks)
    n_db = index.codes.n
    if any(not (1 <= k <= n_db) for k in ks):
        raise ContractError(f"every k must lie in [1, {n_db}], got {ks}")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ContractError(f"ks must be strictly increasing, got {ks}")
    if map_cutoff is not None and not 1 <= map_cutoff <= n_db:
        raise ContractError(f"map_cutoff must lie in [1, {n_db}], got {map_cutoff}")

    db_lab = index.labels.astype(np.float64)
    ap = np.empty(query_codes.n)
    prec_sum = np.zeros(len(ks))
    for q in range(query_codes.n):
        dists = distances_to_all(index.codes.packed, query_codes.packed[q])
        order = np.lexsort((index.ids, dists))
        overlap = query_labels[:, q].astype(np.float64) @ db_lab
        rel = (overlap[order] > 0).astype(np.float64)
        ap[q] = average_precision(rel if map_cutoff is None else rel[:map_cutoff])
        for pos, k in enumerate(ks):
            prec_sum[pos] += rel[:k].mean()

    curve = tuple((k, float(prec_sum[pos] / query_codes.n)) for pos, k in enumerate(ks))
    return EvalReport(
        task=task,
        r=query_codes.r,
        map=float(ap.mean()),
        topk_curve=curve,
        per_query_ap=ap,
        n_query=query_codes.n,
        n_db=n_db,
    )


def welch_t_test(ap_a, ap_b):
    """Welch two-sample t-test on per-query AP lists.

    Returns (t, p, h) with h = 1 when p < 0.05. Requires two or more
    samples per side and nonzero variance in at least one list.
    """
    a = np.asarray(ap_a, dtype=np.float64).ravel()
    b = np.asarray(ap_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ContractError("each AP list needs at least two entries")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise ContractError("both AP lists have zero variance")
    sa, sb = va / a.size, vb / b.size
    t = (a.mean() - b.mean()) / np.sqrt(sa + sb)
    dof = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = 2.0 * float(stats.t.sf(abs(t), dof))
    return float(t), p, int(p < ALPHA)


def emit_csv(report: EvalReport, path) -> Path:
    """Write one report: a '#' header line, then k,precision rows.

    Header carries task, code length, mAP, query/database sizes, and the
    significance-test choice. Floats are written with repr-level precision
    so identical reports give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# task={report.task},r={report.r},map={report.map!r},"
        f"n_query={report.n_query},n_db={report.n_db},ttest={TTEST_NAME}",
        "k,precision",
    ]
    for k, prec in report.topk_curve:
        lines.append(f"{k},{prec!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_map_grid(rows, path) -> Path:
    """Write a method,task,r,map grid (one row per evaluated model)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["method,task,r,map"]
    for method, task, r, val in rows:
        lines.append(f"{method},{task},{int(r)},{float(val)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path
