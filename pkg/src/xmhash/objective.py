"""Training objective and its exact feature-space gradients.

One objective per retrieval direction. Shared pieces: a pairwise logistic
term that pushes the inner-product similarity of image/text embeddings
toward the label-overlap relation, two quantization penalties tying each
embedding block to the shared binary codes, and a bit-balance penalty on
embedding row sums. The direction decides which embedding block is also
regressed onto the labels through the linear projection: the query-side
modality keeps the label term (image for i2t, text for t2i).

Embeddings are stored column-wise: feats[:, i] is instance i. The n x n
similarity matrix is never formed; everything walks PairwiseSimilarity in
blocks.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .data import PairwiseSimilarity
from .errors import ContractError, NumericalError
from .linalg import row_sums

TASKS = ("i2t", "t2i")

# column-block width for streaming over the pairwise term
_CHUNK = 512


@dataclass(frozen=True)
class HyperParams:
    """Objective weights plus the retrieval direction they apply to.

    quant_image / quant_text scale the code-quantization penalties of the
    image and text embedding blocks, label_weight scales the
    projection-regression term, balance_weight scales the row-sum balance
    penalty and the projection ridge.
    """

    quant_image: float
    quant_text: float
    label_weight: float
    balance_weight: float
    task: str = "i2t"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        for field in ("quant_image", "quant_text", "label_weight", "balance_weight"):
            v = getattr(self, field)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{field} must be finite and >= 0, got {v}")


@dataclass
class ObjectiveState:
    """Everything the alternating steps read and write.

    codes stay in {-1,+1} during standard training; the relaxed trainer
    variant temporarily holds real values there, so the binary check is a
    flag on check_state rather than unconditional.
    """

    image_feats: np.ndarray  # (r, n)
    text_feats: np.ndarray   # (r, n)
    codes: np.ndarray        # (r, n)
    proj: np.ndarray         # (r, c)
    labels: np.ndarray       # (c, n) float 0/1


def check_state(state: ObjectiveState, binary_codes: bool = True) -> None:
    f, g, b, p, lab = (
        state.image_feats, state.text_feats, state.codes, state.proj, state.labels,
    )
    if f.ndim != 2 or g.shape != f.shape or b.shape != f.shape:
        raise ContractError(
            f"embedding/code blocks must share shape (r, n): {f.shape} {g.shape} {b.shape}"
        )
    if p.shape != (f.shape[0], lab.shape[0]) or lab.shape[1] != f.shape[1]:
        raise ContractError(
            f"projection/labels misaligned: proj {p.shape}, labels {lab.shape}, feats {f.shape}"
        )
    for name, arr in (("image embeddings", f), ("text embeddings", g),
                      ("codes", b), ("projection", p)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{name} contain non-finite entries")
    if binary_codes and not np.isin(b, (-1.0, 1.0)).all():
        raise ContractError("codes must be +/-1")


def softplus(x):
    """log(1 + exp(x)) without overflow for large |x|.

    exp(-|x|) may gradually underflow to zero for huge |x|; that is the
    intended limit, so the underflow signal is suppressed locally.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(under="ignore"):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def pairwise_nll(img_feats: np.ndarray, txt_feats: np.ndarray,
                 sim: PairwiseSimilarity) -> float:
    """Negative log likelihood of label overlaps under the logistic model.

    Pair (i, j) scores half the inner product of image embedding i and text
    embedding j; the term is softplus(score) - overlap * score, summed over
    all n^2 pairs, streamed in row blocks.
    """
    if img_feats.shape != txt_feats.shape:
        raise ContractError(
            f"embedding blocks must share shape, got {img_feats.shape} vs {txt_feats.shape}"
        )
    n = img_feats.shape[1]
    if sim.n != n:
        raise ContractError(f"similarity oracle covers {sim.n} instances, embeddings {n}")
    for name, arr in (("image embeddings", img_feats), ("text embeddings", txt_feats)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{name} contain non-finite entries")
    total = 0.0
    for i0 in range(0, n, _CHUNK):
        rows = np.arange(i0, min(i0 + _CHUNK, n))
        phi = 0.5 * img_feats[:, rows].T @ txt_feats
        s = sim.block(rows)
        total += float(softplus(phi).sum() - (s * phi).sum())
    return total


def _label_fit(state: ObjectiveState) -> np.ndarray:
    return state.proj @ state.labels


def objective_value(state: ObjectiveState, hp: HyperParams,
                    sim: PairwiseSimilarity, binary_codes: bool = True) -> float:
    """Full objective for the direction named by hp.task."""
    hp.validate()
    check_state(state, binary_codes=binary_codes)
    f, g, b = state.image_feats, state.text_feats, state.codes
    total = pairwise_nll(f, g, sim)
    total += hp.quant_image * float(((b - f) ** 2).sum())
    total += hp.quant_text * float(((b - g) ** 2).sum())
    if hp.label_weight > 0:
        target = f if hp.task == "i2t" else g
        total += hp.label_weight * float(((target - _label_fit(state)) ** 2).sum())
    total += hp.balance_weight * (
        float((row_sums(f) ** 2).sum())
        + float((row_sums(g) ** 2).sum())
        + float((state.proj ** 2).sum())
    )
    if not np.isfinite(total):
        raise NumericalError(f"objective is non-finite: {total}")
    return total


def _pairwise_grad_image(state, sim, batch, n):
    """Likelihood gradient wrt the batch columns of the image block."""
    f, g = state.image_feats, state.text_feats
    out = np.zeros((f.shape[0], batch.size))
    for j0 in range(0, n, _CHUNK):
        cols = np.arange(j0, min(j0 + _CHUNK, n))
        phi = 0.5 * f[:, batch].T @ g[:, cols]
        s = sim.block(batch, cols)
        out += 0.5 * g[:, cols] @ (sigmoid(phi) - s).T
    return out


def _pairwise_grad_text(state, sim, batch, n):
    """Likelihood gradient wrt the batch columns of the text block."""
    f, g = state.image_feats, state.text_feats
    out = np.zeros((g.shape[0], batch.size))
    for i0 in range(0, n, _CHUNK):
        rows = np.arange(i0, min(i0 + _CHUNK, n))
        phi = 0.5 * f[:, rows].T @ g[:, batch]
        s = sim.block(rows, batch)
        out += 0.5 * f[:, rows] @ (sigmoid(phi) - s)
    return out


def image_feature_grad(state: ObjectiveState, hp: HyperParams,
                       sim: PairwiseSimilarity, batch: np.ndarray) -> np.ndarray:
    """Exact objective gradient wrt the chosen image-embedding columns.

    batch indexes columns of the training blocks. Returned shape is
    (r, len(batch)). The label-regression term contributes only for the
    i2t direction; the balance term contributes the same row-sum vector to
    every column.
    """
    hp.validate()
    check_state(state, binary_codes=False)
    batch = _as_batch(batch, state.image_feats.shape[1])
    n = state.image_feats.shape[1]
    if sim.n != n:
        raise ContractError(f"similarity oracle covers {sim.n} instances, state {n}")
    f, b = state.image_feats, state.codes
    grad = _pairwise_grad_image(state, sim, batch, n)
    grad += 2.0 * hp.quant_image * (f[:, batch] - b[:, batch])
    if hp.label_weight > 0 and hp.task == "i2t":
        grad += 2.0 * hp.label_weight * (f[:, batch] - _label_fit(state)[:, batch])
    grad += 2.0 * hp.balance_weight * row_sums(f)[:, None]
    _check_grad(grad)
    return grad


def text_feature_grad(state: ObjectiveState, hp: HyperParams,
                      sim: PairwiseSimilarity, batch: np.ndarray) -> np.ndarray:
    """Exact objective gradient wrt the chosen text-embedding columns."""
    hp.validate()
    check_state(state, binary_codes=False)
    batch = _as_batch(batch, state.text_feats.shape[1])
    n = state.text_feats.shape[1]
    if sim.n != n:
        raise ContractError(f"similarity oracle covers {sim.n} instances, state {n}")
    g, b = state.text_feats, state.codes
    grad = _pairwise_grad_text(state, sim, batch, n)
    grad += 2.0 * hp.quant_text * (g[:, batch] - b[:, batch])
    if hp.label_weight > 0 and hp.task == "t2i":
        grad += 2.0 * hp.label_weight * (g[:, batch] - _label_fit(state)[:, batch])
    grad += 2.0 * hp.balance_weight * row_sums(g)[:, None]
    _check_grad(grad)
    return grad


def _as_batch(batch, n: int) -> np.ndarray:
    idx = np.asarray(batch, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ContractError("batch is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise ContractError(f"batch indices out of range for n={n}")
    return idx


def _check_grad(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericalError("gradient contains non-finite entries")
