"""Novel-type detection: outlier gate, dual retrieval and the oracle review.

Per-class outlier thresholds come from the enhanced store: theta_c is the
mean member-to-centroid distance plus sigma standard deviations. A query is
an outlier when it exceeds theta_c for every known class. Confident cells
(close to some class relative to its threshold) are predicted directly;
outliers and ambiguous cells get a dual top-m retrieval from both stores,
a three-section prompt, and a verdict from either the deterministic rule
oracle or a remote chat-completions endpoint with rule fallback.

Thresholds and the reference distance quantile are calibrated per tissue
(classes observed in the query's tissue) because enhanced embeddings from
different tissue plugins live in different adapted spaces; retrieval itself
stays global so the oracle sees cross-tissue context.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import requests

from . import adapters, encoder, memory, prompts
from .data import UNKNOWN, UNKNOWN_NAME, LabelVocabulary
from .errors import (CalibrationError, OracleError, OracleHTTPError,
                     OracleMalformedReplyError, OracleTimeoutError, ShapeError,
                     StoreError)
from .util import first_json_object

CREDENTIAL_ENV = "CELLTYPER_ORACLE_KEY"


@dataclass(frozen=True)
class DetectionParams:
    top_m: int = 10
    sigma: float = 3.0
    ambiguity_low: float = 0.8
    ambiguity_high: float = 1.2
    agreement_min: float = 0.6
    distance_quantile: float = 0.95

    def validate(self) -> None:
        if self.top_m < 1:
            raise ShapeError("top_m must be at least 1")
        if not (0 < self.agreement_min <= 1):
            raise ShapeError("agreement_min must be in (0,1]")
        if not (0 < self.distance_quantile <= 1):
            raise ShapeError("distance_quantile must be in (0,1]")
        if not (0 < self.ambiguity_low <= self.ambiguity_high):
            raise ShapeError("need 0 < ambiguity_low <= ambiguity_high")


@dataclass(frozen=True)
class ClassThreshold:
    cell_type: int
    centroid: np.ndarray
    mean: float
    std: float
    theta: float


def calibrate_thresholds(sub: memory.SubStore, sigma: float = 3.0,
                         tissue: int | None = None) -> dict[int, ClassThreshold]:
    """theta_c = mean + sigma * std of member distances, per class.

    tissue restricts which classes are calibrated; member statistics always
    use every record of the class. Classes with fewer than two members are
    an error because a spread cannot be estimated.
    """
    if sub.metric != "euclidean":
        raise CalibrationError("outlier thresholds require a euclidean store")
    types = sub.cell_types
    if tissue is not None:
        types = types[sub.tissues == tissue]
    classes = sorted(int(c) for c in np.unique(types) if int(c) != UNKNOWN)
    if not classes:
        raise CalibrationError("no labeled records to calibrate on")
    table: dict[int, ClassThreshold] = {}
    for cls in classes:
        cc = memory.class_centroid(sub, cls)
        if cc.count < 2:
            raise CalibrationError(f"class {cls} has {cc.count} member, need at least 2")
        table[cls] = ClassThreshold(cls, cc.centroid, cc.mean_dist, cc.std_dist,
                                    cc.mean_dist + sigma * cc.std_dist)
    return table


def reference_nn_quantile(sub: memory.SubStore, q: float = 0.95,
                          tissue: int | None = None) -> float:
    """Quantile of leave-one-out nearest-neighbor distances among references."""
    rows = np.arange(sub.size)
    if tissue is not None:
        rows = rows[sub.tissues == tissue]
    if rows.size < 2:
        raise CalibrationError("need at least two reference records")
    v = sub.vectors[rows].astype(np.float64)
    sq = np.sum(v * v, axis=1)
    nn = np.empty(rows.size)
    chunk = 512
    for lo in range(0, rows.size, chunk):
        hi = min(lo + chunk, rows.size)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (v[lo:hi] @ v.T)
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        nn[lo:hi] = np.sqrt(d2.min(axis=1))
    return float(np.quantile(nn, q))


@dataclass(frozen=True)
class OutlierReport:
    distances: dict[int, float]
    is_outlier: bool
    best_class: int
    ratio: float


def detect_outlier(embedding: np.ndarray, thresholds: dict[int, ClassThreshold]) -> OutlierReport:
    """Against every class: distance to centroid vs theta_c.

    Outlier means the query exceeds the threshold of every class. ratio is
    the smallest distance/theta over classes, the routing statistic.
    """
    if not thresholds:
        raise CalibrationError("empty threshold table")
    e = np.asarray(embedding, dtype=np.float64).ravel()
    distances: dict[int, float] = {}
    best_class, best_ratio = UNKNOWN, np.inf
    outlier = True
    for cls, th in thresholds.items():
        d = e - th.centroid
        dist = float(np.sqrt(np.sum(d * d)))
        distances[cls] = dist
        if dist <= th.theta:
            outlier = False
        ratio = dist / max(th.theta, 1e-12)
        if ratio < best_ratio:
            best_ratio, best_class = ratio, cls
    return OutlierReport(distances, outlier, best_class, float(best_ratio))


def compare_embeddings(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs are an error, not a NaN."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if na == 0.0 or nb == 0.0:
        raise ShapeError("cosine similarity undefined for a zero-norm embedding")
    return float(np.sum(a * b) / (na * nb))


@dataclass(frozen=True)
class RetrievalSets:
    """Top-m neighbors from the standard (g) and enhanced (s) stores."""

    n_g: list[tuple[str, float]]
    n_s: list[tuple[str, float]]


def retrieve_dual(store: memory.VectorStore, f_g: np.ndarray, f_s: np.ndarray,
                  vocab: LabelVocabulary, m: int = 10,
                  nprobe: int | None = None) -> RetrievalSets:
    """Search both sub-stores with the matching embedding of one query."""
    hits_g = memory.search_topm(store.g, f_g, m, nprobe)
    hits_s = memory.search_topm(store.s, f_s, m, nprobe)
    to_name = vocab.cell_type_name
    return RetrievalSets(
        [(to_name(h.cell_type), h.score) for h in hits_g],
        [(to_name(h.cell_type), h.score) for h in hits_s],
    )


def format_prompt(sets: RetrievalSets) -> str:
    """Instruction, four demonstrations, question; byte-stable."""
    return prompts.build_detection_prompt(sets.n_g, sets.n_s)


@dataclass(frozen=True)
class NovelDecision:
    is_novel: bool
    explanation: str
    oracle: str  # "rule" or "remote"
    fallback_reason: str | None = None


def rule_oracle(sets: RetrievalSets, agreement_min: float, tau_s: float) -> NovelDecision:
    """Deterministic verdict from the retrieval sets.

    Novel when the modal label over the pooled neighbors falls below the
    agreement floor, or when even the nearest enhanced-store match is
    farther than the reference quantile tau_s.
    """
    pooled = [label for label, _ in sets.n_g] + [label for label, _ in sets.n_s]
    if not pooled:
        raise StoreError("cannot decide on empty retrieval sets")
    counts: dict[str, int] = {}
    for label in pooled:
        counts[label] = counts.get(label, 0) + 1
    modal = max(sorted(counts), key=lambda k: counts[k])
    fraction = counts[modal] / len(pooled)
    min_s = min(score for _, score in sets.n_s) if sets.n_s else np.inf
    low_agreement = fraction < agreement_min
    far = min_s > tau_s
    if low_agreement and far:
        text = (f"modal label '{modal}' covers {fraction:.2f} of {len(pooled)} pooled "
                f"neighbors, below the {agreement_min:.2f} agreement floor, and the "
                f"nearest enhanced-store distance {min_s:.4f} exceeds tau {tau_s:.4f}")
    elif low_agreement:
        text = (f"modal label '{modal}' covers {fraction:.2f} of {len(pooled)} pooled "
                f"neighbors, below the {agreement_min:.2f} agreement floor")
    elif far:
        text = (f"nearest enhanced-store distance {min_s:.4f} exceeds tau {tau_s:.4f}")
    else:
        text = (f"modal label '{modal}' covers {fraction:.2f} of {len(pooled)} pooled "
                f"neighbors and the nearest enhanced-store distance {min_s:.4f} is "
                f"within tau {tau_s:.4f}")
    return NovelDecision(low_agreement or far, text, "rule")


@dataclass(frozen=True)
class OracleConfig:
    mode: str = "rule"  # "rule" or "remote"
    endpoint: str | None = None
    model: str | None = None
    timeout: float = 10.0
    retries: int = 2

    def validate(self) -> None:
        if self.mode not in ("rule", "remote"):
            raise ShapeError(f"unknown oracle mode '{self.mode}'")
        if self.mode == "remote" and not self.endpoint:
            raise ShapeError("remote oracle mode needs an endpoint")
        if self.timeout <= 0:
            raise ShapeError("oracle timeout must be positive")


def _coerce_flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false"):
        return value.lower() == "true"
    raise OracleMalformedReplyError(f"is_novel must be a boolean, got {value!r}")


def post_chat(prompt: str, cfg: OracleConfig) -> str:
    """POST one prompt to a chat-completions endpoint, return the reply text.

    Request body is {"model": ..., "messages": [{"role": "user",
    "content": prompt}]}. Completion structure is unwrapped when present,
    otherwise the raw body comes back. Timeouts and connection failures are
    retried; what still fails raises OracleTimeoutError or OracleHTTPError.
    """
    cfg.validate()
    if cfg.mode != "remote":
        raise OracleError("post_chat called with a non-remote config")
    headers = {"Content-Type": "application/json"}
    credential = os.environ.get(CREDENTIAL_ENV)
    if credential:
        headers["Authorization"] = f"Bearer {credential}"
    body = {"model": cfg.model or "default", "messages": [{"role": "user", "content": prompt}]}
    last: Exception | None = None
    for _ in range(cfg.retries + 1):
        try:
            resp = requests.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
        except requests.exceptions.Timeout as e:
            last = OracleTimeoutError(f"oracle timed out after {cfg.timeout}s")
            last.__cause__ = e
            continue
        except requests.exceptions.RequestException as e:
            last = OracleHTTPError(f"oracle request failed: {e}")
            continue
        if resp.status_code >= 500:
            last = OracleHTTPError(f"oracle returned HTTP {resp.status_code}")
            continue
        if resp.status_code != 200:
            raise OracleHTTPError(f"oracle returned HTTP {resp.status_code}")
        text = resp.text
        try:
            payload = resp.json()
            if isinstance(payload, dict) and "choices" in payload:
                text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            pass
        return text
    raise last if last is not None else OracleError("oracle failed with no attempts")


def remote_oracle(prompt: str, cfg: OracleConfig) -> NovelDecision:
    """Remote verdict: the first JSON object carrying is_novel and
    explanation in the reply wins; anything else is a malformed reply."""
    text = post_chat(prompt, cfg)
    obj = first_json_object(text, ("is_novel", "explanation"))
    if obj is None:
        raise OracleMalformedReplyError(
            "no JSON object with is_novel and explanation in the oracle reply"
        )
    return NovelDecision(_coerce_flag(obj["is_novel"]), str(obj["explanation"]), "remote")


def consult_oracle(sets: RetrievalSets, params: DetectionParams, tau_s: float,
                   cfg: OracleConfig, history: memory.HistoryLog | None = None) -> NovelDecision:
    """Remote verdict when configured, falling back to the rule oracle."""
    if cfg.mode == "remote":
        try:
            return remote_oracle(format_prompt(sets), cfg)
        except OracleError as e:
            if history is not None:
                history.append("oracle-fallback", {"action": "oracle-fallback",
                                                   "reason": str(e)})
            ruled = rule_oracle(sets, params.agreement_min, tau_s)
            return NovelDecision(ruled.is_novel, ruled.explanation, "rule", str(e))
    return rule_oracle(sets, params.agreement_min, tau_s)


@dataclass(frozen=True)
class Verdict:
    cell_id: str
    verdict: str  # "known" or "novel"
    label: int
    label_name: str
    score: float
    oracle: str | None = None
    explanation: str | None = None


@dataclass
class Detector:
    """Calibrated context for running the detection route on query cells."""

    base: encoder.EncoderParams
    plugin: adapters.MoeLoraPlugin
    store: memory.VectorStore
    vocab: LabelVocabulary
    params: DetectionParams = field(default_factory=DetectionParams)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    history: memory.HistoryLog | None = None
    thresholds: dict[int, ClassThreshold] = field(default_factory=dict)
    tau_s: float = 0.0

    def calibrate(self) -> "Detector":
        tissue = self.plugin.target_tissue
        self.thresholds = calibrate_thresholds(self.store.s, self.params.sigma, tissue)
        self.tau_s = reference_nn_quantile(self.store.s, self.params.distance_quantile, tissue)
        return self


def build_detector(base, plugin, store, vocab, params=None, oracle=None,
                   history=None) -> Detector:
    det = Detector(base, plugin, store, vocab,
                   params or DetectionParams(), oracle or OracleConfig(), history)
    det.params.validate()
    return det.calibrate()


def detect_novel(det: Detector, x_row: np.ndarray, cell_id: str) -> Verdict:
    """Route one normalized expression row through the detection cases.

    Close, unambiguous cells are predicted directly. Outliers and cells in
    the ambiguity band go to dual retrieval plus oracle review; a negative
    review falls through to the plugin prediction.
    """
    x = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
    f_s = encoder.encode_matrix(det.base, x, det.plugin)[0]
    report = detect_outlier(f_s, det.thresholds)
    needs_review = report.is_outlier or report.ratio >= det.params.ambiguity_low
    if not needs_review:
        label, probs = adapters.predict(det.plugin.head, f_s)
        return Verdict(cell_id, "known", label, det.vocab.cell_type_name(label),
                       float(probs.max()))
    f_g = encoder.encode_matrix(det.base, x)[0]
    sets = retrieve_dual(det.store, f_g, f_s, det.vocab, det.params.top_m)
    decision = consult_oracle(sets, det.params, det.tau_s, det.oracle, det.history)
    if decision.is_novel:
        return Verdict(cell_id, "novel", UNKNOWN, UNKNOWN_NAME, report.ratio,
                       decision.oracle, decision.explanation)
    label, probs = adapters.predict(det.plugin.head, f_s)
    return Verdict(cell_id, "known", label, det.vocab.cell_type_name(label),
                   float(probs.max()), decision.oracle, decision.explanation)


def detect_batch(det: Detector, matrix, cell_ids: list[str] | None = None) -> list[Verdict]:
    x = matrix.to_dense() if hasattr(matrix, "to_dense") else np.asarray(matrix)
    if cell_ids is None:
        cell_ids = getattr(matrix, "cell_ids", [f"q{i}" for i in range(x.shape[0])])
    return [detect_novel(det, x[i], cell_ids[i]) for i in range(x.shape[0])]


def write_verdicts(verdicts: list[Verdict], path) -> None:
    """Line-delimited verdict records."""
    with open(path, "w") as fh:
        fh.write("cell_id,verdict,label,score,oracle\n")
        for v in verdicts:
            oracle = v.oracle if v.oracle else "-"
            fh.write(f"{v.cell_id},{v.verdict},{v.label_name},{v.score!r},{oracle}\n")


def read_verdicts(path) -> list[tuple[str, str, str, float, str]]:
    out = []
    with open(path) as fh:
        next(fh)
        for ln in fh:
            cid, verdict, label, score, oracle = ln.rstrip("\n").split(",")
            out.append((cid, verdict, label, float(score), oracle))
    return out
