"""Outlier gate, rule oracle, and the remote oracle client.

Threshold and quantile oracles are worked by hand on tiny vector sets.
The remote client talks to a scripted local HTTP server, never the
network.
"""

import json
import math

import numpy as np
import pytest

from celltyper import detection, memory
from celltyper.data import LabelVocabulary, normalize
from celltyper.detection import (ClassThreshold, DetectionParams, NovelDecision,
                                 OracleConfig, RetrievalSets, Verdict)
from celltyper.errors import (CalibrationError, OracleHTTPError,
                              OracleMalformedReplyError, OracleTimeoutError,
                              ShapeError, StoreError)

SQRT2 = math.sqrt(2.0)


def _store(points, classes, tissues=None, source="lora-enhanced", metric="euclidean"):
    if tissues is None:
        tissues = [0] * len(points)
    records = [
        memory.EmbeddingRecord(np.asarray(p, dtype=np.float32), c, t, source, f"r{i}")
        for i, (p, c, t) in enumerate(zip(points, classes, tissues))
    ]
    return memory.build_index(records, nlist=1, metric=metric)


def test_detection_params_validate():
    DetectionParams().validate()
    with pytest.raises(ShapeError):
        DetectionParams(top_m=0).validate()
    with pytest.raises(ShapeError):
        DetectionParams(agreement_min=0.0).validate()
    with pytest.raises(ShapeError):
        DetectionParams(distance_quantile=1.5).validate()
    with pytest.raises(ShapeError):
        DetectionParams(ambiguity_low=1.3, ambiguity_high=1.2).validate()


def test_calibrate_thresholds_hand_values():
    # class 0: corners of a square, every member sqrt(2) from the centroid
    # class 1: collinear at distances [4, 0, 4], so mean 8/3 and a real spread
    sub = _store(
        [(0, 0), (2, 0), (0, 2), (2, 2), (0, 10), (0, 14), (0, 18)],
        [0, 0, 0, 0, 1, 1, 1],
        tissues=[0, 0, 0, 0, 1, 1, 1],
    )
    table = detection.calibrate_thresholds(sub, sigma=3.0)
    assert sorted(table) == [0, 1]
    t0 = table[0]
    assert t0.mean == pytest.approx(SQRT2, rel=1e-12)
    assert t0.std == pytest.approx(0.0, abs=1e-12)
    assert t0.theta == pytest.approx(SQRT2, rel=1e-12)
    assert np.allclose(t0.centroid, [1.0, 1.0])
    t1 = table[1]
    assert t1.mean == pytest.approx(8.0 / 3.0, rel=1e-12)
    assert t1.std == pytest.approx(4.0 * SQRT2 / 3.0, rel=1e-12)
    assert t1.theta == pytest.approx(8.0 / 3.0 + 4.0 * SQRT2, rel=1e-12)

    # the tissue filter picks which classes get rows in the table
    only0 = detection.calibrate_thresholds(sub, sigma=3.0, tissue=0)
    assert sorted(only0) == [0]


def test_calibrate_thresholds_errors():
    lonely = _store([(0, 0), (1, 0), (5, 5)], [0, 0, 7])
    with pytest.raises(CalibrationError, match="class 7"):
        detection.calibrate_thresholds(lonely)
    unlabeled = _store([(0, 0), (1, 0)], [-1, -1])
    with pytest.raises(CalibrationError, match="no labeled"):
        detection.calibrate_thresholds(unlabeled)
    cosine = _store([(1, 0), (0, 1)], [0, 0], metric="cosine")
    with pytest.raises(CalibrationError, match="euclidean"):
        detection.calibrate_thresholds(cosine)


def test_reference_nn_quantile_hand_values():
    # points 0, 1, 3, 7 on a line: leave-one-out NN distances are 1, 1, 2, 4
    sub = _store([(0.0,), (1.0,), (3.0,), (7.0,)], [0, 0, 0, 0])
    assert detection.reference_nn_quantile(sub, q=0.5) == pytest.approx(1.5, rel=1e-12)
    assert detection.reference_nn_quantile(sub, q=1.0) == pytest.approx(4.0, rel=1e-12)
    assert detection.reference_nn_quantile(sub, q=0.95) == pytest.approx(3.7, rel=1e-12)


def test_reference_nn_quantile_needs_two_rows():
    sub = _store([(0.0,), (1.0,)], [0, 0], tissues=[0, 1])
    with pytest.raises(CalibrationError):
        detection.reference_nn_quantile(sub, tissue=1)


def _toy_thresholds():
    return {
        0: ClassThreshold(0, np.array([0.0, 0.0]), 0.5, 0.1, 1.0),
        1: ClassThreshold(1, np.array([10.0, 0.0]), 1.0, 0.2, 2.0),
    }


def test_detect_outlier_inside_one_class():
    report = detection.detect_outlier(np.array([0.0, 0.5]), _toy_thresholds())
    assert not report.is_outlier
    assert report.best_class == 0
    assert report.ratio == pytest.approx(0.5, rel=1e-12)
    assert report.distances[0] == pytest.approx(0.5, rel=1e-12)


def test_detect_outlier_requires_every_class_exceeded():
    # (5, 0) is 5 from both centroids: past theta for each, so an outlier,
    # and the ratio is taken at the friendliest class (5 / 2)
    report = detection.detect_outlier(np.array([5.0, 0.0]), _toy_thresholds())
    assert report.is_outlier
    assert report.best_class == 1
    assert report.ratio == pytest.approx(2.5, rel=1e-12)

    inside1 = detection.detect_outlier(np.array([10.0, 1.5]), _toy_thresholds())
    assert not inside1.is_outlier
    assert inside1.best_class == 1


def test_detect_outlier_empty_table():
    with pytest.raises(CalibrationError):
        detection.detect_outlier(np.zeros(2), {})


def test_compare_embeddings_cosine():
    got = detection.compare_embeddings(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert got == pytest.approx(0.7071067811865475, abs=1e-15)
    assert detection.compare_embeddings([0.0, 2.0], [0.0, 5.0]) == pytest.approx(1.0)
    assert detection.compare_embeddings([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
    with pytest.raises(ShapeError):
        detection.compare_embeddings([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        detection.compare_embeddings([1.0, 0.0], [1.0, 0.0, 0.0])


def test_retrieve_dual_maps_names_and_orders_by_distance():
    vocab = LabelVocabulary()
    a = vocab.add_cell_type("alpha")
    b = vocab.add_cell_type("beta")
    g = _store([(0, 0), (0.5, 0), (10, 10), (11, 10)], [a, a, b, b], source="standard")
    s = _store([(0, 1), (0.5, 1), (10, 11), (11, 11)], [a, a, b, b])
    store = memory.VectorStore(g, s)
    sets = detection.retrieve_dual(store, np.array([0.1, 0.0]), np.array([0.1, 1.0]),
                                   vocab, m=3)
    assert [name for name, _ in sets.n_g] == ["alpha", "alpha", "beta"]
    assert [name for name, _ in sets.n_s] == ["alpha", "alpha", "beta"]
    scores = [s for _, s in sets.n_g]
    assert scores == sorted(scores)
    assert scores[0] == pytest.approx(0.1, rel=1e-6)


def _sets(g_labels, s_labels, s_score=0.1):
    return RetrievalSets([(l, 0.1) for l in g_labels],
                         [(l, s_score) for l in s_labels])


def test_rule_oracle_confident_known():
    d = detection.rule_oracle(_sets(["a"] * 5, ["a"] * 5), 0.6, tau_s=1.0)
    assert not d.is_novel
    assert d.oracle == "rule"
    assert d.fallback_reason is None
    assert "within tau" in d.explanation


def test_rule_oracle_low_agreement():
    d = detection.rule_oracle(_sets(["a", "b", "c", "d", "e"],
                                    ["f", "g", "h", "i", "j"]), 0.6, tau_s=1.0)
    assert d.is_novel
    assert "agreement floor" in d.explanation
    assert "exceeds tau" not in d.explanation


def test_rule_oracle_far_from_references():
    d = detection.rule_oracle(_sets(["a"] * 5, ["a"] * 5, s_score=5.0), 0.6, tau_s=1.0)
    assert d.is_novel
    assert "exceeds tau 1.0000" in d.explanation
    assert "agreement floor" not in d.explanation


def test_rule_oracle_both_reasons_and_tie_break():
    # five of each label is a tie; the smaller name must win the modal slot
    d = detection.rule_oracle(_sets(["b"] * 5, ["a"] * 5, s_score=9.0), 0.6, tau_s=1.0)
    assert d.is_novel
    assert "'a'" in d.explanation
    assert "agreement floor" in d.explanation and "exceeds tau" in d.explanation


def test_rule_oracle_empty_sets():
    with pytest.raises(StoreError):
        detection.rule_oracle(RetrievalSets([], []), 0.6, 1.0)


def test_oracle_config_validate():
    OracleConfig().validate()
    OracleConfig(mode="remote", endpoint="http://x/v1").validate()
    with pytest.raises(ShapeError):
        OracleConfig(mode="psychic").validate()
    with pytest.raises(ShapeError):
        OracleConfig(mode="remote").validate()
    with pytest.raises(ShapeError):
        OracleConfig(timeout=0.0).validate()


def _remote_cfg(srv, retries=0, timeout=5.0):
    return OracleConfig(mode="remote", endpoint=srv.endpoint, model="toy",
                        timeout=timeout, retries=retries)


def test_post_chat_unwraps_completion_and_sends_credential(oracle_server, monkeypatch):
    monkeypatch.setenv(detection.CREDENTIAL_ENV, "sekret")
    oracle_server.queue_reply("hello there")
    text = detection.post_chat("what cell is this", _remote_cfg(oracle_server))
    assert text == "hello there"
    req = oracle_server.requests[0]
    assert req["headers"]["authorization"] == "Bearer sekret"
    assert req["body"]["model"] == "toy"
    assert req["body"]["messages"] == [{"role": "user", "content": "what cell is this"}]


def test_post_chat_no_credential_header_when_env_unset(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue_reply("ok")
    detection.post_chat("p", _remote_cfg(oracle_server))
    assert "authorization" not in oracle_server.requests[0]["headers"]


def test_post_chat_returns_raw_body_without_choices(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue(200, {"is_novel": True, "explanation": "odd"})
    text = detection.post_chat("p", _remote_cfg(oracle_server))
    assert json.loads(text) == {"is_novel": True, "explanation": "odd"}


def test_post_chat_retries_5xx_then_succeeds(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue(500, {"error": "boom"})
    oracle_server.queue_reply("recovered")
    text = detection.post_chat("p", _remote_cfg(oracle_server, retries=1))
    assert text == "recovered"
    assert len(oracle_server.requests) == 2


def test_post_chat_exhausted_retries_raise_http_error(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    for _ in range(3):
        oracle_server.queue(503, {"error": "down"})
    with pytest.raises(OracleHTTPError, match="503"):
        detection.post_chat("p", _remote_cfg(oracle_server, retries=1))
    assert len(oracle_server.requests) == 2  # retries + 1 attempts, no more


def test_post_chat_client_error_fails_fast(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue(404, {"error": "nope"})
    with pytest.raises(OracleHTTPError, match="404"):
        detection.post_chat("p", _remote_cfg(oracle_server, retries=2))
    assert len(oracle_server.requests) == 1


def test_post_chat_timeout(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue(200, "{}", delay=1.0)
    with pytest.raises(OracleTimeoutError):
        detection.post_chat("p", _remote_cfg(oracle_server, retries=0, timeout=0.25))


def test_remote_oracle_takes_first_qualifying_json(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue_reply(
        'Considering {"note": 1} first, my verdict is '
        '{"is_novel": true, "explanation": "unlike any reference"} here.')
    d = detection.remote_oracle("p", _remote_cfg(oracle_server))
    assert d == NovelDecision(True, "unlike any reference", "remote")


def test_remote_oracle_coerces_string_flags(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue_reply('{"is_novel": "false", "explanation": "looks known"}')
    d = detection.remote_oracle("p", _remote_cfg(oracle_server))
    assert d.is_novel is False and d.oracle == "remote"


def test_remote_oracle_malformed_replies(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue_reply("I am not sure, maybe novel?")
    with pytest.raises(OracleMalformedReplyError):
        detection.remote_oracle("p", _remote_cfg(oracle_server))
    oracle_server.queue_reply('{"is_novel": 1, "explanation": "bad flag type"}')
    with pytest.raises(OracleMalformedReplyError):
        detection.remote_oracle("p", _remote_cfg(oracle_server))


def test_consult_oracle_rule_mode_never_calls_out(oracle_server):
    d = detection.consult_oracle(_sets(["a"] * 4, ["a"] * 4), DetectionParams(),
                                 tau_s=1.0, cfg=OracleConfig())
    assert d.oracle == "rule" and not d.is_novel
    assert oracle_server.requests == []


def test_consult_oracle_falls_back_and_logs(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue(500, {"error": "down"})
    history = memory.HistoryLog()
    d = detection.consult_oracle(_sets(["a"] * 4, ["a"] * 4), DetectionParams(),
                                 tau_s=1.0, cfg=_remote_cfg(oracle_server),
                                 history=history)
    assert d.oracle == "rule"
    assert not d.is_novel
    assert "500" in d.fallback_reason
    events = history.events
    assert len(events) == 1
    assert events[0].kind == "oracle-fallback"
    assert events[0].payload["action"] == "oracle-fallback"
    assert "500" in events[0].payload["reason"]


def test_consult_oracle_remote_success(oracle_server, monkeypatch):
    monkeypatch.delenv(detection.CREDENTIAL_ENV, raising=False)
    oracle_server.queue_reply('{"is_novel": true, "explanation": "fresh"}')
    history = memory.HistoryLog()
    d = detection.consult_oracle(_sets(["a"] * 4, ["a"] * 4), DetectionParams(),
                                 tau_s=1.0, cfg=_remote_cfg(oracle_server),
                                 history=history)
    assert d == NovelDecision(True, "fresh", "remote")
    assert history.events == ()
    # the prompt that went out is the three-section detection prompt
    sent = oracle_server.requests[0]["body"]["messages"][0]["content"]
    assert sent.startswith("## Instruction")
    assert "## Demonstrations" in sent and "## Question" in sent


def _fresh_detector(system):
    plugin = system.registry.latest_for_tissue(0)
    return detection.build_detector(system.base, plugin, system.store, system.vocab)


def test_detect_batch_labels_known_cells(mini_system, mini_data, query_cells):
    raw, _, _ = mini_data
    qdata, rows = query_cells
    det = _fresh_detector(mini_system)
    x = normalize(qdata.matrix)
    verdicts = detection.detect_batch(det, x)
    assert [v.cell_id for v in verdicts] == [m.cell_id for m in qdata.metadata]
    truth = raw.labels()[rows]
    correct = sum(1 for v, t in zip(verdicts, truth)
                  if v.verdict == "known" and v.label == int(t))
    assert correct >= len(verdicts) - 1
    for v in verdicts:
        assert v.label_name == mini_system.vocab.cell_type_name(v.label)
        assert np.isfinite(v.score)


def test_detect_batch_default_ids_for_plain_arrays(mini_system, query_cells):
    qdata, _ = query_cells
    det = _fresh_detector(mini_system)
    x = normalize(qdata.matrix).to_dense()[:2]
    verdicts = detection.detect_batch(det, x)
    assert [v.cell_id for v in verdicts] == ["q0", "q1"]


def test_detect_novel_review_path_uses_rule_oracle(mini_system, query_cells):
    qdata, _ = query_cells
    det = _fresh_detector(mini_system)
    # collapse every threshold so any cell looks like an outlier and must
    # go through retrieval plus review
    det.thresholds = {c: ClassThreshold(c, t.centroid, t.mean, t.std, 1e-9)
                      for c, t in det.thresholds.items()}
    x = normalize(qdata.matrix).to_dense()
    v = detection.detect_novel(det, x[0], "probe")
    assert v.oracle == "rule"
    assert v.explanation


def test_write_read_verdicts_roundtrip(tmp_path):
    verdicts = [
        Verdict("c1", "known", 0, "alpha", 0.125),
        Verdict("c2", "novel", -1, "unknown", 1.5, "rule", "far from everything"),
    ]
    path = tmp_path / "verdicts.csv"
    detection.write_verdicts(verdicts, path)
    rows = detection.read_verdicts(path)
    assert rows == [("c1", "known", "alpha", 0.125, "-"),
                    ("c2", "novel", "unknown", 1.5, "rule")]
    header = path.read_text().splitlines()[0]
    assert header == "cell_id,verdict,label,score,oracle"
