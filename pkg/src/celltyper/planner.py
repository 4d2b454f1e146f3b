"""Agent planning: a declared finite-state machine over annotation runs.

Every run walks a fixed plan whose steps are (action, optional condition)
pairs. Actions are only legal where the transition table says so, so an
execution trace can be replayed and validated offline from its history log
alone. Questions to the user follow a [QUESTION key] line protocol on
stdout; batch runs supply answers up front and fail loudly on any question
that has no answer.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import adapters, detection, encoder, memory, prompts, training
from .data import UNKNOWN, LabelVocabulary, LoadedData, normalize
from .errors import (DataError, ExecutionError, OracleError, RegistryError,
                     TransitionError, UnansweredQuestionError)
from .util import array_digest, child_seed, first_json_object, json_digest, text_digest

STAGES = (
    "received", "intent-classified", "tissue-assigned", "encoded",
    "outlier-checked", "retrieved", "decided", "awaiting-user", "updated",
    "answered",
)

ACTIONS = (
    "AnalyzeRequest", "AssignTissue", "LoadPlugin", "Encode", "OutlierCheck",
    "RetrieveCompare", "Predict", "AskUser", "MergeAndRetrain",
    "UpdateMemory", "FormatAnswer",
)

TRANSITIONS: dict[tuple[str, str], str] = {
    ("received", "AnalyzeRequest"): "intent-classified",
    ("intent-classified", "AssignTissue"): "tissue-assigned",
    ("intent-classified", "AskUser"): "awaiting-user",
    ("tissue-assigned", "LoadPlugin"): "tissue-assigned",
    ("tissue-assigned", "Encode"): "encoded",
    ("tissue-assigned", "AskUser"): "awaiting-user",
    ("encoded", "OutlierCheck"): "outlier-checked",
    ("outlier-checked", "RetrieveCompare"): "retrieved",
    ("outlier-checked", "Predict"): "decided",
    ("retrieved", "Predict"): "decided",
    ("retrieved", "AskUser"): "awaiting-user",
    ("decided", "FormatAnswer"): "answered",
    ("awaiting-user", "AssignTissue"): "tissue-assigned",
    ("awaiting-user", "AskUser"): "awaiting-user",
    ("awaiting-user", "MergeAndRetrain"): "updated",
    ("awaiting-user", "Predict"): "decided",
    ("awaiting-user", "FormatAnswer"): "answered",
    ("updated", "UpdateMemory"): "updated",
    ("updated", "FormatAnswer"): "answered",
}

TERMINAL_STAGE = "answered"

# below this, tissue assignment is not trusted and the user gets asked
TISSUE_CONFIDENCE_MIN = 0.5

BEGIN_REPORT = "---BEGIN-REPORT---"
END_REPORT = "---END-REPORT---"


def transition(stage: str, action: str) -> str:
    """Next stage for (stage, action); anything undeclared is an error."""
    if stage not in STAGES:
        raise TransitionError(f"unknown stage '{stage}'")
    if action not in ACTIONS:
        raise TransitionError(f"unknown action '{action}'")
    nxt = TRANSITIONS.get((stage, action))
    if nxt is None:
        raise TransitionError(f"action {action} is not legal in stage {stage}")
    return nxt


@dataclass(frozen=True)
class PlanStep:
    action: str
    condition: str | None = None  # predicate name; step is skipped when false
    question: str | None = None  # AskUser only: which question to pose


ANNOTATE_PLAN: tuple[PlanStep, ...] = (
    PlanStep("AnalyzeRequest"),
    PlanStep("AssignTissue"),
    PlanStep("AskUser", condition="low-tissue-confidence", question="tissue"),
    PlanStep("AssignTissue", condition="answered-tissue"),
    PlanStep("LoadPlugin"),
    PlanStep("Encode"),
    PlanStep("OutlierCheck"),
    PlanStep("RetrieveCompare", condition="oracle-review-needed"),
    PlanStep("Predict"),
    PlanStep("FormatAnswer"),
)

EXTEND_PLAN: tuple[PlanStep, ...] = (
    PlanStep("AnalyzeRequest"),
    PlanStep("AskUser", question="consent"),
    PlanStep("MergeAndRetrain", condition="consent-yes"),
    PlanStep("UpdateMemory", condition="consent-yes"),
    PlanStep("FormatAnswer"),
)

QUESTION_TEXT = {
    "intent": ("Should these cells be annotated against the atlas, or should "
               "they extend it with a new type? Reply annotate or extend."),
    "tissue": ("Tissue assignment is uncertain. Which tissue do these cells "
               "come from?"),
    "consent": ("Extending the atlas retrains the tissue plugin and updates "
                "memory. Proceed? Reply yes or no."),
}


def plan_for(intent: str) -> tuple[PlanStep, ...]:
    if intent == "annotate":
        return ANNOTATE_PLAN
    if intent == "extend":
        return EXTEND_PLAN
    raise ExecutionError(f"no plan for intent '{intent}'")


# ---------------------------------------------------------------------------
# intent classification

_ANNOTATE_CUES = ("annotate", "classify", "identify", "what cell type",
                  "which cell type", "what cell types", "which cell types")
_EXTEND_CUES = ("extend", "incorporate", "register", "add", "new type",
                "new cell type")


def _matches_any(q: str, cues) -> bool:
    return any(re.search(rf"\b{re.escape(c)}\b", q) for c in cues)


def classify_intent(query: str, data_summary: str = "",
                    oracle: detection.OracleConfig | None = None) -> str | None:
    """Map free text to annotate or extend; None means ask the user.

    Keyword cues decide first. A remote oracle, when configured, gets one
    chance on otherwise unclassifiable queries; its failures fall back to
    None rather than raising, because a clarifying question always works.
    """
    q = query.lower()
    ann = _matches_any(q, _ANNOTATE_CUES)
    ext = _matches_any(q, _EXTEND_CUES)
    if ann != ext:
        return "annotate" if ann else "extend"
    if oracle is not None and oracle.mode == "remote":
        try:
            text = detection.post_chat(
                prompts.build_planning_prompt(query, data_summary), oracle)
        except OracleError:
            return None
        obj = first_json_object(text, ("intent",))
        if obj is not None:
            val = str(obj["intent"]).strip().lower()
            if val in ("annotate", "extend"):
                return val
    return None


# ---------------------------------------------------------------------------
# system bundle

def _plugin_digest(p: adapters.MoeLoraPlugin) -> str:
    tp = p.trainable_params()
    return json_digest({
        "id": p.plugin_id,
        "kind": p.kind,
        "tissue": p.target_tissue,
        "version": p.version,
        "labels": list(p.head.labels),
        "arrays": array_digest(*(tp[k] for k in sorted(tp)), p.head.active),
    })


@dataclass
class SystemState:
    """Everything a run needs: frozen encoder, plugins, memory, pools."""

    base: encoder.EncoderParams
    registry: adapters.PluginRegistry
    store: memory.VectorStore
    datasets: memory.DatasetStore
    vocab: LabelVocabulary

    def clone(self) -> "SystemState":
        return SystemState(self.base.copy(), self.registry.copy(),
                           self.store.copy(), self.datasets.copy(),
                           self.vocab.copy())

    def digest(self) -> str:
        plugins = {}
        for t in self.registry.tissues():
            plugins[f"tissue-{t}"] = _plugin_digest(self.registry.latest_for_tissue(t))
        try:
            plugins["assignment"] = _plugin_digest(self.registry.latest_assignment())
        except RegistryError:
            pass
        return json_digest({
            "encoder": self.base.digest(),
            "store": self.store.digest(),
            "datasets": self.datasets.digest(),
            "vocab": self.vocab.to_dict(),
            "plugins": plugins,
        })


# ---------------------------------------------------------------------------
# tissue assignment

def assign_tissue(system: SystemState, x_norm: np.ndarray | None, query: str = "",
                  answer: str | None = None):
    """Pick a tissue for the query cells.

    A user answer wins outright, then a tissue named in the query text,
    then the tissue-assignment plugin's majority vote. Returns (tissue,
    name, confidence, how, plugin_tag) where confidence is the mean
    probability the plugin put on the majority tissue.
    """
    vocab = system.vocab
    if answer is not None:
        t = vocab.tissue_index(answer.strip())
        if t == UNKNOWN:
            raise DataError("tissue answer cannot be 'unknown'")
        return t, vocab.tissue_name(t), 1.0, "user", None
    q = query.lower()
    for idx, name in enumerate(vocab.tissues):
        if name and re.search(rf"\b{re.escape(name.lower())}\b", q):
            return idx, name, 1.0, "query", None
    if x_norm is None:
        raise ExecutionError("tissue assignment needs expression data")
    plugin = system.registry.latest_assignment()
    emb = encoder.encode_matrix(system.base, x_norm.astype(system.base.dtype), plugin)
    labels, _, probs = adapters.predict_batch(plugin.head, emb)
    counts = Counter(int(v) for v in labels)
    majority = sorted(counts, key=lambda k: (-counts[k], k))[0]
    confidence = float(probs[:, plugin.head.row_of(majority)].mean())
    tag = f"{plugin.plugin_id}:v{plugin.version}"
    return majority, vocab.tissue_name(majority), confidence, "plugin", tag


def refresh_enhanced_store(system: SystemState, tissue: int, seed: int = 0) -> int:
    """Re-encode one tissue's pool with its latest plugin and rebuild N_s.

    Incremental inserts leave older enhanced embeddings stale (they were
    produced by the previous plugin version); this replaces every record of
    the tissue and re-clusters. Records of other tissues ride along
    unchanged. Returns the rebuilt store size.
    """
    pool = system.datasets.get(tissue)
    plugin = system.registry.latest_for_tissue(tissue)
    x = pool.data.matrix.to_dense().astype(system.base.dtype)
    f_s = encoder.encode_matrix(system.base, x, plugin)
    y = pool.data.labels()
    ids = pool.data.matrix.cell_ids
    sub = system.store.s
    records = []
    for rid in range(sub.size):
        if int(sub.tissues[rid]) == tissue:
            continue
        records.append(memory.EmbeddingRecord(
            sub.vectors[rid], int(sub.cell_types[rid]), int(sub.tissues[rid]),
            "lora-enhanced", sub.cell_ids[rid]))
    for i in range(x.shape[0]):
        records.append(memory.EmbeddingRecord(
            f_s[i], int(y[i]), tissue, "lora-enhanced", ids[i]))
    system.store.s = memory.build_index(records, metric=sub.metric, seed=seed,
                                        source="lora-enhanced")
    return system.store.s.size


# ---------------------------------------------------------------------------
# execution

@dataclass
class ExecutionEnv:
    """Where answers come from and whether cached answers may be reused."""

    answers: dict[str, str] = field(default_factory=dict)
    interactive: bool = False
    use_cache: bool = False
    input_fn: object = input


@dataclass
class RunContext:
    system: SystemState
    query: str
    data: LoadedData | None
    env: ExecutionEnv
    history: memory.HistoryLog
    detection_params: detection.DetectionParams
    oracle: detection.OracleConfig
    train: training.TrainConfig
    tissue_option: int | None = None
    seed: int = 0
    stage: str = "received"
    loaded_plugins: list[str] = field(default_factory=list)
    answers: dict[str, str] = field(default_factory=dict)
    inter: dict = field(default_factory=dict)  # JSON-safe values only
    objects: dict = field(default_factory=dict)  # arrays, plugins, detector
    verdicts: list = field(default_factory=list)
    answer: str = ""

    def snapshot(self) -> dict:
        return {
            "stage": self.stage,
            "loaded_plugins": list(self.loaded_plugins),
            "intent": self.inter.get("intent"),
            "tissue": self.inter.get("tissue"),
            "tissue_name": self.inter.get("tissue_name"),
            "answers": dict(self.answers),
            "counts": self.inter.get("counts"),
            "answer_digest": self.inter.get("answer_digest"),
        }

    def state_digest(self) -> str:
        return json_digest(self.snapshot())


def _resolve_answer(ctx: RunContext, key: str, prompt_text: str) -> str:
    if key in ctx.env.answers:
        return str(ctx.env.answers[key])
    if ctx.env.interactive:
        print(f"[QUESTION {key}] {prompt_text}", flush=True)
        return str(ctx.env.input_fn()).strip()
    raise UnansweredQuestionError(
        f"question '{key}' has no answer; pass --answer {key}=VALUE or run "
        f"with --interactive", log=ctx.history)


def _is_yes(value: str) -> bool:
    return value.strip().lower() in ("yes", "y", "true", "1")


def _eval_predicate(ctx: RunContext, name: str) -> bool:
    if name == "low-tissue-confidence":
        return ctx.inter.get("tissue_confidence", 1.0) < TISSUE_CONFIDENCE_MIN
    if name == "answered-tissue":
        return "tissue" in ctx.answers
    if name == "oracle-review-needed":
        return bool(ctx.inter.get("review_rows"))
    if name == "consent-yes":
        return _is_yes(ctx.answers.get("consent", ""))
    raise ExecutionError(f"unknown predicate '{name}'", log=ctx.history)


def _summary_of(data: LoadedData | None) -> str:
    if data is None:
        return "no expression data attached"
    return f"{data.matrix.n_cells} cells x {data.matrix.n_genes} genes"


def _h_analyze(ctx: RunContext, step: PlanStep) -> dict:
    intent = classify_intent(ctx.query, _summary_of(ctx.data), ctx.oracle)
    ctx.inter["intent"] = intent
    return {"intent": intent or "unclear"}


def _h_ask(ctx: RunContext, step: PlanStep) -> dict:
    key = step.question or "intent"
    text = QUESTION_TEXT[key]
    ctx.history.append("question", {"key": key, "text": text})
    value = _resolve_answer(ctx, key, text)
    ctx.answers[key] = value
    ctx.history.append("answer", {"key": key, "value": value})
    return {"question": key}


def _h_assign(ctx: RunContext, step: PlanStep) -> dict:
    tissue, name, conf, how, tag = assign_tissue(
        ctx.system, ctx.objects.get("x"), ctx.query, ctx.answers.get("tissue"))
    ctx.inter.update(tissue=tissue, tissue_name=name, tissue_confidence=conf)
    payload = {"tissue": tissue, "tissue_name": name, "confidence": conf, "how": how}
    if tag:
        ctx.loaded_plugins.append(tag)
        payload["plugin"] = tag
    return payload


def _h_load_plugin(ctx: RunContext, step: PlanStep) -> dict:
    plugin = ctx.system.registry.latest_for_tissue(ctx.inter["tissue"])
    ctx.objects["plugin"] = plugin
    tag = f"{plugin.plugin_id}:v{plugin.version}"
    ctx.loaded_plugins.append(tag)
    return {"plugin": tag}


def _h_encode(ctx: RunContext, step: PlanStep) -> dict:
    plugin = ctx.objects["plugin"]
    x = ctx.objects["x"]
    ctx.objects["f_s"] = encoder.encode_matrix(
        ctx.system.base, x.astype(ctx.system.base.dtype), plugin)
    return {"cells": int(x.shape[0]), "dim": int(ctx.objects["f_s"].shape[1])}


def _h_outlier_check(ctx: RunContext, step: PlanStep) -> dict:
    det = detection.build_detector(
        ctx.system.base, ctx.objects["plugin"], ctx.system.store,
        ctx.system.vocab, ctx.detection_params, ctx.oracle, ctx.history)
    ctx.objects["detector"] = det
    reports = [detection.detect_outlier(f, det.thresholds)
               for f in ctx.objects["f_s"]]
    ctx.objects["reports"] = reports
    review = [i for i, r in enumerate(reports)
              if r.is_outlier or r.ratio >= ctx.detection_params.ambiguity_low]
    ctx.inter["review_rows"] = review
    return {"cells": len(reports), "review": len(review)}


def _h_retrieve(ctx: RunContext, step: PlanStep) -> dict:
    det = ctx.objects["detector"]
    review = ctx.inter["review_rows"]
    x = ctx.objects["x"][review].astype(ctx.system.base.dtype)
    f_g = encoder.encode_matrix(ctx.system.base, x)
    decisions: dict[int, detection.NovelDecision] = {}
    used = Counter()
    for k, i in enumerate(review):
        sets = detection.retrieve_dual(ctx.system.store, f_g[k],
                                       ctx.objects["f_s"][i], ctx.system.vocab,
                                       ctx.detection_params.top_m)
        d = detection.consult_oracle(sets, ctx.detection_params, det.tau_s,
                                     ctx.oracle, ctx.history)
        decisions[i] = d
        used[d.oracle] += 1
    ctx.objects["decisions"] = decisions
    novel = sum(1 for d in decisions.values() if d.is_novel)
    return {"cells": len(review), "novel": novel,
            "oracle": {k: used[k] for k in sorted(used)}}


def _h_predict(ctx: RunContext, step: PlanStep) -> dict:
    plugin = ctx.objects["plugin"]
    decisions = ctx.objects.get("decisions", {})
    reports = ctx.objects["reports"]
    vocab = ctx.system.vocab
    cell_ids = ctx.data.matrix.cell_ids
    verdicts = []
    for i in range(len(reports)):
        d = decisions.get(i)
        if d is not None and d.is_novel:
            verdicts.append(detection.Verdict(
                cell_ids[i], "novel", UNKNOWN, vocab.cell_type_name(UNKNOWN),
                reports[i].ratio, d.oracle, d.explanation))
            continue
        label, probs = adapters.predict(plugin.head, ctx.objects["f_s"][i])
        verdicts.append(detection.Verdict(
            cell_ids[i], "known", label, vocab.cell_type_name(label),
            float(probs.max()), d.oracle if d else None,
            d.explanation if d else None))
    ctx.verdicts = verdicts
    counts = {"known": sum(1 for v in verdicts if v.verdict == "known"),
              "novel": sum(1 for v in verdicts if v.verdict == "novel")}
    ctx.inter["counts"] = counts
    return dict(counts)


def _h_merge_retrain(ctx: RunContext, step: PlanStep) -> dict:
    data = ctx.data
    labels = data.labels()
    bad = np.nonzero(labels == UNKNOWN)[0]
    if bad.size:
        raise DataError(
            f"extension needs labeled cells; '{data.matrix.cell_ids[int(bad[0])]}' "
            f"has no cell type")
    tissue = ctx.tissue_option
    if tissue is None:
        unique = sorted(set(int(t) for t in data.tissues()))
        if len(unique) != 1 or unique[0] == UNKNOWN:
            raise ExecutionError(
                "new cells span multiple or unknown tissues; pass an explicit "
                "tissue", log=ctx.history)
        tissue = unique[0]
    norm = LoadedData(normalize(data.matrix), data.metadata, data.vocab)
    plugin, report = training.incremental_train(
        ctx.system.base, ctx.system.registry, ctx.system.store,
        ctx.system.datasets, ctx.system.vocab, norm, tissue, ctx.train)
    names = [ctx.system.vocab.cell_type_name(i)
             for i in plugin.provenance.get("novel_labels", [])]
    tag = f"{plugin.plugin_id}:v{plugin.version}"
    ctx.loaded_plugins.append(tag)
    ctx.inter.update(tissue=tissue,
                     tissue_name=ctx.system.vocab.tissue_name(tissue),
                     plugin_version=plugin.version, novel_labels=names,
                     cells_added=data.matrix.n_cells,
                     stop_reason=report.stop_reason)
    return {"tissue": tissue,
            "tissue_name": ctx.system.vocab.tissue_name(tissue),
            "plugin": tag, "novel_labels": names,
            "cells": data.matrix.n_cells, "stop_reason": report.stop_reason,
            "epochs": len(report.records)}


def _h_update_memory(ctx: RunContext, step: PlanStep) -> dict:
    tissue = ctx.inter["tissue"]
    size = refresh_enhanced_store(
        ctx.system, tissue, child_seed(ctx.seed, f"update-memory:{tissue}"))
    ctx.inter["memory_size"] = size
    return {"s_size": size, "nlist": ctx.system.store.s.nlist}


def _h_format_answer(ctx: RunContext, step: PlanStep) -> dict:
    intent = ctx.inter.get("intent")
    if intent == "annotate":
        counts = ctx.inter["counts"]
        report = {
            "intent": "annotate",
            "tissue": ctx.inter.get("tissue_name"),
            "plugin": ctx.loaded_plugins[-1] if ctx.loaded_plugins else None,
            "cells": len(ctx.verdicts),
            "counts": counts,
            "assignments": [[v.cell_id, v.label_name] for v in ctx.verdicts],
        }
        summary = (f"{counts['known']} of {len(ctx.verdicts)} cells annotated, "
                   f"{counts['novel']} flagged unknown")
    elif "plugin_version" in ctx.inter:
        names = ctx.inter["novel_labels"]
        report = {
            "intent": "extend",
            "consent": True,
            "tissue": ctx.inter["tissue_name"],
            "plugin_version": ctx.inter["plugin_version"],
            "novel_labels": names,
            "cells_added": ctx.inter["cells_added"],
            "stop_reason": ctx.inter["stop_reason"],
            "memory_size": ctx.inter.get("memory_size"),
        }
        summary = (f"atlas extended: {len(names)} new label(s) over "
                   f"{ctx.inter['cells_added']} cells")
    else:
        report = {"intent": "extend", "consent": False, "cells_added": 0}
        summary = "extension declined, nothing changed"
    ctx.answer = format_answer(summary, report)
    ctx.inter["report"] = report
    ctx.inter["answer_digest"] = text_digest(ctx.answer)
    return {"answer_digest": ctx.inter["answer_digest"]}


_HANDLERS = {
    "AnalyzeRequest": _h_analyze,
    "AssignTissue": _h_assign,
    "LoadPlugin": _h_load_plugin,
    "Encode": _h_encode,
    "OutlierCheck": _h_outlier_check,
    "RetrieveCompare": _h_retrieve,
    "Predict": _h_predict,
    "AskUser": _h_ask,
    "MergeAndRetrain": _h_merge_retrain,
    "UpdateMemory": _h_update_memory,
    "FormatAnswer": _h_format_answer,
}


def _do(ctx: RunContext, step: PlanStep) -> bool:
    """Run one plan step; returns False when its condition skipped it."""
    if step.condition is not None:
        value = _eval_predicate(ctx, step.condition)
        ctx.history.append("predicate", {"name": step.condition, "value": value})
        if not value:
            return False
    after = transition(ctx.stage, step.action)
    detail = _HANDLERS[step.action](ctx, step)
    ctx.history.append("action", {
        "action": step.action,
        "stage_before": ctx.stage,
        "stage_after": after,
        **(detail or {}),
    })
    ctx.stage = after
    return True


@dataclass
class RunResult:
    answer: str
    report: dict
    verdicts: list
    history: memory.HistoryLog
    state_digest: str
    stage: str
    cached: bool = False


def format_answer(summary: str, report: dict) -> str:
    """Summary line plus a machine-readable block, byte-stable."""
    body = json.dumps(report, sort_keys=True, indent=2)
    return f"{summary}\n{BEGIN_REPORT}\n{body}\n{END_REPORT}\n"


def parse_answer(text: str):
    """Inverse of format_answer: (summary, report dict)."""
    try:
        head, rest = text.split(BEGIN_REPORT + "\n", 1)
        body, _ = rest.split("\n" + END_REPORT, 1)
    except ValueError:
        raise ExecutionError("answer text has no report block") from None
    return head.strip(), json.loads(body)


def run_query(system: SystemState, query: str, data: LoadedData | None = None, *,
              env: ExecutionEnv | None = None,
              detection_params: detection.DetectionParams | None = None,
              oracle: detection.OracleConfig | None = None,
              train: training.TrainConfig | None = None,
              cache: memory.AnswerCache | None = None,
              tissue: int | None = None, seed: int = 0) -> RunResult:
    """Execute one user query end to end.

    Identical inputs produce byte-identical answers and history logs; the
    log carries enough to replay the stage walk offline (see replay).
    """
    env = env or ExecutionEnv()
    ctx = RunContext(
        system=system, query=query, data=data, env=env,
        history=memory.HistoryLog(),
        detection_params=detection_params or detection.DetectionParams(),
        oracle=oracle or detection.OracleConfig(),
        train=train or training.TrainConfig(),
        tissue_option=tissue, seed=seed,
    )
    ctx.detection_params.validate()

    key = None
    if cache is not None:
        key = memory.cache_key(query,
                               data.matrix.digest() if data is not None else "",
                               system.registry.versions_summary())
        if env.use_cache:
            hit = cache.get(key)
            if hit is not None:
                ctx.history.append("cache", {"action": "cache-hit", "key": key})
                return RunResult(hit["answer"], hit["report"], [], ctx.history,
                                 hit["state_digest"], TERMINAL_STAGE, cached=True)

    _do(ctx, PlanStep("AnalyzeRequest"))
    intent = ctx.inter["intent"]
    if intent is None:
        _do(ctx, PlanStep("AskUser", question="intent"))
        raw = ctx.answers["intent"].strip().lower()
        if raw not in ("annotate", "extend"):
            raise ExecutionError(
                f"cannot interpret intent answer '{raw}'; expected annotate "
                f"or extend", log=ctx.history)
        intent = raw
        ctx.inter["intent"] = intent
    if data is None:
        raise ExecutionError(f"intent '{intent}' needs an expression matrix",
                             log=ctx.history)

    if intent == "annotate":
        # condition the query cells exactly like the training pools
        ctx.objects["x"] = normalize(data.matrix).to_dense()
        if system.datasets.tissues():
            panel = system.datasets.get(system.datasets.tissues()[0]).data.matrix.gene_names
            if list(data.matrix.gene_names) != list(panel):
                raise DataError(
                    f"query gene panel ({data.matrix.n_genes} genes) does not "
                    f"match the trained panel ({len(panel)} genes)")

    plan = plan_for(intent)
    ctx.history.append("plan", {"intent": intent,
                                "actions": [s.action for s in plan]})
    for step in plan[1:]:
        _do(ctx, step)

    if cache is not None and key is not None:
        cache.put(key, {"answer": ctx.answer, "report": ctx.inter["report"],
                        "state_digest": ctx.state_digest()})
    return RunResult(ctx.answer, ctx.inter["report"], ctx.verdicts, ctx.history,
                     ctx.state_digest(), ctx.stage)


# ---------------------------------------------------------------------------
# offline replay

def replay(events) -> dict:
    """Rebuild the final state snapshot from a history log.

    Walks the logged actions through the declared transition table,
    validating every hop, and accumulates the same fields state_digest
    hashes. A log from a tampered or divergent run fails here.
    """
    stage = "received"
    loaded: list[str] = []
    answers: dict[str, str] = {}
    inter: dict = {}
    for e in events:
        if e.kind == "answer":
            answers[e.payload["key"]] = e.payload["value"]
            continue
        if e.kind != "action":
            continue
        action = e.payload["action"]
        if e.payload.get("stage_before") != stage:
            raise TransitionError(
                f"log says {action} ran in stage {e.payload.get('stage_before')} "
                f"but replay reached {stage}")
        nxt = transition(stage, action)
        if nxt != e.payload.get("stage_after"):
            raise TransitionError(
                f"log says {action} moved to {e.payload.get('stage_after')} "
                f"but the table says {nxt}")
        stage = nxt
        if "plugin" in e.payload:
            loaded.append(e.payload["plugin"])
        for k in ("intent", "tissue", "tissue_name"):
            if k in e.payload:
                inter[k] = e.payload[k]
        if action == "Predict":
            inter["counts"] = {"known": e.payload["known"],
                               "novel": e.payload["novel"]}
        if action == "FormatAnswer":
            inter["answer_digest"] = e.payload["answer_digest"]
    intent = inter.get("intent")
    if intent in (None, "unclear") and "intent" in answers:
        intent = answers["intent"].strip().lower()
    return {
        "stage": stage,
        "loaded_plugins": loaded,
        "intent": intent,
        "tissue": inter.get("tissue"),
        "tissue_name": inter.get("tissue_name"),
        "answers": answers,
        "counts": inter.get("counts"),
        "answer_digest": inter.get("answer_digest"),
    }


def replay_digest(events) -> str:
    return json_digest(replay(events))
