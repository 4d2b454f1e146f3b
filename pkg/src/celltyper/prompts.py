"""Prompt templates for the detection oracle and the planner.

Every prompt has three sections in a fixed order, instruction then
demonstrations then question, with exactly four worked demonstrations.
Rendering is deterministic: identical inputs produce identical bytes, and
the golden tests pin the exact output.
"""

from __future__ import annotations

INSTRUCTION_HEADER = "## Instruction"
DEMONSTRATION_HEADER = "## Demonstrations"
QUESTION_HEADER = "## Question"
N_DEMONSTRATIONS = 4


def format_neighbors(entries) -> str:
    """One `(rank, label, score)` tuple per line, scores to 4 decimals."""
    return "\n".join(f"({i}, {label}, {score:.4f})"
                     for i, (label, score) in enumerate(entries, start=1))


def _assemble(instruction: str, demonstrations: list[tuple[str, str]], question: str) -> str:
    if len(demonstrations) != N_DEMONSTRATIONS:
        raise ValueError(f"prompts carry exactly {N_DEMONSTRATIONS} demonstrations")
    parts = [INSTRUCTION_HEADER, instruction.rstrip(), "", DEMONSTRATION_HEADER]
    for k, (given, answer) in enumerate(demonstrations, start=1):
        parts += ["", f"### Example {k}", given.rstrip(), f"Answer: {answer}"]
    parts += ["", QUESTION_HEADER, question.rstrip(), "Answer:"]
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# novel-type detection

DETECTION_INSTRUCTION = """\
You are reviewing one single-cell RNA-seq sample to decide whether it is a
novel cell type or belongs to a type already known to the reference atlas.
You are given the sample's nearest neighbors from two vector stores:
store G holds embeddings from the shared encoder, store S holds embeddings
from the tissue-adapted encoder. Each neighbor is written as
(rank, cell_type, distance); smaller distances mean closer matches.
Consistent labels at small distances indicate a known type. Large distances
or conflicting labels, especially in store S, indicate a novel type.
Reply with a JSON object: {"is_novel": true|false, "explanation": "..."}."""

_DETECTION_DEMOS = [
    (
        [("alpha cell", 0.41), ("alpha cell", 0.44), ("alpha cell", 0.52)],
        [("alpha cell", 0.18), ("alpha cell", 0.2), ("alpha cell", 0.27)],
        '{"is_novel": false, "explanation": "Both stores agree on alpha cell at small distances."}',
    ),
    (
        [("beta cell", 2.93), ("ductal cell", 3.1), ("acinar cell", 3.4)],
        [("beta cell", 3.8), ("acinar cell", 4.02), ("delta cell", 4.55)],
        '{"is_novel": true, "explanation": "Neighbors disagree and every match is far away in both stores."}',
    ),
    (
        [("hepatocyte", 0.77), ("hepatocyte", 0.81), ("stellate cell", 0.9)],
        [("hepatocyte", 2.6), ("stellate cell", 2.88), ("kupffer cell", 3.05)],
        '{"is_novel": true, "explanation": "Close in the shared space but the adapted store pushes all known types far away."}',
    ),
    (
        [("t cell", 0.62), ("nk cell", 0.7), ("t cell", 0.73)],
        [("t cell", 0.31), ("t cell", 0.36), ("t cell", 0.52)],
        '{"is_novel": false, "explanation": "The adapted store is unanimous for t cell at small distances."}',
    ),
]


def detection_demonstrations() -> list[tuple[str, str]]:
    demos = []
    for n_g, n_s, answer in _DETECTION_DEMOS:
        given = ("Neighbors from store G:\n" + format_neighbors(n_g)
                 + "\nNeighbors from store S:\n" + format_neighbors(n_s))
        demos.append((given, answer))
    return demos


def detection_question(n_g, n_s) -> str:
    return ("A query cell produced these retrieval sets.\n"
            "Neighbors from store G:\n" + format_neighbors(n_g)
            + "\nNeighbors from store S:\n" + format_neighbors(n_s)
            + "\nIs this cell a novel type? Reply with the JSON object.")


def build_detection_prompt(n_g, n_s) -> str:
    """n_g and n_s are (label, score) sequences, best match first."""
    return _assemble(DETECTION_INSTRUCTION, detection_demonstrations(),
                     detection_question(n_g, n_s))


# ---------------------------------------------------------------------------
# request planning

PLANNING_INSTRUCTION = """\
Classify a user request made to a cell annotation assistant. The intent is
"annotate" when the user wants cell types assigned to a dataset, and
"extend" when the user supplies newly labeled cells that should be folded
into the model and its memory.
Reply with a JSON object: {"intent": "annotate"|"extend", "explanation": "..."}."""

_PLANNING_DEMOS = [
    ("User request: What cell types are present in this kidney biopsy?",
     '{"intent": "annotate", "explanation": "The user asks for type assignments on a dataset."}'),
    ("User request: Here are 40 cells we labeled as a new retina neuron, add them to the model.",
     '{"intent": "extend", "explanation": "New labeled cells should be merged into the model."}'),
    ("User request: Please annotate my liver sample with your atlas.",
     '{"intent": "annotate", "explanation": "A standard annotation request."}'),
    ("User request: We confirmed a novel macrophage subtype, incorporate it so it is recognized next time.",
     '{"intent": "extend", "explanation": "The model should learn the confirmed novel type."}'),
]


def build_planning_prompt(query: str, data_summary: str) -> str:
    question = (f"User request: {query}\n"
                f"Data attachment: {data_summary}\n"
                "Which intent is this? Reply with the JSON object.")
    return _assemble(PLANNING_INSTRUCTION, list(_PLANNING_DEMOS), question)


# ---------------------------------------------------------------------------
# answer formatting

ANSWER_INSTRUCTION = """\
Turn a structured cell annotation report into a short plain-language summary
for the user. State how many cells were annotated, name the most common
types, and mention any cells flagged as potentially novel. Do not invent
numbers that are not in the report."""

_ANSWER_DEMOS = [
    ('Report: {"annotated": 120, "unknown": 0, "top_types": ["b cell", "t cell"]}',
     "All 120 cells were annotated; b cell and t cell dominate, nothing looked novel."),
    ('Report: {"annotated": 58, "unknown": 6, "top_types": ["hepatocyte"]}',
     "58 cells were annotated, mostly hepatocyte; 6 cells did not match any known type and may be novel."),
    ('Report: {"annotated": 0, "unknown": 12, "top_types": []}',
     "None of the 12 cells matched a known type; the whole sample may be a novel population."),
    ('Report: {"annotated": 300, "unknown": 1, "top_types": ["enterocyte", "goblet cell"]}',
     "300 cells were annotated, led by enterocyte and goblet cell; one cell was flagged as a possible novel type."),
]


def build_answer_prompt(report_json: str) -> str:
    question = (f"Report: {report_json}\n"
                "Write the summary.")
    return _assemble(ANSWER_INSTRUCTION, list(_ANSWER_DEMOS), question)
