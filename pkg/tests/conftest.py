"""Shared fixtures: a small but fully trained system.

Session scope keeps the expensive fits to one run; tests that mutate
state must work on a clone(). The scripted oracle server stands in for
a remote chat-completions endpoint without touching the network.
"""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from celltyper import cli as cli_mod
from celltyper import encoder
from celltyper.config import load_config
from celltyper.data import LoadedData, filter_qc, normalize, stratified_split, synthesize
from celltyper.util import child_seed

MINI_OVERRIDES = {
    "seed": 11,
    "synthesis.tissues": 2,
    "synthesis.classes_per_tissue": 3,
    "synthesis.cells_per_class": 40,
    "synthesis.genes": 40,
    "synthesis.marker_genes_per_class": 4,
    "synthesis.marker_strength": 8.0,
    "synthesis.noise_level": 0.4,
    "encoder.hidden_dims": [24, 24],
    "encoder.embedding_dim": 12,
    "ssl.epochs": 4,
    "ssl.batch_size": 32,
    "train.max_epochs": 40,
    "train.patience": 8,
    "train.batch_size": 32,
    "adapters.n_experts": 3,
    "adapters.rank": 4,
}


@pytest.fixture(scope="session")
def mini_cfg():
    return load_config(None, dict(MINI_OVERRIDES))


@pytest.fixture(scope="session")
def mini_data(mini_cfg):
    """(raw corpus, normalized corpus, split) triple."""
    raw = synthesize(mini_cfg.synthesis_config())
    matrix, meta = filter_qc(raw.matrix, raw.metadata)
    assert matrix.n_cells == raw.matrix.n_cells, "fixture corpus must survive QC"
    data = LoadedData(normalize(matrix), meta, raw.vocab)
    split = stratified_split(meta, mini_cfg.split_ratios,
                             seed=child_seed(mini_cfg.seed, "split"), vocab=raw.vocab)
    return raw, data, split


@pytest.fixture(scope="session")
def mini_base(mini_cfg, mini_data):
    _, data, split = mini_data
    base = encoder.init_encoder(mini_cfg.encoder_config(data.matrix.n_genes),
                                seed=mini_cfg.seed)
    x = data.matrix.to_dense()[split.train].astype(base.dtype)
    base, _ = encoder.pretrain_ssl(base, x, mini_cfg.ssl_config())
    base.frozen = True
    return base


@pytest.fixture(scope="session")
def mini_system(mini_cfg, mini_base, mini_data):
    _, data, split = mini_data
    return cli_mod._fit_system(mini_cfg, mini_base, data, split)


class ScriptedOracle:
    """Local chat-completions stand-in; queued steps answer one POST each."""

    def __init__(self):
        self.steps = []
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(n)
                try:
                    body = json.loads(raw) if raw else {}
                except ValueError:
                    body = {}
                outer.requests.append(
                    {"headers": {k.lower(): v for k, v in self.headers.items()},
                     "body": body})
                status, text, delay = (outer.steps.pop(0) if outer.steps
                                       else (200, "{}", 0.0))
                if delay:
                    time.sleep(delay)
                data = text.encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up (timeout test)

            def log_message(self, *a):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.handle_error = lambda *a: None
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def queue(self, status, body, delay=0.0):
        if isinstance(body, dict):
            body = json.dumps(body)
        self.steps.append((status, body, delay))

    def queue_reply(self, content):
        self.queue(200, {"choices": [{"message": {"content": content}}]})

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture()
def oracle_server():
    srv = ScriptedOracle()
    yield srv
    srv.close()


@pytest.fixture(scope="session")
def query_cells(mini_data):
    """Six raw, label-stripped tissue-0 test cells."""
    from celltyper.data import CellMetadata, subset_loaded

    raw, _, split = mini_data
    tis = raw.tissues()
    rows = split.test[tis[split.test] == 0][:6]
    sub = subset_loaded(raw, rows)
    meta = [CellMetadata(m.cell_id, -1, -1, m.batch) for m in sub.metadata]
    return LoadedData(sub.matrix, meta, sub.vocab), rows


@pytest.fixture(scope="session")
def new_type_cells(mini_data):
    """Factory for raw tissue-0 cells of a brand-new, learnable type.

    The mini corpus gives each of its six classes a four-gene marker
    block starting at gene 0, so genes 24 and up are background; a new
    type gets its own block there, genuinely distinct from every
    trained class.
    """
    import numpy as np

    from celltyper.data import CellMetadata, GeneExpressionMatrix

    raw, _, _ = mini_data

    def make(vocab, n=12, name="typeNew", seed=424241, prefix="new"):
        rng = np.random.default_rng(seed)
        x = rng.poisson(1.0, size=(n, raw.matrix.n_genes)).astype(np.float64)
        x[:, 30:34] += rng.poisson(9.0, size=(n, 4))
        ids = [f"{prefix}{i:03d}" for i in range(n)]
        matrix = GeneExpressionMatrix(x, list(raw.matrix.gene_names), ids)
        idx = vocab.cell_type_index(name) if vocab.has_cell_type(name) \
            else vocab.add_cell_type(name)
        meta = [CellMetadata(cid, idx, 0, "b0") for cid in ids]
        return LoadedData(matrix, meta, vocab), idx

    return make
