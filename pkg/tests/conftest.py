import math

import numpy as np
import pytest

from visipruner.engine import ModelConfig, TokenStream, init_model


def small_config(seed=0, L=2, d=16, H=2, m=24, vocab=20):
    return ModelConfig(num_layers=L, hidden_dim=d, num_heads=H, ffn_dim=m, vocab_size=vocab, seed=seed)


def random_stream(rng, d, vocab, n_s=2, n_v=4, n_x=3):
    return TokenStream.from_segments(
        d,
        system=rng.integers(0, vocab, n_s),
        vision=rng.standard_normal((n_v, d)) if n_v else [],
        instruction=rng.integers(0, vocab, n_x),
    )


def straight_line_logits(model, stream):
    """Independent forward pass: plain numpy, no engine helpers."""
    cfg = model.config
    d, H = cfg.hidden_dim, cfg.num_heads
    dk = d // H
    x = stream.embeddings.copy()
    for i, t in enumerate(stream.token_ids):
        if t >= 0:
            x[i] = model.embedding[t]
    n = x.shape[0]
    pos = np.arange(n)[:, None].astype(float)
    idx = np.arange(d)
    enc = np.where(idx % 2 == 0, np.sin(pos / 10000.0 ** ((idx - idx % 2) / d)),
                   np.cos(pos / 10000.0 ** ((idx - idx % 2) / d)))
    x = x + model.pos_scale * enc

    def norm(h, g):
        return h / np.sqrt((h ** 2).mean(axis=1, keepdims=True) + 1e-6) * g

    causal = np.tril(np.ones((n, n), dtype=bool))
    for lw in model.layers:
        a = norm(x, lw.attn_norm)
        q, k, v = a @ lw.w_q, a @ lw.w_k, a @ lw.w_v
        o = np.zeros((n, d))
        for h in range(H):
            s = slice(h * dk, (h + 1) * dk)
            sc = q[:, s] @ k[:, s].T / math.sqrt(dk)
            sc = np.where(causal, sc, -np.inf)
            w = np.exp(sc - sc.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            o[:, s] = w @ v[:, s]
        x = x + o @ lw.w_o
        f = norm(x, lw.ffn_norm)
        g = f @ lw.w_gate
        x = x + ((g / (1 + np.exp(-g))) * (f @ lw.w_up)) @ lw.w_down
    return model.unembedding @ x[-1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    cfg = small_config(seed=5)
    model = init_model(cfg)
    stream = random_stream(np.random.default_rng(5), cfg.hidden_dim, cfg.vocab_size)
    return model, stream


# -- acceptance reporting ------------------------------------------------------

CRITERIA_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; the lines are echoed in the terminal summary."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        CRITERIA_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
