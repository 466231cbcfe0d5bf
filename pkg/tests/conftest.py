"""Shared builders for small deterministic training worlds."""

import numpy as np

from promptpress.encoder import EncoderConfig
from promptpress.scoring import IdfRetentionScorer, fit_ngram_lm
from promptpress.text import PromptRecord, build_vocabulary, compute_idf_table
from promptpress.trainer import Scorers


def tiny_corpus(n_prompts=8, seed=0, min_len=6, max_len=10):
    """Small word-soup corpus over ten surface forms."""
    words = [f"w{i}" for i in range(10)]
    rng = np.random.default_rng(seed)
    records = [PromptRecord("p-all", " ".join(words))]  # pins the vocabulary
    for i in range(n_prompts - 1):
        n = int(rng.integers(min_len, max_len + 1))
        text = " ".join(words[int(j)] for j in rng.integers(0, len(words), size=n))
        records.append(PromptRecord(f"p{i}", text))
    return records


def tiny_world(n_prompts=8, seed=0, n_gen=4, d_model=8):
    """(corpus, vocab, scorers, encoder_cfg) sized for fast unit tests."""
    corpus = tiny_corpus(n_prompts=n_prompts, seed=seed)
    vocab = build_vocabulary(corpus, max_size=64)
    lm = fit_ngram_lm(corpus, order=2, smoothing=0.1, vocab=vocab)
    scorers = Scorers(
        retention=IdfRetentionScorer(compute_idf_table(corpus, vocab)),
        lm=lm,
        n_gen=n_gen,
    )
    encoder_cfg = EncoderConfig(
        vocab_size=vocab.size, d_model=d_model, n_heads=2, n_layers=2,
        d_ff=2 * d_model, max_len=32,
    )
    return corpus, vocab, scorers, encoder_cfg
