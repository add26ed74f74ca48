"""Scikit-learn style estimator wrapping the full pipeline.

fit(X, y) takes natural-language queries and their fully-qualified API names,
builds prompt-masked examples, trains the tokenizer and the model; predict(X)
accepts queries or (query, prefix) pairs and returns the top completion.
Hyperparameters follow sklearn conventions: stored verbatim on the instance,
learned state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import bpe, corpus, decoder, trainer
from .advaug import AdvConfig
from .model import ModelConfig, init_params
from .trainer import EncodedDataset, TrainConfig
from .validation import (check_positive_int, check_query_prefix_sequence,
                         check_same_length, check_text_sequence)


class ApiCompleter(BaseEstimator):
    def __init__(self, vocab_size=600, hidden_size=64, heads=4,
                 encoder_layers=1, decoder_layers=1, ffn_size=128,
                 max_input_length=48, max_output_length=16,
                 prompts_per_api=3, method="none", epsilon=1.0, k_adv=4,
                 alpha=0.3, batch_size=16, learning_rate=1e-3, max_epochs=200,
                 patience=5, beam_width=10, validation_fraction=0.0,
                 random_state=0):
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.ffn_size = ffn_size
        self.max_input_length = max_input_length
        self.max_output_length = max_output_length
        self.prompts_per_api = prompts_per_api
        self.method = method
        self.epsilon = epsilon
        self.k_adv = k_adv
        self.alpha = alpha
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.beam_width = beam_width
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "This ApiCompleter instance is not fitted yet; call fit first.")

    def fit(self, X, y):
        queries = check_text_sequence(X, "X")
        apis = check_text_sequence(y, "y")
        check_same_length(queries, apis)
        check_positive_int(self.prompts_per_api, "prompts_per_api")

        pairs = [corpus.make_pair(q, a) for q, a in zip(queries, apis)]
        rng = np.random.default_rng(self.random_state)
        examples = []
        for pair in pairs:
            examples.extend(
                corpus.make_prompted_examples(pair, rng, count=self.prompts_per_api))

        texts = [p.query for p in pairs] + [p.api for p in pairs]
        self.vocab_ = bpe.train_bpe(texts, self.vocab_size)
        self.model_config_ = ModelConfig(
            vocab_size=len(self.vocab_),
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            hidden_size=self.hidden_size,
            heads=self.heads,
            ffn_size=self.ffn_size,
            max_input_length=self.max_input_length,
            max_output_length=self.max_output_length,
            seed=self.random_state,
        )
        dataset = EncodedDataset.from_examples(
            examples, self.vocab_, self.max_input_length, self.max_output_length)

        if self.validation_fraction > 0 and len(dataset) >= 4:
            n_valid = max(1, int(len(dataset) * self.validation_fraction))
            order = np.random.default_rng((self.random_state, 7)).permutation(len(dataset))
            vi, ti = order[:n_valid], order[n_valid:]
            valid = EncodedDataset(*dataset.batch(vi))
            train = EncodedDataset(*dataset.batch(ti))
            patience = self.patience
        else:
            # no held-out data: validate on train so early stopping still
            # tracks convergence instead of wall-clock
            train = valid = dataset
            patience = self.patience

        train_cfg = TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=patience,
            seed=self.random_state,
            adv=AdvConfig(method=self.method, epsilon=self.epsilon,
                          k_adv=self.k_adv, alpha=self.alpha),
        )
        params = init_params(self.model_config_)
        self.params_, self.train_report_ = trainer.fit(
            params, self.model_config_, train, valid, train_cfg)
        self.n_examples_ = len(dataset)
        return self

    def predict_topk(self, X, k=5, library=None):
        """Top-k completion texts per input; inputs may carry a prefix."""
        self._check_fitted()
        items = check_query_prefix_sequence(X, "X")
        width = max(self.beam_width, k)
        out = []
        for query, prefix in items:
            cands = decoder.complete(
                self.params_, self.model_config_, self.vocab_, query, prefix,
                k=k, width=width, library=library)
            out.append([c.text for c in cands])
        return out

    def predict(self, X):
        return [tops[0] if tops else "" for tops in self.predict_topk(X, k=1)]

    def score(self, X, y):
        """Exact-match accuracy of the top-1 completion (0..1)."""
        self._check_fitted()
        apis = check_text_sequence(y, "y")
        items = check_query_prefix_sequence(X, "X")
        check_same_length(items, apis)
        preds = self.predict(X)
        hits = sum(1 for p, a in zip(preds, apis)
                   if corpus.normalize_api(p) == corpus.normalize_api(a))
        return hits / len(apis)
