"""apifill: complete fully-qualified API names from a query plus a known prefix."""

from .advaug import (AdvConfig, PerturbationBatch, adversarial_loss_estimate,
                     atcom_delta, atcom_generate, augmented_step_gradient,
                     fgm_delta, fgsm_delta, generate, pgd_generate)
from .bpe import TokenSeq, Vocab, train_bpe
from .corpus import (CorpusStats, PromptedExample, QueryApiPair, SplitSpec,
                     build_input_text, build_prompt, corpus_stats, load_pairs,
                     make_pair, make_prompted_examples, mask_api, split_corpus)
from .decoder import ApiLibrary, Candidate, api_check_filter, beam_search, complete
from .estimator import ApiCompleter
from .metrics import (EvalReport, RankedResult, average_precision, em_at_k,
                      evaluate, map_score, mrr)
from .model import (CheckpointError, ForwardTrace, ModelConfig, NonFiniteLossError,
                    attention, backward, forward, init_params, layer_norm,
                    load_params, save_params)
from .trainer import (EncodedDataset, TrainConfig, TrainReport, fit,
                      load_checkpoint, save_checkpoint, train_epoch)

__version__ = "0.1.0"

__all__ = [
    "AdvConfig", "ApiCompleter", "ApiLibrary", "Candidate", "CheckpointError",
    "CorpusStats", "EncodedDataset", "EvalReport", "ForwardTrace", "ModelConfig",
    "NonFiniteLossError", "PerturbationBatch", "PromptedExample", "QueryApiPair",
    "RankedResult", "SplitSpec", "TokenSeq", "TrainConfig", "TrainReport", "Vocab",
    "adversarial_loss_estimate", "api_check_filter", "atcom_delta", "atcom_generate",
    "attention", "augmented_step_gradient", "average_precision", "backward",
    "beam_search", "build_input_text", "build_prompt", "complete", "corpus_stats",
    "em_at_k", "evaluate", "fgm_delta", "fgsm_delta", "fit", "forward", "generate",
    "init_params", "layer_norm", "load_checkpoint", "load_pairs", "load_params",
    "make_pair", "make_prompted_examples", "map_score", "mask_api", "mrr",
    "pgd_generate", "save_checkpoint", "save_params", "split_corpus", "train_bpe",
    "train_epoch",
]
