"""Desk-scale laboratory for training and evaluating small causal language models."""

from .corpus import (
    Corpus,
    CorpusStats,
    Document,
    InstructionExample,
    QAPair,
    corpus_stats,
    format_instruction,
    load_corpus,
    load_instruction_dataset,
    load_qa_dataset,
    pack_sequences,
    qa_to_instruction,
    split_holdout,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContextOverflowError,
    DataError,
    DivergenceError,
    RlmlError,
)
from .evaluation import (
    AccuracyReport,
    PerplexityReport,
    SweepResult,
    average_perplexity,
    eval_generative,
    eval_multiple_choice,
    score_choice,
    sequence_perplexity,
    sweep_eval,
)
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    cross_entropy_loss,
    forward,
    greedy_generate,
    init_model,
    rmsnorm,
    rope_apply,
)
from .tasks import BenchmarkTask, GenItem, MCItem, convert_task, load_task, save_task
from .tokenizer import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    TokenizerModel,
    decode,
    encode,
    load_tokenizer,
    save_tokenizer,
    train_bpe,
)
from .train import (
    Checkpoint,
    FinetuneResult,
    LossTrace,
    OptimizerState,
    TrainConfig,
    adamw_step,
    finetune,
    load_checkpoint,
    lr_at,
    pretrain,
    save_checkpoint,
)

__version__ = "0.1.0"
