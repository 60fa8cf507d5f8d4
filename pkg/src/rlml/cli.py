"""Command-line entry point for the full experiment lifecycle.

Subcommands: tokenizer-train, stats, pretrain, finetune, eval, sweep. All of
them take --config pointing at one TOML file with [paths], [tokenizer],
[model], [train] and [eval] sections; selected flags override file values
(--out, --seed, --checkpoint, --threads). RLML_LOG controls log verbosity.

Exit codes: 0 success, 2 configuration/validation, 3 data, 4 divergence.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, DataError, DivergenceError, RlmlError

log = logging.getLogger("rlml")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    qa: str | None = None
    instructions: str | None = None
    tasks: list[str] = field(default_factory=list)
    out_dir: str = "out"
    tokenizer: str | None = None
    tokenizer_vocab_size: int = 4096
    model_section: dict = field(default_factory=dict)
    train_section: dict = field(default_factory=dict)
    holdout_fraction: float = 0.0
    max_new_tokens: int = 64

    @property
    def tokenizer_path(self) -> str:
        return self.tokenizer or os.path.join(self.out_dir, "tokenizer.json")

    def train_config(self):
        from .train import TrainConfig

        section = dict(self.train_section)
        if "checkpoint_fractions" in section:
            section["checkpoint_fractions"] = tuple(section["checkpoint_fractions"])
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
        return TrainConfig(**section)

    def model_config(self, tokenizer_vocab_size: int):
        from .model import ModelConfig

        section = dict(self.model_section)
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown [model] keys: {sorted(unknown)}")
        vocab = section.pop("vocab_size", tokenizer_vocab_size)
        if vocab < tokenizer_vocab_size:
            raise ConfigError(
                f"[model] vocab_size {vocab} is smaller than the tokenizer's "
                f"{tokenizer_vocab_size}"
            )
        for required in ("dim", "n_layers", "n_heads", "context_len"):
            if required not in section:
                raise ConfigError(f"[model] section is missing '{required}'")
        return ModelConfig(vocab_size=vocab, **section)


def load_experiment_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc

    known_sections = {"paths", "tokenizer", "model", "train", "eval"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    paths = raw.get("paths", {})
    eval_section = raw.get("eval", {})
    cfg = ExperimentConfig(
        corpus=paths.get("corpus"),
        qa=paths.get("qa"),
        instructions=paths.get("instructions"),
        tasks=list(paths.get("tasks", [])),
        out_dir=paths.get("out_dir", "out"),
        tokenizer=paths.get("tokenizer"),
        tokenizer_vocab_size=int(raw.get("tokenizer", {}).get("vocab_size", 4096)),
        model_section=dict(raw.get("model", {})),
        train_section=dict(raw.get("train", {})),
        holdout_fraction=float(eval_section.get("holdout_fraction", 0.0)),
        max_new_tokens=int(eval_section.get("max_new_tokens", 64)),
    )
    if not 0.0 <= cfg.holdout_fraction < 1.0:
        raise ConfigError(
            f"[eval] holdout_fraction must be in [0, 1), got {cfg.holdout_fraction}"
        )
    if cfg.max_new_tokens < 1:
        raise ConfigError("[eval] max_new_tokens must be >= 1")
    return cfg


def _require_paths(cfg: ExperimentConfig, *names: str) -> None:
    """Check that the paths a command depends on are configured and exist."""
    for name in names:
        if name == "tasks":
            for p in cfg.tasks:
                if not os.path.isfile(p):
                    raise ConfigError(f"task file does not exist: {p}")
            continue
        value = cfg.tokenizer_path if name == "tokenizer" else getattr(cfg, name)
        if value is None:
            raise ConfigError(f"[paths] section is missing '{name}'")
        if not os.path.isfile(value):
            raise ConfigError(f"[paths] {name} does not exist: {value}")


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _ensure_out_dir(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not os.access(cfg.out_dir, os.W_OK):
        raise ConfigError(f"output directory is not writable: {cfg.out_dir}")


def cmd_tokenizer_train(cfg: ExperimentConfig) -> int:
    from .corpus import load_corpus
    from .tokenizer import save_tokenizer, train_bpe

    _require_paths(cfg, "corpus")
    corpus = load_corpus(cfg.corpus)
    tok = train_bpe(corpus, cfg.tokenizer_vocab_size)
    _ensure_out_dir(cfg)
    save_tokenizer(tok, cfg.tokenizer_path)
    print(
        f"tokenizer: vocab_size={tok.vocab_size} merges={len(tok.merges)} "
        f"fingerprint={tok.fingerprint}"
    )
    print(f"wrote {cfg.tokenizer_path}")
    return 0


def cmd_stats(cfg: ExperimentConfig) -> int:
    from .corpus import corpus_stats, load_corpus, token_counts
    from .reports import record_length_hist_csv, source_dist_csv, stats_json
    from .tokenizer import load_tokenizer

    _require_paths(cfg, "corpus", "tokenizer")
    tok = load_tokenizer(cfg.tokenizer_path)
    corpus = load_corpus(cfg.corpus)
    stats = corpus_stats(corpus, tok)
    counts = token_counts(corpus, tok)
    _ensure_out_dir(cfg)
    _write_text(os.path.join(cfg.out_dir, "stats.json"), stats_json(stats, tok.fingerprint))
    _write_text(
        os.path.join(cfg.out_dir, "record_length_hist.csv"),
        record_length_hist_csv(counts),
    )
    _write_text(
        os.path.join(cfg.out_dir, "source_dist.csv"),
        source_dist_csv([d.source for d in corpus.documents]),
    )
    print(
        f"corpus: records={stats.record_count} total_tokens={stats.total_tokens} "
        f"mean={stats.mean_tokens_per_record:.4f} std={stats.std_tokens_per_record:.4f}"
    )
    return 0


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    from .charts import line_chart
    from .corpus import load_corpus, pack_sequences, split_holdout
    from .tokenizer import load_tokenizer
    from .train import pretrain

    _require_paths(cfg, "corpus", "tokenizer")
    tcfg = cfg.train_config()
    tok = load_tokenizer(cfg.tokenizer_path)
    model_config = cfg.model_config(tok.vocab_size)
    corpus = load_corpus(cfg.corpus)
    _ensure_out_dir(cfg)
    if cfg.holdout_fraction > 0.0:
        corpus, holdout = split_holdout(corpus, cfg.holdout_fraction, tcfg.seed)
        holdout_path = os.path.join(cfg.out_dir, "holdout.jsonl")
        _write_text(
            holdout_path,
            "".join(
                json.dumps({"id": d.id, "text": d.text, "source": d.source}) + "\n"
                for d in holdout.documents
            ),
        )
        log.info("held out %d documents to %s", len(holdout), holdout_path)
    blocks = pack_sequences(corpus, tok, model_config.context_len)
    checkpoints, trace = pretrain(
        model_config, tcfg, blocks, cfg.out_dir, tok.fingerprint
    )
    _write_text(os.path.join(cfg.out_dir, "losses.csv"), trace.to_csv())
    series = [("loss", [(p.step, p.loss) for p in trace.points])]
    _write_text(
        os.path.join(cfg.out_dir, "losses.svg"),
        line_chart(series, "Pretraining loss", "step", "loss"),
    )
    print(
        f"pretrained {len(trace.points)} steps over {blocks.shape[0]} blocks; "
        f"wrote {len(checkpoints)} checkpoints to {cfg.out_dir}"
    )
    return 0


def cmd_finetune(cfg: ExperimentConfig, checkpoint_path: str) -> int:
    from .corpus import load_instruction_dataset
    from .tokenizer import load_tokenizer
    from .train import checkpoint_filename, finetune, load_checkpoint, save_checkpoint

    _require_paths(cfg, "instructions", "tokenizer")
    if not os.path.isfile(checkpoint_path):
        raise ConfigError(f"checkpoint does not exist: {checkpoint_path}")
    tcfg = cfg.train_config()
    tok = load_tokenizer(cfg.tokenizer_path)
    ckpt = load_checkpoint(checkpoint_path, expected_fingerprint=tok.fingerprint)
    examples = load_instruction_dataset(cfg.instructions)
    if not examples:
        raise DataError(f"no examples in {cfg.instructions}")
    _ensure_out_dir(cfg)
    result = finetune(ckpt, examples, tcfg, tok)
    out_path = os.path.join(cfg.out_dir, checkpoint_filename(1.0, "finetune"))
    save_checkpoint(result.checkpoint, out_path)
    _write_text(os.path.join(cfg.out_dir, "finetune_losses.csv"), result.trace.to_csv())
    report = {
        "peak_lr": result.checkpoint.train_config.peak_lr,
        "steps": result.checkpoint.step,
        "used_examples": result.used_examples,
        "skipped_examples": result.skipped_examples,
        "final_loss": result.trace.points[-1].loss,
    }
    _write_text(
        os.path.join(cfg.out_dir, "finetune_report.json"),
        json.dumps(report, indent=2, sort_keys=True) + "\n",
    )
    print(
        f"fine-tuned for {result.checkpoint.step} steps "
        f"(used={result.used_examples}, skipped={result.skipped_examples}); "
        f"wrote {out_path}"
    )
    return 0


def _load_tasks(cfg: ExperimentConfig):
    from .tasks import load_task

    return [load_task(p) for p in cfg.tasks]


def cmd_eval(cfg: ExperimentConfig, checkpoint_path: str) -> int:
    from .corpus import load_qa_dataset
    from .evaluation import average_perplexity, evaluate_task
    from .reports import eval_report_json
    from .tokenizer import load_tokenizer
    from .train import load_checkpoint

    _require_paths(cfg, "qa", "tokenizer", "tasks")
    if not os.path.isfile(checkpoint_path):
        raise ConfigError(f"checkpoint does not exist: {checkpoint_path}")
    tok = load_tokenizer(cfg.tokenizer_path)
    ckpt = load_checkpoint(checkpoint_path, expected_fingerprint=tok.fingerprint)
    qa = load_qa_dataset(cfg.qa)
    tasks = _load_tasks(cfg)
    _ensure_out_dir(cfg)
    ppl = average_perplexity(ckpt.params, tok, qa)
    task_reports = {
        task.name: evaluate_task(ckpt.params, tok, task, cfg.max_new_tokens)
        for task in tasks
    }
    _write_text(
        os.path.join(cfg.out_dir, "eval_report.json"),
        eval_report_json(checkpoint_path, ckpt.fraction, ppl, task_reports),
    )
    print(f"average perplexity: {ppl.average:.4f} over {len(ppl.per_item)} items")
    for name, rep in task_reports.items():
        extra = f" acc_norm={rep.acc_norm:.4f}" if rep.acc_norm is not None else ""
        print(f"{name}: acc={rep.acc:.4f}{extra} (n={rep.n_items})")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    from .charts import line_chart
    from .corpus import load_qa_dataset
    from .evaluation import sweep_eval
    from .reports import sweep_csv, sweep_series
    from .tokenizer import load_tokenizer
    from .train import load_checkpoint

    _require_paths(cfg, "qa", "tokenizer", "tasks")
    tok = load_tokenizer(cfg.tokenizer_path)
    qa = load_qa_dataset(cfg.qa)
    tasks = _load_tasks(cfg)
    pattern = os.path.join(cfg.out_dir, "checkpoint_*.rlml")
    checkpoints = []
    for path in sorted(glob.glob(pattern)):
        ckpt = load_checkpoint(path, expected_fingerprint=tok.fingerprint)
        if ckpt.phase == "pretrain":
            checkpoints.append(ckpt)
    if not checkpoints:
        raise DataError(f"no pretraining checkpoints found under {pattern}")
    _ensure_out_dir(cfg)

    result = sweep_eval(checkpoints, tok, qa, tasks, cfg.max_new_tokens)
    _write_text(os.path.join(cfg.out_dir, "sweep.csv"), sweep_csv(result))
    ppl_series, acc_series, mmlu_series = sweep_series(result)
    _write_text(
        os.path.join(cfg.out_dir, "ppl_vs_fraction.svg"),
        line_chart(
            ppl_series, "Average perplexity vs data fraction",
            "pretraining data fraction", "average perplexity",
        ),
    )
    if acc_series:
        _write_text(
            os.path.join(cfg.out_dir, "acc_vs_fraction.svg"),
            line_chart(
                acc_series, "Benchmark accuracy vs data fraction",
                "pretraining data fraction", "accuracy",
            ),
        )
    if mmlu_series:
        _write_text(
            os.path.join(cfg.out_dir, "mmlu_vs_fraction.svg"),
            line_chart(
                mmlu_series, "MMLU subset accuracy vs data fraction",
                "pretraining data fraction", "accuracy",
            ),
        )
    print(f"swept {len(result.rows)} checkpoints; wrote {cfg.out_dir}/sweep.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlml",
        description="Train and evaluate a small causal language model end to end.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (
        ("tokenizer-train", False),
        ("stats", False),
        ("pretrain", False),
        ("finetune", True),
        ("eval", True),
        ("sweep", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", help="override [paths] out_dir")
        p.add_argument("--seed", type=int, help="override [train] seed")
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP thread pools")
        p.add_argument(
            "--checkpoint",
            required=needs_ckpt,
            help="checkpoint file to start from / evaluate",
        )
    return parser


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        log.warning("threadpoolctl not installed; --threads only sets env vars")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("RLML_LOG", "WARNING").upper())
    if args.threads:
        _limit_threads(args.threads)

    try:
        cfg = load_experiment_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.train_section["seed"] = args.seed
        if args.command == "tokenizer-train":
            return cmd_tokenizer_train(cfg)
        if args.command == "stats":
            return cmd_stats(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RlmlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
