"""End-to-end CLI tests over a miniature experiment workspace."""

import json
import subprocess
import sys

import pytest

from conftest import color_of, make_word_corpus, NOUNS
from rlml.cli import main
from rlml.tasks import BenchmarkTask, MCItem, GenItem, save_task

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    corpus = make_word_corpus(80, seed=14)
    with open(root / "corpus.jsonl", "w") as f:
        for i, doc in enumerate(corpus.documents):
            source = "wiki" if i % 3 == 0 else "web"
            f.write(json.dumps({"id": doc.id, "text": doc.text, "source": source}) + "\n")
    with open(root / "qa.jsonl", "w") as f:
        for noun in NOUNS[:8]:
            f.write(json.dumps({
                "question": f"kokia spalva yra {noun}?",
                "answer": f"{noun} yra {color_of(noun)}.",
            }) + "\n")
    with open(root / "instructions.jsonl", "w") as f:
        for noun in NOUNS[:6]:
            f.write(json.dumps({
                "instruction": f"kokia spalva yra {noun}?",
                "output": f"{noun} yra {color_of(noun)}.",
            }) + "\n")

    mc = BenchmarkTask(
        "arc_easy_lt", "multiple_choice",
        tuple(
            MCItem(f"kokia spalva yra {n}?", (" raudonas", " zalias", " melynas"), i % 3)
            for i, n in enumerate(NOUNS[:6])
        ),
    )
    save_task(mc, root / "arc_easy_lt.jsonl")
    mmlu = BenchmarkTask(
        "mmlu_spalvos_lt", "multiple_choice",
        tuple(
            MCItem(f"{n} yra", (" baltas", " juodas"), i % 2)
            for i, n in enumerate(NOUNS[:4])
        ),
    )
    save_task(mmlu, root / "mmlu_spalvos_lt.jsonl")
    gen = BenchmarkTask(
        "gsm8k_lt", "generative",
        (GenItem("kiek bus 2 + 2?", "#### 4"),),
    )
    save_task(gen, root / "gsm8k_lt.jsonl")

    out_dir = root / "out"
    config = f"""
[paths]
corpus = "{root}/corpus.jsonl"
qa = "{root}/qa.jsonl"
instructions = "{root}/instructions.jsonl"
tasks = ["{root}/arc_easy_lt.jsonl", "{root}/mmlu_spalvos_lt.jsonl", "{root}/gsm8k_lt.jsonl"]
out_dir = "{out_dir}"

[tokenizer]
vocab_size = 300

[model]
dim = 32
n_layers = 2
n_heads = 2
context_len = 48

[train]
peak_lr = 1e-3
warmup_ratio = 0.1
weight_decay = 0.01
per_device_batch = 2
grad_accum_steps = 2
seed = 7
epochs = 1

[eval]
holdout_fraction = 0.1
max_new_tokens = 8
"""
    cfg_path = root / "config.toml"
    cfg_path.write_text(config)
    return root, cfg_path, out_dir


def test_full_pipeline(workspace, capsys):
    root, cfg, out = workspace

    assert main(["tokenizer-train", "--config", str(cfg)]) == 0
    printed = capsys.readouterr().out
    assert "fingerprint=" in printed
    assert (out / "tokenizer.json").exists()

    fp1 = json.loads((out / "tokenizer.json").read_text())["fingerprint"]
    assert main(["tokenizer-train", "--config", str(cfg)]) == 0
    fp2 = json.loads((out / "tokenizer.json").read_text())["fingerprint"]
    assert fp1 == fp2  # idempotent retrain

    assert main(["stats", "--config", str(cfg)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["record_count"] == 80
    hist = (out / "record_length_hist.csv").read_text().strip().splitlines()
    assert sum(int(r.split(",")[2]) for r in hist[1:]) == 80
    sources = (out / "source_dist.csv").read_text().strip().splitlines()
    assert set(r.split(",")[0] for r in sources[1:]) == {"wiki", "web"}

    assert main(["pretrain", "--config", str(cfg)]) == 0
    ckpts = sorted(out.glob("checkpoint_*.rlml"))
    assert len(ckpts) == 11
    losses = (out / "losses.csv").read_text().strip().splitlines()
    assert losses[0] == "step,loss,lr"
    assert (out / "losses.svg").read_text().startswith("<svg")
    assert (out / "holdout.jsonl").exists()

    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint_1.0000.rlml")]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["perplexity"]["average"] >= 1.0
    assert all(p >= 1.0 for _, p in report["perplexity"]["items"])
    assert set(report["tasks"]) == {"arc_easy_lt", "mmlu_spalvos_lt", "gsm8k_lt"}

    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint_1.0000.rlml")]) == 0
    report2 = (out / "eval_report.json").read_bytes()
    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint_1.0000.rlml")]) == 0
    assert (out / "eval_report.json").read_bytes() == report2  # byte-identical rerun

    assert main(["sweep", "--config", str(cfg)]) == 0
    sweep_lines = (out / "sweep.csv").read_text().strip().splitlines()
    header = sweep_lines[0].split(",")
    # fraction, avg_ppl, 2 mc tasks x2, generative x1, mmlu_lt aggregate x2
    assert header[0] == "fraction"
    assert header[1] == "avg_ppl"
    assert "mmlu_lt_acc" in header and "mmlu_lt_acc_norm" in header
    assert len(sweep_lines) == 12
    fractions = [float(r.split(",")[0]) for r in sweep_lines[1:]]
    assert fractions == sorted(fractions)
    assert (out / "ppl_vs_fraction.svg").exists()
    assert (out / "acc_vs_fraction.svg").exists()
    assert (out / "mmlu_vs_fraction.svg").exists()
    # aggregate equals the hand-average of mmlu subset columns
    idx_mmlu = header.index("mmlu_spalvos_lt_acc")
    idx_agg = header.index("mmlu_lt_acc")
    for row in sweep_lines[1:]:
        cells = row.split(",")
        assert abs(float(cells[idx_agg]) - float(cells[idx_mmlu])) < 1e-12

    assert main(["sweep", "--config", str(cfg)]) == 0
    again = (out / "sweep.csv").read_text().strip().splitlines()
    assert again == sweep_lines  # deterministic rerun

    assert main(["finetune", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint_1.0000.rlml")]) == 0
    ft_report = json.loads((out / "finetune_report.json").read_text())
    assert ft_report["peak_lr"] == 1e-5
    assert ft_report["skipped_examples"] == 0
    assert (out / "checkpoint_finetuned.rlml").exists()

    # the fine-tuned checkpoint must not disturb the sweep (phase filter)
    assert main(["sweep", "--config", str(cfg)]) == 0


def test_missing_corpus_path_exits_2_without_side_effects(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        f'[paths]\ncorpus = "{tmp_path}/absent.jsonl"\nout_dir = "{tmp_path}/out"\n'
    )
    assert main(["tokenizer-train", "--config", str(cfg)]) == 2
    assert "absent.jsonl" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["stats", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_bad_data_exits_3(tmp_path, capsys):
    bad = tmp_path / "corpus.jsonl"
    bad.write_text('{"text": "ok"}\n{broken\n')
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[paths]\ncorpus = "{bad}"\nout_dir = "{tmp_path}/out"\n')
    assert main(["tokenizer-train", "--config", str(cfg)]) == 3
    assert "line 2" in capsys.readouterr().err


def test_unknown_config_section_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[nonsense]\nx = 1\n")
    assert main(["stats", "--config", str(cfg)]) == 2
    assert "unknown config sections" in capsys.readouterr().err


def test_seed_and_out_overrides(workspace, tmp_path):
    _, cfg, out = workspace
    alt = tmp_path / "alt_out"
    assert main(["pretrain", "--config", str(cfg), "--out", str(alt), "--seed", "99"]) == 2
    # --out points at a fresh dir without tokenizer.json; validation rejects it
    assert not (alt / "losses.csv").exists()


def test_console_entry_point(workspace):
    _, cfg, _ = workspace
    proc = subprocess.run(
        [sys.executable, "-m", "rlml.cli", "stats", "--config", str(cfg)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "records=80" in proc.stdout
