import pytest

from mppa.config import load_run_config
from mppa.harness import train
from mppa.physics import generate_dataset

TINY_CONFIG = """\
[model]
vocab_size = 64
d = 16
layers = 2
heads = 2
C = 8
n_max = 32

[optimizer]
learning_rate = 0.003
steps = 20
batch_size = 8
warmup_steps = 2
eval_interval = 10
seed = 0

[data]
train_sequences = 40
val_sequences = 12
eval_sequences = 12
completions = 2

[output]
metrics_path = out/metrics.jsonl
checkpoint_path = out/model.ckpt
"""


def write_run(directory, text=TINY_CONFIG):
    """Write a run config plus its train/val datasets into ``directory``."""
    path = directory / "run.ini"
    path.write_text(text)
    cfg = load_run_config(path)
    generate_dataset(cfg.data.domain("train", cfg.seq_len), cfg.data.train_seed, cfg.path(cfg.data.train_path))
    generate_dataset(cfg.data.domain("val", cfg.seq_len), cfg.data.val_seed, cfg.path(cfg.data.val_path))
    return cfg


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """A tiny run that has been trained once; returns (RunConfig, final record, params)."""
    directory = tmp_path_factory.mktemp("run")
    (directory / "data").mkdir()
    cfg = write_run(directory)
    record, params = train(cfg)
    return cfg, record, params


# one "PASS"/"FAIL" line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
