import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

TINY = [
    "data.n_subjects=3", "data.samples_per_subject=40", "data.n_classes=4", "data.grid=[8,8,8]",
    "data.frames_T=2", "data.video_frames=2", "data.video_size=16",
    "tokenizer.kernel=[4,4,4]", "tokenizer.stride=[4,4,4]", "tokenizer.out_channels=16",
    "encoders.width=32", "encoders.fmri_depth=1", "encoders.video_depth=1", "encoders.qformer_depth=1",
    "decoder.width=32", "decoder.depth=1",
    "pretrain.mae_steps=3", "pretrain.video_warmup_steps=3", "pretrain.decoder_steps=3", "pretrain.batch_size=8",
    "stage1.steps=4", "stage1.batch_size=8", "stage2.steps=3", "stage2.batch_size=8",
    "optim.checkpoint_every=2", "eval.retrieval_batch=4",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY)


@pytest.fixture
def tiny_cfg():
    from fmri2text.config import load_config
    return load_config("default", TINY)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
