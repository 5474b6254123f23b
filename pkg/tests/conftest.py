import pytest
import torch

from olchdr.autoencoder import OlcTrainConfig, train_olc
from olchdr.datasets import SynthConfig, synth_dataset

torch.set_num_threads(1)

TINY_OLC = dict(num_codes=16, code_dim=4, base_channels=4, patch_size=16, stride=16, batch_size=2,
                lambda_adv=0.0, log_every=0)


@pytest.fixture(scope="session")
def tiny_scenes():
    return synth_dataset(SynthConfig(height=16, width=16), 2, seed=0)


@pytest.fixture(scope="session")
def step1_checkpoint(tmp_path_factory, tiny_scenes):
    out = tmp_path_factory.mktemp("step1")
    run = train_olc(OlcTrainConfig(steps=3, **TINY_OLC), tiny_scenes, out_dir=str(out))
    return run.checkpoint


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
