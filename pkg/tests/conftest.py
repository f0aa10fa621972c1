import numpy as np
import pytest

from nirvis import config as C
from nirvis.embedder import BackboneConfig
from nirvis.synthgen import SynthConfig, generate

TINY_SYNTH = dict(n_source_ids=6, source_samples_per_id=4, source_eval_samples=2, n_target_ids=3,
                  samples_per_id_per_modality=2, n_eval_ids=3, image_size=16)
TINY_BACKBONE = BackboneConfig(embed_dim=8, width=4, depth=2, input_size=16)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """(source, target) manifests of a very small synthetic dataset."""
    return generate(SynthConfig(**TINY_SYNTH), tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def reproduced(tmp_path_factory):
    """One full desk-scale reproduce-tables run on the default config (shared by several modules)."""
    from nirvis.experiments import reproduce_tables

    out = tmp_path_factory.mktemp("repro")
    return out, reproduce_tables(C.resolve(), out)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        status, title = mod.RESULTS[num]
        terminalreporter.write_line(f"{status}  criterion {num}: {title}")
