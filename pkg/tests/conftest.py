import pytest
import torch

from vesseldiff.smoke import run_smoke


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """Full model and the no-cyclic ablation, trained once per session on the smoke corpus."""
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("smoke_runs")
    return {
        "full": run_smoke(root / "full", seed=0),
        "no_cyclic": run_smoke(root / "no_cyclic", seed=0, overrides={"ablation.no_cyclic": True}, plot=False),
    }
