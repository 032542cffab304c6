import pytest
import torch

torch.set_num_threads(1)

# one line per acceptance criterion, echoed after the run (see
# tests/test_acceptance.py::verdict)
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def neutral_setup(tmp_path_factory):
    """Small balanced corpus with a trained model, shared across tests."""
    from fairaug import experiments as ex
    from fairaug.augmenter import AugmentationConfig
    from fairaug.config import ExperimentConfig
    from fairaug.models import ModelConfig
    from fairaug.synthetic import neutral_corpus

    root = tmp_path_factory.mktemp("neutral")
    paths = neutral_corpus(root / "corpus")
    config = ExperimentConfig(
        dataset_path=str(paths.interactions),
        attribute_path=str(paths.attributes),
        models=(ModelConfig(model_kind="lightgcn", embedding_size=16, layers=2,
                            train_epochs=8, seed=1),),
        augmentation=AugmentationConfig(max_epochs=12, learning_rate=0.3),
        user_policies=("zero_utility", "low_degree"),
        item_policies=("preferred",),
        output_dir=str(root / "out"),
    )
    prepared = ex.prepare_data(config)
    ctx = ex.build_model_context(config, config.models[0], prepared)
    return config, prepared, ctx
