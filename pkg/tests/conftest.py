import pytest

from crossview import harness


def tiny_config(**kw):
    cfg = harness.TrainConfig(steps=6, batch=3, n_train_scenes=6, n_eval_scenes=4, d_c=16, g_hidden=16, d_r=8,
                              adapter_hidden=8, qa_per_pair=2, train_per_pair=1, eval_per_pair=1)
    harness.apply_overrides(cfg, [("encoder.d_v", "32"), ("art.hidden", "16"), ("art.K", "4"),
                                  ("ocva.heads", "2"), ("ocva.depth", "1")])
    harness.apply_overrides(cfg, [(k, str(v)) for k, v in kw.items()])
    return cfg


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    harness.generate_data(tiny_config(), str(root))
    return str(root)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
