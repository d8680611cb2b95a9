import json

import pytest

TINY = {
    "seed": 3,
    "topology": "desk16",
    "window_length": 48,
    "generation": {"n_train": 3, "n_validation": 4, "n_test": 4, "duration_samples": 672,
                   "min_post_onset": 96},
    "train": {"max_epochs": 2, "window_stride": 24, "batch_size": 8},
    "svm": {"window_stride": 24},
    "detector": {"smoothing": 8, "target_fpr": 0.25},
    "evaluation": {"foreign_reference": 2, "foreign_test": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
