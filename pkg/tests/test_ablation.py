from dataclasses import replace

import numpy as np
import pytest

from localfsl.ablation import LADDER, ROW_FIELDS, AblationConfig, run_ablation, write_ablation_csv
from localfsl.backbone import DESK_ARCH, init_params
from localfsl.data import generate_glyph_corpus


@pytest.fixture(scope="module")
def setup():
    corpus = generate_glyph_corpus(num_base=6, num_val=2, num_novel=5, per_class=20, seed=2)
    arch = replace(DESK_ARCH, num_classes=6)
    ckpts = {lat: init_params(arch, seed=k, dtype=np.float64) for k, lat in enumerate(("off", "cls", "cls+reg"))}
    return corpus, ckpts


def test_ladder_structure(setup):
    corpus, ckpts = setup
    rows = run_ablation(corpus, AblationConfig(episodes=20), ckpts)
    assert len(rows) == 6 == len(LADDER)
    assert [(r["lat"], r["lsm"], r["lkt"]) for r in rows] == [row[:3] for row in LADDER]
    for r in rows:
        assert 0.0 <= r["acc_1shot"] <= 1.0 and 0.0 <= r["acc_5shot"] <= 1.0


def test_unit_beta_row_repeats_previous_row(setup):
    corpus, ckpts = setup
    rows = run_ablation(corpus, AblationConfig(episodes=30, beta=1.0, shots=(1,)), ckpts)
    assert rows[5]["acc_1shot"] == rows[4]["acc_1shot"]
    assert rows[5]["ci_1shot"] == rows[4]["ci_1shot"]


def test_zero_gamma_row_repeats_local_row(setup):
    corpus, ckpts = setup
    rows = run_ablation(corpus, AblationConfig(episodes=30, gamma=0.0, shots=(1,)), ckpts)
    assert rows[4]["acc_1shot"] == rows[3]["acc_1shot"]


def test_ablation_csv(setup, tmp_path):
    corpus, ckpts = setup
    rows = run_ablation(corpus, AblationConfig(episodes=5), ckpts)
    write_ablation_csv(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == list(ROW_FIELDS) and len(lines) == 7
