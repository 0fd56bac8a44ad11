import numpy as np

import wpsseg.ablation as ablation_mod
from wpsseg.ablation import ROW_NAMES, AblationRow, AblationTable, ablate
from wpsseg.evaluate import TTAPolicy
from wpsseg.losses import NonFiniteError
from wpsseg.trainer import TrainConfig

CFG = TrainConfig(crop=32, batch_clean=4, batch_degraded=4, epochs=1, seed=1)


def test_three_rows_in_fixed_order(tiny_scenes, tmp_path):
    table = ablate(CFG, tiny_scenes, tiny_scenes[:4], 4, TTAPolicy(), ckpt_dir=str(tmp_path))
    assert [r.setting for r in table.rows] == list(ROW_NAMES)
    assert all(r.ok and 0 <= r.miou <= 1 for r in table.rows)
    lines = table.to_csv().splitlines()
    assert lines[0] == "setting,miou,mdice,status" and [l.split(",")[0] for l in lines[1:]] == list(ROW_NAMES)
    assert (tmp_path / "semi.wpsckpt").exists() and (tmp_path / "clean_only.wpsckpt").exists()
    # second call reloads the checkpoints and reproduces the table
    again = ablate(CFG, tiny_scenes, tiny_scenes[:4], 4, TTAPolicy(), ckpt_dir=str(tmp_path))
    assert again.to_csv() == table.to_csv()


def test_failing_row_keeps_the_others(tiny_scenes, monkeypatch):
    real = ablation_mod.train

    def flaky(cfg, *a, **k):
        if cfg.mode == "semi":
            raise NonFiniteError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(ablation_mod, "train", flaky)
    table = ablate(CFG, tiny_scenes, tiny_scenes[:4], 4)
    assert table.row("clean_only").ok
    assert not table.row("clean+degraded").ok and "boom" in table.row("clean+degraded+tta").error
    assert "FAILED" in table.to_text() and table.to_csv().count("failed") == 2


def test_text_table_lists_scores():
    t = AblationTable([AblationRow(n, 0.5, 0.6) for n in ROW_NAMES])
    assert t.to_text().count("0.5000") == 3
    assert np.isclose(t.row("clean_only").mdice, 0.6)
