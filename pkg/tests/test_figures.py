"""Figure renderers only need to produce real PNG files."""

import numpy as np

from roadgen import figures as F
from roadgen.metrics import MetricsReport
from roadgen.trainer import RoundRow

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def mk_report():
    return MetricsReport(
        domain="dom0", variant="ce+ct+dg",
        confusion=np.array([[8, 1], [2, 9]], dtype=np.int64),
        per_class={"D00": {"precision": 0.8, "recall": 0.888, "f1": 0.84},
                   "D10": {"precision": 0.9, "recall": 0.818, "f1": 0.857}},
        macro={"precision": 0.85, "recall": 0.853, "f1": 0.849}, n=20)


def mk_rounds(dg):
    return [RoundRow(epoch=e, held_out_source=f"dom{r}", mean_l_tr=1.0 / (1 + e),
                     mean_l_ce_te=1.2 / (1 + e), mean_l_dg_te=dg,
                     wall_ms=3.0)
            for e in range(2) for r in range(2)]


def assert_png(path):
    blob = path.read_bytes()
    assert blob.startswith(PNG_MAGIC)
    assert len(blob) > 1000


def test_confusion_figure(tmp_path):
    out = F.confusion_figure(mk_report(), tmp_path / "cm.png")
    assert_png(out)


def test_curves_figure_with_and_without_penalty(tmp_path):
    assert_png(F.curves_figure(mk_rounds(0.4), tmp_path / "a.png"))
    assert_png(F.curves_figure(mk_rounds(0.0), tmp_path / "b.png"))


def test_ablation_figure(tmp_path):
    averages = {"ce": (0.61, 0.02), "ce+ct": (0.64, 0.03),
                "ce+dg": (0.63, 0.01), "ce+ct+dg": (0.68, 0.02)}
    assert_png(F.ablation_figure(averages, tmp_path / "bars.png"))
    no_spread = {k: (v[0], None) for k, v in averages.items()}
    assert_png(F.ablation_figure(no_spread, tmp_path / "bars2.png"))
