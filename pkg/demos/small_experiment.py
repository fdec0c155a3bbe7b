"""Small end-to-end run: corpus, encoder, DSNet vs baseline, Grad-CAM.

Takes roughly 10 minutes on one CPU core.

    python demos/small_experiment.py [work_dir]
"""

import logging
import sys
from pathlib import Path

import numpy as np

from gigaslide.dsnet import DSNet, count_params
from gigaslide.harness import (
    CorpusConfig,
    EncoderStage,
    TrainingConfig,
    build_corpus,
    evaluate,
    localization_scores,
    naive_baseline,
    split_records,
    train_dsnet,
)
from gigaslide.harness.localize import slide_cam
from gigaslide.harness.reports import save_heatmap, text_table, write_eval_report


def main(work: Path) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    records = build_corpus(work / "corpus", CorpusConfig(n_train=40, n_val=16, seed=1),
                           EncoderStage(n_slides=8, per_slide=24, epochs=2))
    train, val = split_records(records)
    cfg = TrainingConfig(epochs=15, warmup_epochs=2, decay_every=10, seed=1)

    model = DSNet()
    res = train_dsnet(model, train, val, cfg, checkpoint_path=work / "dsnet.ckpt")
    full = evaluate(model, val)
    write_eval_report(work / "report", full, "dsnet")
    base, params, _ = naive_baseline(train, val, cfg)

    rows = [
        {"model": "dsnet", "params": count_params(model)["total"], "auc": full.metrics["auc"],
         "accuracy": full.metrics["accuracy"], "best_epoch": res.best_epoch},
        {"model": "naive", "params": params, "auc": base.metrics["auc"], "accuracy": base.metrics["accuracy"],
         "best_epoch": None},
    ]
    print(text_table(rows, title="validation"))

    entries = localization_scores(model, val)
    print(f"CAM inside > outside on {sum(e.hit for e in entries)}/{len(entries)} positive slides")
    for rec in [r for r in val if r.label == 1][:3]:
        cam = slide_cam(model, rec)
        base_img = 1 - rec.thumbnail[:3].transpose(1, 2, 0)
        save_heatmap(work / f"{rec.slide_id}_cam.png", np.kron(cam, np.ones((8, 8))), np.kron(base_img, np.ones((8, 8, 1))))
    print(f"artifacts in {work}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run"))
