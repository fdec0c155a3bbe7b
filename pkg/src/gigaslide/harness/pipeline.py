"""Corpus construction: render, sift, train the patch encoder, encode, cache.

Layout of a corpus directory::

    corpus.json          plan, corpus config and encoder summary
    scae.ckpt            trained patch encoder
    scae_history.json
    records/<id>.rec     one SlideRecord per slide

Every stage is skipped when its output already exists, so an interrupted
build resumes where it stopped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..scae import ENCODING_MODES, Scae, ScaeConfig, ScaeTrainConfig, encode_slide_modes, sample_training_patches, train_scae
from ..slide import sift_patches
from .artifacts import load_model, save_model, write_text
from .corpus import CorpusConfig, SlideRecord, build_record, plan_corpus, preprocess_slide, render

log = logging.getLogger(__name__)


@dataclass
class EncoderStage:
    """How the patch encoder is fitted before any slide is encoded."""

    n_slides: int = 40  # train slides sampled for patches
    per_slide: int = 40
    val_fraction: float = 0.2
    epochs: int = 6
    lr: float = 0.03
    batch: int = 8
    rho: float = 0.9
    seed: int = 0


def _records_dir(root: Path) -> Path:
    return root / "records"


def encoder_patches(plans, cfg: CorpusConfig, stage: EncoderStage):
    """Training and validation patch arrays drawn from the first train slides."""
    rng = np.random.default_rng(stage.seed)
    chosen = [p for p in plans if p.split == "train"][: stage.n_slides]
    patches = []
    for plan in chosen:
        slide = render(plan)
        grid = sift_patches(slide, cfg.patch_size)
        patches.append(sample_training_patches([slide], [grid], cfg.patch_size, stage.per_slide, rng))
    data = np.concatenate(patches) if patches else np.zeros((0, 3, 112, 112), np.float32)
    data = data[rng.permutation(len(data))]
    n_val = max(1, int(round(stage.val_fraction * len(data))))
    return data[n_val:], data[:n_val]


def fit_encoder(root, plans, cfg: CorpusConfig, stage: EncoderStage) -> Scae:
    root = Path(root)
    path = root / "scae.ckpt"
    if path.exists():
        model, _ = load_model(path)
        return model
    train, val = encoder_patches(plans, cfg, stage)
    log.info("encoder patches: %d train, %d val", len(train), len(val))
    scfg = ScaeConfig(rho=stage.rho, seed=stage.seed)
    tcfg = ScaeTrainConfig(lr=stage.lr, batch=stage.batch, epochs=stage.epochs, seed=stage.seed)
    model, hist = train_scae(train, val, tcfg, scae_config=scfg)
    write_text(root / "scae_history.json", json.dumps(asdict(hist), indent=2, sort_keys=True))
    save_model(path, model, scfg, "scae")
    return model


def build_slide_record(plan, cfg: CorpusConfig, encoder: Scae, modes=ENCODING_MODES) -> SlideRecord:
    slide = render(plan)
    pre = preprocess_slide(slide, cfg.patch_size, cfg.k)
    encoded = encode_slide_modes(slide, encoder, pre.grid, cfg.patch_size, modes)
    return build_record(plan, slide, pre, encoded)


def build_corpus(root, cfg: CorpusConfig = CorpusConfig(), stage: EncoderStage = EncoderStage(),
                 modes=ENCODING_MODES, progress=None) -> list[SlideRecord]:
    """Build (or resume) a corpus directory and return its records in plan order."""
    root = Path(root)
    rec_dir = _records_dir(root)
    rec_dir.mkdir(parents=True, exist_ok=True)
    manifest = root / "corpus.json"
    header = {"corpus": asdict(cfg), "encoder": asdict(stage), "fingerprint": cfg.fingerprint(), "modes": list(modes)}
    if manifest.exists():
        prior = json.loads(manifest.read_text())
        if prior.get("fingerprint") != header["fingerprint"] or prior.get("encoder") != header["encoder"]:
            raise ValueError(f"{root} holds a corpus built with a different configuration")
    plans = plan_corpus(cfg)
    header["slides"] = [{"slide_id": p.slide_id, "split": p.split, "kind": p.kind, "label": p.label} for p in plans]
    write_text(manifest, json.dumps(header, indent=2, sort_keys=True))
    encoder = fit_encoder(root, plans, cfg, stage)
    records = []
    for i, plan in enumerate(plans):
        path = rec_dir / f"{plan.slide_id}.rec"
        if path.exists():
            rec = SlideRecord.load(path)
        else:
            rec = build_slide_record(plan, cfg, encoder, modes)
            rec.save(path)
        records.append(rec)
        if progress is not None:
            progress(i + 1, len(plans), rec)
    return records


def open_corpus(root) -> tuple[list[SlideRecord], list[SlideRecord]]:
    """(train, val) records of a built corpus, in plan order."""
    root = Path(root)
    header = json.loads((root / "corpus.json").read_text())
    rec_dir = _records_dir(root)
    train, val = [], []
    for entry in header["slides"]:
        path = rec_dir / f"{entry['slide_id']}.rec"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; rebuild the corpus")
        (train if entry["split"] == "train" else val).append(SlideRecord.load(path))
    return train, val


def split_records(records) -> tuple[list[SlideRecord], list[SlideRecord]]:
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "val"]
