"""Command-line entry point: ``gigaslide <command> [options]``.

Every command accepts ``--config FILE`` (JSON). Sections ``corpus``,
``encoder``, ``scae``, ``training`` and ``dsnet`` fill the matching
dataclasses; explicit command-line options override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("gigaslide")


# ------------------------------------------------------------------ config
def load_config(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise SystemExit(f"{path}: config must be a JSON object")
    return data


def build(cls, section: dict | None, **overrides):
    """Instantiate a dataclass from a config section plus non-None overrides."""
    names = {f.name for f in fields(cls)}
    section = dict(section or {})
    unknown = set(section) - names
    if unknown:
        raise SystemExit(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    section.update({k: v for k, v in overrides.items() if v is not None and k in names})
    for f in fields(cls):
        if isinstance(section.get(f.name), list):
            section[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in section[f.name])
    return cls(**section)


def _dsnet_config(section):
    from .dsnet import DsnetConfig

    return DsnetConfig.from_json(json.dumps(section or {}))


# ------------------------------------------------------------------ helpers
def _slide_dirs(root: Path) -> list[Path]:
    return sorted(p.parent for p in (root / "slides").glob("*/manifest.json"))


def _grid_from_record(rec):
    from .slide import KEPT, SIFTED, PatchGrid

    status = np.where(rec.mask > 0, KEPT, SIFTED).astype(np.int8)
    zeros = np.zeros(status.shape)
    return PatchGrid(rec.patch_size, zeros.astype(int), zeros, status, 0.0, tuple(rec.offset))


def _records(root: Path):
    from .harness.corpus import load_records

    recs = load_records(root / "records")
    if not recs:
        raise SystemExit(f"no records under {root / 'records'}; run preprocess/encode first")
    return recs


def _print(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


# ------------------------------------------------------------------ commands
def cmd_synth_gen(args, cfg):
    from .harness.corpus import CorpusConfig, plan_corpus, render
    from .slide import write_slide

    ccfg = build(CorpusConfig, cfg.get("corpus"), n_train=args.n_train, n_val=args.n_val, seed=args.seed,
                 extent=args.extent)
    plans = plan_corpus(ccfg)
    if args.limit is not None:
        plans = plans[: args.limit]
    out = Path(args.out)
    for plan in plans:
        target = out / "slides" / plan.slide_id
        if (target / "manifest.json").exists():
            continue
        slide = render(plan)
        slide.manifest.extras.update(split=plan.split, kind=plan.kind)
        write_slide(slide, target)
        log.info("wrote %s (%s)", plan.slide_id, plan.kind)
    from .harness.reports import write_json

    write_json(out / "corpus.json", {"corpus": asdict(ccfg), "slides": [
        {"slide_id": p.slide_id, "split": p.split, "kind": p.kind, "label": p.label} for p in plans]})
    _print(f"{len(plans)} slides in {out / 'slides'}\n")


def cmd_preprocess(args, cfg):
    from .harness.corpus import CorpusConfig, SlideRecord, preprocess_slide
    from .slide import open_slide

    ccfg = build(CorpusConfig, cfg.get("corpus"), patch_size=args.patch_size, k=args.k)
    root = Path(args.corpus)
    (root / "records").mkdir(parents=True, exist_ok=True)
    n = 0
    for d in _slide_dirs(root):
        slide = open_slide(d)
        m = slide.manifest
        pre = preprocess_slide(slide, ccfg.patch_size, ccfg.k)
        rec = SlideRecord(m.slide_id, m.extras.get("split", "train"), m.extras.get("kind", "unknown"), int(m.label or 0),
                          pre.thumbnail.data, {}, pre.grid.kept.astype(np.float32), tuple(pre.grid.offset),
                          ccfg.patch_size, pre.thumbnail.k, [(l.cy, l.cx, l.r) for l in m.lesion_objects()])
        rec.save(root / "records" / f"{m.slide_id}.rec")
        n += 1
        log.info("preprocessed %s: grid %s, %d kept", m.slide_id, rec.mask.shape, int(rec.mask.sum()))
    _print(f"preprocessed {n} slides\n")


def cmd_train_scae(args, cfg):
    from .harness.artifacts import save_model
    from .harness.pipeline import EncoderStage
    from .harness.reports import write_json
    from .scae import ScaeConfig, ScaeTrainConfig, sample_training_patches, train_scae
    from .slide import open_slide

    stage = build(EncoderStage, cfg.get("encoder"), n_slides=args.n_slides, per_slide=args.per_slide,
                  epochs=args.epochs, seed=args.seed)
    root = Path(args.corpus)
    recs = [r for r in _records(root) if r.split == "train"][: stage.n_slides]
    rng = np.random.default_rng(stage.seed)
    slides = [open_slide(root / "slides" / r.slide_id) for r in recs]
    data = sample_training_patches(slides, [_grid_from_record(r) for r in recs], recs[0].patch_size,
                                   stage.per_slide, rng) if recs else np.zeros((0, 3, 112, 112), np.float32)
    n_val = max(1, int(round(stage.val_fraction * len(data))))
    if len(data) < 2:
        raise SystemExit("not enough nucleus-rich patches to train the encoder")
    scfg = build(ScaeConfig, cfg.get("scae"), rho=stage.rho, seed=stage.seed)
    tcfg = ScaeTrainConfig(lr=stage.lr, batch=stage.batch, epochs=stage.epochs, seed=stage.seed)
    model, hist = train_scae(data[n_val:], data[:n_val], tcfg, scae_config=scfg)
    out = Path(args.out)
    save_model(out, model, scfg, "scae")
    write_json(out.with_suffix(".history.json"), asdict(hist))
    _print(f"encoder saved to {out}; val mse {hist.initial_val_mse:.6f} -> {hist.val_mse[-1]:.6f} "
           f"(blind {hist.blind_val_mse:.6f})\n")


def cmd_encode(args, cfg):
    from .harness.artifacts import load_model
    from .scae import ENCODING_MODES, encode_slide_modes
    from .slide import open_slide

    root = Path(args.corpus)
    model, _ = load_model(args.scae)
    modes = tuple(args.modes or ENCODING_MODES)
    recs = _records(root)
    for rec in recs:
        slide = open_slide(root / "slides" / rec.slide_id)
        enc = encode_slide_modes(slide, model, _grid_from_record(rec), rec.patch_size, modes)
        rec.embeddings = {m: e.data for m, e in enc.items()}
        rec.save(root / "records" / f"{rec.slide_id}.rec")
        log.info("encoded %s", rec.slide_id)
    _print(f"encoded {len(recs)} slides ({', '.join(modes)})\n")


def _training_args(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["adamw", "sgd", "sgd_nesterov"])


def _split(recs):
    from .harness.pipeline import split_records

    train, val = split_records(recs)
    if not train or not val:
        raise SystemExit("corpus needs both train and val slides")
    return train, val


def cmd_train_dsnet(args, cfg):
    from .dsnet import DSNet, count_params
    from .harness.reports import text_table, write_csv, write_json
    from .harness.train import DataSpec, TrainingConfig, train_dsnet

    tcfg = build(TrainingConfig, cfg.get("training"), epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                 optimizer=args.optimizer)
    dcfg = _dsnet_config(cfg.get("dsnet"))
    if args.seed is not None:
        dcfg.seed = args.seed
    train, val = _split(_records(Path(args.corpus)))
    spec = DataSpec(dcfg.levels, args.mode)
    ch = train[0].embeddings[args.mode].shape[0]
    if ch != dcfg.embed_channels:
        dcfg = dcfg.with_embedding_channels(ch)
    model = DSNet(dcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_dsnet(model, train, val, tcfg, spec, out / "model.ckpt")
    write_csv(out / "history.csv", res.history)
    write_json(out / "params.json", count_params(model))
    write_json(out / "training.json", {"training": asdict(tcfg), "dsnet": asdict(dcfg), "mode": args.mode,
                                       "best_epoch": res.best_epoch, "best_auc": res.best_auc})
    _print(text_table(res.history, title="training history"))
    _print(f"best epoch {res.best_epoch}, val AUC {res.best_auc}; checkpoint {res.checkpoint}\n")


def cmd_eval(args, cfg):
    from .harness.artifacts import load_model
    from .harness.reports import text_table, write_eval_report
    from .harness.train import DataSpec, evaluate

    model, meta = load_model(args.model)
    recs = _records(Path(args.corpus))
    if args.split != "all":
        recs = [r for r in recs if r.split == args.split]
    spec = DataSpec(meta.get("levels", 3), meta.get("mode", "separated"))
    report = evaluate(model, recs, spec)
    write_eval_report(args.out, report)
    m = report.metrics
    _print(text_table([{k: m[k] for k in ("n", "accuracy", "precision", "recall", "f1", "auc", "pearson_s_pixels")}],
                      title=f"evaluation ({args.split})"))


def cmd_ablate(args, cfg):
    from .harness.ablation import run_ablation_suite, select_variants
    from .harness.reports import text_table, write_csv, write_json
    from .harness.train import TrainingConfig
    from .scae import ScaeConfig

    tcfg = build(TrainingConfig, cfg.get("training"), epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                 optimizer=args.optimizer)
    train, val = _split(_records(Path(args.corpus)))
    variants = select_variants(args.variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_ablation_suite(train, val, variants, tcfg, _dsnet_config(cfg.get("dsnet")),
                             build(ScaeConfig, cfg.get("scae")), train[0].patch_size, train[0].k, out)
    rows = res.as_rows()
    write_csv(out / "ablation.csv", rows)
    write_json(out / "ablation.json", {"rows": rows, "training": asdict(tcfg)})
    cols = ["table", "variant", "reference", "params", "auc", "accuracy", "f1", "compression_ratio"]
    for table in dict.fromkeys(r["table"] for r in rows):
        _print(text_table([r for r in rows if r["table"] == table], cols, title=f"[{table}]"))


def cmd_gradcam(args, cfg):
    from .harness.artifacts import load_model
    from .harness.localize import localization_entry, slide_cam
    from .harness.reports import save_heatmap, text_table, write_csv
    from .harness.train import DataSpec

    model, meta = load_model(args.model)
    spec = DataSpec(meta.get("levels", 3), meta.get("mode", "separated"))
    recs = _records(Path(args.corpus))
    if args.slides:
        recs = [r for r in recs if r.slide_id in set(args.slides)]
    else:
        recs = [r for r in recs if r.split == "val" and r.label == 1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in recs:
        cam = slide_cam(model, rec, spec)
        base = rec.thumbnail[:3].transpose(1, 2, 0)
        save_heatmap(out / f"{rec.slide_id}_cam.png", np.kron(cam, np.ones((8, 8))),
                     np.kron(1 - base, np.ones((8, 8, 1))))  # thumbnails are stored inverted
        np.savetxt(out / f"{rec.slide_id}_cam.csv", cam, delimiter=",", fmt="%.6f")
        if rec.lesions:
            e = localization_entry(model, rec, spec)
            rows.append({"slide_id": e.slide_id, "kind": e.kind, "inside": e.inside, "outside": e.outside, "hit": e.hit})
    if rows:
        write_csv(out / "localization.csv", rows)
        _print(text_table(rows, title=f"localization (hit rate {np.mean([r['hit'] for r in rows]):.3f})"))
    _print(f"{len(recs)} heatmaps in {out}\n")


# ------------------------------------------------------------------ parser
def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gigaslide", description="Synthetic slide corpora, patch encoding and dual-stream slide classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-gen", cmd_synth_gen, "render a synthetic slide corpus to tiled storage")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, dest="n_train")
    sp.add_argument("--n-val", type=int, dest="n_val")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--extent", type=int)
    sp.add_argument("--limit", type=int, help="render only the first N planned slides")

    sp = add("preprocess", cmd_preprocess, "sift patches, crop and build thumbnail matrices")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--patch-size", type=int, dest="patch_size")
    sp.add_argument("-k", type=int)

    sp = add("train-scae", cmd_train_scae, "train the sparse patch autoencoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-slides", type=int, dest="n_slides")
    sp.add_argument("--per-slide", type=int, dest="per_slide")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("encode", cmd_encode, "embed kept patches of every preprocessed slide")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--scae", required=True)
    sp.add_argument("--modes", nargs="+", choices=["separated", "foreground", "background", "mixed"])

    sp = add("train-dsnet", cmd_train_dsnet, "train the dual-stream classifier")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", default="separated", choices=["separated", "foreground", "background", "mixed"])
    _training_args(sp)

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a corpus split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="val", choices=["train", "val", "all"])

    sp = add("ablate", cmd_ablate, "train and compare ablation variants")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", nargs="+", default=["headline"],
                    help="groups: components levels encoding baseline headline all")
    _training_args(sp)

    sp = add("gradcam", cmd_gradcam, "write class activation heatmaps")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--slides", nargs="*")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config)
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
