"""Ablation variants and the suite that trains and scores them on shared splits."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

from ..dsnet import DSNet, DsnetConfig, count_params
from ..scae import ScaeConfig, mode_channels
from ..slide import compression_report
from .baseline import NaiveCNN, NaiveConfig
from .train import DataSpec, TrainingConfig, evaluate, train_dsnet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    table: str  # "components", "levels", "encoding" or "baseline"
    name: str
    overrides: tuple = ()  # (field, value) pairs applied to DsnetConfig
    levels: int = 3
    mode: str = "separated"
    kind: str = "dsnet"  # or "naive"
    reference: bool = False

    def data_spec(self) -> DataSpec:
        return DataSpec(self.levels, self.mode)

    def build(self, base: DsnetConfig | None = None, scae_config: ScaeConfig | None = None, seed: int = 0):
        if self.kind == "naive":
            return NaiveCNN(NaiveConfig(seed=seed))
        cfg = replace(base or DsnetConfig(), levels=self.levels, seed=seed, **dict(self.overrides))
        channels = mode_channels(scae_config or ScaeConfig(), self.mode)
        if channels != cfg.embed_channels:
            cfg = cfg.with_embedding_channels(channels)
        return DSNet(cfg)


COMPONENT_VARIANTS = (
    Variant("components", "full", reference=True),
    Variant("components", "w/o embedding stream", (("use_embedding", False),)),
    Variant("components", "w/o thumbnail stream", (("use_thumbnail", False),)),
    Variant("components", "w/o sparse conv", (("sparse", False),)),
    Variant("components", "w/o multi-scale", (("multi_scale", False),)),
    Variant("components", "w/o concurrent bottleneck", (("concurrent_bottleneck", False),)),
    Variant("components", "w/o spatial bottleneck", (("spatial_bottleneck", False),)),
    Variant("components", "w/o stream attention", (("stream_attention", False),)),
    Variant("components", "w/o channel attention", (("channel_attention", False),)),
)

LEVEL_VARIANTS = tuple(
    Variant("levels", "{" + ",".join(str(i) for i in range(n)) + "}", levels=n, reference=(n == 3)) for n in (1, 2, 3, 4)
)

ENCODING_VARIANTS = tuple(
    Variant("encoding", mode, mode=mode, reference=(mode == "separated"))
    for mode in ("foreground", "background", "mixed", "separated")
)

BASELINE_VARIANTS = (Variant("baseline", "naive", kind="naive"),)

SUITES = {
    "components": COMPONENT_VARIANTS,
    "levels": LEVEL_VARIANTS,
    "encoding": ENCODING_VARIANTS,
    "baseline": BASELINE_VARIANTS,
}

HEADLINE = (COMPONENT_VARIANTS[0], COMPONENT_VARIANTS[1], COMPONENT_VARIANTS[2], BASELINE_VARIANTS[0])


def select_variants(names) -> list[Variant]:
    """Expand suite names ("components", "levels", ...) or "headline" / "all"."""
    out = []
    for name in names:
        if name == "all":
            group = [v for s in SUITES.values() for v in s]
        elif name == "headline":
            group = list(HEADLINE)
        elif name in SUITES:
            group = list(SUITES[name])
        else:
            raise ValueError(f"unknown variant group {name!r}; choose from {sorted(SUITES) + ['headline', 'all']}")
        out.extend(v for v in group if v not in out)
    return out


@dataclass
class AblationRow:
    table: str
    variant: str
    reference: bool
    levels: int
    mode: str
    params: int
    auc: float | None
    accuracy: float
    precision: float
    recall: float
    f1: float
    best_epoch: int
    compression_ratio: float | None = None


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # variant key -> EvalReport
    histories: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def row(self, table: str, variant: str) -> AblationRow:
        for r in self.rows:
            if r.table == table and r.variant == variant:
                return r
        raise KeyError((table, variant))

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def variant_key(v: Variant) -> str:
    return f"{v.table}:{v.name}"


def run_ablation_suite(train, val, variants, config: TrainingConfig = TrainingConfig(),
                       base: DsnetConfig | None = None, scae_config: ScaeConfig | None = None,
                       patch_size: int = 256, k: int = 128, checkpoint_dir=None, keep_models=False) -> AblationResult:
    """Train and evaluate each variant with the same splits and seeds."""
    result = AblationResult()
    trained = {}
    for v in variants:
        key = variant_key(v)
        # identical variants in several tables share one run
        ident = (v.kind, v.overrides, v.levels, v.mode)
        if ident in trained:
            model, hist, report, best = trained[ident]
        else:
            log.info("training variant %s", key)
            model = v.build(base, scae_config, config.seed)
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = f"{checkpoint_dir}/{key.replace(':', '_').replace('/', '').replace(' ', '_')}.ckpt"
            res = train_dsnet(model, train, val, config, v.data_spec(), ckpt)
            report = evaluate(model, val, v.data_spec())
            hist, best = res.history, res.best_epoch
            trained[ident] = (model, hist, report, best)
        m = report.metrics
        ratio = None
        if v.table == "levels":
            channels = getattr(getattr(model, "config", None), "embed_channels", 128)
            ratio = compression_report(patch_size, channels, k, v.levels).combined_ratio
        result.rows.append(AblationRow(v.table, v.name, v.reference, v.levels, v.mode, count_params(model)["total"],
                                       m["auc"], m["accuracy"], m["precision"], m["recall"], m["f1"], best, ratio))
        result.reports[key] = report
        result.histories[key] = hist
        if keep_models:
            result.models[key] = model
    return result
