"""Training loop: per-source supervised losses, cross-domain mixing losses,
multi-domain transfer through the integration head, one Adam step on the
student and one EMA step on the teacher per iteration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mscada import checkpoint as ckpt
from mscada import hypergraph, mixing, pseudo
from mscada.metrics import MetricsReport, evaluate
from mscada.model import EmaTeacher, ModelConfig, MultiBranchModel, ema_update, init_model
from mscada.optim import Adam
from mscada.pseudo import ClassRegistry
from mscada.synthdata import CLASS_NAMES, SceneSample, read_dataset, read_images, read_manifest
from mscada.tensor import Tensor, masked_weighted_cross_entropy, no_grad

ABLATIONS = ("none", "no-mixing", "no-hgcn", "combined-source",
             "best-expert", "summation", "ensemble")

CSV_HEADER = "iter,loss_sup,loss_ssl,loss_sslM,mIoU,mF1"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    scenario: str | None = None
    iterations: int = 2000
    batch_size: int = 4           # per domain
    lr_backbone: float = 6e-5
    lr_head: float = 6e-4
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.968
    class_ratio: float = 0.5
    region_ratio: float = 0.4
    ema_decay: float = 0.999
    backbone_channels: int = 64
    expert_channels: int = 64
    k_spatial: int | None = None
    k_feature: int | None = None
    seed: int = 0
    eval_interval: int = 250
    checkpoint_interval: int = 0  # 0: final checkpoint only
    ablation: str = "none"
    use_teacher_for_eval: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        for name in ("lr_backbone", "lr_head", "tau", "class_ratio", "region_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")

    @property
    def combined_source(self) -> bool:
        return self.ablation == "combined-source"

    @property
    def mixing_enabled(self) -> bool:
        # a single pooled branch has no donor to mix with
        return self.ablation not in ("no-mixing", "combined-source")

    @property
    def head_enabled(self) -> bool:
        return self.ablation != "no-hgcn"

    @property
    def fusion_strategy(self) -> str:
        return {"best-expert": "best_expert", "summation": "summation",
                "ensemble": "ensemble"}.get(self.ablation, "confidence")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class LoadedData:
    sources: list[list[SceneSample]]
    target_train: list[np.ndarray]      # images only by construction
    target_test: list[SceneSample]
    registry: ClassRegistry
    class_names: tuple[str, ...]
    height: int
    width: int


def load_training_data(root, combined: bool = False) -> LoadedData:
    root = Path(root)
    source_dirs = sorted(d.name for d in root.iterdir()
                         if d.is_dir() and d.name.startswith("source_"))
    if not source_dirs:
        raise FileNotFoundError(f"no source_* domains under {root}")
    sources = []
    union: set[int] = set()
    for name in source_dirs:
        manifest, samples = read_dataset(root, name)
        union |= set(manifest["classes"])
        sources.append(samples)
    test_manifest, target_test = read_dataset(root, "target_test")
    target_train = read_images(root, "target_train")
    registry = ClassRegistry(tuple(sorted(union)), tuple(test_manifest["classes"]))
    if combined:
        pooled: list[SceneSample] = []
        for samples in sources:
            pooled.extend(samples)
        sources = [pooled]
    names = tuple(CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
                  for c in registry.union_classes)
    manifest0 = read_manifest(root, source_dirs[0])
    return LoadedData(sources, target_train, target_test, registry, names,
                      manifest0["height"], manifest0["width"])


@dataclass
class TrainState:
    config: TrainConfig
    data: LoadedData
    model: MultiBranchModel
    teacher: EmaTeacher
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0
    last_losses: dict = field(default_factory=dict)


def build_state(config: TrainConfig, data: LoadedData) -> TrainState:
    k = len(data.sources)
    if not config.combined_source and k < 2:
        raise ValueError(f"multi-source training needs at least 2 sources, found {k}")
    model_cfg = ModelConfig(
        num_sources=k,
        backbone_channels=config.backbone_channels,
        expert_channels=config.expert_channels,
        num_union_classes=data.registry.num_union,
        num_target_classes=data.registry.num_target,
        height=data.height, width=data.width,
        ema_decay=config.ema_decay,
        k_spatial=config.k_spatial, k_feature=config.k_feature)
    model = init_model(model_cfg, config.seed)
    teacher = EmaTeacher(model)
    backbone = {n: p for n, p in model.parameters().items() if n.startswith("backbone.")}
    rest = {n: p for n, p in model.parameters().items() if not n.startswith("backbone.")}
    optimizer = Adam([(backbone, config.lr_backbone), (rest, config.lr_head)])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    return TrainState(config, data, model, teacher, optimizer, rng)


def sample_batches(state: TrainState) -> dict:
    """Per-iteration batch: one index draw per source domain, one for target."""
    cfg, data, rng = state.config, state.data, state.rng
    batch = {}
    src_imgs, src_labels = [], []
    for samples in data.sources:
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        src_imgs.append(np.stack([samples[j].image for j in idx]))
        src_labels.append(np.stack([samples[j].label for j in idx]))
    t_idx = rng.integers(0, len(data.target_train), size=cfg.batch_size)
    batch["source_images"] = src_imgs
    batch["source_labels"] = src_labels
    batch["target_images"] = np.stack([data.target_train[j] for j in t_idx])
    return batch


def supervised_losses(model: MultiBranchModel, source_images, source_labels) -> list[Tensor]:
    """Per-source cross-entropy of branch i on source i, unit weights."""
    losses = []
    for i, (imgs, labels) in enumerate(zip(source_images, source_labels), start=1):
        logits = model.forward_branch(i, Tensor(imgs))
        losses.append(masked_weighted_cross_entropy(logits, labels, np.ones(labels.shape)))
    return losses


def _branch_logits_all(model_like, x: np.ndarray) -> np.ndarray:
    """All branch logits in one pass (shared backbone), (k, B, C, H, W)."""
    with no_grad():
        m = getattr(model_like, "model", model_like)
        base = m.backbone(Tensor(x))
        return np.stack([m.classify(i, m.expert(i, base)).data
                         for i in range(1, m.num_sources + 1)])


def _pick_donor(i: int, k: int, rng: np.random.Generator) -> int:
    if k == 2:
        return 2 if i == 1 else 1
    others = [j for j in range(1, k + 1) if j != i]
    return others[int(rng.integers(len(others)))]


def train_step(state: TrainState, batches: dict) -> dict:
    """One full iteration: supervised losses, mixing losses, pseudo-label
    transfer loss, weighted total, Adam step, then the teacher EMA step."""
    cfg = state.config
    model, teacher, rng = state.model, state.teacher, state.rng
    registry = state.data.registry
    k = model.num_sources
    x_tgt = batches["target_images"]
    batch_size, _, height, width = x_tgt.shape

    sup = supervised_losses(model, batches["source_images"], batches["source_labels"])
    loss_sup = sup[0]
    for term in sup[1:]:
        loss_sup = loss_sup + term

    loss_ssl = Tensor(0.0)
    if cfg.mixing_enabled and cfg.alpha > 0 and k >= 2:
        teacher_logits = _branch_logits_all(teacher, x_tgt)
        teacher_pseudo = teacher_logits.argmax(axis=2)  # (k, B, H, W), union space
        student_logits = _branch_logits_all(model, x_tgt)
        for i in range(1, k + 1):
            donor = _pick_donor(i, k, rng)
            mixed = []
            for b in range(batch_size):
                y_src = batches["source_labels"][i - 1][b]
                if b % 2 == 0:
                    mask = mixing.make_class_mask(y_src, cfg.class_ratio, rng)
                else:
                    mask = mixing.make_region_mask(height, width, cfg.region_ratio, rng)
                mb = mixing.apply_mix(batches["source_images"][i - 1][b], y_src,
                                      x_tgt[b], teacher_pseudo[donor - 1][b], mask)
                mb.weight = mixing.confidence_weight_map(
                    student_logits[i - 1][b], mask, cfg.tau)
                mixed.append(mb)
            term = mixing.branch_ssl_loss(model, i, mixed)
            loss_ssl = term if i == 1 else loss_ssl + term

    loss_sslm = Tensor(0.0)
    if cfg.head_enabled and cfg.beta > 0:
        fused, conf = pseudo.fuse_teacher_predictions(teacher, x_tgt, cfg.fusion_strategy)
        filtered = pseudo.class_filter(fused, registry)
        remapped = registry.to_target_space(filtered)
        gate = pseudo.confidence_gate(conf, cfg.tau)
        transforms = [pseudo.sample_strong_transform(height, width, rng)
                      for _ in range(batch_size)]
        x_strong = np.stack([pseudo.apply_strong_transform(t, x_tgt[b])
                             for b, t in enumerate(transforms)])
        head_logits = model.forward_target(Tensor(x_strong))
        loss_sslm = hypergraph.multi_domain_loss(head_logits, remapped, gate, transforms)

    total = loss_sup + loss_ssl * cfg.alpha + loss_sslm * cfg.beta
    breakdown = {
        "loss_sup": loss_sup.item(),
        "loss_ssl": loss_ssl.item(),
        "loss_sslM": loss_sslm.item(),
        "total": total.item(),
    }
    if not all(np.isfinite(v) for v in breakdown.values()):
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration + 1}: {breakdown}")

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    ema_update(teacher, model, cfg.ema_decay)
    state.iteration += 1
    state.last_losses = breakdown
    return breakdown


def _resolved_head_ks(model: MultiBranchModel) -> tuple[int, int]:
    return model.head.k_spatial, model.head.k_feature


def save_training_checkpoint(path, state: TrainState) -> None:
    cfg = state.model.config
    entries: dict[str, np.ndarray] = {}
    for name, p in state.model.parameters().items():
        entries[f"student.{name}"] = p.data
    for name, p in state.teacher.parameters().items():
        entries[f"teacher.{name}"] = p.data
    ks, kf = _resolved_head_ks(state.model)
    meta = {
        "meta.num_sources": cfg.num_sources,
        "meta.backbone_channels": cfg.backbone_channels,
        "meta.expert_channels": cfg.expert_channels,
        "meta.num_union_classes": cfg.num_union_classes,
        "meta.num_target_classes": cfg.num_target_classes,
        "meta.height": cfg.height,
        "meta.width": cfg.width,
        "meta.k_spatial": ks,
        "meta.k_feature": kf,
        "meta.iteration": state.iteration,
    }
    for key, val in meta.items():
        entries[key] = np.array(float(val))
    entries["meta.target_classes"] = np.array(state.data.registry.target_classes, dtype=np.float64)
    ckpt.save_checkpoint(path, entries)


def load_trained_model(path) -> tuple[MultiBranchModel, EmaTeacher, ClassRegistry, int]:
    entries = ckpt.load_checkpoint(path)
    cfg = ModelConfig(
        num_sources=int(entries["meta.num_sources"]),
        backbone_channels=int(entries["meta.backbone_channels"]),
        expert_channels=int(entries["meta.expert_channels"]),
        num_union_classes=int(entries["meta.num_union_classes"]),
        num_target_classes=int(entries["meta.num_target_classes"]),
        height=int(entries["meta.height"]),
        width=int(entries["meta.width"]),
        k_spatial=int(entries["meta.k_spatial"]),
        k_feature=int(entries["meta.k_feature"]))
    model = init_model(cfg, seed=0)
    teacher = EmaTeacher(model)
    for name, p in model.parameters().items():
        p.data = entries[f"student.{name}"].copy()
    for name, p in teacher.parameters().items():
        p.data = entries[f"teacher.{name}"].copy()
    target = tuple(int(c) for c in entries["meta.target_classes"])
    registry = ClassRegistry(tuple(range(cfg.num_union_classes)), target)
    return model, teacher, registry, int(entries["meta.iteration"])


def _format_csv_row(it: int, losses: dict, report: MetricsReport) -> str:
    return (f"{it},{losses['loss_sup']:.10g},{losses['loss_ssl']:.10g},"
            f"{losses['loss_sslM']:.10g},{report.miou:.10g},{report.mf1:.10g}")


def run_training(config: TrainConfig, data_root, out_dir,
                 render_figures: bool = True) -> tuple[MetricsReport, list[str]]:
    """Train per the configuration; write metrics.csv, checkpoints and the
    training-curve figure under out_dir. Returns the final report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    data = load_training_data(data_root, combined=config.combined_source)
    state = build_state(config, data)
    target_names = tuple(data.class_names[c] for c in data.registry.target_classes)

    rows = [CSV_HEADER]
    report: MetricsReport | None = None
    eval_model = state.teacher.model if config.use_teacher_for_eval else state.model
    for it in range(1, config.iterations + 1):
        losses = train_step(state, sample_batches(state))
        is_eval = (config.eval_interval and it % config.eval_interval == 0)
        if is_eval or it == config.iterations:
            report = evaluate(eval_model, data.target_test, data.registry,
                              use_head=config.head_enabled, iteration=it,
                              class_names=target_names)
            rows.append(_format_csv_row(it, losses, report))
            (out / "metrics.csv").write_text("\n".join(rows) + "\n")
        if config.checkpoint_interval and it % config.checkpoint_interval == 0:
            save_training_checkpoint(out / f"model_{it:06d}.ckpt", state)
    save_training_checkpoint(out / "model_final.ckpt", state)
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    if render_figures:
        from mscada.figures import save_training_curves
        save_training_curves(rows, out / "training_curves.png")
    assert report is not None
    return report, rows


MIX_GRID = ((0.25, 0.5, 0.75), (0.2, 0.4, 0.6))
LOSS_GRID = ((1.0, 1.0), (0.5, 1.0), (1.0, 0.5), (2.0, 1.0), (1.0, 2.0))


def run_sweep(config: TrainConfig, data_root, out_dir, grid: str = "mix") -> list[dict]:
    """Grid search over mixing ratios or loss weights; one CSV row per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    if grid == "mix":
        cells = [(c, r) for c in MIX_GRID[0] for r in MIX_GRID[1]]
        header = "class_ratio,region_ratio,mIoU,mF1"
        for class_ratio, region_ratio in cells:
            cfg = dataclasses.replace(config, class_ratio=class_ratio,
                                      region_ratio=region_ratio, eval_interval=0)
            rep, _ = run_training(cfg, data_root,
                                  out / f"mix_{class_ratio:g}_{region_ratio:g}",
                                  render_figures=False)
            results.append({"class_ratio": class_ratio, "region_ratio": region_ratio,
                            "mIoU": rep.miou, "mF1": rep.mf1})
        lines = [header] + [f"{r['class_ratio']:g},{r['region_ratio']:g},"
                            f"{r['mIoU']:.10g},{r['mF1']:.10g}" for r in results]
    elif grid == "loss":
        header = "alpha,beta,mIoU,mF1"
        for alpha, beta in LOSS_GRID:
            cfg = dataclasses.replace(config, alpha=alpha, beta=beta, eval_interval=0)
            rep, _ = run_training(cfg, data_root, out / f"loss_{alpha:g}_{beta:g}",
                                  render_figures=False)
            results.append({"alpha": alpha, "beta": beta, "mIoU": rep.miou, "mF1": rep.mf1})
        lines = [header] + [f"{r['alpha']:g},{r['beta']:g},"
                            f"{r['mIoU']:.10g},{r['mF1']:.10g}" for r in results]
    else:
        raise ValueError(f"unknown sweep grid {grid!r}, expected 'mix' or 'loss'")
    (out / f"sweep_{grid}.csv").write_text("\n".join(lines) + "\n")
    from mscada.figures import save_sweep_figure
    save_sweep_figure(results, grid, out / f"sweep_{grid}.png")
    return results
