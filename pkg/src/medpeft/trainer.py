"""Training and fine-tuning loops with deterministic seeding, checkpointing
and step/wall-clock accounting.

The validation split is fixed by case index (every fifth case), independent
of the seed, so runs on the same cohort are always comparable.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import save_checkpoint
from .conv_adapter import PeftModel
from .errors import ArchitectureMismatch, EmptyCohort, NonFiniteLoss, ShapeMismatch
from .metrics import LesionMatchingConfig, MetricsReport, dice, evaluate_pair, extract_region
from .peft_engine import FreezePolicy, apply_policy
from .volume_io import AugmentConfig, LabelMap, Volume, augment, save_labels

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    optimizer: str = "adamw"
    loss: str = "dice_ce"
    lr_schedule: str = "cosine"   # "cosine" | "constant"
    seed: int = 0
    amp: bool = False             # kept for config compatibility; CPU runs ignore it
    deterministic: bool = True
    augment: AugmentConfig | None = None

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adamw", "adam"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        if self.augment is not None:
            d["augment"] = dict(self.augment.__dict__)
        return d


@dataclass
class RunRecord:
    run_id: str
    mode: str
    trainable_fraction: float
    steps: int = 0
    wall_seconds: float = 0.0
    epochs: list = field(default_factory=list)  # {"epoch", "train_loss", "val_dice"}
    final_val_dice: float | None = None
    best_val_dice: float | None = None

    def to_json(self, path=None) -> str:
        text = json.dumps(self.__dict__, sort_keys=True, indent=1) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def write_history(self, path):
        with open(path, "w") as f:
            for row in self.epochs:
                f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def composite_loss_parts(logits: torch.Tensor, target: torch.Tensor,
                         eps: float = DICE_EPS):
    """(total, soft_dice_loss, cross_entropy). Soft dice runs over foreground
    classes only and is smoothed so empty classes stay finite."""
    if logits.ndim != target.ndim + 1 or logits.shape[0] != target.shape[0] \
            or logits.shape[2:] != target.shape[1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if target.dtype != torch.long:
        target = target.long()

    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    n_classes = logits.shape[1]
    dices = []
    for c in range(1, n_classes):
        p = probs[:, c]
        y = (target == c).to(probs.dtype)
        num = 2.0 * (p * y).sum() + eps
        den = p.sum() + y.sum() + eps
        dices.append(num / den)
    dice_loss = 1.0 - torch.stack(dices).mean()
    return dice_loss + ce, dice_loss, ce


def composite_loss(logits, target, eps: float = DICE_EPS):
    return composite_loss_parts(logits, target, eps)[0]


# ---------------------------------------------------------------------------
# cohort plumbing
# ---------------------------------------------------------------------------

def split_cohort(n_cases: int):
    """Fixed 80/20 split by case index (every fifth case validates)."""
    val = [i for i in range(n_cases) if i % 5 == 4]
    train = [i for i in range(n_cases) if i % 5 != 4]
    return train, val


def _label_lookup(semantics):
    values = sorted(semantics)
    return {v: i for i, v in enumerate(values)}, values


def case_tensors(volume: Volume, labels: LabelMap):
    img = torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))
    lut, _ = _label_lookup(labels.label_semantics)
    idx = np.vectorize(lut.__getitem__, otypes=[np.int64])(labels.data)
    return img, torch.from_numpy(idx)


def _batch(cases, indices, augment_cfg, rng):
    imgs, labs = [], []
    for i in indices:
        v, m = cases[i]
        if augment_cfg is not None:
            v, m = augment(v, m, int(rng.integers(0, 2**31 - 1)), augment_cfg)
        img, lab = case_tensors(v, m)
        imgs.append(img)
        labs.append(lab)
    return torch.stack(imgs), torch.stack(labs)


def predict_labels(model: nn.Module, volume: Volume,
                   semantics=None) -> LabelMap:
    """Argmax class prediction for one case, mapped back to label values."""
    semantics = semantics or {0: "BACKGROUND", 1: "NETC", 2: "SNFH", 3: "ET"}
    cfg = model.cfg if hasattr(model, "cfg") else None
    if cfg is not None and volume.n_channels != cfg.in_channels:
        raise ArchitectureMismatch(
            f"model expects {cfg.in_channels} channels, case has {volume.n_channels}"
        )
    _, values = _label_lookup(semantics)
    with torch.no_grad():
        img = torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))
        logits = model(img[None])
        pred_idx = logits.argmax(dim=1)[0].numpy()
    pred = np.asarray(values, dtype=np.int16)[pred_idx]
    return LabelMap(data=pred, label_semantics=dict(semantics))


def mean_region_dice(model: nn.Module, cases) -> float:
    """Plain Dice averaged over cases and the three evaluation regions."""
    model.eval()
    vals = []
    for v, m in cases:
        pred = predict_labels(model, v, m.label_semantics)
        for region in ("ET", "TC", "WT"):
            vals.append(dice(extract_region(pred, region).data,
                             extract_region(m, region).data))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def model_manifest(model: nn.Module) -> dict:
    """Checkpoint manifest fields describing how to rebuild the model."""
    if isinstance(model, PeftModel):
        return {
            "kind": "peft",
            "model_config": model.backbone.cfg.to_dict(),
            "adapter_config": model.adapter_config.to_dict(),
            "sites": list(model.sites),
        }
    return {"kind": "backbone", "model_config": model.cfg.to_dict()}


def train(model: nn.Module, cases, cfg: TrainConfig, policy: FreezePolicy,
          out_dir=None, run_id: str | None = None):
    """Optimize `model` on `cases` (a sequence of (Volume, LabelMap)).
    Returns (RunRecord, partition). Deterministic given cfg.seed."""
    cfg.validate()
    if len(cases) == 0:
        raise EmptyCohort("cannot train on an empty cohort")

    partition = apply_policy(model, policy)
    train_idx, val_idx = split_cohort(len(cases))
    if not train_idx:  # tiny cohorts: train on everything, skip validation
        train_idx, val_idx = list(range(len(cases))), []

    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(cfg.seed)

    params = [p for p in model.parameters() if p.requires_grad]
    opt_cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    optimizer = opt_cls(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)

    run_id = run_id or f"{partition.mode}-seed{cfg.seed}"
    record = RunRecord(run_id=run_id, mode=partition.mode,
                       trainable_fraction=partition.trainable_fraction)
    best_state = None
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            imgs, labs = _batch(cases, batch_idx, cfg.augment, rng)
            optimizer.zero_grad()
            loss = composite_loss(model(imgs), labs)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} step {record.steps} "
                    f"(lr={optimizer.param_groups[0]['lr']:.3g})"
                )
            loss.backward()
            optimizer.step()
            record.steps += 1
            losses.append(float(loss.detach()))
        if scheduler is not None:
            scheduler.step()

        val_dice = None
        if val_idx:
            val_dice = mean_region_dice(model, [cases[i] for i in val_idx])
            if record.best_val_dice is None or val_dice > record.best_val_dice:
                record.best_val_dice = val_dice
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        record.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_dice": val_dice,
        })

    record.wall_seconds = time.perf_counter() - t0
    record.final_val_dice = record.epochs[-1]["val_dice"]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = model_manifest(model)
        manifest["train_config"] = cfg.to_dict()
        save_checkpoint(out_dir / "final.ckpt", model, manifest)
        if best_state is not None:
            current = {k: v.detach().clone() for k, v in model.state_dict().items()}
            model.load_state_dict(best_state)
            save_checkpoint(out_dir / "best.ckpt", model, manifest)
            model.load_state_dict(current)
        else:
            save_checkpoint(out_dir / "best.ckpt", model, manifest)
        record.to_json(out_dir / "run_record.json")
        record.write_history(out_dir / "history.jsonl")
        partition.to_json(out_dir / "partition.json")

    return record, partition


def evaluate(model: nn.Module, cases, case_ids=None,
             lesion_cfg: LesionMatchingConfig = LesionMatchingConfig(),
             save_pred_dir=None) -> MetricsReport:
    """Full metrics over a cohort; the model is never mutated."""
    if len(cases) == 0:
        raise EmptyCohort("cannot evaluate an empty cohort")
    if case_ids is None:
        case_ids = [f"case_{i:04d}" for i in range(len(cases))]
    model.eval()
    rows = []
    for cid, (v, m) in zip(case_ids, cases):
        pred = predict_labels(model, v, m.label_semantics)
        if save_pred_dir is not None:
            save_pred_dir = Path(save_pred_dir)
            save_pred_dir.mkdir(parents=True, exist_ok=True)
            save_labels(pred, save_pred_dir / f"{cid}_pred.rawvol", affine=v.affine)
        rows.extend(evaluate_pair(pred, m, spacing=v.voxel_spacing,
                                  case_id=cid, lesion_cfg=lesion_cfg))
    return MetricsReport(rows=rows)
