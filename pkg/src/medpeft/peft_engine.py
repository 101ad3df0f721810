"""Freeze/unfreeze policies, trainable-parameter accounting, and verification
that frozen tensors never move during fine-tuning.

Frozen parameters are excluded from the optimizer entirely (the trainer
builds its optimizer from the partition), so weight decay and momentum can
never drift them. All norm layers here are stateless (no running statistics),
so the parameter partition is the whole story.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from torch import nn

from .conv_adapter import ChannelLayerNorm, PeftModel
from .errors import ArchitectureMismatch, NoAdaptersAttached


class Mode(str, Enum):
    SCRATCH = "scratch"
    FULL_FT = "full"
    PEFT = "peft"


@dataclass
class FreezePolicy:
    mode: Mode = Mode.SCRATCH
    train_head: bool = True    # output head stays trainable under PEFT
    train_norms: bool = False  # backbone norm layers stay frozen by default

    def __post_init__(self):
        self.mode = Mode(self.mode)


@dataclass
class TrainablePartition:
    mode: str
    trainable: list
    frozen: list
    n_trainable: int
    n_frozen: int
    n_total: int

    @property
    def trainable_fraction(self) -> float:
        return self.n_trainable / self.n_total if self.n_total else 0.0

    def to_json(self, path=None) -> str:
        payload = {
            "mode": self.mode,
            "trainable": self.n_trainable,
            "frozen": self.n_frozen,
            "total": self.n_total,
            "trainable_fraction": self.trainable_fraction,
        }
        text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _adapter_param_names(model):
    return {n for n, _ in model.named_parameters() if ".adapter." in n}


def _module_param_names(model, predicate):
    names = set()
    for mod_name, module in model.named_modules():
        if predicate(mod_name, module):
            for p_name, _ in module.named_parameters(recurse=False):
                names.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    return names


def apply_policy(model: nn.Module, policy: FreezePolicy) -> TrainablePartition:
    """Set requires_grad over the whole model per the policy and return the
    exact partition. Under PEFT: adapters, plus the head and/or norm layers
    when enabled; everything else frozen."""
    all_names = [n for n, _ in model.named_parameters()]

    if policy.mode in (Mode.SCRATCH, Mode.FULL_FT):
        trainable = set(all_names)
    else:
        if not isinstance(model, PeftModel) or not model.sites:
            raise NoAdaptersAttached("PEFT policy requires attached adapters")
        trainable = _adapter_param_names(model)
        if policy.train_head:
            trainable |= _module_param_names(
                model, lambda name, m: name.endswith("head") and isinstance(m, nn.Conv3d)
            )
        if policy.train_norms:
            trainable |= _module_param_names(
                model,
                lambda name, m: isinstance(m, (nn.GroupNorm, nn.LayerNorm, ChannelLayerNorm))
                and ".adapter." not in f"{name}.",
            )

    n_trainable = n_frozen = 0
    trainable_names, frozen_names = [], []
    for name, p in model.named_parameters():
        if name in trainable:
            p.requires_grad_(True)
            trainable_names.append(name)
            n_trainable += p.numel()
        else:
            p.requires_grad_(False)
            frozen_names.append(name)
            n_frozen += p.numel()

    return TrainablePartition(
        mode=policy.mode.value,
        trainable=trainable_names,
        frozen=frozen_names,
        n_trainable=n_trainable,
        n_frozen=n_frozen,
        n_total=n_trainable + n_frozen,
    )


def snapshot_state(model: nn.Module) -> dict:
    """Copy of every parameter as a numpy array, keyed by canonical name."""
    return {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}


@dataclass
class FrozenReport:
    rows: list = field(default_factory=list)  # (name, frozen, max_abs_change)
    passed: bool = True
    n_changed_trainable: int = 0

    def changed_frozen(self):
        return [r for r in self.rows if r[1] and r[2] > 0]


def snapshot_and_verify_frozen(model: nn.Module, partition: TrainablePartition,
                               before: dict, after: dict) -> FrozenReport:
    """Compare two snapshots: passes iff every frozen tensor is bit-identical.
    Also counts trainable tensors that actually moved."""
    if set(before) != set(after):
        raise ArchitectureMismatch("snapshots cover different parameter sets")
    model_names = {n for n, _ in model.named_parameters()}
    if set(before) != model_names:
        raise ArchitectureMismatch("snapshot does not match model parameters")

    frozen = set(partition.frozen)
    report = FrozenReport()
    for name in sorted(before):
        a, b = before[name], after[name]
        if a.shape != b.shape:
            raise ArchitectureMismatch(f"{name}: shape {a.shape} vs {b.shape}")
        identical = np.array_equal(a, b)
        change = 0.0 if identical else float(np.max(np.abs(a - b)))
        is_frozen = name in frozen
        report.rows.append((name, is_frozen, change))
        if is_frozen and not identical:
            report.passed = False
        if not is_frozen and not identical:
            report.n_changed_trainable += 1
    return report
