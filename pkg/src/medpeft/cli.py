"""Command-line surface: cohort generation, training, fine-tuning,
evaluation, reporting, and the four-stage experiment orchestrator.

Exit codes: 0 success, 2 usage/config errors, 3 runtime failures such as a
non-finite loss.
"""

import hashlib
import json
import sys
from pathlib import Path

import click
import torch

from . import __version__
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .conv_adapter import AdapterConfig, attach_adapters
from .errors import MedPeftError, NonFiniteLoss
from .mednext_backbone import ModelConfig, build_backbone, mednext_s, tiny_config
from .peft_engine import FreezePolicy, Mode
from .synthetic_cohort import CohortSpec, Domain, generate_cohort, load_cohort
from .trainer import TrainConfig, evaluate, model_manifest, train
from .volume_io import AugmentConfig, preprocess_case

CONFIG_SCHEMA_VERSION = 1

_PRESETS = {
    "mednext-s": mednext_s,
    "tiny": lambda: tiny_config(spatial_mix="dense"),
}


def _fail_usage(message):
    raise click.UsageError(message)


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        _fail_usage(f"cannot read config {path}: {e}")
    if not isinstance(cfg, dict):
        _fail_usage(f"config {path} must be a JSON object")
    version = cfg.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        _fail_usage(f"config schema_version {version} unsupported "
                    f"(expected {CONFIG_SCHEMA_VERSION})")
    return cfg


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d or {})
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in _PRESETS:
            _fail_usage(f"unknown model preset {preset!r} "
                        f"(available: {sorted(_PRESETS)})")
        base = _PRESETS[preset]().to_dict()
        base.update(d)
        d = base
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, MedPeftError) as e:
        _fail_usage(f"invalid model config: {e}")


def adapter_config_from_dict(d: dict) -> AdapterConfig:
    try:
        return AdapterConfig.from_dict(dict(d or {}))
    except (TypeError, ValueError, MedPeftError) as e:
        _fail_usage(f"invalid adapter config: {e}")


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d or {})
    aug = d.pop("augment", None)
    try:
        cfg = TrainConfig(**d)
        if aug:
            cfg.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in aug.items()})
        return cfg.validate()
    except (TypeError, ValueError) as e:
        _fail_usage(f"invalid train config: {e}")


def prepare_cohort(cohort_dir, data_cfg=None):
    data_cfg = data_cfg or {}
    cases, manifest = load_cohort(cohort_dir)
    target = data_cfg.get("target_shape")
    nonzero = data_cfg.get("nonzero_norm", True)
    prepared = []
    for v, m in cases:
        v, m = preprocess_case(v, m, target or v.spatial_shape, nonzero_norm=nonzero)
        prepared.append((v, m))
    ids = [e["case_id"] for e in manifest["cases"]]
    return prepared, ids, manifest


def rebuild_model(ckpt):
    """Reconstruct the module tree a checkpoint was saved from and load it."""
    manifest = ckpt.manifest
    model = build_backbone(ModelConfig.from_dict(manifest["model_config"]))
    if manifest.get("kind") == "peft":
        model = attach_adapters(model,
                                AdapterConfig.from_dict(manifest["adapter_config"]),
                                manifest.get("sites"))
    apply_checkpoint(model, ckpt)
    return model


def _write_metrics(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    report.to_json(out_dir / "metrics.json")


@click.group()
@click.version_option(version=__version__, prog_name="medpeft")
def main():
    """Parameter-efficient fine-tuning toolkit for 3D segmentation."""


# ---------------------------------------------------------------------------
# cohort
# ---------------------------------------------------------------------------

@main.group()
def cohort():
    """Synthetic cohort operations."""


@cohort.command("gen")
@click.option("--domain", type=click.Choice(["source", "shifted"]), default="source")
@click.option("--n", type=int, required=True, help="number of cases")
@click.option("--shape", type=int, default=32, help="cubic spatial size")
@click.option("--seed", type=int, default=0)
@click.option("--channels", type=int, default=4)
@click.option("--out", type=click.Path(), required=True)
def cohort_gen(domain, n, shape, seed, channels, out):
    """Generate a synthetic cohort in the raw sidecar format."""
    spec = CohortSpec(n_cases=n, spatial_shape=(shape,) * 3, n_channels=channels,
                      domain=Domain(domain), rng_seed=seed)
    manifest = generate_cohort(spec, out)
    click.echo(f"wrote {manifest['n_cases']} cases to {out}")


# ---------------------------------------------------------------------------
# train / finetune / evaluate
# ---------------------------------------------------------------------------

def _run_training(model, config, cohort_dir, out, mode, run_id):
    cases, _ids, _manifest = prepare_cohort(cohort_dir, config.get("data"))
    train_cfg = train_config_from_dict(config.get("train"))
    policy = FreezePolicy(mode=Mode(mode))
    try:
        record, partition = train(model, cases, train_cfg, policy,
                                  out_dir=out, run_id=run_id)
    except NonFiniteLoss as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    report = evaluate(model, cases)
    _write_metrics(report, out)
    click.echo(f"run {record.run_id}: steps={record.steps} "
               f"trainable_fraction={partition.trainable_fraction:.4f} "
               f"mean_dice={report.mean_dice():.4f}")
    return record


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), default=None,
              help="overrides data.cohort from the config")
@click.option("--mode", type=click.Choice(["scratch"]), default="scratch")
@click.option("--out", type=click.Path(), required=True)
def train_cmd(config_path, cohort_dir, mode, out):
    """Train a model from random initialization."""
    config = load_config(config_path)
    cohort_dir = cohort_dir or (config.get("data") or {}).get("cohort")
    if not cohort_dir:
        _fail_usage("no cohort: pass --cohort or set data.cohort in the config")
    model = build_backbone(model_config_from_dict(config.get("model")))
    _run_training(model, config, cohort_dir, out, mode, run_id=None)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["full", "peft"]), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              default=None, help="pretrained weights to start from (required)")
@click.option("--adapter", type=click.Choice(["linear", "convdw", "convnext"]),
              default=None, help="overrides adapter.variant")
@click.option("--placement", type=click.Choice(["sequential", "parallel"]),
              default=None, help="overrides adapter.placement")
@click.option("--out", type=click.Path(), required=True)
def finetune(config_path, cohort_dir, mode, checkpoint_path, adapter, placement, out):
    """Fine-tune a pretrained checkpoint, fully or via adapters."""
    if checkpoint_path is None:
        _fail_usage("finetune requires --checkpoint")
    config = load_config(config_path)
    cohort_dir = cohort_dir or (config.get("data") or {}).get("cohort")
    if not cohort_dir:
        _fail_usage("no cohort: pass --cohort or set data.cohort in the config")

    model = rebuild_model(load_checkpoint(checkpoint_path))
    if mode == "peft":
        adapter_dict = dict(config.get("adapter") or {})
        if adapter:
            adapter_dict["variant"] = adapter
        if placement:
            adapter_dict["placement"] = placement
        if not hasattr(model, "sites"):
            model = attach_adapters(model, adapter_config_from_dict(adapter_dict))
    _run_training(model, config, cohort_dir, out, mode, run_id=None)


@main.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--save-pred", is_flag=True, default=False,
              help="also write predicted label maps (enables report overlays)")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def evaluate_cmd(checkpoint_path, cohort_dir, out, save_pred, config_path):
    """Evaluate a checkpoint on a cohort; writes metrics.csv / metrics.json."""
    config = load_config(config_path) if config_path else {}
    model = rebuild_model(load_checkpoint(checkpoint_path))
    cases, ids, _manifest = prepare_cohort(cohort_dir, config.get("data"))
    pred_dir = Path(out) / "predictions" if save_pred else None
    report = evaluate(model, cases, case_ids=ids, save_pred_dir=pred_dir)
    _write_metrics(report, out)
    click.echo(f"evaluated {len(ids)} cases: mean_dice={report.mean_dice():.4f}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@main.command()
@click.option("--runs", "runs_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--overlays-cohort", type=click.Path(exists=True), default=None,
              help="cohort dir for qualitative overlays (needs saved predictions)")
def report(runs_dir, out, overlays_cohort):
    """Boxplots and comparison tables across run directories."""
    from .reports import write_report

    summary = write_report(runs_dir, out, overlays_cohort)
    click.echo(f"report over runs {summary['runs']} written to {out}")


# ---------------------------------------------------------------------------
# experiment orchestration
# ---------------------------------------------------------------------------

def _stage_key(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _stage_done(stage_dir: Path, key: str) -> bool:
    marker = stage_dir / "stage.json"
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text()).get("key") == key
    except json.JSONDecodeError:
        return False


def _mark_stage(stage_dir: Path, key: str):
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "stage.json").write_text(
        json.dumps({"key": key}, sort_keys=True) + "\n"
    )


@main.group()
def experiment():
    """Multi-stage pretrain -> shift -> adapt experiments."""


@experiment.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
def experiment_run(config_path):
    """Run pretrain, zero-shot evaluation, fine-tuning (one run per mode) and
    the final report, with content-addressed stage caching."""
    config = load_config(config_path)
    out = Path(config.get("out") or _fail_usage("experiment config needs 'out'"))
    seed = int(config.get("seed", 0))
    modes = config.get("modes", ["peft", "full"])
    for m in modes:
        if m not in ("peft", "full"):
            _fail_usage(f"experiment modes must be peft/full, got {m!r}")

    model_cfg = model_config_from_dict(config.get("model"))
    adapter_cfg = adapter_config_from_dict(config.get("adapter"))

    def cohort_stage(name, block, default_seed):
        block = dict(block or {})
        spec = CohortSpec(
            n_cases=int(block.get("n", 8)),
            spatial_shape=(int(block.get("shape", 16)),) * 3,
            domain=Domain(name),
            rng_seed=int(block.get("seed", default_seed)),
        )
        stage_dir = out / "cohorts" / name
        key = _stage_key({"gen": spec.__dict__})
        if not _stage_done(stage_dir, key):
            generate_cohort(spec, stage_dir)
            _mark_stage(stage_dir, key)
            click.echo(f"[stage] cohort {name}: generated {spec.n_cases} cases")
        else:
            click.echo(f"[stage] cohort {name}: cached")
        return stage_dir, key

    src_dir, k_src = cohort_stage("source", config.get("source_cohort"), seed)
    shf_dir, k_shf = cohort_stage("shifted", config.get("shifted_cohort"), seed + 1000)

    def training_stage(name, parent_keys, build_fn, train_block, mode):
        stage_dir = out / "runs" / name
        key = _stage_key({"train": train_block, "model": model_cfg.to_dict(),
                          "adapter": adapter_cfg.to_dict(), "mode": mode,
                          "parents": parent_keys})
        if _stage_done(stage_dir, key) and (stage_dir / "final.ckpt").exists():
            click.echo(f"[stage] {name}: cached")
            return stage_dir, key
        model, cohort_dir = build_fn()
        cases, _ids, _m = prepare_cohort(cohort_dir, config.get("data"))
        train_cfg = train_config_from_dict(train_block)
        try:
            record, partition = train(model, cases, train_cfg,
                                      FreezePolicy(mode=Mode(mode)),
                                      out_dir=stage_dir, run_id=name)
        except NonFiniteLoss as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        _write_metrics(evaluate(model, cases), stage_dir)
        _mark_stage(stage_dir, key)
        click.echo(f"[stage] {name}: trained ({record.steps} steps, "
                   f"fraction {partition.trainable_fraction:.3f})")
        return stage_dir, key

    pre_block = dict(config.get("pretrain") or {})
    pre_block.setdefault("seed", seed)
    pre_dir, k_pre = training_stage(
        "pretrain", [k_src], lambda: (build_backbone(model_cfg), src_dir),
        pre_block, "scratch",
    )

    def eval_stage(name, ckpt_path, cohort_dir, parent_keys):
        stage_dir = out / "runs" / name
        key = _stage_key({"eval": str(ckpt_path), "parents": parent_keys})
        if _stage_done(stage_dir, key) and (stage_dir / "metrics.csv").exists():
            click.echo(f"[stage] {name}: cached")
            return stage_dir, key
        model = rebuild_model(load_checkpoint(ckpt_path))
        cases, ids, _m = prepare_cohort(cohort_dir, config.get("data"))
        report = evaluate(model, cases, case_ids=ids,
                          save_pred_dir=stage_dir / "predictions")
        _write_metrics(report, stage_dir)
        _mark_stage(stage_dir, key)
        click.echo(f"[stage] {name}: mean_dice={report.mean_dice():.4f}")
        return stage_dir, key

    zero_dir, k_zero = eval_stage("zero_shot", pre_dir / "final.ckpt", shf_dir,
                                  [k_pre, k_shf])

    ft_block = dict(config.get("finetune") or {})
    ft_block.setdefault("seed", seed + 1)
    for mode in modes:
        def build_ft(mode=mode):
            model = rebuild_model(load_checkpoint(pre_dir / "final.ckpt"))
            if mode == "peft":
                model = attach_adapters(model, adapter_cfg)
            return model, shf_dir

        ft_dir, k_ft = training_stage(f"finetune_{mode}", [k_pre, k_shf],
                                      build_ft, ft_block, mode)
        eval_stage(f"eval_{mode}", ft_dir / "final.ckpt", shf_dir, [k_ft, k_shf])

    from .reports import write_report

    summary = write_report(out / "runs", out / "report", overlays_cohort=None)
    click.echo(f"experiment complete; report in {out / 'report'} "
               f"({len(summary['runs'])} runs)")


def entrypoint():
    """Console-script entry mapping failures onto the exit-code convention."""
    try:
        main.main(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(2)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except NonFiniteLoss as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    except MedPeftError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    entrypoint()
