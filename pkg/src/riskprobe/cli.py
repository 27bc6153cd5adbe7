"""Command-line entry points.

Exit codes: 0 ok, 2 configuration error, 3 capability error, 4 runtime
failure.  Failures print a JSON error block on stderr.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from riskprobe import data as data_mod
from riskprobe import defenses, models, pipeline, report
from riskprobe.access import Access, Attack, ThreatModel, check_pair
from riskprobe.errors import CapabilityError, ConfigError


def _fail(err: BaseException) -> None:
    code = getattr(err, "exit_code", 4)
    if isinstance(err, (click.UsageError, FileNotFoundError)):
        code = 2
    block = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    if getattr(err, "stage", None):
        block["stage"] = err.stage
    click.echo(json.dumps(block, sort_keys=True), err=True)
    sys.exit(code)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except click.UsageError as e:
            _fail(e)
        except Exception as e:  # noqa: BLE001 - every failure becomes an error block
            _fail(e)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Privacy risk assessment for image classifiers."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="YAML run configuration.")
@click.option("--output-dir", default=None, help="Override the configured output directory.")
def assess(config_path, output_dir):
    """Run the full pipeline and print the report path."""
    cfg = pipeline.RunConfig.from_yaml(config_path)
    if output_dir:
        cfg.output_dir = output_dir
    click.echo(str(pipeline.run_assessment(cfg)))


def _dataset_and_split(config_path, seed):
    cfg = pipeline.RunConfig.from_yaml(config_path)
    ds = pipeline.Assessment(cfg).load_dataset()
    return cfg, ds, data_mod.quad_split(ds, seed)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, help="Checkpoint directory.")
@click.option("--access", type=click.Choice([a.value for a in Access]), default="white_box", help="Access level recorded in the checkpoint.")
@click.option("--seed", default=0, show_default=True)
def train(config_path, out_path, access, seed):
    """Train the target model only."""
    cfg, ds, split = _dataset_and_split(config_path, seed)
    spec = models.spec_for(ds, cfg.architecture)
    r = models.train_classifier(spec, split.target_train, split.target_test, cfg.base_train_config(seed))
    _write_target(Path(out_path), r.model, spec, cfg, ds, split, access, r.train_acc, r.test_acc, seed)


def _write_target(out: Path, model, spec, cfg, ds, split, access, train_acc, test_acc, seed, **extra):
    out.mkdir(parents=True, exist_ok=True)
    data_mod.write_manifest(data_mod.split_manifest(ds, split, {"config": cfg.dataset}), out / "split.json")
    models.save_checkpoint(
        out / "model.pt", model, spec, cfg.base_train_config(seed), access=access,
        train_acc=train_acc, test_acc=test_acc, **extra,
    )
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    click.echo(json.dumps({"checkpoint": str(out / "model.pt"), "train_acc": train_acc, "test_acc": test_acc, **extra}, sort_keys=True))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, help="Checkpoint directory.")
@click.option("--kind", type=click.Choice(["dpsgd", "kd"]), required=True)
@click.option("--epsilon", type=float, default=None, help="DP-SGD budget.")
@click.option("--teacher", type=click.Path(), default=None, help="Teacher checkpoint directory for distillation.")
@click.option("--access", type=click.Choice([a.value for a in Access]), default="white_box")
@click.option("--seed", default=0, show_default=True)
def defend(config_path, out_path, kind, epsilon, teacher, access, seed):
    """Retrain the target with a defense."""
    cfg, ds, split = _dataset_and_split(config_path, seed)
    spec = models.spec_for(ds, cfg.architecture)
    if kind == "dpsgd":
        d = cfg.defense if cfg.defense.get("kind") == "dpsgd" else {}
        eps = epsilon if epsilon is not None else d.get("epsilon")
        if eps is None:
            raise ConfigError("dpsgd needs --epsilon or a dpsgd defense block in the config")
        cfg.defense = {**d, "kind": "dpsgd", "epsilon": eps}
        r = defenses.train_dpsgd(spec, split.target_train, split.target_test, cfg.target_train_config(seed), cfg.privacy_budget())
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        r.accountant.write(out / "accountant.json")
        _write_target(out, r.model, spec, cfg, ds, split, access, r.train_acc, r.test_acc, seed,
                      epsilon_spent=r.epsilon_spent, sigma=r.budget.sigma, steps=r.steps)
        return
    if teacher is None:
        raise ConfigError("kd needs --teacher")
    teacher_model, _, _ = models.load_checkpoint(Path(teacher) / "model.pt")
    d = cfg.defense if cfg.defense.get("kind") == "kd" else {}
    student_spec = models.ModelSpec(d.get("student_architecture", spec.architecture_id), spec.num_classes, spec.input_shape)
    dcfg = defenses.DistillConfig(d.get("temperature", 20.0), d.get("alpha", 0.7), student_spec)
    r = defenses.train_distilled(teacher_model, student_spec, split.target_train, cfg.base_train_config(seed), dcfg, split.target_test)
    _write_target(Path(out_path), r.model, student_spec, cfg, ds, split, access, r.train_acc, r.test_acc, seed)


@main.command()
@click.option("--kind", type=click.Choice([a.value for a in Attack]), required=True)
@click.option("--tm", "tm_name", required=True, help="Threat model, e.g. bb_shadow or wb_none.")
@click.option("--target", "target_dir", required=True, type=click.Path(), help="Checkpoint directory from train/defend.")
@click.option("--out", "out_path", default=None, help="Where to write the result JSON.")
@click.option("--seed", default=0, show_default=True)
def attack(kind, tm_name, target_dir, out_path, seed):
    """Run a single attack against an existing checkpoint."""
    tm = ThreatModel.parse(tm_name)
    check_pair(kind, tm)
    target_dir = Path(target_dir)
    ckpt = target_dir / "model.pt" if target_dir.is_dir() else target_dir
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    model, spec, meta = models.load_checkpoint(ckpt)
    granted = Access(meta.get("access", "black_box"))
    if tm.access is Access.WHITE_BOX and granted is not Access.WHITE_BOX:
        raise CapabilityError(f"{tm.name} needs white-box access but the checkpoint grants {granted.value}")
    ckpt_dir = ckpt.parent
    cfg = pipeline.RunConfig.from_dict(json.loads((ckpt_dir / "config.json").read_text()))
    cfg.attacks = [(Attack(kind), tm)]
    assessment = pipeline.Assessment(cfg)
    ds = assessment.load_dataset()
    split = data_mod.split_from_manifest(ds, json.loads((ckpt_dir / "split.json").read_text()))
    ctx = {
        "spec": spec,
        "split": split,
        "target": model,
        "target_hash": meta["weights_hash"],
        "attributes": assessment.check_attributes(ds),
        "run_seed": seed,
    }
    work = Path(out_path).parent if out_path else ckpt_dir / "attacks"
    work.mkdir(parents=True, exist_ok=True)
    assessment.out = work
    if tm.auxiliary.value == "shadow":
        ctx["shadow"] = assessment.train_aux_model("shadow", split.shadow_train, split.shadow_test, spec, work, seed)
        if Attack(kind) is Attack.MODINV:
            ctx["eval_classifier"] = assessment.train_aux_model(
                "eval_classifier", split.target_train, split.target_test, spec, work, seed
            )
    if tm.auxiliary.value == "partial":
        ctx["partial"] = data_mod.partial_subset(split, 0.7, pipeline.derive_seed(seed, "partial"))
    payload = assessment.run_attack(Attack(kind), tm, ctx, work, seed)
    text = json.dumps({"attack": kind, "threat_model": tm.name, **payload}, sort_keys=True, indent=1)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


@main.command("report")
@click.option("--results", "results_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Assessment output directory.")
def report_cmd(results_dir):
    """Rebuild report.json and the CSV table from an existing report."""
    path = Path(results_dir) / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json under {results_dir}")
    rep = report.load_report(path)
    rebuilt = report.build_report(
        rep.results,
        [{k: v for k, v in t.items() if k != "overfitting_level"} for t in rep.targets],
        rep.defense,
        rep.provenance,
        rep.metadata,
    )
    click.echo(str(report.write_report(rebuilt, results_dir)))


@main.command()
@click.option("--report", "report_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, help="Figure directory (default: <report dir>/figures).")
def plot(report_path, out_dir):
    """Write bar-chart and ROC figures for a report."""
    report_path = Path(report_path)
    out_dir = Path(out_dir) if out_dir else report_path.parent / "figures"
    for p in report.plot_report(report.load_report(report_path), out_dir, base_dir=report_path.parent):
        click.echo(str(p))


if __name__ == "__main__":
    main()
