"""Config-driven assessment: split, train, attack, aggregate, report.

Every stage writes its product under the output directory, keyed by a hash
of the inputs it depends on, so re-running an identical configuration only
reads caches.  Reports contain relative paths and content hashes only, which
keeps them byte-identical across runs and output locations.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch
import yaml

from riskprobe import data as data_mod
from riskprobe import defenses, metrics, models
from riskprobe.access import Access, Attack, ThreatModel, check_pair, wrap_model
from riskprobe.attacks import attrinf, meminf, modinv, modsteal
from riskprobe.errors import ConfigError
from riskprobe.report import AttackResult, aggregate_runs, build_report, write_report, write_roc

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RISKPROBE_OUTPUT_ROOT"
DEFAULT_OUTPUT_DIR = "riskprobe-out"


def load_schema() -> dict:
    return json.loads(resources.files("riskprobe").joinpath("run_config.schema.json").read_text())


def derive_seed(run_seed: int, label: str) -> int:
    """Deterministic per-stage seed from the run seed and a stage label."""
    digest = hashlib.sha256(f"{run_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunConfig:
    dataset: dict
    attacks: list[tuple[Attack, ThreatModel]]
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    attack_settings: dict = field(default_factory=dict)
    defense: dict = field(default_factory=lambda: {"kind": "none"})
    repeats: int = 1
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        """Validate against the schema and the attack taxonomy; no compute happens here."""
        try:
            jsonschema.validate(raw, load_schema())
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {e.message}") from None
        raw = copy.deepcopy(raw)
        pairs = []
        for item in raw.pop("attacks"):
            tm = ThreatModel.parse(item["threat_model"])
            check_pair(item["attack"], tm)
            pair = (Attack(item["attack"]), tm)
            if pair in pairs:
                raise ConfigError(f"duplicate attack entry {item['attack']}/{tm.name}")
            pairs.append(pair)
        cfg = cls(attacks=pairs, **raw)
        cfg.base_train_config(0)
        cfg.target_train_config(0)
        arch = cfg.model.get("architecture", "simple_cnn")
        for a in (arch, cfg.defense.get("student_architecture", arch)):
            if a not in models.ARCHITECTURES:
                raise ConfigError(f"unknown architecture {a!r}")
        if cfg.defense["kind"] == "dpsgd":
            cfg.privacy_budget()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} does not contain a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "train": self.train,
            "attacks": [{"attack": a.value, "threat_model": tm.name} for a, tm in self.attacks],
            "attack_settings": self.attack_settings,
            "defense": self.defense,
            "repeats": self.repeats,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def content_hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out

    @property
    def architecture(self) -> str:
        return self.model.get("architecture", "simple_cnn")

    def base_train_config(self, seed: int) -> models.TrainConfig:
        return models.TrainConfig(**{**models.default_train_config().to_dict(), **self.train, "seed": seed})

    def target_train_config(self, seed: int) -> models.TrainConfig:
        base = self.base_train_config(seed)
        if self.defense["kind"] != "dpsgd":
            return base
        return models.TrainConfig(**{**base.to_dict(), **self.defense.get("train", {}), "seed": seed})

    def privacy_budget(self) -> defenses.PrivacyBudget:
        d = self.defense
        return defenses.PrivacyBudget(d["epsilon"], d.get("delta", 1e-5), d.get("clip", 1.0), d.get("sigma"))

    def needs(self, aux: str) -> bool:
        return any(tm.auxiliary.value == aux for _, tm in self.attacks)


@contextmanager
def stage(name: str):
    """Attach the pipeline stage to any error raised inside."""
    try:
        yield
    except Exception as e:
        if not hasattr(e, "stage"):
            e.stage = name
        raise


# ---------------------------------------------------------------------------
# stages


class Assessment:
    """State for one ``run_assessment`` call."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.output_path()
        self.provenance: dict = {"config_hash": cfg.content_hash(), "repeats": {}}
        self.embedding_layer = None

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.out).as_posix()

    # -- data ---------------------------------------------------------------

    def load_dataset(self) -> data_mod.LabeledImageDataset:
        params = dict(self.cfg.dataset)
        name = params.pop("name")
        subset = params.pop("subset", None)
        if name == "synthetic":
            params = {"num_classes": 4, "num_attrs": 1, "n": 2000, "seed": 0, **params}
        elif "path" not in params:
            raise ConfigError(f"dataset {name!r} needs a path")
        try:
            ds = data_mod.load_dataset(name, **params)
        except TypeError as e:
            raise ConfigError(f"bad parameters for dataset {name!r}: {e}") from None
        if subset is not None and subset < len(ds):
            ds = ds.subset(np.arange(subset))
        return ds

    def check_attributes(self, ds) -> list[str]:
        names = self.cfg.attack_settings.get("attrinf", {}).get("attributes")
        if not any(a is Attack.ATTRINF for a, _ in self.cfg.attacks):
            return names or []
        names = names or sorted(ds.attributes)
        if not names:
            raise ConfigError("attribute inference requested but the dataset has no attributes")
        missing = sorted(set(names) - set(ds.attributes))
        if missing:
            raise ConfigError(f"dataset lacks attributes {missing}")
        return names

    def split(self, ds, run_dir: Path, run_seed: int) -> data_mod.QuadSplit:
        path = run_dir / "split.json"
        if path.exists():
            manifest = json.loads(path.read_text())
            if manifest.get("dataset_hash") == ds.content_hash():
                return data_mod.split_from_manifest(ds, manifest)
        split = data_mod.quad_split(ds, derive_seed(run_seed, "split"))
        data_mod.write_manifest(data_mod.split_manifest(ds, split, {"config": self.cfg.dataset}), path)
        return split

    # -- models -------------------------------------------------------------

    def _cached_model(self, path: Path, train_fn):
        meta_path = path.with_suffix(".json")
        if path.exists() and meta_path.exists():
            model, _, _ = models.load_checkpoint(path)
            return model, json.loads(meta_path.read_text())
        model, spec, cfg, meta = train_fn()
        models.save_checkpoint(path, model, spec, cfg, access="white_box", **meta)
        meta = {**meta, "weights_hash": models.state_hash(model)}
        meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1))
        return model, meta

    def train_target(self, split, spec, run_dir: Path, run_seed: int):
        cfg = self.cfg
        seed = derive_seed(run_seed, "target")
        tcfg = cfg.target_train_config(seed)
        kind = cfg.defense["kind"]

        def plain():
            r = models.train_classifier(spec, split.target_train, split.target_test, tcfg)
            return r.model, spec, tcfg, {"train_acc": r.train_acc, "test_acc": r.test_acc}

        if kind == "none":
            return self._cached_model(run_dir / "target.pt", plain)

        if kind == "dpsgd":

            def private():
                r = defenses.train_dpsgd(spec, split.target_train, split.target_test, tcfg, cfg.privacy_budget())
                r.accountant.write(run_dir / "accountant.json")
                meta = {
                    "train_acc": r.train_acc,
                    "test_acc": r.test_acc,
                    "epsilon_spent": r.epsilon_spent,
                    "sigma": r.budget.sigma,
                    "steps": r.steps,
                    "stopped_early": r.stopped_early,
                }
                return r.model, spec, tcfg, meta

            return self._cached_model(run_dir / "target_dpsgd.pt", private)

        teacher, teacher_meta = self._cached_model(run_dir / "teacher.pt", plain)
        student_spec = models.ModelSpec(
            cfg.defense.get("student_architecture", spec.architecture_id), spec.num_classes, spec.input_shape
        )
        dcfg = defenses.DistillConfig(cfg.defense.get("temperature", 20.0), cfg.defense.get("alpha", 0.7), student_spec)

        def distilled():
            scfg = cfg.base_train_config(derive_seed(run_seed, "student"))
            r = defenses.train_distilled(teacher, student_spec, split.target_train, scfg, dcfg, split.target_test)
            meta = {
                "train_acc": r.train_acc,
                "test_acc": r.test_acc,
                "teacher_train_acc": teacher_meta["train_acc"],
                "teacher_test_acc": teacher_meta["test_acc"],
            }
            return r.model, student_spec, scfg, meta

        return self._cached_model(run_dir / "target_kd.pt", distilled)

    def train_aux_model(self, name: str, train_ds, test_ds, spec, run_dir: Path, run_seed: int):
        tcfg = self.cfg.base_train_config(derive_seed(run_seed, name))

        def fn():
            r = models.train_classifier(spec, train_ds, test_ds, tcfg)
            return r.model, spec, tcfg, {"train_acc": r.train_acc, "test_acc": r.test_acc}

        return self._cached_model(run_dir / f"{name}.pt", fn)[0]

    # -- attacks ------------------------------------------------------------

    def run_attack(self, attack: Attack, tm: ThreatModel, ctx: dict, run_dir: Path, run_seed: int) -> dict:
        path = run_dir / "results" / f"{attack.value}_{tm.name}.json"
        if path.exists():
            return json.loads(path.read_text())
        path.parent.mkdir(parents=True, exist_ok=True)
        seed = derive_seed(run_seed, f"{attack.value}/{tm.name}")
        settings = self.cfg.attack_settings.get(attack.value, {})
        split = ctx["split"]
        handle = wrap_model(ctx["target"], tm.access, ctx["spec"].num_classes, ctx["spec"].architecture_id)
        aux = tm.auxiliary.value
        artifacts: dict[str, str] = {}

        if attack is Attack.MEMINF:
            acfg = meminf.AttackTrainConfig(seed=seed, **settings)
            if aux == "shadow":
                shadow = wrap_model(ctx["shadow"], Access.WHITE_BOX, ctx["spec"].num_classes)
                outcome = meminf.run_shadow_attack(
                    handle, shadow, split.target_train, split.target_test, split.shadow_train, split.shadow_test,
                    tm.access, acfg, seed,
                )
            else:
                outcome = meminf.run_partial_attack(
                    handle, split.target_train, ctx["partial"], split.target_test, tm.access, acfg, seed
                )
            outcome.train_features.save(run_dir / "results" / f"features_{tm.name}.npz")
            fpr, tpr, _ = metrics.roc_curve(outcome.scores, outcome.labels)
            roc = run_dir / "results" / f"roc_{attack.value}_{tm.name}.csv"
            write_roc(roc, fpr, tpr)
            artifacts["roc"] = self.rel(roc)
            result = dict(outcome.metrics)

        elif attack is Attack.MODSTEAL:
            aux_ds = ctx["partial"] if aux == "partial" else split.shadow_train
            scfg = modsteal.steal_config(seed, settings.get("epochs", 50))
            result, _ = modsteal.run_attack(handle, aux_ds, split.target_test, scfg, ctx["target_hash"])

        elif attack is Attack.ATTRINF:
            aux_ds = ctx["partial"] if aux == "partial" else split.shadow_train
            names = ctx["attributes"]
            acfg = attrinf.AttrTrainConfig(seed=seed, **{k: v for k, v in settings.items() if k != "attributes"})
            np.save(run_dir / "results" / f"embeddings_{tm.name}.npy", attrinf.extract_embeddings(handle, aux_ds))
            result = attrinf.run_attack(handle, aux_ds, split.target_test, names, acfg)

        else:
            result = self.run_modinv(handle, tm, ctx, run_dir, seed, settings, artifacts)

        payload = {"metrics": result, "artifacts": artifacts}
        path.write_text(json.dumps(payload, sort_keys=True, indent=1))
        return payload

    def run_modinv(self, handle, tm, ctx, run_dir, seed, settings, artifacts) -> dict:
        spec, split = ctx["spec"], ctx["split"]
        classes = range(spec.num_classes)
        if tm.auxiliary.value == "none":
            icfg = modinv.InversionConfig(
                **{k: settings[k] for k in ("threshold", "lr", "max_iter", "early_stop_patience") if k in settings}
            )
            results = [modinv.invert_class(handle, c, icfg, seed, spec.input_shape) for c in classes]
            recon = {r.class_id: r.image for r in results}
            images = np.stack([r.image for r in results])
            out = {
                "mse": modinv.eval_inversion_mse(recon, split.target_train),
                "mean_posterior": float(np.mean([r.posterior for r in results])),
                "reached_threshold": float(np.mean([r.stop_reason == "threshold" for r in results])),
            }
        else:
            gcfg = modinv.GanInversionConfig(
                **{
                    dst: settings[src]
                    for src, dst in (
                        ("gan_epochs", "gan_epochs"),
                        ("gan_width", "width"),
                        ("latent_iters", "iters"),
                        ("latent_lr", "lr"),
                        ("lambda_ratio", "lambda_ratio"),
                    )
                    if src in settings
                }
            )
            gan_path = run_dir / "gan.pt"
            if gan_path.exists():
                gan = torch.load(gan_path, weights_only=False)
            else:
                gan = modinv.train_inversion_gan(split.shadow_train, gcfg, derive_seed(ctx["run_seed"], "gan"))
                torch.save(gan, gan_path)
            n = settings.get("samples_per_class", 1)
            results = [modinv.gan_invert_class(handle, gan, c, gcfg, n, seed + c) for c in classes]
            images = np.concatenate([r.images for r in results])
            intended = np.concatenate([np.full(len(r.images), r.class_id) for r in results])
            acc, f1 = modinv.eval_inversion_accuracy(images, intended, ctx["eval_classifier"])
            out = {
                "acc": acc,
                "macro_f1": f1,
                "initial_posterior": float(np.mean([r.initial_posteriors.mean() for r in results])),
                "final_posterior": float(np.mean([r.final_posteriors.mean() for r in results])),
            }
        # dump in raw pixel units, alongside the PNG grid
        raw = split.target_train.denormalize(images)
        png = run_dir / "results" / f"modinv_{tm.name}.png"
        np.save(png.with_suffix(".npy"), raw)
        modinv.save_image_grid(raw, png)
        artifacts["images"] = self.rel(png)
        artifacts["images_raw"] = self.rel(png.with_suffix(".npy"))
        return out

    # -- driver -------------------------------------------------------------

    def run_repeat(self, i: int, ds, attributes) -> tuple[dict, dict]:
        cfg = self.cfg
        run_seed = cfg.seed + i
        run_dir = self.out / "runs" / f"r{i}-{_key(cfg.content_hash(), ds.content_hash(), run_seed)}"
        run_dir.mkdir(parents=True, exist_ok=True)
        spec = models.spec_for(ds, cfg.architecture)
        with stage("split"):
            split = self.split(ds, run_dir, run_seed)
        with stage("train_target"):
            target, target_meta = self.train_target(split, spec, run_dir, run_seed)
        self.embedding_layer = getattr(target, "penultimate_layer", None)
        ctx = {
            "spec": spec,
            "split": split,
            "target": target,
            "target_hash": target_meta["weights_hash"],
            "attributes": attributes,
            "run_seed": run_seed,
        }
        with stage("train_shadow"):
            if cfg.needs("shadow"):
                ctx["shadow"] = self.train_aux_model("shadow", split.shadow_train, split.shadow_test, spec, run_dir, run_seed)
            if any(a is Attack.MODINV and tm.auxiliary.value == "shadow" for a, tm in cfg.attacks):
                ctx["eval_classifier"] = self.train_aux_model(
                    "eval_classifier", split.target_train, split.target_test, spec, run_dir, run_seed
                )
        if cfg.needs("partial"):
            ctx["partial"] = data_mod.partial_subset(split, 0.7, derive_seed(run_seed, "partial"))
        outputs = {}
        for attack, tm in cfg.attacks:
            with stage(f"attack:{attack.value}/{tm.name}"):
                outputs[(attack, tm)] = self.run_attack(attack, tm, ctx, run_dir, run_seed)
        prov = {
            "run_seed": run_seed,
            "split_manifest": file_hash(run_dir / "split.json"),
            "target_weights": target_meta["weights_hash"],
        }
        if "shadow" in ctx:
            prov["shadow_weights"] = models.state_hash(ctx["shadow"])
        if (run_dir / "accountant.json").exists():
            prov["accountant_ledger"] = file_hash(run_dir / "accountant.json")
        self.provenance["repeats"][f"r{i}"] = prov
        return target_meta, outputs

    def run(self) -> Path:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        with stage("load_dataset"):
            ds = self.load_dataset()
            attributes = self.check_attributes(ds)
        self.provenance["dataset_hash"] = ds.content_hash()

        target_metas, per_pair = [], {pair: [] for pair in cfg.attacks}
        for i in range(cfg.repeats):
            meta, outputs = self.run_repeat(i, ds, attributes)
            target_metas.append(meta)
            for pair, payload in outputs.items():
                per_pair[pair].append(payload)

        results = []
        for (attack, tm), payloads in per_pair.items():
            artifacts = {}
            for i, p in enumerate(payloads):
                artifacts.update({f"{k}_r{i}": v for k, v in p["artifacts"].items()})
            results.append(AttackResult(attack, tm, aggregate_runs([p["metrics"] for p in payloads]), artifacts))

        target = {
            "id": "target",
            "dataset": ds.name,
            "architecture": cfg.architecture,
            "train_acc": float(np.mean([m["train_acc"] for m in target_metas])),
            "test_acc": float(np.mean([m["test_acc"] for m in target_metas])),
            "n_runs": cfg.repeats,
        }
        defense = dict(cfg.defense)
        for key in ("epsilon_spent", "sigma", "steps", "teacher_train_acc", "teacher_test_acc"):
            if key in target_metas[0]:
                defense[key] = float(np.mean([m[key] for m in target_metas]))
        report = build_report(
            results,
            [target],
            defense,
            self.provenance,
            {
                "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
                "attack_models": {"meminf_fusion": [256, 128, 64], "attrinf_hidden": attrinf.HIDDEN},
                "embedding_layer": self.embedding_layer,
            },
        )
        with stage("report"):
            return write_report(report, self.out)


def run_assessment(cfg: RunConfig | dict) -> Path:
    """Run the configured assessment and return the path of ``report.json``."""
    if isinstance(cfg, dict):
        cfg = RunConfig.from_dict(cfg)
    return Assessment(cfg).run()

