"""Run orchestration: config, staged artifacts with manifest hashing, synthetic
corpus preparation, training, attacks, evaluation, sweeps, ablations and reports.

Stages run sequentially; per-item work inside the attack and evaluation stages
is vectorized over items (deterministic order by item id)."""

import dataclasses
import datetime
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import attack as attack_mod
from . import data as data_mod
from . import diffusion as diff_mod
from . import metrics as metrics_mod
from . import recsys as recsys_mod
from . import visual as visual_mod
from . import synthetic as synth_mod
from .synthetic import SyntheticCorpusSpec, generate_synthetic_corpus, save_corpus

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "IPDGI_RUN_ROOT"
ATTACK_CONDITIONS = ("aip", "ipdgi")
ABLATION_CONDITIONS = ("ipdgi", "ipdgi_no_clustering", "ipdgi_no_perturbation")


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    run_dir: str = "run"
    seed: int = 0
    # data source: empty data_csv means the synthetic corpus
    data_csv: str = ""
    image_dir: str = ""
    image_side: int = 32
    core: int = 10
    target_threshold: int = 20
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    # visual
    feature_dim: int = 128
    extractor_width: int = 32
    extractor_epochs: int = 30
    extractor_lr: float = 1e-3
    extractor_noise_aug: float = 0.05
    k_clusters: int = 10
    # recommenders
    models: tuple = ("vbpr", "dvbpr", "amr")
    d_latent: int = 100
    d_visual: int = 100
    cnn_width: int = 16
    train_base: dict = field(default_factory=dict)
    train_per_kind: dict = field(default_factory=dict)
    # diffusion
    t_max: int = 1000
    diffusion_corpus: int = 0
    diffusion: diff_mod.DiffusionTrainConfig = field(default_factory=diff_mod.DiffusionTrainConfig)
    # attacks
    attack: attack_mod.AttackConfig = field(default_factory=attack_mod.AttackConfig)
    aip_eps_max: float = 32.0
    aip_epochs: int = 500
    aip_lr: float = 0.01
    # metrics
    ks: tuple = (5, 10, 20)

    def __post_init__(self):
        if isinstance(self.ks, (int, float)):
            self.ks = (self.ks,)
        if not self.ks:
            raise ValueError("need at least one K")
        self.ks = tuple(int(k) for k in self.ks)
        if isinstance(self.models, str):
            self.models = (self.models,)
        self.models = tuple(self.models)
        for kind in self.models:
            if kind not in recsys_mod.MODEL_KINDS:
                raise ValueError(f"unknown model kind '{kind}'")
        root = os.environ.get(RUN_ROOT_ENV, "")
        if root and not os.path.isabs(self.run_dir):
            self.run_dir = os.path.join(root, self.run_dir)

    def train_config_for(self, kind):
        fields = dict(self.train_base)
        fields.update(self.train_per_kind.get(kind, {}))
        fields.setdefault("epochs", recsys_mod.DEFAULT_EPOCHS[kind])
        return recsys_mod.TrainConfig(**fields)

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["models"] = list(self.models)
        doc["ks"] = list(self.ks)
        return doc


def _coerce(value):
    text = value.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_coerce(part) for part in text.split(",") if part.strip())
    return text


_SECTION_TARGETS = {
    "run": None,           # top-level RunConfig fields
    "corpus": "corpus",
    "diffusion": "diffusion",
    "attack": "attack",
}


def load_config(path=None, run_dir=None, seed=None, sets=()):
    """RunConfig from an INI file plus CLI overrides (section.key=value)."""
    import configparser

    raw = {"run": {}, "corpus": {}, "diffusion": {}, "attack": {}, "train": {}}
    per_kind = {}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise PipelineError(f"config file '{path}' not found or unreadable")
        for section in parser.sections():
            items = {k: _coerce(v) for k, v in parser[section].items()}
            if section.startswith("train."):
                per_kind[section.split(".", 1)[1]] = items
            elif section in raw:
                raw[section].update(items)
            else:
                raise PipelineError(f"unknown config section [{section}]")
    for entry in sets:
        if "=" not in entry:
            raise PipelineError(f"override '{entry}' is not key=value")
        key, value = entry.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = "run." + key
        section, name = key.split(".", 1)
        if section.startswith("train") and "." in name:
            kind, name = name.split(".", 1)
            per_kind.setdefault(kind, {})[name] = _coerce(value)
        elif section in raw:
            raw[section][name] = _coerce(value)
        else:
            raise PipelineError(f"unknown config section '{section}'")

    run_kwargs = dict(raw["run"])
    if run_dir is not None:
        run_kwargs["run_dir"] = run_dir
    if seed is not None:
        run_kwargs["seed"] = seed
    corpus_kwargs = dict(raw["corpus"])
    cfg = RunConfig(
        corpus=SyntheticCorpusSpec(**corpus_kwargs),
        diffusion=diff_mod.DiffusionTrainConfig(**raw["diffusion"]),
        attack=attack_mod.AttackConfig(**raw["attack"]),
        train_base=raw["train"],
        train_per_kind=per_kind,
        **run_kwargs,
    )
    return cfg


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Run:
    """One run directory: staged artifacts, a manifest, and lazy artifact loading."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = cfg.run_dir
        os.makedirs(self.dir, exist_ok=True)
        self.manifest_path = os.path.join(self.dir, "run_manifest.json")
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {"schema_version": 1, "config": cfg.to_dict(), "stages": {}}
        self._cache = {}

    # -- plumbing ---------------------------------------------------------

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def _save_manifest(self):
        self.manifest["config"] = self.cfg.to_dict()
        with open(self.manifest_path, "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True, default=str)

    def _dep(self, name):
        st = self.manifest["stages"].get(name)
        if not st:
            raise PipelineError(f"stage '{name}' has not run yet in {self.dir}")
        return st["input_hash"]

    def _stage(self, name, params, outputs, fn):
        h = _hash(params)
        st = self.manifest["stages"].get(name)
        if st and st["input_hash"] == h and all(os.path.exists(p) for p in st["outputs"]):
            log.info("stage %s up to date, skipping", name)
            return False
        t0 = time.time()
        try:
            fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage '{name}' failed: {exc}") from exc
        self.manifest["stages"][name] = {
            "input_hash": h,
            "outputs": list(outputs),
            "wall_time": round(time.time() - t0, 3),
            "completed": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        self._save_manifest()
        log.info("stage %s done in %.1fs", name, time.time() - t0)
        return True

    # -- lazy artifacts ---------------------------------------------------

    @property
    def catalog(self):
        if "catalog" not in self._cache:
            img_dir = self.cfg.image_dir or self.path("corpus", "images")
            self._cache["catalog"] = data_mod.load_catalog(
                self.path("prepared", "filtered.csv"), img_dir, self.cfg.image_side)
        return self._cache["catalog"]

    @property
    def split(self):
        if "split" not in self._cache:
            self._cache["split"] = data_mod.load_split(self.path("prepared", "split.json"))
        return self._cache["split"]

    @property
    def targets(self):
        if "targets" not in self._cache:
            with open(self.path("prepared", "targets.json")) as fh:
                self._cache["targets"] = json.load(fh)["targets"]
        return self._cache["targets"]

    @property
    def extractor(self):
        if "extractor" not in self._cache:
            payload = torch.load(self.path("features", "extractor.pt"), weights_only=True)
            net = visual_mod.FeatureExtractor(**payload["config"])
            net.load_state_dict(payload["state_dict"])
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._cache["extractor"] = net
        return self._cache["extractor"]

    @property
    def features(self):
        if "features" not in self._cache:
            self._cache["features"] = np.load(self.path("features", "features.npy"))
        return self._cache["features"]

    @property
    def clusters(self):
        if "clusters" not in self._cache:
            self._cache["clusters"] = visual_mod.load_clusters(self.path("features", "clusters"))
        return self._cache["clusters"]

    @property
    def schedule(self):
        if "schedule" not in self._cache:
            self._cache["schedule"] = diff_mod.build_schedule(self.cfg.t_max)
        return self._cache["schedule"]

    @property
    def denoiser(self):
        if "denoiser" not in self._cache:
            net, sched, _ = diff_mod.load_denoiser(self.path("diffusion", "denoiser"))
            self._cache["denoiser"] = net
            self._cache["schedule"] = sched
        return self._cache["denoiser"]

    def model(self, kind):
        key = f"model:{kind}"
        if key not in self._cache:
            model, _ = recsys_mod.load_checkpoint(self.path("models", kind))
            self._cache[key] = model
        return self._cache[key]

    # -- stages -----------------------------------------------------------

    def prepare(self):
        cfg = self.cfg
        params = {"corpus": dataclasses.asdict(replace(cfg.corpus, seed=cfg.seed))
                  if not cfg.data_csv else {"csv": cfg.data_csv, "images": cfg.image_dir},
                  "core": cfg.core, "threshold": cfg.target_threshold,
                  "side": cfg.image_side, "seed": cfg.seed}
        prepared = self.path("prepared")
        outputs = [os.path.join(prepared, f) for f in
                   ("filtered.csv", "split.json", "targets.json", "meta.json")]

        def _do():
            if cfg.data_csv:
                csv_path, img_dir = cfg.data_csv, cfg.image_dir
            else:
                spec = replace(cfg.corpus, seed=cfg.seed, image_side=cfg.image_side)
                corpus = generate_synthetic_corpus(spec, check_core=cfg.core)
                csv_path, img_dir = save_corpus(corpus, self.path("corpus"))
            raw = data_mod.load_catalog(csv_path, img_dir, cfg.image_side)
            filtered = data_mod.k_core_filter(raw, cfg.core)
            os.makedirs(prepared, exist_ok=True)
            with open(outputs[0], "w") as fh:
                fh.write("user,item,rating,timestamp\n")
                for inter in filtered.interactions:
                    fh.write(f"{inter.user_id},{inter.item_id},{inter.raw_rating},{inter.timestamp}\n")
            split = data_mod.make_split(filtered, seed=cfg.seed)
            data_mod.save_split(split, outputs[1])
            targets = data_mod.select_targets(filtered, cfg.target_threshold)
            with open(outputs[2], "w") as fh:
                json.dump({"threshold": cfg.target_threshold, "targets": targets}, fh, indent=1)
            meta = {
                "raw_users": raw.n_users, "raw_items": raw.n_items,
                "raw_interactions": len(raw.interactions),
                "users": filtered.n_users, "items": filtered.n_items,
                "interactions": len(filtered.interactions),
                "sparsity_pct": metrics_mod.sparsity_of(filtered),
                "user_retention": filtered.n_users / raw.n_users,
                "n_targets": len(targets),
            }
            with open(outputs[3], "w") as fh:
                json.dump(meta, fh, indent=1, sort_keys=True)
            self._cache.pop("catalog", None)
            self._cache.pop("split", None)
            self._cache.pop("targets", None)

        return self._stage("prepare", params, outputs, _do)

    def build_features(self):
        cfg = self.cfg
        params = {"dep": self._dep("prepare"), "dim": cfg.feature_dim,
                  "width": cfg.extractor_width, "epochs": cfg.extractor_epochs,
                  "lr": cfg.extractor_lr, "noise_aug": cfg.extractor_noise_aug,
                  "seed": cfg.seed}
        outputs = [self.path("features", "extractor.pt"), self.path("features", "features.npy")]

        def _do():
            os.makedirs(self.path("features"), exist_ok=True)
            extractor = visual_mod.pretrain_extractor(
                self.catalog.image_array(), feature_dim=cfg.feature_dim,
                width=cfg.extractor_width, epochs=cfg.extractor_epochs,
                lr=cfg.extractor_lr, seed=cfg.seed + 11,
                noise_aug=cfg.extractor_noise_aug)
            torch.save({"state_dict": extractor.state_dict(),
                        "config": {"feature_dim": cfg.feature_dim, "width": cfg.extractor_width}},
                       outputs[0])
            feats = visual_mod.extract_features(extractor, self.catalog.image_array())
            np.save(outputs[1], feats)
            self._cache.pop("extractor", None)
            self._cache.pop("features", None)

        return self._stage("features", params, outputs, _do)

    def cluster(self):
        cfg = self.cfg
        self.build_features()
        params = {"dep": self._dep("features"), "k": cfg.k_clusters, "seed": cfg.seed}
        outputs = [self.path("features", "clusters.json"), self.path("features", "clusters.npy")]

        def _do():
            model = visual_mod.fit_clusters(self.features, cfg.k_clusters, cfg.seed + 22,
                                            item_ids=list(self.catalog.items))
            visual_mod.save_clusters(model, self.path("features", "clusters"))
            self._cache.pop("clusters", None)

        return self._stage("cluster", params, outputs, _do)

    def train_rec(self, kinds=None):
        cfg = self.cfg
        self.build_features()
        ran = False
        for kind in (kinds or cfg.models):
            tc = cfg.train_config_for(kind)
            params = {"dep": self._dep("features"), "kind": kind,
                      "train": dataclasses.asdict(tc), "d_latent": cfg.d_latent,
                      "d_visual": cfg.d_visual, "cnn_width": cfg.cnn_width,
                      "seed": cfg.seed}
            prefix = self.path("models", kind)
            outputs = [f"{prefix}.pt", f"{prefix}.json", f"{prefix}_history.json"]

            def _do(kind=kind, tc=tc, prefix=prefix, outputs=outputs):
                os.makedirs(self.path("models"), exist_ok=True)
                catalog = self.catalog
                model = recsys_mod.build_model(
                    kind, catalog.n_users, catalog.n_items,
                    features=self.features, images=catalog.image_array(),
                    d_latent=cfg.d_latent, d_visual=cfg.d_visual,
                    cnn_width=cfg.cnn_width, seed=cfg.seed + 33)
                result = recsys_mod.train_model(model, self.split, catalog, tc,
                                                seed=cfg.seed + 44)
                recsys_mod.save_checkpoint(model, prefix, extra={
                    "train_config": dataclasses.asdict(tc), "seed": cfg.seed,
                    "best_epoch": result.best_epoch,
                    "best_valid_loss": result.best_valid_loss})
                with open(outputs[2], "w") as fh:
                    json.dump(result.history, fh, indent=1)
                self._cache.pop(f"model:{kind}", None)

            ran |= self._stage(f"train-rec:{kind}", params, outputs, _do)
        return ran

    def train_diffusion(self):
        cfg = self.cfg
        self.prepare()
        params = {"dep": self._dep("prepare"), "t_max": cfg.t_max,
                  "train": dataclasses.asdict(cfg.diffusion), "seed": cfg.seed,
                  "corpus_extra": cfg.diffusion_corpus}
        prefix = self.path("diffusion", "denoiser")
        outputs = [f"{prefix}.pt", f"{prefix}.json", f"{prefix}_history.json"]

        def _do():
            os.makedirs(self.path("diffusion"), exist_ok=True)
            images = self.catalog.image_array()
            if cfg.diffusion_corpus > 0 and not cfg.data_csv:
                extra = synth_mod.render_family(
                    cfg.diffusion_corpus, cfg.image_side, seed=cfg.seed + 551,
                    texture=cfg.corpus.texture)
                images = np.concatenate([images, extra], axis=0)
            net, history = diff_mod.train_denoiser(
                images, self.schedule, cfg.diffusion, seed=cfg.seed + 55)
            diff_mod.save_denoiser(net, self.schedule, prefix,
                                   extra={"history": history, "seed": cfg.seed + 55})
            with open(outputs[2], "w") as fh:
                json.dump(history, fh, indent=1)
            self._cache.pop("denoiser", None)

        return self._stage("train-diffusion", params, outputs, _do)

    def run_attack(self, condition, attack_cfg=None):
        """condition: 'aip', 'ipdgi', or an ipdgi variant name."""
        cfg = self.cfg
        if condition == "aip":
            self.build_features()
            params = {"dep": self._dep("features"), "eps": cfg.aip_eps_max,
                      "epochs": cfg.aip_epochs, "lr": cfg.aip_lr, "seed": cfg.seed}
        else:
            self.cluster()
            self.train_diffusion()
            acfg = attack_cfg or self._ipdgi_config(condition)
            params = {"features": self._dep("features"), "cluster": self._dep("cluster"),
                      "diffusion": self._dep("train-diffusion"),
                      "attack": dataclasses.asdict(acfg)}
        out_dir = self.path("adv", condition)
        outputs = [os.path.join(out_dir, "attack_manifest.json")]

        def _do():
            targets = self.targets
            if condition == "aip":
                results = attack_mod.aip_attack_batch(
                    targets, self.catalog, self.extractor, eps_max=cfg.aip_eps_max,
                    epochs=cfg.aip_epochs, lr=cfg.aip_lr, seed=cfg.seed + 77)
            else:
                acfg = attack_cfg or self._ipdgi_config(condition)
                results = attack_mod.ipdgi_attack_batch(
                    targets, self.catalog, self.clusters, self.extractor,
                    self.denoiser, self.schedule, acfg)
            attack_mod.write_attack_outputs(results, self.dir, condition)

        return self._stage(f"attack:{condition}", params, outputs, _do)

    def _ipdgi_config(self, condition):
        acfg = replace(self.cfg.attack, seed=self.cfg.seed + 66)
        if condition == "ipdgi":
            return acfg
        if condition == "ipdgi_no_clustering":
            return replace(acfg, no_clustering=True)
        if condition == "ipdgi_no_perturbation":
            return replace(acfg, no_perturbation=True)
        raise PipelineError(f"unknown attack condition '{condition}'")

    # -- evaluation -------------------------------------------------------

    def _scores_for(self, kind, adv_images=None):
        model = self.model(kind)
        catalog = self.catalog
        if adv_images is None:
            return model.score_all()
        if kind == "dvbpr":
            return model.score_all(images=catalog.substituted(adv_images).image_array())
        feats = self.features.copy()
        stack = np.stack([adv_images[t] for t in self.targets])
        new = visual_mod.extract_features(self.extractor, stack)
        for row, t in zip(new, self.targets):
            feats[catalog.item_index[t]] = row
        return model.score_all(features=feats)

    def evaluate(self, conditions=ATTACK_CONDITIONS, report_name="report"):
        cfg = self.cfg
        deps = {"models": [self._dep(f"train-rec:{kind}") for kind in cfg.models],
                "attacks": {c: self._dep(f"attack:{c}") for c in conditions},
                "ks": list(cfg.ks)}
        out_dir = self.path("report")
        outputs = [os.path.join(out_dir, f"{report_name}.json"),
                   os.path.join(out_dir, f"{report_name}.md")]

        def _do():
            os.makedirs(out_dir, exist_ok=True)
            report = self.build_report(conditions)
            report.save(outputs[0])
            with open(outputs[1], "w") as fh:
                fh.write(report.markdown())

        self._stage(f"evaluate:{report_name}", deps, outputs, _do)
        return metrics_mod.MetricReport.load(outputs[0])

    def build_report(self, conditions=ATTACK_CONDITIONS):
        cfg = self.cfg
        catalog, split, targets = self.catalog, self.split, self.targets
        with open(self.path("prepared", "meta.json")) as fh:
            meta = json.load(fh)
        report = metrics_mod.MetricReport(ks=list(cfg.ks), seed=cfg.seed, corpus=meta)

        cond_images = {"none": None}
        orig_stack = np.stack([catalog.images[t] for t in targets])
        pen_orig = visual_mod.extract_features(self.extractor, orig_stack, penultimate=True)
        for cond in conditions:
            imgs, _ = attack_mod.load_attack_images(self.dir, cond)
            missing = [t for t in targets if t not in imgs]
            if missing:
                raise PipelineError(f"attack '{cond}' lacks images for {missing[:3]}...")
            cond_images[cond] = imgs
            pen_adv = visual_mod.extract_features(
                self.extractor, np.stack([imgs[t] for t in targets]), penultimate=True)
            report.set_fid(cond, metrics_mod.fid(pen_adv, pen_orig))

        for kind in cfg.models:
            for cond, imgs in cond_images.items():
                scores = self._scores_for(kind, adv_images=imgs)
                target_ranks = recsys_mod.rank_targets(scores, catalog, split, targets)
                test_ranks = recsys_mod.test_item_ranks(scores, catalog, split)
                for k in cfg.ks:
                    report.set_cell(
                        kind, cond, k,
                        er=metrics_mod.exposure_rate(target_ranks, k),
                        target_ndcg=metrics_mod.ndcg_at_k(target_ranks, k),
                        overall_ndcg=metrics_mod.ndcg_at_k({"test": test_ranks}, k))
        return report

    # -- figure emission ----------------------------------------------------

    def render_plots(self, report=None, stem="report"):
        report = report or metrics_mod.MetricReport.load(self.path("report", f"{stem}.json"))
        plot_dir = self.path("report", "plots")
        os.makedirs(plot_dir, exist_ok=True)
        path = os.path.join(plot_dir, f"{stem}_er5.png")
        conditions = sorted({c for m in report.models.values() for c in m})
        _grouped_bars(report, conditions, path)
        return [path]


def _grouped_bars(report, conditions, path, k=5):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    models = sorted(report.models)
    width = 0.8 / max(len(conditions), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(models))
    for ci, cond in enumerate(conditions):
        vals = [report.models[m].get(cond, {}).get(str(k), {}).get("er", np.nan) for m in models]
        ax.bar(xs + ci * width, vals, width, label=cond)
    ax.set_xticks(xs + width * (len(conditions) - 1) / 2)
    ax.set_xticklabels(models)
    ax.set_ylabel(f"ER@{k}")
    ax.set_title(f"Target exposure rate @ {k}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


SWEEP_PARAMS = {"eps_max": "eps_max", "e": "epochs", "epochs": "epochs",
                "T": "steps", "steps": "steps", "xi": "xi"}


def run_pipeline(cfg):
    """prepare -> features/cluster -> train -> attack -> evaluate -> report."""
    run = Run(cfg)
    run.prepare()
    run.build_features()
    run.cluster()
    run.train_rec()
    run.train_diffusion()
    for cond in ATTACK_CONDITIONS:
        run.run_attack(cond)
    report = run.evaluate(ATTACK_CONDITIONS)
    run.render_plots(report)
    return run, report


def sweep(cfg, parameter, values):
    """Attack+evaluate per hyper-parameter value; others held at their defaults."""
    if parameter not in SWEEP_PARAMS:
        raise PipelineError(f"unknown sweep parameter '{parameter}' "
                            f"(expected one of {sorted(set(SWEEP_PARAMS))})")
    if not values:
        raise PipelineError("sweep needs at least one value")
    field_name = SWEEP_PARAMS[parameter]
    run = Run(cfg)
    run.prepare()
    run.cluster()
    run.train_rec()
    run.train_diffusion()

    rows = []
    for value in values:
        cond = f"sweep_{field_name}_{value}"
        acfg = replace(run._ipdgi_config("ipdgi"),
                       **{field_name: type(getattr(cfg.attack, field_name))(value)})
        run.run_attack(cond, attack_cfg=acfg)
        report = run.evaluate(conditions=(cond,), report_name=cond)
        row = {"value": value, "fid": report.fids[cond], "er5": {}}
        for kind in cfg.models:
            row["er5"][kind] = report.cell(kind, cond, 5)["er"]
        row["er5_mean"] = float(np.mean(list(row["er5"].values())))
        rows.append(row)

    out = {"parameter": field_name, "values": list(values), "rows": rows}
    os.makedirs(run.path("report"), exist_ok=True)
    sweep_json = run.path("report", f"sweep_{field_name}.json")
    with open(sweep_json, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
    plot = _sweep_plot(out, run.path("report", "plots"), field_name)
    return out, sweep_json, plot


def _sweep_plot(doc, plot_dir, field_name):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(plot_dir, exist_ok=True)
    xs = [row["value"] for row in doc["rows"]]
    er = [row["er5_mean"] for row in doc["rows"]]
    fid = [row["fid"] for row in doc["rows"]]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(xs, er, "o-", color="tab:blue", label="ER@5")
    ax1.set_xlabel(field_name)
    ax1.set_ylabel("ER@5", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, fid, "s--", color="tab:red", label="FID")
    ax2.set_ylabel("FID", color="tab:red")
    fig.tight_layout()
    path = os.path.join(plot_dir, f"sweep_{field_name}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablate(cfg):
    """Full IPDGI vs. its no-clustering and no-perturbation ablations, shared seeds."""
    run = Run(cfg)
    run.prepare()
    run.cluster()
    run.train_rec()
    run.train_diffusion()
    for cond in ABLATION_CONDITIONS:
        run.run_attack(cond)
    report = run.evaluate(conditions=ABLATION_CONDITIONS, report_name="ablation")
    doc = {"conditions": list(ABLATION_CONDITIONS), "er5": {}}
    for kind in cfg.models:
        doc["er5"][kind] = {c: report.cell(kind, c, 5)["er"] for c in ABLATION_CONDITIONS}
    path = run.path("report", "ablation.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    plot_dir = run.path("report", "plots")
    os.makedirs(plot_dir, exist_ok=True)
    _grouped_bars(report, list(ABLATION_CONDITIONS), os.path.join(plot_dir, "ablation_er5.png"))
    return run, report, doc
