"""Stage orchestration with content-hash caching.

Stages run in dependency order; each stage directory carries a marker file
with the hash of (stage config subtree + upstream hashes). A rerun with an
unchanged config reuses every cached stage; changing one knob invalidates
exactly the stages downstream of it.
"""

import dataclasses
import json
import os

import torch

from . import analysis as an
from .attacks import (AttackConfig, accuracy, adaptive_nonrobust_attack,
                      cw_linf, fgsm, pgd, transfer_attack)
from .config import ExperimentConfig, config_hash, config_to_dict
from .data import DatasetHandle, SyntheticSpec, load_cifar10, make_synthetic
from .distill import (IBConfig, build_mask, class_majority_mask,
                      estimate_channel_profile, ib_optimize_sigma,
                      save_mask_archive)
from .errors import ConfigError
from .models import load_checkpoint, make_toy_convnet
from .perturb import (PerturbOptConfig, apply_crp, ceo_optimize_crp,
                      load_crp_archive, optimize_rp, save_crp_archive)
from .proxy import refresh_bank, save_bank
from .training import ATMethod, TrainConfig, finetune_with_proxy, pretrain_at

STAGES = ["data", "pretrain", "distill", "crp", "proxies", "finetune",
          "attack", "analyze", "report"]

CACHE_ENV = "ROBUSTPROXY_CACHE"


def cache_root(cfg: ExperimentConfig) -> str:
    return os.environ.get(CACHE_ENV) or os.path.join(cfg.out_dir, "stages")


class Pipeline:
    """Executes the declared stages for one experiment config."""

    def __init__(self, cfg: ExperimentConfig, resume: bool = True):
        self.cfg = cfg
        self.resume = resume
        self.root = cache_root(cfg)
        os.makedirs(self.root, exist_ok=True)
        self.hashes: dict[str, str] = {}
        self._mem: dict[str, object] = {}

    # -- cache plumbing ----------------------------------------------------

    def stage_dir(self, name: str) -> str:
        d = os.path.join(self.root, name)
        os.makedirs(d, exist_ok=True)
        return d

    def _marker(self, name):
        return os.path.join(self.stage_dir(name), "stage.json")

    def _stage_hash(self, name, subtree, upstream):
        return config_hash({"stage": name, "cfg": subtree,
                            "upstream": [self.hashes[u] for u in upstream]})

    def _is_cached(self, name, h):
        if not self.resume:
            return False
        try:
            with open(self._marker(name)) as fh:
                return json.load(fh).get("hash") == h
        except (OSError, json.JSONDecodeError):
            return False

    def _mark(self, name, h, **extra):
        with open(self._marker(name), "w") as fh:
            json.dump({"hash": h, **extra}, fh, indent=2, sort_keys=True)

    def run_stage(self, name, subtree, upstream, fn):
        h = self._stage_hash(name, subtree, upstream)
        self.hashes[name] = h
        if self._is_cached(name, h):
            return False
        extra = fn(self.stage_dir(name)) or {}
        self._mark(name, h, **extra)
        return True

    # -- datasets ----------------------------------------------------------

    def datasets(self):
        if "datasets" not in self._mem:
            d = self.cfg.dataset
            if d.kind == "synthetic":
                spec = SyntheticSpec(
                    num_classes=d.num_classes,
                    examples_per_class=d.examples_per_class,
                    image_size=d.image_size, channels=d.channels,
                    class_signal_strength=d.class_signal_strength,
                    noise_std=d.noise_std, seed=self.cfg.seed)
                train = make_synthetic(spec, "train")
                test = make_synthetic(dataclasses.replace(
                    spec, examples_per_class=d.test_examples_per_class), "test")
            else:
                train = load_cifar10(d.data_dir, "train",
                                     max_per_class=d.max_per_class)
                test = load_cifar10(d.data_dir, "test",
                                    max_per_class=d.max_per_class)
            self._mem["datasets"] = (train, test)
        return self._mem["datasets"]

    def _new_model(self, seed):
        d = self.cfg.dataset
        size = d.image_size if d.kind == "synthetic" else 32
        channels = d.channels if d.kind == "synthetic" else 3
        return make_toy_convnet(
            num_classes=d.num_classes if d.kind == "synthetic" else 10,
            in_channels=channels, widths=tuple(self.cfg.model.widths),
            image_size=size, bias=self.cfg.model.bias, seed=seed)

    def _train_config(self, epochs) -> TrainConfig:
        t = self.cfg.training
        c = self.cfg.crp
        dl = self.cfg.distill
        return TrainConfig(
            epochs=epochs, batch_size=t.batch_size, lr=t.lr,
            attack=AttackConfig(epsilon=t.attack_epsilon,
                                steps=t.attack_steps,
                                step_size=t.attack_epsilon / 4,
                                seed=self.cfg.seed),
            eval_attack=AttackConfig(epsilon=self.cfg.attacks.epsilon,
                                     steps=self.cfg.attacks.pgd_steps,
                                     seed=self.cfg.seed),
            margin=t.margin, proxy_weight=t.proxy_weight,
            refresh_period=t.refresh_period,
            ib=IBConfig(beta=dl.beta, steps=dl.steps, lr=dl.lr,
                        noise_draws=dl.noise_draws, seed=self.cfg.seed),
            crp=PerturbOptConfig(steps=c.steps, lr=c.lr, c=c.c,
                                 batch_size=c.batch_size,
                                 subset_size=c.subset_size,
                                 seed=self.cfg.seed),
            use_class_mask=c.use_class_mask,
            profile_samples=dl.profile_samples,
            seed=self.cfg.seed)

    def _method(self) -> ATMethod:
        t = self.cfg.training
        return ATMethod(variant=t.method, trades_beta=t.trades_beta,
                        mart_lambda=t.mart_lambda)

    # -- stages ------------------------------------------------------------

    def stage_data(self):
        def fn(out):
            train, test = self.datasets()
            return {"train_examples": len(train), "test_examples": len(test),
                    "checksum": float(train.images[0].sum())}
        return self.run_stage("data", {"dataset": config_to_dict(self.cfg)["dataset"],
                                       "seed": self.cfg.seed}, [], fn)

    def stage_pretrain(self):
        def fn(out):
            train, test = self.datasets()
            method = self._method()
            tc = self._train_config(self.cfg.training.pretrain_epochs)
            baseline = self._new_model(self.cfg.seed)
            _, hist = pretrain_at(baseline, train, method, tc, test,
                                  checkpoint_path=os.path.join(out, "baseline.pt"))
            src_cfg = dataclasses.replace(tc, seed=self.cfg.seed + 1)
            source = self._new_model(self.cfg.seed + 1)
            pretrain_at(source, train, method, src_cfg,
                        checkpoint_path=os.path.join(out, "source.pt"))
            with open(os.path.join(out, "history.json"), "w") as fh:
                json.dump(hist, fh, indent=2)
            return {"final": hist[-1]}
        subtree = {k: config_to_dict(self.cfg)[k]
                   for k in ("model", "training")}
        subtree["seed"] = self.cfg.seed
        return self.run_stage("pretrain", subtree, ["data"], fn)

    def _baseline(self):
        return load_checkpoint(os.path.join(self.stage_dir("pretrain"),
                                            "baseline.pt"))

    def _eval_batch(self, test: DatasetHandle):
        n = min(self.cfg.attacks.eval_examples, len(test))
        return test.images[:n], test.labels[:n]

    def stage_distill(self):
        def fn(out):
            train, test = self.datasets()
            model = self._baseline()
            model.eval()
            ref = train.images[:self.cfg.distill.profile_samples]
            profile = estimate_channel_profile(model, [ref], source="train")
            x, y = self._eval_batch(test)
            n = min(self.cfg.distill.sample_size, len(y))
            ib = IBConfig(beta=self.cfg.distill.beta,
                          steps=self.cfg.distill.steps,
                          lr=self.cfg.distill.lr,
                          noise_draws=self.cfg.distill.noise_draws,
                          seed=self.cfg.seed)
            sigma = ib_optimize_sigma(model, x[:n], y[:n], profile, ib)
            mask = build_mask(sigma, profile)
            torch.save({"mu_z": profile.mu_z, "sigma_z": profile.sigma_z,
                        "T": profile.T}, os.path.join(out, "profile.pt"))
            save_mask_archive(os.path.join(out, "masks.pt"),
                              example_ids=test.ids[:n], mask=mask,
                              beta=self.cfg.distill.beta,
                              param_version=model.param_version)
            return {"T": profile.T,
                    "robust_channels": float(mask.i_r.mean(dim=0).sum())}
        return self.run_stage(
            "distill", {"distill": config_to_dict(self.cfg)["distill"]},
            ["pretrain"], fn)

    def _load_distill(self):
        out = self.stage_dir("distill")
        prof = torch.load(os.path.join(out, "profile.pt"),
                          weights_only=False)
        from .distill import ChannelProfile, load_mask_archive
        profile = ChannelProfile(mu_z=prof["mu_z"], sigma_z=prof["sigma_z"],
                                 T=prof["T"])
        _, mask, _, _ = load_mask_archive(os.path.join(out, "masks.pt"))
        return profile, mask

    def stage_crp(self):
        def fn(out):
            train, _ = self.datasets()
            model = self._baseline()
            model.eval()
            profile, _ = self._load_distill()
            c = self.cfg.crp
            crps = {}
            for k in range(train.num_classes):
                n = min(c.subset_size, len(train.per_class_index[k]))
                from .data import sample_class_subset
                xs, ys, _ = sample_class_subset(train, k, n, self.cfg.seed)
                ib = IBConfig(beta=self.cfg.distill.beta,
                              steps=self.cfg.distill.steps,
                              lr=self.cfg.distill.lr,
                              noise_draws=self.cfg.distill.noise_draws,
                              seed=self.cfg.seed)
                sigma = ib_optimize_sigma(model, xs, ys, profile, ib)
                mask = build_mask(sigma, profile)
                if c.use_class_mask:
                    mask = class_majority_mask(mask)
                pcfg = PerturbOptConfig(steps=c.steps, lr=c.lr, c=c.c,
                                        batch_size=c.batch_size,
                                        subset_size=n, seed=self.cfg.seed)
                crps[k] = ceo_optimize_crp(model, train, k, mask, pcfg)
            save_crp_archive(os.path.join(out, "crps.pt"), crps,
                             config_hash(self.cfg))
            return {"classes": len(crps)}
        return self.run_stage(
            "crp", {"crp": config_to_dict(self.cfg)["crp"]},
            ["distill"], fn)

    def _crps(self):
        return load_crp_archive(os.path.join(self.stage_dir("crp"), "crps.pt"))

    def stage_proxies(self):
        def fn(out):
            train, _ = self.datasets()
            model = self._baseline()
            model.eval()
            bank = refresh_bank(model, train, self._crps(), epoch=0,
                                seed=self.cfg.seed,
                                refresh_period=self.cfg.training.refresh_period)
            save_bank(os.path.join(out, "bank.pt"), bank)
            return {"classes": len(bank.proxies)}
        return self.run_stage("proxies", {}, ["crp"], fn)

    def stage_finetune(self):
        def fn(out):
            train, test = self.datasets()
            model = self._baseline()
            tc = self._train_config(self.cfg.training.finetune_epochs)
            _, result = finetune_with_proxy(
                model, train, self._method(), tc, test,
                checkpoint_path=os.path.join(out, "finetuned.pt"))
            with open(os.path.join(out, "history.json"), "w") as fh:
                json.dump(result["history"], fh, indent=2)
            save_bank(os.path.join(out, "bank.pt"), result["bank"])
            return {"final": result["history"][-1]}
        subtree = {"training": config_to_dict(self.cfg)["training"],
                   "crp": config_to_dict(self.cfg)["crp"],
                   "distill": config_to_dict(self.cfg)["distill"]}
        return self.run_stage("finetune", subtree, ["pretrain", "crp"], fn)

    def _finetuned(self):
        return load_checkpoint(os.path.join(self.stage_dir("finetune"),
                                            "finetuned.pt"))

    def stage_attack(self):
        a = self.cfg.attacks

        def eval_model(tag, model, source, x, y, mask):
            rows = []
            seed = self.cfg.seed
            for name in a.suite:
                if name == "clean":
                    acc, norm = accuracy(model, x, y), 0.0
                elif name == "fgsm":
                    b = fgsm(model, x, y, a.epsilon)
                    acc, norm = accuracy(model, b.adv, y), float(b.norms.mean())
                elif name == "pgd":
                    b = pgd(model, x, y, AttackConfig(
                        epsilon=a.epsilon, steps=a.pgd_steps, seed=seed))
                    acc, norm = accuracy(model, b.adv, y), float(b.norms.mean())
                elif name == "cw":
                    b = cw_linf(model, x, y, AttackConfig(
                        epsilon=a.epsilon, steps=a.cw_steps, seed=seed))
                    acc, norm = accuracy(model, b.adv, y), float(b.norms.mean())
                elif name == "pgd_l2":
                    b = pgd(model, x, y, AttackConfig(
                        norm="l2", epsilon=a.l2_epsilon, steps=a.pgd_steps,
                        seed=seed))
                    acc, norm = accuracy(model, b.adv, y), float(b.norms.mean())
                elif name == "adaptive":
                    b = adaptive_nonrobust_attack(model, x, y, mask,
                                                  AttackConfig(
                                                      epsilon=a.adaptive_epsilon,
                                                      steps=a.pgd_steps,
                                                      seed=seed))
                    acc, norm = accuracy(model, b.adv, y), float(b.norms.mean())
                elif name == "transfer":
                    acc = transfer_attack(source, model, x, y, AttackConfig(
                        epsilon=a.epsilon, steps=a.pgd_steps, seed=seed))
                    norm = a.epsilon
                else:
                    raise ConfigError(f"unknown attack {name!r}")
                rows.append({"condition": tag, "attack": name,
                             "accuracy": acc, "mean_norm": norm})
            return rows

        def fn(out):
            _, test = self.datasets()
            x, y = self._eval_batch(test)
            baseline = self._baseline()
            baseline.eval()
            finetuned = self._finetuned()
            finetuned.eval()
            source = load_checkpoint(os.path.join(
                self.stage_dir("pretrain"), "source.pt"))
            source.eval()
            profile, _ = self._load_distill()
            ib = IBConfig(beta=self.cfg.distill.beta,
                          steps=self.cfg.distill.steps,
                          lr=self.cfg.distill.lr,
                          noise_draws=self.cfg.distill.noise_draws,
                          seed=self.cfg.seed)
            rows = []
            for tag, model in (("baseline", baseline),
                               ("finetuned", finetuned)):
                # Adaptive masks are recomputed on the evaluated model.
                ref = self.datasets()[0].images[:self.cfg.distill.profile_samples]
                prof_m = estimate_channel_profile(model, [ref])
                sigma = ib_optimize_sigma(model, x, y, prof_m, ib)
                mask = build_mask(sigma, prof_m)
                rows.extend(eval_model(tag, model, source, x, y, mask))
            with open(os.path.join(out, "results.json"), "w") as fh:
                json.dump({"config_hash": config_hash(self.cfg),
                           "rows": rows}, fh, indent=2, sort_keys=True)
            return {"rows": len(rows)}
        return self.run_stage(
            "attack", {"attacks": config_to_dict(self.cfg)["attacks"]},
            ["pretrain", "finetune", "distill"], fn)

    def stage_analyze(self):
        def fn(out):
            train, test = self.datasets()
            model = self._baseline()
            model.eval()
            profile, mask = self._load_distill()
            crps = self._crps()
            x, y = self._eval_batch(test)
            n = min(self.cfg.analysis.gradient_samples, mask.i_r.shape[0],
                    len(y))
            from .distill import ChannelMask
            sub_mask = ChannelMask(i_r=mask.i_r[:n], i_nr=mask.i_nr[:n],
                                   sigma_snapshot=mask.sigma_snapshot[:n],
                                   threshold_used=mask.threshold_used)
            g_without = an.gradient_norm_distribution(
                model, x[:n], y[:n], sub_mask, label="without_crp")
            g_with = an.gradient_norm_distribution(
                model, x[:n], y[:n], sub_mask, crps=crps, label="with_crp")
            an.write_distribution(os.path.join(out, "gradient_norms.tsv"),
                                  g_without, g_with)
            s_without = an.positive_similarity_distribution(
                model, test, pairs=self.cfg.analysis.similarity_pairs,
                seed=self.cfg.seed, label="without_crp")
            s_with = an.positive_similarity_distribution(
                model, test, crps=crps,
                pairs=self.cfg.analysis.similarity_pairs,
                seed=self.cfg.seed, label="with_crp")
            an.write_distribution(os.path.join(out, "similarity.tsv"),
                                  s_without, s_with)
            betas, r_acc, nr_acc = [], [], []
            for beta in self.cfg.analysis.beta_sweep:
                ib = IBConfig(beta=beta, steps=self.cfg.distill.steps,
                              lr=self.cfg.distill.lr,
                              noise_draws=self.cfg.distill.noise_draws,
                              seed=self.cfg.seed)
                sigma = ib_optimize_sigma(model, x, y, profile, ib)
                m = build_mask(sigma, profile)
                betas.append(beta)
                r_acc.append(an.masked_accuracy(model, x, y, m, "robust"))
                nr_acc.append(an.masked_accuracy(model, x, y, m, "nonrobust"))
            curve = an.AblationCurve(betas, r_acc, nr_acc)
            an.write_ablation_curve(os.path.join(out, "beta_ablation.tsv"),
                                    curve)
            if self.cfg.analysis.export_features:
                an.export_features(model, test,
                                   os.path.join(out, "features.bin"))
                an.export_features(model, test,
                                   os.path.join(out, "features_crp.bin"),
                                   crps=crps)
            return {"similarity_mean_gain":
                    s_with.summary["mean"] - s_without.summary["mean"]}
        return self.run_stage(
            "analyze", {"analysis": config_to_dict(self.cfg)["analysis"]},
            ["attack"], fn)

    def stage_report(self):
        from .report import generate_report

        def fn(out):
            verdicts = generate_report(self.cfg, self.root, out)
            return {"sanity": verdicts}
        return self.run_stage("report", {}, ["analyze"], fn)

    def run(self, until: str = "report"):
        """Run stages in order up to and including ``until``."""
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        ran = {}
        for name in STAGES[:STAGES.index(until) + 1]:
            ran[name] = getattr(self, f"stage_{name}")()
        return ran
