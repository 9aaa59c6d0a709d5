"""Command-line driver for the two-stage pipeline.

    devdet [--config PATH] [--seed N] [--out DIR] [--stage-epochs N] COMMAND

Commands run in the order synth, pretrain, mine, stage1, fitdict, daft,
eval; ``run-all`` executes exactly that sequence and ``ablate`` runs the
variant and selection-strategy grids on top of finished artifacts.

Every stage writes its files plus a ``stamp.json`` (config hash, seed and
sha256 of each file) into ``<out>/<stage>/``; downstream commands verify the
stamps of everything they read, so an artifact chain produced under a
different configuration is refused instead of silently mixed.

Exit codes: 0 success, 2 configuration error, 3 missing or stale artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_hash, load_checkpoint, parameter_hash, save_checkpoint
from .config import ConfigError, RunConfig, load_config, with_overrides
from .daft import BundleError, PipelineModel, finetune, finetune_parallel, infer_batch, load_bundle, save_bundle
from .data import LoadError, SampleSet, load_manifest
from .datagen import generate_benchmark
from .detector import NumericalError, make_detector, predict_batch, pretrain
from .dosedict import DivergenceError, DoseDictModel, fit
from .ffdev import Stage1Error, apply_developer, generate_developer, make_generator, train_stage1
from .metrics import MetricsReport, summarize
from .mining import MiningConfig, ScoreTable, Strategy, score_table, select, select_variant

log = logging.getLogger("devdet")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

# stage directory -> command that produces it
PRODUCER = {
    "benchmark": "synth",
    "pretrain": "pretrain",
    "mine": "mine",
    "stage1": "stage1",
    "fitdict": "fitdict",
    "daft": "daft",
    "eval": "eval",
}
SEQUENCE = ("synth", "pretrain", "mine", "stage1", "fitdict", "daft", "eval")
HISTOGRAM_BINS = 20


class ArtifactError(RuntimeError):
    """A required artifact is missing, corrupted, or from another config."""


class Run:
    """Paths, stamps and the run log for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.config_hash = cfg.hash()

    def dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def stamp(self, stage: str, files: list[str], seed: int | None = None, **extra) -> None:
        d = self.root / stage
        stamp = {
            "stage": stage,
            "config_hash": self.config_hash,
            "seed": seed,
            "files": {f: file_hash(d / f) for f in files},
            **extra,
        }
        (d / "stamp.json").write_text(json.dumps(stamp, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    def require(self, stage: str, name: str | None = None) -> Path:
        """Path of a verified artifact of ``stage`` (the stage dir if ``name`` is None)."""
        d = self.root / stage
        producer = PRODUCER[stage]
        stamp_path = d / "stamp.json"
        if not stamp_path.exists():
            raise ArtifactError(f"missing artifacts in {d}; run `devdet {producer}` first")
        stamp = json.loads(stamp_path.read_text(encoding="utf-8"))
        if stamp["config_hash"] != self.config_hash:
            raise ArtifactError(
                f"{d} was produced under config {stamp['config_hash']}, current config is "
                f"{self.config_hash}; re-run `devdet {producer}` (or the whole chain) with this config"
            )
        for fname, digest in stamp["files"].items():
            f = d / fname
            if not f.exists():
                raise ArtifactError(f"missing {f}; run `devdet {producer}` first")
            if file_hash(f) != digest:
                raise ArtifactError(f"{f} does not match its stamp; re-run `devdet {producer}`")
        if name is None:
            return d
        if name not in stamp["files"]:
            raise ArtifactError(f"{d} has no {name}; run `devdet {producer}` first")
        return d / name

    def log_entry(self, command: str, seed: int | None, wall: float) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {
            "command": command,
            "config_hash": self.config_hash,
            "seed": seed,
            "wall_time_s": round(wall, 3),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(self.root / "run_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- data -----------------------------------------------------------------

    def dataset(self) -> SampleSet:
        return load_manifest(self.require("benchmark", "manifest.txt"))

    def splits(self) -> tuple[SampleSet, SampleSet, SampleSet]:
        """(train, in-domain test, holdout test)."""
        data = self.dataset()
        holdout = set(self.cfg.benchmark.holdout_domain_ids)
        test = data.split("test")
        return (
            data.split("train"),
            test.subset(lambda s: s.domain_id not in holdout, "test_in_domain"),
            test.subset(lambda s: s.domain_id in holdout, "test_holdout"),
        )

    def pretrained(self):
        model, _ = load_checkpoint(self.require("pretrain", "detector.ckpt"))
        return model


# -- commands -------------------------------------------------------------------


def cmd_synth(run: Run) -> int:
    bc = run.cfg.benchmark_config()
    d = run.dir("benchmark")
    manifest = generate_benchmark(bc, d)
    run.stamp("benchmark", ["manifest.txt"], bc.seed, stats=manifest.stats)
    log.info("synth: %d samples, dominance factor %.2f", len(manifest.records), manifest.stats["dominance_factor"])
    return bc.seed


def cmd_pretrain(run: Run) -> int:
    cfg = run.cfg
    train, _, _ = run.splits()
    tc = cfg.pretrain_config()
    init_seed = cfg.seed_for("pretrain.init")
    det = pretrain(make_detector(init_seed), train, tc)
    d = run.dir("pretrain")
    save_checkpoint(det, d / "detector.ckpt", config_hash=run.config_hash, stage="pretrain", seed=tc.seed, init_seed=init_seed, loss_history=det.loss_history)
    table = score_table(det, train)
    (d / "scores_train.txt").write_text(table.to_text(), encoding="utf-8")
    run.stamp("pretrain", ["detector.ckpt", "scores_train.txt"], tc.seed, loss_history=det.loss_history)
    return tc.seed


def _selection(run: Run, config: MiningConfig) -> dict[str, list[str]]:
    table = ScoreTable.read(run.require("pretrain", "scores_train.txt"))
    if set(table.labels.tolist()) != {0, 1}:
        raise ValueError("mining needs both classes in the training set")
    hf, er = select(table, config)
    s1 = select_variant(table, config)
    return {"hard_fake": hf, "easy_real": er, "stage1": s1}


def cmd_mine(run: Run) -> None:
    sel = _selection(run, run.cfg.mining)
    d = run.dir("mine")
    (d / "selection.json").write_text(
        json.dumps({"config_hash": run.config_hash, "strategy": Strategy(run.cfg.mining.strategy).value, **sel}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    run.stamp("mine", ["selection.json"], None, sizes={k: len(v) for k, v in sel.items()})


def _read_selection(run: Run) -> dict[str, list[str]]:
    return json.loads(run.require("mine", "selection.json").read_text(encoding="utf-8"))


def _train_generator(run: Run, det, s1: SampleSet):
    cfg = run.cfg
    s1c = cfg.stage1_config()
    try:
        return train_stage1(make_generator(cfg.seed_for("stage1.init")), det, s1, s1c), s1c
    except Stage1Error as exc:
        save_checkpoint(exc.last_good, run.dir("stage1") / "generator.last_good.ckpt", config_hash=run.config_hash, stage="stage1-aborted")
        raise


def cmd_stage1(run: Run) -> int:
    train, _, _ = run.splits()
    det = run.pretrained()
    sel = _read_selection(run)
    s1 = train.select_ids(sel["stage1"], "S_1")
    gen, s1c = _train_generator(run, det, s1)
    d = run.dir("stage1")
    save_checkpoint(gen, d / "generator.ckpt", config_hash=run.config_hash, stage="stage1", seed=s1c.seed, loss_history=gen.loss_history)
    run.stamp("stage1", ["generator.ckpt"], s1c.seed, loss_history=gen.loss_history)
    return s1c.seed


def cmd_fitdict(run: Run) -> int:
    cfg = run.cfg
    train, _, _ = run.splits()
    det_path = run.require("pretrain", "detector.ckpt")
    det, _ = load_checkpoint(det_path)
    sel = _read_selection(run)
    hf = train.select_ids(sel["hard_fake"], "S_HF")
    _, f_hf = predict_batch(det, hf.images())
    _, f_train = predict_batch(det, train.images())
    seed = cfg.seed_for("dictionary")
    model = fit(
        f_hf,
        K=cfg.dictionary.num_atoms,
        lambda_l1=cfg.dictionary.lambda_l1,
        seed=seed,
        calib_features=f_train,
        percentiles=tuple(cfg.dictionary.percentiles),
        extractor_hash=file_hash(det_path),
    )
    model.meta = {"config_hash": run.config_hash, "seed": seed}
    model.save(run.dir("fitdict") / "dosedict.bin")
    run.stamp("fitdict", ["dosedict.bin"], seed, rounds=len(model.objective_trace), calib=[model.calib_lo, model.calib_hi])
    return seed


def _pipeline(run: Run, dose_mode: str = "adaptive") -> PipelineModel:
    det = run.pretrained()
    gen, _ = load_checkpoint(run.require("stage1", "generator.ckpt"))
    dictionary = DoseDictModel.load(run.require("fitdict", "dosedict.bin"))
    extractor = run.pretrained()
    return PipelineModel(det, gen, dictionary, extractor, run.cfg.daft.base_dose, dose_mode)


def cmd_daft(run: Run) -> int:
    train, _, _ = run.splits()
    fc = run.cfg.daft_config()
    pipe = finetune(_pipeline(run), train, fc)
    d = run.dir("daft")
    save_bundle(pipe, d / "bundle", config_hash=run.config_hash, seed=fc.seed, loss_history=pipe.loss_history)
    files = [f"bundle/{f}" for f in sorted(p.name for p in (d / "bundle").iterdir())]
    run.stamp("daft", files, fc.seed, loss_history=pipe.loss_history)
    return fc.seed


def _report(conf: np.ndarray, sset: SampleSet, threshold: float, **extra) -> MetricsReport:
    rep = summarize((conf, sset.labels, sset.domain_ids), threshold)
    rep.extra.update(extra)
    return rep


def _histogram_rows(name: str, part: str, conf: np.ndarray, labels: np.ndarray) -> list[list]:
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    rows = []
    for label in (0, 1):
        counts, _ = np.histogram(conf[labels == label], bins=edges)
        rows += [[name, part, label, f"{edges[i]:.2f}", f"{edges[i + 1]:.2f}", int(c)] for i, c in enumerate(counts)]
    return rows


def _projection(features: np.ndarray) -> np.ndarray:
    """First two principal components (sign fixed for reproducibility)."""
    centered = features - features.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    basis = basis * np.where(basis[np.arange(len(basis)), np.abs(basis).argmax(1)] < 0, -1.0, 1.0)[:, None]
    proj = centered @ basis.T
    return proj if proj.shape[1] == 2 else np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    # verify the whole chain before using any of it
    for stage in ("benchmark", "pretrain", "mine", "stage1", "fitdict", "daft"):
        run.require(stage)
    _, ind, ho = run.splits()
    base = run.pretrained()
    pipe, meta = load_bundle(run.require("daft") / "bundle")
    if meta.get("config_hash") != run.config_hash:
        raise ArtifactError("pipeline bundle was produced under another config; re-run `devdet daft`")
    if parameter_hash(pipe.extractor) != parameter_hash(base):
        raise ArtifactError("bundle extractor differs from the pretrained detector; re-run `devdet daft`")
    d = run.dir("eval")
    parts = [("in_domain", ind)] + ([("holdout", ho)] if len(ho) else [])
    hist, proj, per_sample = [], [], []
    summary = {"config_hash": run.config_hash, "threshold": cfg.threshold}
    for part, sset in parts:
        x = sset.images()
        base_conf, base_feat = predict_batch(base, x)
        pipe_conf, doses, developed = infer_batch(pipe, x)
        _, pipe_feat = predict_batch(pipe.detector, developed)
        for name, conf in (("base", base_conf), ("pipeline", pipe_conf)):
            rep = _report(conf, sset, cfg.threshold, model=name, part=part, config_hash=run.config_hash)
            rep.write(d / f"{name}_{part}.json")
            summary[f"{name}_{part}"] = {"m_acc": rep.m_acc, "s_auc": rep.s_auc, "mean_domain_auc": rep.mean_domain_auc}
            hist += _histogram_rows(name, part, conf, sset.labels)
        for name, feats in (("base", base_feat), ("pipeline", pipe_feat)):
            p2 = _projection(feats)
            proj += [[name, part, s.sample_id, s.label, s.domain_id, f"{a:.6f}", f"{b:.6f}"] for s, (a, b) in zip(sset, p2)]
        per_sample += [
            [part, s.sample_id, s.label, s.domain_id, f"{bc:.9f}", f"{pc:.9f}", f"{dose:.9f}"]
            for s, bc, pc, dose in zip(sset, base_conf, pipe_conf, doses)
        ]
    _write_csv(d / "scores.csv", ["part", "sample_id", "label", "domain_id", "base_conf", "pipeline_conf", "dose"], per_sample)
    _write_csv(d / "histogram.csv", ["model", "part", "label", "bin_lo", "bin_hi", "count"], hist)
    _write_csv(d / "projection.csv", ["model", "part", "sample_id", "label", "domain_id", "pc1", "pc2"], proj)
    (d / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    files = [f"{n}_{p}.json" for p, _ in parts for n in ("base", "pipeline")]
    run.stamp("eval", files + ["scores.csv", "histogram.csv", "projection.csv", "summary.json"], None)
    for key, val in summary.items():
        if isinstance(val, dict):
            log.info("%-20s M-ACC %.4f  S-AUC %.4f", key, val["m_acc"], val["s_auc"])


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- ablations ------------------------------------------------------------------


def _variant_entry(run: Run, name: str, conf_ind: np.ndarray, conf_ho: np.ndarray | None, ind: SampleSet, ho: SampleSet, out: Path) -> dict:
    rep = _report(conf_ind, ind, run.cfg.threshold, model=name, part="in_domain")
    rep.write(out / f"{name}_in_domain.json")
    entry = {"m_acc": rep.m_acc, "s_auc": rep.s_auc, "mean_domain_auc": rep.mean_domain_auc}
    if conf_ho is not None and len(ho):
        h = _report(conf_ho, ho, run.cfg.threshold, model=name, part="holdout")
        h.write(out / f"{name}_holdout.json")
        entry["holdout_acc"] = h.m_acc
    return entry


def _developed_conf(detector, gen, images: np.ndarray, dose: float) -> np.ndarray:
    delta = generate_developer(gen, images)
    return predict_batch(detector, apply_developer(images, delta, dose))[0]


def ablate_variants(run: Run, out: Path) -> dict:
    """Base, FFDev-only, fixed-dose fine-tune, adaptive sequential, adaptive parallel."""
    cfg = run.cfg
    train, ind, ho = run.splits()
    xi, xh = ind.images(), ho.images()
    base = run.pretrained()
    gen, _ = load_checkpoint(run.require("stage1", "generator.ckpt"))
    dose = cfg.daft.base_dose
    results = {}
    results["base"] = _variant_entry(run, "base", predict_batch(base, xi)[0], predict_batch(base, xh)[0] if len(ho) else None, ind, ho, out)
    results["ffdev_only"] = _variant_entry(
        run, "ffdev_only", _developed_conf(base, gen, xi, dose), _developed_conf(base, gen, xh, dose) if len(ho) else None, ind, ho, out
    )
    fixed = finetune(_pipeline(run, "fixed"), train, cfg.daft_config())
    results["ffdev_fixed_dose"] = _variant_entry(run, "ffdev_fixed_dose", infer_batch(fixed, xi)[0], infer_batch(fixed, xh)[0] if len(ho) else None, ind, ho, out)
    seq, _ = load_bundle(run.require("daft") / "bundle")
    results["ffdev_adaptive_seq"] = _variant_entry(run, "ffdev_adaptive_seq", infer_batch(seq, xi)[0], infer_batch(seq, xh)[0] if len(ho) else None, ind, ho, out)
    par = finetune_parallel(_pipeline(run), train, cfg.daft_config("daft_p"), cfg.stage1_config())
    results["ffdev_adaptive_par"] = _variant_entry(run, "ffdev_adaptive_par", infer_batch(par, xi)[0], infer_batch(par, xh)[0] if len(ho) else None, ind, ho, out)
    return results


def ablate_strategies(run: Run, out: Path) -> dict:
    """Stage-1 selection strategies; the dictionary is shared (it depends on S_HF only)."""
    cfg = run.cfg
    train, ind, ho = run.splits()
    base = run.pretrained()
    dictionary = DoseDictModel.load(run.require("fitdict", "dosedict.bin"))
    results = {}
    for strategy in Strategy:
        sel = _selection(run, replace(cfg.mining, strategy=strategy))
        s1 = train.select_ids(sel["stage1"], "S_1")
        gen, _ = _train_generator(run, base, s1)
        key = f"strategy_{strategy.value}"
        entry = {"stage1_size": len(s1)}
        entry["ffdev_only"] = _variant_entry(
            run, f"{key}_ffdev_only", _developed_conf(base, gen, ind.images(), cfg.daft.base_dose),
            _developed_conf(base, gen, ho.images(), cfg.daft.base_dose) if len(ho) else None, ind, ho, out,
        )
        pipe = finetune(PipelineModel(base, gen, dictionary, run.pretrained(), cfg.daft.base_dose), train, cfg.daft_config())
        entry["daft"] = _variant_entry(
            run, f"{key}_daft", infer_batch(pipe, ind.images())[0], infer_batch(pipe, ho.images())[0] if len(ho) else None, ind, ho, out
        )
        results[strategy.value] = entry
    return results


def cmd_ablate(run: Run, grid: str = "all") -> None:
    for stage in ("benchmark", "pretrain", "mine", "stage1", "fitdict", "daft"):
        run.require(stage)
    out = run.dir("ablate")
    files = []
    if grid in ("variants", "all"):
        res = ablate_variants(run, out)
        (out / "variants.json").write_text(json.dumps(res, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        files.append("variants.json")
        for name, r in res.items():
            log.info("%-20s M-ACC %.4f  holdout ACC %s", name, r["m_acc"], f"{r['holdout_acc']:.4f}" if "holdout_acc" in r else "-")
    if grid in ("strategies", "all"):
        res = ablate_strategies(run, out)
        (out / "strategies.json").write_text(json.dumps(res, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        files.append("strategies.json")
    run.stamp("ablate", files, None)


# -- entry point ----------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "mine": cmd_mine,
    "stage1": cmd_stage1,
    "fitdict": cmd_fitdict,
    "daft": cmd_daft,
    "eval": cmd_eval,
}
PRODUCER["ablate"] = "ablate"


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="YAML run configuration (default: built-in defaults)")
    parser.add_argument("--seed", metavar="N", type=int, default=default, help="root seed (overrides the config)")
    parser.add_argument("--out", metavar="DIR", default=default, help="artifact directory (overrides the config)")
    parser.add_argument("--stage-epochs", metavar="N", type=int, default=default, help="epochs for every training stage")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devdet", description="Developer-for-detector pipeline on a synthetic multi-domain benchmark.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate the benchmark images and manifest",
        "pretrain": "train the base detector and cache its training-set scores",
        "mine": "select hard fakes and easy reals from the cached scores",
        "stage1": "train the developer generator against the frozen detector",
        "fitdict": "fit the dose dictionary on hard-fake features",
        "daft": "fine-tune the detector on adaptively developed images",
        "eval": "score base detector and pipeline, write reports",
        "ablate": "variant and selection-strategy ablation grids",
        "run-all": "synth through eval in sequence",
        "show-config": "print the resolved configuration",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p, suppress=True)
        if name == "ablate":
            p.add_argument("--grid", choices=("variants", "strategies", "all"), default="all")
    return parser


def _execute(run: Run, command: str, args) -> None:
    if command == "show-config":
        sys.stdout.write(run.cfg.to_yaml())
        return
    run.root.mkdir(parents=True, exist_ok=True)
    (run.root / "config.yaml").write_text(run.cfg.to_yaml(), encoding="utf-8")
    names = SEQUENCE if command == "run-all" else (command,)
    for name in names:
        t0 = time.perf_counter()
        log.info("== %s", name)
        if name == "ablate":
            seed = cmd_ablate(run, getattr(args, "grid", "all"))
        else:
            seed = COMMANDS[name](run)
        run.log_entry(name, seed if isinstance(seed, int) else None, time.perf_counter() - t0)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, seed=args.seed, out_dir=args.out, stage_epochs=args.stage_epochs)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg)
    try:
        _execute(run, args.command, args)
    except ConfigError as exc:
        print("configuration error:", *[f"\n  - {v}" for v in exc.violations], file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, BundleError, LoadError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
