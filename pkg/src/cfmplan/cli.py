"""``cfmplan`` command line: data generation, vocabulary, training, sampling, evaluation.

Every command works inside one run directory (``--out``). Settings come from,
in increasing priority: the built-in defaults, ``--config FILE`` (or the run
directory's ``config.json``), ``CFMPLAN_*`` environment variables, and
command-line flags. Exit codes: 0 success, 2 configuration error, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import constrain, dataset, flow, geom, net, report, sampler, score
from .config import RunConfig
from .errors import ConfigError, MissingArtifactError, NumericalError, PlannerError
from .net import ConditionSet
from .traj import fps_vocabulary, load_vocabulary, save_vocabulary

log = logging.getLogger("cfmplan")

ENV_PREFIX = "CFMPLAN_"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST_FORMAT = "cfmplan-manifest"


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if str(text).strip().lower() in ("none", "") else float(text)


# flag name -> (dotted config path, parser, help)
FLAGS = {
    "seed": ("seed", int, "master seed"),
    "n-train": ("data.n_train", int, "training scenes to generate"),
    "n-eval": ("data.n_eval", int, "held-out scenes to generate"),
    "horizon": ("data.horizon", int, "waypoints per trajectory"),
    "vocab-size": ("vocab.size", int, "anchors in the FPS vocabulary"),
    "hidden": ("arch.hidden", int, "hidden width of the velocity network"),
    "depth": ("arch.depth", int, "hidden layers of the velocity network"),
    "batch-size": ("train.batch_size", int, "training batch size"),
    "lr": ("train.lr", float, "Adam learning rate"),
    "epochs": ("train.epochs", int, "stage-1 epochs"),
    "cond-dropout": ("train.cond_dropout", float, "per-signal condition dropout"),
    "finetune-epochs": ("finetune.epochs", int, "stage-2 epochs"),
    "hinge-weight": ("finetune.hinge_weight", float, "weight of the stage-2 energy hinge"),
    "lam": ("constraint.lam", float, "velocity-correction coefficient lambda"),
    "cvf": ("constraint.cvf_enabled", _bool, "velocity correction on/off"),
    "civ": ("constraint.civ_enabled", _bool, "anchor initialisation on/off"),
    "energy-weight": ("constraint.energy_weight", float, "energy-guidance weight at sampling"),
    "steps": ("sampler.steps", int, "Euler steps"),
    "candidates": ("sampler.candidates", int, "candidates per scene"),
    "guidance-scale": ("sampler.guidance_scale", float, "classifier-free guidance scale"),
    "reward": ("sampler.reward", _optional_float, "EP condition for sampling (none: absent)"),
}


def env_name(flag):
    return ENV_PREFIX + flag.upper().replace("-", "_")


# ---------------------------------------------------------------------------
# configuration


def resolve_config(args) -> RunConfig:
    """Defaults < config file < environment < flags."""
    out = args.out or os.environ.get(env_name("out")) or "run"
    cfg_path = args.config or os.environ.get(env_name("config"))
    if cfg_path:
        if not Path(cfg_path).exists():
            raise MissingArtifactError(cfg_path)
        cfg = RunConfig.load(cfg_path)
    elif (Path(out) / "config.json").exists():
        cfg = RunConfig.load(Path(out) / "config.json")
    else:
        cfg = RunConfig()
    for flag, (path, parse, _) in FLAGS.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is None and env_name(flag) in os.environ:
            try:
                value = parse(os.environ[env_name(flag)])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{env_name(flag)}: {exc}") from None
            if value is None:  # an explicit "none" for an optional value
                cfg = cfg.with_value(path, None)
                continue
        if value is not None:
            cfg = cfg.with_value(path, value)
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = cfg.with_value(key.strip(), value)
    return cfg.with_value("out_dir", str(out)).validate()


# ---------------------------------------------------------------------------
# artifacts


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return path


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def manifest_path(out):
    return Path(out) / "data" / "manifest.json"


def vocab_path(out):
    return Path(out) / "vocab.npz"


def checkpoint_path(out, stage):
    return Path(out) / f"stage{stage}.npz"


def _entry(split, i, sample: dataset.Sample, scenario_file):
    return {
        "id": f"{split}-{i:04d}",
        "scenario": scenario_file,
        "recipe": dataset.recipe_dict(sample.recipe),
        "gt": sample.gt.tolist(),
        "command": sample.command,
        "ep": sample.ep,
    }


def load_manifest(out):
    """Returns ``(manifest_dict, {split: [(id, Sample), ...]})``."""
    path = _require(manifest_path(out))
    man = json.loads(path.read_text())
    if man.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: not a dataset manifest")
    splits = {}
    for split, entries in man["splits"].items():
        rows = []
        for e in entries:
            sc = geom.load_scenario(_require(path.parent / e["scenario"]))
            recipe = geom.ScenarioRecipe(**e["recipe"])
            rows.append((e["id"], dataset.Sample(sc, recipe, np.array(e["gt"], dtype=float), e["command"], e["ep"])))
        splits[split] = rows
    return man, splits


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> Path:
    """Generate train/eval scenes with ground truth and write the dataset manifest."""
    out = _mkdir(cfg.out_dir)
    scen_dir = _mkdir(out / "data" / "scenarios")
    d = cfg.data
    h = cfg.config_hash()
    splits = {}
    for split, n in (("train", d.n_train), ("eval", d.n_eval)):
        recipes = dataset.random_recipes(
            n, cfg.stage_seed(f"recipes-{split}"), d.generators, d.width, d.radius, d.length, d.obstacles
        )
        samples = dataset.generate_samples(recipes, cfg.stage_seed(f"gt-{split}"), d.horizon)
        entries = []
        for i, s in enumerate(samples):
            if not np.all(s.scenario.contains(s.gt)):
                raise NumericalError(f"{split} sample {i}: ground truth leaves the road", i)
            name = f"{split}-{i:04d}.json"
            geom.save_scenario(s.scenario, scen_dir / name)
            entries.append(_entry(split, i, s, f"scenarios/{name}"))
        splits[split] = entries
        log.info("%s: %d scenes", split, n)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "config_hash": h,
        "horizon": d.horizon,
        "bounds": cfg.bounds.as_list(),
        "splits": splits,
    }
    path = manifest_path(out)
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    # the run directory is implied by where the file lives
    cfg.with_value("out_dir", ".").save(out / "config.json")
    log.info("wrote data/manifest.json (config %s)", h[:12])
    return path


def cmd_build_vocab(cfg: RunConfig) -> Path:
    """FPS vocabulary over the training ground truth."""
    man, splits = load_manifest(cfg.out_dir)
    train = splits["train"]
    gts = np.array([s.gt for _, s in train])
    k = cfg.vocab.size
    if k > len(gts):
        log.warning("vocabulary size %d exceeds the %d training trajectories; using %d", k, len(gts), len(gts))
        k = len(gts)
    vocab = fps_vocabulary(gts, k, seed=cfg.stage_seed("vocab"), dataset_id=man["config_hash"])
    assign = dataset.nearest_anchors(gts, vocab)
    path = vocab_path(cfg.out_dir)
    save_vocabulary(vocab, path, extra={"config_hash": cfg.config_hash(), "train_anchor_ids": assign.tolist()})
    log.info("vocabulary: %d anchors, %d distinct nearest anchors in training data", k, len(set(assign.tolist())))
    return path


def _training_set(cfg):
    _, splits = load_manifest(cfg.out_dir)
    vocab, meta = load_vocabulary(_require(vocab_path(cfg.out_dir)))
    samples = [s for _, s in splits["train"]]
    data = dataset.build_training_set(samples, vocab, cfg.bounds, anchor_ids=meta["train_anchor_ids"])
    return data


def cmd_train(cfg: RunConfig) -> Path:
    """Stage-1 flow-matching training."""
    data = _training_set(cfg)
    params, opt, tlog = flow.train_stage1(data, cfg.train_config("train"), arch=cfg.architecture())
    _check_log(tlog)
    logs = _mkdir(Path(cfg.out_dir) / "logs")
    flow.write_training_log(tlog, logs / "train_log.csv")
    path = checkpoint_path(cfg.out_dir, 1)
    net.save_checkpoint(path, params, opt, cfg.config_hash(), extra={"stage": 1})
    for row in tlog:
        log.info("epoch %d mean loss %.6f", row["epoch"], row["mean_loss"])
    return path


def cmd_finetune(cfg: RunConfig) -> Path:
    """Stage-2 constraint-aware fine-tuning from the stage-1 checkpoint."""
    params, _, _ = net.load_checkpoint(_require(checkpoint_path(cfg.out_dir, 1)))
    data = _training_set(cfg)
    ft = cfg.finetune
    field_for = constrain.scenario_field_cache(data.scenarios, cfg.data.resolution)
    params, opt, tlog = constrain.train_stage2(
        params, data, cfg.train_config("finetune", epochs=ft.epochs), ft.hinge_weight, ft.tau, field_for
    )
    _check_log(tlog)
    logs = _mkdir(Path(cfg.out_dir) / "logs")
    flow.write_training_log(tlog, logs / "finetune_log.csv")
    path = checkpoint_path(cfg.out_dir, 2)
    net.save_checkpoint(path, params, opt, cfg.config_hash(), extra={"stage": 2})
    for row in tlog:
        log.info("epoch %d mean loss %.6f", row["epoch"], row["mean_loss"])
    return path


def _check_log(tlog):
    for row in tlog:
        if not np.isfinite(row["mean_loss"]):
            raise NumericalError(f"non-finite loss in epoch {row['epoch']}", row["epoch"])


def cmd_sample(cfg: RunConfig, stage=2, split="eval", name="candidates") -> Path:
    """Candidates for every scene of ``split`` from the stage-``stage`` checkpoint."""
    params, _, _ = net.load_checkpoint(_require(checkpoint_path(cfg.out_dir, stage)))
    _, splits = load_manifest(cfg.out_dir)
    if split not in splits:
        raise ConfigError(f"manifest has no split {split!r}")
    vocab, _ = load_vocabulary(_require(vocab_path(cfg.out_dir)))
    scfg = cfg.sampler_config()
    if scfg.candidates > len(vocab):
        raise ConfigError(f"{scfg.candidates} candidates requested but the vocabulary has {len(vocab)} anchors")
    groups = []
    n_dac = n_all = 0
    for i, (sid, s) in enumerate(splits[split]):
        ctx = sampler.ScenarioContext.from_scenario(s.scenario, vocab, cfg.bounds, cfg.data.resolution)
        anchors = score.top_k_anchors(vocab, s.scenario, ctx.field, scfg.candidates, cfg.weights)
        shared = ConditionSet(command=net.command_one_hot(s.command), reward=cfg.sampler.reward)
        cands = sampler.sample_candidates(params, anchors, shared, ctx, scfg, stream=i)
        dac = geom.dac_compliant_many(np.array([c.trajectory for c in cands]), ctx.field)
        n_dac += int(dac.sum())
        n_all += len(cands)
        groups.append((sid, cands, ctx.field))
    out = _mkdir(Path(cfg.out_dir) / "candidates") / f"{name}.csv"
    sampler.write_candidates(out, groups, cfg.config_hash())
    log.info("%d candidates over %d scenes, DAC rate %.4f", n_all, len(groups), n_dac / max(n_all, 1))
    return out


def cmd_eval(cfg: RunConfig, files=(), force=False, svg=True) -> Path:
    """Rank candidates per scene and write the summary, per-scene table and figures."""
    out = Path(cfg.out_dir)
    files = [Path(f) for f in files] or sorted((out / "candidates").glob("*.csv"))
    if not files:
        raise MissingArtifactError(out / "candidates" / "*.csv")
    loaded = []
    for f in files:
        h, groups = sampler.read_candidates(_require(f))
        loaded.append((f.stem, h, groups))
    hashes = sorted({h for _, h, _ in loaded})
    if len(hashes) > 1 and not force:
        raise ConfigError(f"candidate files carry different config hashes {[x[:12] for x in hashes]}; pass --force to compare them")
    _, splits = load_manifest(out)
    by_id = {sid: s for rows in splits.values() for sid, s in rows}
    vocab, _ = load_vocabulary(_require(vocab_path(out)))
    rep = _mkdir(out / "report")
    summaries, all_rows = [], []
    for run, h, groups in loaded:
        results = []
        for sid, rows in groups.items():
            if sid not in by_id:
                raise ConfigError(f"{run}: scene {sid} is not in the manifest")
            s = by_id[sid]
            field = geom.compute_esdf(geom.rasterize_road(s.scenario, cfg.data.resolution))
            trajs = np.array([r[1] for r in rows])
            res, best = report.evaluate_scenario(run, sid, s.scenario, field, s.gt, trajs, vocab, cfg.weights)
            results.append(res)
            if svg:
                fig_dir = _mkdir(rep / run)
                report.write_svg(fig_dir / f"{sid}.svg", s.scenario, s.gt, trajs, best)
        summary = report.summarise(run, h, results)
        summaries.append(summary)
        all_rows += results
        log.info(
            "%s: candidate DAC %.4f, selected DAC %.4f, mean EP %.4f, endpoint error %.3f m, modes %.2f",
            run, summary.candidate_dac, summary.selected_dac, summary.mean_ep, summary.endpoint_error, summary.modes_mean,
        )
    path = rep / "summary.csv"
    report.write_summary(path, summaries)
    report.write_scenario_results(rep / "scenarios.csv", all_rows)
    return path


def cmd_show_config(cfg: RunConfig) -> str:
    text = json.dumps({"config_hash": cfg.config_hash(), "config": cfg.to_dict()}, indent=2, sort_keys=True)
    print(text)
    return text


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--out", help=f"run directory (env {env_name('out')}, default ./run)")
    g.add_argument("--config", help=f"RunConfig JSON file (env {env_name('config')})")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field, e.g. sampler.steps=50")
    g.add_argument("--threads", type=int, help=f"BLAS thread limit (env {env_name('threads')})")
    g.add_argument("--quiet", action="store_true", help="log to file only")
    h = common.add_argument_group("hyperparameters")
    for flag, (path, parse, help_text) in FLAGS.items():
        h.add_argument(f"--{flag}", type=parse, help=f"{help_text} [{path}; env {env_name(flag)}]")

    p = argparse.ArgumentParser(prog="cfmplan", description="Constrained flow-matching trajectory planner.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate scenes and the dataset manifest")
    sub.add_parser("build-vocab", parents=[common], help="farthest-point anchor vocabulary")
    sub.add_parser("train", parents=[common], help="stage-1 flow-matching training")
    sub.add_parser("finetune", parents=[common], help="stage-2 constraint-aware fine-tuning")
    sp = sub.add_parser("sample", parents=[common], help="sample candidates for held-out scenes")
    sp.add_argument("--stage", type=int, choices=(1, 2), default=2, help="checkpoint to sample from")
    sp.add_argument("--split", default="eval")
    sp.add_argument("--name", default="candidates", help="output file stem under candidates/")
    ep = sub.add_parser("eval", parents=[common], help="evaluate candidate files")
    ep.add_argument("files", nargs="*", help="candidate CSVs (default: every file under candidates/)")
    ep.add_argument("--force", action="store_true", help="accept candidate files with different config hashes")
    ep.add_argument("--no-svg", action="store_true", help="skip per-scene figures")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def _setup_logging(cfg, command, quiet):
    log.setLevel(logging.INFO)
    for hdl in list(log.handlers):
        log.removeHandler(hdl)
        hdl.close()
    fmt = logging.Formatter("%(levelname)s %(message)s")
    if not quiet:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(fmt)
        log.addHandler(sh)
    if command != "show-config":
        fh = logging.FileHandler(_mkdir(Path(cfg.out_dir) / "logs") / f"{command}.log", mode="w")
        fh.setFormatter(fmt)
        log.addHandler(fh)
    log.propagate = False


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dispatch(args, cfg):
    cmd = args.command
    if cmd == "gen-data":
        return cmd_gen_data(cfg)
    if cmd == "build-vocab":
        return cmd_build_vocab(cfg)
    if cmd == "train":
        return cmd_train(cfg)
    if cmd == "finetune":
        return cmd_finetune(cfg)
    if cmd == "sample":
        return cmd_sample(cfg, args.stage, args.split, args.name)
    if cmd == "eval":
        return cmd_eval(cfg, args.files, args.force, not args.no_svg)
    return cmd_show_config(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        threads = args.threads
        if threads is None and env_name("threads") in os.environ:
            threads = int(os.environ[env_name("threads")])
        _setup_logging(cfg, args.command, args.quiet)
        with _thread_limit(threads):
            _dispatch(args, cfg)
    except MissingArtifactError as exc:
        print(f"cfmplan: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"cfmplan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PlannerError, ValueError) as exc:
        print(f"cfmplan: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        for hdl in list(log.handlers):
            log.removeHandler(hdl)
            hdl.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
