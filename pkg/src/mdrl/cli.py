"""mdrl command line: corpus generation, tracker training, policy training and reporting.

Exit codes: 0 ok, 2 configuration error, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import RunConfig, load_config
from .dst import generate_corpus, joint_accuracy, read_corpus, train_dst, write_corpus
from .nn import ConfigurationError, NumericError
from .policy import load_policy
from .trpo import DIALOGS_GRID, KL_GRID, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdrl", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output directory (default: [experiment].out_dir)")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="simulate labelled dialogs for the tracker")
    g.add_argument("--noise", type=float, help="override [dst].noise_p")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--corpus-dir", type=Path, help="default: OUT/corpora")

    t = sub.add_parser("train-dst", help="train the shared tracker on OUT/corpora")
    t.add_argument("--corpus-dir", type=Path)
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval-dst", help="joint accuracy of OUT/dst.ckpt on the test corpora")
    e.add_argument("--corpus-dir", type=Path)
    e.add_argument("--dst", type=Path)

    tr = sub.add_parser("train", help="train policies (one cell, or every configured cell)")
    tr.add_argument("--mode", choices=("single", "mtl", "tl", "all"), default="all")
    tr.add_argument("--domain", help="single/tl target domain (default: every domain)")
    tr.add_argument("--dst", type=Path)

    ev = sub.add_parser("evaluate", help="success and length of a saved policy, or of the rule-based baseline")
    ev.add_argument("--policy", type=Path, help="policy checkpoint; omit for the rule-based baseline")
    ev.add_argument("--domain", required=True)
    ev.add_argument("--episodes", type=int, default=1000)
    ev.add_argument("--dst", type=Path)

    gs = sub.add_parser("grid-search", help="sweep max KL x dialogs per iteration for one domain")
    gs.add_argument("--domain", required=True)
    gs.add_argument("--kl-grid", type=_floats, default=list(KL_GRID))
    gs.add_argument("--dialogs-grid", type=_ints, default=list(DIALOGS_GRID))
    gs.add_argument("--budget", type=int)
    gs.add_argument("--seeds", type=_ints)
    gs.add_argument("--dst", type=Path)

    sub.add_parser("report", help="rebuild the success/length tables from the CSV logs")
    return p


def _out(args, cfg: RunConfig) -> Path:
    out = args.out or Path(cfg.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpora(corpus_dir: Path, names, split: str) -> dict:
    out = {}
    for n in names:
        path = corpus_dir / f"{n}.{split}.jsonl"
        if not path.exists():
            raise harness.MissingArtifact(f"missing corpus {path}; run `mdrl gen-corpus` first")
        out[n] = read_corpus(path)
    return out


def cmd_gen_corpus(args, cfg: RunConfig, out: Path) -> int:
    noise = cfg.dst.noise_p if args.noise is None else args.noise
    n_train = args.n_train or cfg.dst.n_train
    n_test = args.n_test or cfg.dst.n_test
    corpus_dir = args.corpus_dir or out / "corpora"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for d in cfg.domain_specs():
        for split, n in (("train", n_train), ("test", n_test)):
            dialogs = generate_corpus(d, n, noise, rng, cfg.dst.explore_eps, cfg.dst.confirm_fraction)
            write_corpus(corpus_dir / f"{d.name}.{split}.jsonl", dialogs)
        print(f"{d.name}: {n_train} train / {n_test} test dialogs at noise {noise:g} -> {corpus_dir}")
    return EXIT_OK


def cmd_train_dst(args, cfg: RunConfig, out: Path) -> int:
    specs = cfg.domain_specs()
    corpora = _corpora(args.corpus_dir or out / "corpora", [d.name for d in specs], "train")
    dcfg = replace(cfg.dst, epochs=args.epochs) if args.epochs else cfg.dst
    model, tlog = train_dst(corpora, dcfg, np.random.default_rng(args.seed), domains=specs)
    model.save(out / "dst.ckpt")
    for i, (loss, acc, vl) in enumerate(zip(tlog.epoch_losses, tlog.val_accuracy, tlog.val_losses)):
        print(f"epoch {i:3d} loss {loss:.4f} val joint acc {acc:.3f} val loss {vl:.4f}")
    print(f"best epoch {tlog.best_epoch}; saved {out / 'dst.ckpt'}")
    return EXIT_OK


def cmd_eval_dst(args, cfg: RunConfig, out: Path) -> int:
    model = harness.load_dst(args.dst or out / "dst.ckpt")
    names = [d.name for d in cfg.domain_specs()]
    tests = _corpora(args.corpus_dir or out / "corpora", names, "test")
    for n in names:
        print(f"{n}\tjoint accuracy {joint_accuracy(model, tests[n], n):.4f}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    dst_path = args.dst or out / "dst.ckpt"
    if args.mode == "all" and args.domain is None:
        table = harness.run_experiment(cfg, dst_path, out)
        print(harness.format_table(table))
        return EXIT_OK
    modes = cfg.experiment.modes if args.mode == "all" else [args.mode]
    names = [d.name for d in cfg.domain_specs()]
    if args.domain is not None and args.domain not in names:
        raise ConfigurationError(f"domain {args.domain!r} not in [domains].names {names}")
    cells = []
    for mode in modes:
        if mode == "mtl":
            cells.append(harness.Cell("mtl", args.seed))
        else:
            cells += [harness.Cell(mode, args.seed, n) for n in ([args.domain] if args.domain else names)]
    dst = harness.load_dst(dst_path)
    for cell in cells:
        run = harness.run_cell(cell, cfg, dst, out)
        status = "already done" if run is None else f"final success {run.evaluations[-1].success_rate:.3f}"
        print(f"{cell.run_id}: {status}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> int:
    specs = {d.name: d for d in cfg.domain_specs()}
    if args.domain not in specs:
        raise ConfigurationError(f"unknown domain {args.domain!r}")
    d = specs[args.domain]
    if args.policy is None:
        est = harness.measure_rule_based(d, args.episodes, cfg.domains.noise_p, args.seed, cfg.domains.reward)
        print(f"rule-based {d.name}: success {est.success:.4f} ± {est.success_stderr:.4f}, "
              f"length {est.length:.2f} ± {est.length_stderr:.2f}")
        return EXIT_OK
    if not args.policy.exists():
        raise harness.MissingArtifact(f"no policy checkpoint at {args.policy}")
    policy, _ = load_policy(args.policy)
    dst = harness.load_dst(args.dst or out / "dst.ckpt")
    s, length = evaluate(policy, dst, d, args.episodes, args.seed, cfg.domains.noise_p, cfg.domains.reward)
    print(f"policy {args.policy.name} on {d.name}: success {s:.4f}, length {length:.2f}")
    return EXIT_OK


def cmd_grid_search(args, cfg: RunConfig, out: Path) -> int:
    specs = {d.name: d for d in cfg.domain_specs()}
    if args.domain not in specs:
        raise ConfigurationError(f"unknown domain {args.domain!r}")
    dst = harness.load_dst(args.dst or out / "dst.ckpt")
    schedule = cfg.schedule()
    if args.budget:
        schedule = replace(schedule, budget=args.budget)
    ref = harness.measure_rule_based(specs[args.domain], cfg.experiment.rule_episodes, cfg.domains.noise_p, 0,
                                     cfg.domains.reward, out / "rule_based.json")
    result = harness.grid_search(specs[args.domain], dst, cfg.trpo, schedule, args.seeds or cfg.experiment.seeds,
                                 ref.success, args.kl_grid, args.dialogs_grid, cfg.policy)
    path = out / f"grid_{args.domain}.csv"
    with open(path, "w") as fh:
        fh.write("max_kl,dialogs_per_iteration,final_success,dialogs_to_beat\n")
        for (kl, dpi), (s, dtb) in sorted(result.cells.items()):
            fh.write(f"{kl:g},{dpi},{s:.6f},{dtb:.1f}\n")
    kl, dpi = result.best
    print(f"best: max_kl={kl:g} dialogs_per_iteration={dpi} (final success {result.cells[kl, dpi][0]:.3f}); "
          f"all cells in {path}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    table = harness.report(cfg, out)
    print(harness.format_table(table))
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train-dst": cmd_train_dst, "eval-dst": cmd_eval_dst, "train": cmd_train,
            "evaluate": cmd_evaluate, "grid-search": cmd_grid_search, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.scale)
        out = _out(args, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
