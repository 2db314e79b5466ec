"""Command-line pipeline: gen-data, pretrain, probe, eval, ablate, inspect-mask.

Runs are reproducible by construction: sampling subcommands require an
explicit ``--seed`` (no implicit entropy), and every output-producing run
writes a ``run_manifest.json`` beside its outputs with the resolved
configuration, inputs, outputs and timestamps. Settings come from a flat
``key=value`` config file plus repeatable ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, core, eval as evalmod, masking, net, probe, trainer
from .core import read_config_file, read_corpus, write_corpus
from .datagen import SynthSpec, generate
from .probe import BudgetSpec, FrozenEncoder
from .rng import stream
from .trainer import PretrainConfig

logger = logging.getLogger(__name__)

# Keys accepted in config files / --set, grouped by the consumer dataclass.
_PRETRAIN_KEYS = {
    "epochs",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "strategy",
    "lam",
    "eta",
    "eps_stab",
    "area_lo",
    "area_hi",
    "aspect_lo",
    "aspect_hi",
    "mu_start",
    "mu_end",
    "patch_k",
    "patch_t",
    "embed_dim",
    "enc_heads",
    "enc_blocks",
    "pred_dim",
    "pred_heads",
    "pred_blocks",
    "checkpoint_every",
}
_SYNTH_KEYS = {
    "subcarriers",
    "time_steps",
    "num_classes",
    "train_per_class",
    "val_per_class",
    "test_per_class",
    "unlabeled",
    "noise_std",
    "background_rank",
    "event_gain",
}
_PROBE_KEYS = {"budgets", "max_cap", "probe_lr", "hidden", "task"}
KNOWN_KEYS = _PRETRAIN_KEYS | _SYNTH_KEYS | _PROBE_KEYS


class CliError(Exception):
    """Fatal usage/runtime problem reported as a one-line diagnostic."""


def _resolve_settings(args) -> dict[str, str]:
    settings: dict[str, str] = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    seen = set()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key in seen:
            raise CliError(f"conflicting overrides for {key!r}")
        seen.add(key)
        settings[key] = value.strip()
    unknown = set(settings) - KNOWN_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    return settings


def _coerce_fields(cls, settings, skip=()):
    out = {}
    for field in dataclasses.fields(cls):
        if field.name in skip or field.name not in settings:
            continue
        raw = settings[field.name]
        if field.type in ("int", int):
            out[field.name] = int(raw)
        elif field.type in ("float", float):
            out[field.name] = float(raw)
        else:
            out[field.name] = raw
    return out


def build_pretrain_config(settings: dict[str, str], seed: int) -> PretrainConfig:
    kwargs = _coerce_fields(PretrainConfig, settings, skip=("seed", "area_range", "aspect_range"))
    area = (
        float(settings.get("area_lo", 0.15)),
        float(settings.get("area_hi", 0.30)),
    )
    aspect = (
        float(settings.get("aspect_lo", 0.5)),
        float(settings.get("aspect_hi", 2.0)),
    )
    return PretrainConfig(seed=seed, area_range=area, aspect_range=aspect, **kwargs)


def build_synth_spec(settings: dict[str, str], seed: int) -> SynthSpec:
    return SynthSpec(seed=seed, **_coerce_fields(SynthSpec, settings, skip=("seed",)))


def _threads(args) -> int:
    if getattr(args, "strict_serial", False):
        return 1
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("CSIJEPA_THREADS")
    return max(1, int(env)) if env else 1


def _write_manifest(out_dir: Path, subcommand, settings, seed, inputs, outputs, started):
    manifest = {
        "subcommand": subcommand,
        "config": settings,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    settings = _resolve_settings(args)
    spec = build_synth_spec(settings, args.seed)
    out = _out_dir(args)
    ds = generate(spec)
    outputs = []
    for name, corpus in (
        ("unlabeled", ds.unlabeled),
        ("train", ds.train),
        ("val", ds.val),
        ("test", ds.test),
    ):
        path = out / f"{name}.corpus"
        write_corpus(path, corpus.windows, corpus.labels, corpus.num_classes)
        outputs.append(path)
    echo = out / "synth_spec.json"
    echo.write_text(json.dumps(dataclasses.asdict(spec), indent=2) + "\n")
    outputs.append(echo)
    _write_manifest(out, "gen-data", settings, args.seed, [], outputs, started)
    print(f"wrote {len(ds.unlabeled)} unlabeled + {len(ds.train)}/{len(ds.val)}/{len(ds.test)} labeled windows to {out}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    settings = _resolve_settings(args)
    config = build_pretrain_config(settings, args.seed)
    corpus = read_corpus(args.corpus)
    out = _out_dir(args)
    state, records = trainer.pretrain(
        corpus.windows, config, out_dir=out, resume=args.resume, threads=_threads(args)
    )
    outputs = sorted(out.glob("checkpoint_epoch_*.ckpt")) + [out / "loss_log.csv"]
    _write_manifest(out, "pretrain", settings, args.seed, [args.corpus], outputs, started)
    print(
        f"pretrained {config.epochs} epochs ({state.step} steps), "
        f"final loss {records[-1].loss:.5f}, outputs in {out}"
    )
    return 0


def _load_labeled(path) -> core.Corpus:
    corpus = read_corpus(path)
    if corpus.labels is None:
        raise CliError(f"{path} is unlabeled; probe needs labeled splits")
    return corpus


def cmd_probe(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    settings = _resolve_settings(args)
    config = build_pretrain_config(settings, args.seed)
    train = _load_labeled(args.train)
    val = _load_labeled(args.val)
    test = _load_labeled(args.test)
    first = train.windows[0]
    patch_cfg = config.patch_config(first.subcarriers, first.time_steps)
    mcfg = config.model_config(first.channels)
    frozen = FrozenEncoder.from_checkpoint(args.checkpoint, mcfg, patch_cfg)

    heads = [h.strip() for h in args.head.split(",") if h.strip()]
    for h in heads:
        if h not in probe.HEAD_KINDS:
            raise CliError(f"unknown head {h!r}")
    if args.budgets:
        budget_list = tuple(int(b) for b in args.budgets.split(","))
    elif "budgets" in settings:
        budget_list = tuple(int(b) for b in settings["budgets"].split(","))
    else:
        budget_list = probe.DEFAULT_BUDGETS
    spec = BudgetSpec(budgets=budget_list, max_cap=int(settings.get("max_cap", probe.MAX_BUDGET_CAP)))
    budgets = spec.resolve(len(train))
    task = args.task or settings.get("task", "synthetic")

    out = _out_dir(args)
    features = (
        frozen.embed_corpus(train),
        frozen.embed_corpus(val),
        frozen.embed_corpus(test),
    )
    outputs = []
    for head in heads:
        for budget in budgets:
            record = probe.run_probe(
                frozen,
                train,
                val,
                test,
                head,
                budget,
                args.seed,
                task=task,
                features=features,
                lr=float(settings.get("probe_lr", 1e-3)),
                hidden=int(settings.get("hidden", 256)),
            )
            path = out / f"probe_{task}_{head}_{budget}.json"
            probe.write_probe_record(record, path)
            outputs.append(path)
            print(
                f"task={task} head={head} budget={budget} "
                f"acc={record.accuracy:.4f} f1={record.f1:.4f} epochs={record.epochs_ran}"
            )
    _write_manifest(
        out,
        "probe",
        settings,
        args.seed,
        [args.checkpoint, args.train, args.val, args.test],
        outputs,
        started,
    )
    return 0


def _labeled_dirs(entries) -> list[tuple[str, Path]]:
    out = []
    for entry in entries:
        if "=" in entry:
            label, _, path = entry.partition("=")
            out.append((label, Path(path)))
        else:
            path = Path(entry)
            out.append((path.name, path))
    return out


def cmd_eval(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    out = _out_dir(args)
    dirs = _labeled_dirs(args.probes)
    single = len(dirs) == 1
    curves = []
    inputs = []
    for label, directory in dirs:
        paths = sorted(Path(directory).glob("probe_*.json"))
        if not paths:
            raise CliError(f"no probe_*.json records under {directory}")
        inputs.extend(paths)
        records = probe.load_probe_records(paths)
        curves.extend(evalmod.curves_from_records(records, None if single else label))
    outputs = [out / "curves.csv"]
    evalmod.write_curves_csv(curves, outputs[0])

    if args.match:
        method_j, method_t = args.match
        by_task: dict[str, dict[str, evalmod.BudgetCurve]] = {}
        for c in curves:
            by_task.setdefault(c.task, {})[c.method] = c
        matches = []
        for task, methods in sorted(by_task.items()):
            if method_j in methods and method_t in methods:
                rep = evalmod.best_saving(methods[method_j], methods[method_t], args.tolerance)
                matches.append((task, method_j, method_t, rep))
                gains = evalmod.gain_summary(methods[method_j], methods[method_t])
                print(
                    f"task={task} mean dAcc={gains.mean_acc_pp:+.2f}pp max dAcc={gains.max_acc_pp:+.2f}pp "
                    f"saving={'%.1f%%' % rep.saving_pct if rep.matched else 'none'}"
                )
        if not matches:
            raise CliError(f"methods {args.match} share no task")
        match_path = out / "matches.csv"
        evalmod.write_matches_csv(matches, match_path)
        outputs.append(match_path)
    if args.gnuplot:
        outputs.extend(evalmod.write_gnuplot_curves(curves, out))
    _write_manifest(out, "eval", {}, None, inputs, outputs, started)
    print(f"wrote {', '.join(str(p.name) for p in outputs)} to {out}")
    return 0


def cmd_ablate(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    settings = _resolve_settings(args)
    config = build_pretrain_config(settings, args.seed)
    data_dir = Path(args.data)
    unlabeled = read_corpus(data_dir / "unlabeled.corpus")
    train = _load_labeled(data_dir / "train.corpus")
    val = _load_labeled(data_dir / "val.corpus")
    test = _load_labeled(data_dir / "test.corpus")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in masking.STRATEGIES:
            raise CliError(f"unknown strategy {s!r}")
    task = args.task or settings.get("task", "synthetic")
    out = _out_dir(args)
    rows = evalmod.ablation_matrix(
        strategies,
        unlabeled.windows,
        {task: (train, val, test)},
        config,
        budget=args.budget,
        probe_seed=args.seed,
        threads=_threads(args),
    )
    path = out / "ablation.csv"
    evalmod.write_ablation_csv(rows, path)
    for r in rows:
        print(f"strategy={r.strategy} task={r.task} acc={r.accuracy:.4f} f1={r.f1:.4f}")
    _write_manifest(out, "ablate", settings, args.seed, [data_dir], [path], started)
    return 0


def cmd_inspect_mask(args) -> int:
    settings = _resolve_settings(args)
    config = build_pretrain_config(settings, args.seed)
    corpus = read_corpus(args.corpus)
    if not 0 <= args.window < len(corpus):
        raise CliError(f"window index {args.window} outside corpus of {len(corpus)}")
    window = corpus.windows[args.window]
    patch_cfg = config.patch_config(window.subcarriers, window.time_steps)
    rng = stream(args.seed, "inspect", args.window)
    spec = masking.sample_mask(
        window,
        args.strategy,
        patch_cfg,
        rng,
        lam=config.lam,
        eta=config.eta,
        eps_stab=config.eps_stab,
        area_range=config.area_range,
        aspect_range=config.aspect_range,
    )
    print(spec.debug_line())
    scores = masking.patch_scores(masking.variation_map(window, config.lam), patch_cfg)
    r = masking.score_blocks(scores, spec.block)
    flat = [(-r[a, b], a, b) for a in range(r.shape[0]) for b in range(r.shape[1])]
    for neg, a, b in sorted(flat)[:5]:
        print(f"R[{a},{b}]={-neg:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def _add_common(sub, seed_required=True):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    sub.add_argument("--seed", type=int, required=seed_required, help="experiment seed (required)")


def _add_threading(sub):
    sub.add_argument("--threads", type=int, help="worker threads (default: $CSIJEPA_THREADS or 1)")
    sub.add_argument(
        "--strict-serial",
        action="store_true",
        help="force single-threaded, bitwise-reproducible execution",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csijepa",
        description="Self-supervised CSI pretraining, probing and label-budget evaluation",
    )
    parser.add_argument("--version", action="version", version=f"csijepa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    g = subs.add_parser("gen-data", help="write the seeded synthetic corpora")
    _add_common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("pretrain", help="JEPA pretraining on an unlabeled corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="unlabeled corpus file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_threading(p)
    p.set_defaults(func=cmd_pretrain)

    r = subs.add_parser("probe", help="frozen-encoder probes under label budgets")
    _add_common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--train", required=True)
    r.add_argument("--val", required=True)
    r.add_argument("--test", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--head", default="linear,mlp", help="comma list: linear,mlp")
    r.add_argument("--budgets", help="comma list of label budgets")
    r.add_argument("--task", help="task tag for records")
    r.set_defaults(func=cmd_probe)

    e = subs.add_parser("eval", help="aggregate probe records into curves and savings")
    e.add_argument("--probes", nargs="+", required=True, metavar="[LABEL=]DIR")
    e.add_argument("--out", required=True)
    e.add_argument("--match", nargs=2, metavar=("METHOD_J", "METHOD_T"))
    e.add_argument("--tolerance", type=float, default=evalmod.DEFAULT_MATCH_TOLERANCE_PP)
    e.add_argument("--gnuplot", action="store_true", help="also write gnuplot .dat files")
    e.set_defaults(func=cmd_eval)

    a = subs.add_parser("ablate", help="masking-strategy ablation matrix")
    _add_common(a)
    a.add_argument("--data", required=True, help="gen-data output directory")
    a.add_argument("--out", required=True)
    a.add_argument(
        "--strategies", default=",".join(masking.STRATEGIES), help="comma list of strategies"
    )
    a.add_argument("--budget", type=int, default=100)
    a.add_argument("--task", help="task tag")
    _add_threading(a)
    a.set_defaults(func=cmd_ablate)

    i = subs.add_parser("inspect-mask", help="print one sampled mask and top block scores")
    _add_common(i)
    i.add_argument("--corpus", required=True)
    i.add_argument("--window", type=int, required=True)
    i.add_argument("--strategy", default="channel-aware", choices=masking.STRATEGIES)
    i.set_defaults(func=cmd_inspect_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CliError, core.FileFormatError, ValueError, OSError, FloatingPointError) as exc:
        print(f"csijepa: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
