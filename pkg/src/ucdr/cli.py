"""Command-line front end: ``ucdr <command> [flags]``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .core import RunConfig, build_split, validate_dataset
from .experiments import ablate, kappa_sweep, summarize, write_ablation, write_kappa_sweep
from .mixup import make_mixup_batch
from .model import CheckpointError, ModelDims, embed, forward_vars, init, load_model, save_model
from .retrieval import chance_map, evaluate
from .synthgen import FormatError, GeneratorSpec, export, generate_dataset, generate_semantics, import_dir
from .trainer import TrainingError, save_checkpoint, train, write_log

# desk-scale recipe for the synthetic benchmark (the large-scale recipe is RunConfig())
DESK_CONFIG = RunConfig(
    kappa=1.0,
    gamma1=1.0,
    gamma2=1.0,
    lr_start=0.05,
    lr_end=1e-4,
    widths=(64,),
    val_k=10,
)


class UsageError(Exception):
    pass


def _load_config(path, seed=None) -> RunConfig:
    if path is None:
        cfg = DESK_CONFIG
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = RunConfig.from_text(p.read_text(), base=DESK_CONFIG)
    return cfg if seed is None else cfg.replace(seed=seed)


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    ds, sem = import_dir(path)
    if sem is None:
        raise UsageError(f"{path}: no semantics.csv; training and evaluation need class semantics")
    report = validate_dataset(ds, sem)
    if not report.ok:
        raise UsageError("invalid dataset:\n  " + "\n  ".join(report.violations[:20]))
    return ds, sem


def _split(args, ds, mode=None):
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise UsageError("--fractions needs three comma-separated values")
    return build_split(
        ds,
        args.protocol,
        held_out_domain=args.holdout,
        fractions=fractions,
        rng_seed=args.split_seed,
        search_set_mode=mode or args.mode,
        search_domain=args.search_domain,
    )


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_table(header, rows):
    cells = [header] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


def cmd_gen_data(args):
    spec = GeneratorSpec(
        num_classes=args.classes,
        num_domains=args.domains,
        samples_per_class_per_domain=args.per_class,
        input_dim=args.input_dim,
        semantic_dim=args.semantic_dim,
        class_spread=args.spread,
        domain_shift_strength=args.shift,
        seed=args.seed if args.seed is not None else 0,
    )
    sem = generate_semantics(spec.num_classes, spec.semantic_dim, spec.seed)
    ds = generate_dataset(spec, sem)
    export(ds, sem, _out_dir(args.out), spec)
    print(f"wrote {len(ds)} samples ({spec.num_classes} classes, {spec.num_domains} domains) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    ds, sem = _load_data(args.data)
    split = _split(args, ds)
    out = _out_dir(args.out)
    model, logs, state = train(ds, split, sem, cfg)
    save_model(model, out / "model.ckpt")
    save_checkpoint(state, out / "last.ckpt")
    write_log(logs, out / "train_log.csv")
    (out / "split.json").write_text(split.to_json() + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    _print_table(
        ["epoch", "loss", "ce_mix", "mp", "sn", "lr", "val_map", "seconds"],
        [[r.epoch, r.loss, r.ce_mix, r.mp, r.sn, f"{r.lr:.2e}", r.val_map, f"{r.wall_time:.2f}"] for r in logs],
    )
    print(f"best epoch {state.best_epoch}, val mAP@{cfg.val_k} {state.best_val_map:.4f}")
    return 0


def cmd_eval(args):
    try:
        model = load_model(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    ds, sem = _load_data(args.data)
    if model.dims.input_dim != ds.input_dim:
        raise UsageError(f"checkpoint expects input_dim {model.dims.input_dim}, data has {ds.input_dim}")
    if model.dims.latent_dim != sem.dim:
        raise UsageError(f"checkpoint latent_dim {model.dims.latent_dim} != semantic dim {sem.dim}")
    modes = ("unseen_only", "seen_plus_unseen") if args.both_modes else (args.mode,)
    out = _out_dir(args.out)
    rows = []
    for mode in modes:
        split = _split(args, ds, mode)
        if tuple(model.class_ids) != split.seen_classes:
            raise UsageError("the split's seen classes differ from the checkpoint's training classes")
        report = evaluate(model, ds, split, k=args.k)
        report.write(out, "" if len(modes) == 1 else f"_{mode}")
        chance = chance_map(report.query_classes, _search_classes(ds, split), report.k, trials=20)
        rows.append([split.protocol, mode, report.k, report.map_at_k, report.prec_at_k, chance,
                     report.num_queries, report.search_size])
    _print_table(["protocol", "mode", "k", "mAP@k", "Prec@k", "chance mAP", "queries", "search"], rows)
    return 0


def _search_classes(ds, split):
    from .core import query_and_search_sets

    return query_and_search_sets(ds, split)[1].class_ids


def gradcheck_instance(seed, num_classes=6, input_dim=12, latent_dim=6, widths=(10,), batch=6):
    """Random model, semantics and mixup batch for gradient checking.

    Biases are randomised too, so no coordinate sits at its initial zero.
    """
    rng = np.random.default_rng(seed)
    dims = ModelDims(input_dim, widths, num_classes, latent_dim)
    model = init(dims, seed)
    model = model.with_params(ad.ParamStore({
        k: (v if k.endswith(".W") else rng.normal(scale=0.5, size=v.shape)) for k, v in model.params.items()
    }))
    anchors = rng.normal(size=(num_classes, latent_dim))
    x = rng.normal(size=(batch, input_dim))
    labels = rng.integers(0, num_classes, size=batch)
    domains = rng.integers(0, 3, size=batch)
    mb = make_mixup_batch(x, labels, domains, anchors, 2.0, 0.5, rng)
    return dims, model, anchors, mb


LOSS_WEIGHTS = {"all": (1.0, 1.0), "ce": (0.0, 0.0), "mp": (1.0, 0.0), "sn": (0.0, 1.0)}


def run_gradcheck(seeds, which=("all", "ce", "mp", "sn"), tolerance=1e-4, h=1e-5, **dims):
    """Worst relative error per loss component over ``seeds`` random instances."""
    worst = {}
    for name in which:
        g1, g2 = LOSS_WEIGHTS[name]
        for seed in seeds:
            dm, model, anchors, mb = gradcheck_instance(seed, **dims)

            def loss(tape, p, dm=dm, mb=mb, anchors=anchors):
                _, logits, f = forward_vars(dm, p, tape.const(mb.inputs))
                if name == "mp":
                    return losses.mixture_prediction_loss(logits, mb.soft_labels)
                if name == "sn":
                    return losses.semantic_neighborhood_loss(f, mb.mixed_semantics, anchors, 1.5)
                return losses.combined_loss(mb, f, logits, anchors, 1.5, g1, g2)[0]

            report = ad.grad_check(loss, model.params, h=h, tolerance=tolerance)
            if name not in worst or report.max_rel_error > worst[name][1].max_rel_error:
                worst[name] = (seed, report)
    return worst


def cmd_gradcheck(args):
    which = ("all", "ce", "mp", "sn") if args.loss == "all" else (args.loss,)
    widths = tuple(int(w) for w in args.widths.split(",") if w)
    base_seed = args.seed if args.seed is not None else 0
    worst = run_gradcheck(
        range(base_seed, base_seed + args.instances),
        which,
        tolerance=args.tol,
        num_classes=args.classes,
        input_dim=args.input_dim,
        latent_dim=args.latent_dim,
        widths=widths,
    )
    ok = True
    for name, (seed, report) in worst.items():
        ok &= report.passed
        status = "ok" if report.passed else "FAIL"
        print(f"{name:4s} {status}  max rel err {report.max_rel_error:.3e} (seed {seed}, "
              f"{len(report.excluded)} kink coords excluded)")
        for coord, a, n, e in report.worst(3):
            print(f"      {coord:14s} analytic {a: .8e} numeric {n: .8e} rel {e:.2e}")
    return 0 if ok else 1


def _parse_kappas(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --kappas value {text!r}") from None


def cmd_sweep_kappa(args):
    cfg = _load_config(args.config, args.seed)
    ds, sem = _load_data(args.data)
    split = _split(args, ds)
    out = _out_dir(args.out)
    rows = kappa_sweep(ds, split, sem, cfg, _parse_kappas(args.kappas), k=args.k)
    write_kappa_sweep(rows, out / "kappa_sweep.csv")
    _print_table(["kappa", "val mAP", "test mAP"], [list(r) for r in rows])
    best = max(rows, key=lambda r: r[1])
    print(f"best validation kappa: {best[0]}")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args.config, args.seed)
    ds, sem = _load_data(args.data)
    split = _split(args, ds)
    out = _out_dir(args.out)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    results = ablate(ds, split, sem, cfg, seeds=seeds, k=args.k)
    k = args.k if args.k is not None else "k"
    write_ablation(results, out / "ablation.csv", k)
    _print_table(["variant", f"mAP@{k}", f"Prec@{k}", "seeds"], [list(r) for r in summarize(results)])
    return 0


def cmd_dump_embeddings(args):
    try:
        model = load_model(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    ds, _ = import_dir(args.data)
    if model.dims.input_dim != ds.input_dim:
        raise UsageError("checkpoint and data disagree on input_dim")
    out = _out_dir(args.out)
    feats = embed(model, ds.inputs)
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "domain"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, c, d, f in zip(ds.sample_ids, ds.class_ids, ds.domain_ids, feats):
            w.writerow([int(sid), int(c), int(d)] + [format(float(v), ".17g") for v in f])
    print(f"wrote {len(ds)} embeddings to {out / 'embeddings.csv'}")
    return 0


def _add_split_flags(p):
    p.add_argument("--protocol", choices=["uccdr", "udcdr", "ucdr"], default="ucdr", type=str.lower)
    p.add_argument("--holdout", type=int, default=None, help="held-out domain id")
    p.add_argument("--mode", choices=["unseen_only", "seen_plus_unseen"], default="unseen_only")
    p.add_argument("--fractions", default="0.6,0.15,0.25", help="train,val,unseen class fractions")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--search-domain", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="ucdr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--domains", type=int, default=5)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--semantic-dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--shift", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints and train_log.csv")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    _add_split_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes eval.json and eval.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--both-modes", action="store_true")
    _add_split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--loss", choices=["all", "ce", "mp", "sn"], default="all")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--input-dim", type=int, default=12)
    p.add_argument("--latent-dim", type=int, default=6)
    p.add_argument("--widths", default="10")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-kappa", help="train base+sn per kappa; writes kappa_sweep.csv")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--kappas", default="0,1,2,3,4")
    _add_split_flags(p)
    p.set_defaults(func=cmd_sweep_kappa)

    p = sub.add_parser("ablate", help="train the six-variant ladder; writes ablation.csv")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive training seeds")
    _add_split_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="write embeddings.csv for every sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def _thread_limit():
    n = os.environ.get("UCDR_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ValueError, FormatError, CheckpointError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
