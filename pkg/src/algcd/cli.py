"""algcd command line.

Hyperparameters live in a JSON config; flags carry paths, seeds and the
stage. Progress goes to stderr; the last stdout line is a JSON summary.

Exit codes: 0 ok, 2 config error, 3 I/O or file-format error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import atcg as at
from . import config as cfgm
from . import evalkit as ek
from . import kb as kbm
from . import objectives as ob
from . import plotting
from . import synth
from . import trainer as tr
from .errors import ConfigError, DivergenceError, FormatError, NumericError, ProtocolViolation

log = logging.getLogger("algcd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class OutputExists(OSError):
    pass


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise OutputExists(f"{out} exists and is not empty; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _echo_config(run: cfgm.RunConfig, out: Path) -> None:
    (out / "config.json").write_text(run.dumps() + "\n")


def _with_seed(run: cfgm.RunConfig, seed) -> cfgm.RunConfig:
    if seed is None:
        return run
    run = run.replace("train_stage1", seed=seed).replace("train_stage2", seed=seed)
    return run.replace("atcg", seed=seed).replace("eval", seed=seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    run = cfgm.load(args.config)
    if args.seed is not None:
        run = run.replace("synth", rng_seed=args.seed)
    out = _prepare_out(args.out, args.force)
    ds = synth.generate(run.synth)
    synth.save_dataset(ds, out)
    _echo_config(run, out)
    s = synth.split_summary(ds)
    _summary({"command": "gen-data", "out": str(out), "labeled": s.labeled, "unlabeled": s.unlabeled,
              "known_classes": s.known, "total_classes": s.total})
    return EXIT_OK


def _train_atcg(run, ds, out: Path) -> dict:
    a = run.atcg
    model = at.AtcgModel(ds.dim, a.num_stacked, projections=a.projections, init_noise=a.init_noise, seed=a.seed)
    if not model.parameters():
        raise ConfigError("nothing to optimize: the generator has no projections")
    trainer = tr.AtcgTrainer(ds, model, run.train_stage1)
    trainer.train()
    trainer.save(out / "checkpoint")
    tr.write_trace_csv(trainer.trace, out / "metrics.csv")
    plotting.loss_curve(trainer.trace, out / "loss_curve.png")
    return {"stage": "atcg", "rounds": trainer.round, "L_AL_initial": trainer.trace[0]["L_AL"],
            "L_AL_final": trainer.trace[-1]["L_AL"]}


def _train_gcd(run, ds, out: Path, resume_from) -> dict:
    if resume_from is None:
        raise ConfigError("stage gcd needs --resume-from pointing at a stage-1 checkpoint")
    src = Path(resume_from)
    if not (src / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {src}")
    stage = json.loads((src / "manifest.json").read_text()).get("stage")
    if stage == "gcd":
        trainer = tr.GcdTrainer.resume(src, ds)
    elif stage == "atcg":
        model = tr.load_atcg(src, ds)
        a = run.atcg
        head = at.FusionHead(ds.dim, a.head_hidden, a.head_out, seed=a.seed)
        bank = ob.PrototypeBank(ds.num_classes, a.head_out, seed=a.seed)
        trainer = tr.GcdTrainer(ds, model, head, bank, run.train_stage2, ek.make_kb(ds, a))
    else:
        raise FormatError(f"{src} is not a training checkpoint")
    trainer.train()
    trainer.save(out / "checkpoint")
    tr.write_trace_csv(trainer.trace, out / "metrics.csv")
    plotting.loss_curve(trainer.trace, out / "loss_curve.png")
    means = trainer.epoch_means()
    return {"stage": "gcd", "steps": trainer.global_step, "alpha": trainer.cfg.alpha,
            "loss_first_epoch": float(means[0]), "loss_last_epoch": float(means[-1])}


def cmd_train(args) -> int:
    run = _with_seed(cfgm.load(args.config), args.seed)
    if args.stage == "gcd" and args.resume_from is None:
        raise ConfigError("stage gcd needs --resume-from pointing at a stage-1 checkpoint")
    ds = synth.load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    _echo_config(run, out)
    if args.stage == "atcg":
        summary = _train_atcg(run, ds, out)
    else:
        summary = _train_gcd(run, ds, out, args.resume_from)
    summary.update({"command": "train", "checkpoint": str(out / "checkpoint")})
    _summary(summary)
    return EXIT_OK


def _load_stage2(path, ds):
    src = Path(path)
    if not (src / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {src}")
    return tr.GcdTrainer.resume(src, ds)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    run_dir = ckpt.parent
    if args.config is not None:
        run = cfgm.load(args.config)
    elif (run_dir / "config.json").exists():
        run = cfgm.load(run_dir / "config.json")
    else:
        run = cfgm.RunConfig()
    ds = synth.load_dataset(args.data)
    trainer = _load_stage2(ckpt, ds)
    alpha = args.alpha if args.alpha is not None else (
        run.train_stage2.alpha if args.config is not None else trainer.cfg.alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    host = args.host or run.eval.host
    seed = args.seed if args.seed is not None else run.eval.seed
    kb = ek.make_kb(ds, run.atcg) if trainer.model is not None else None
    if host == "kmeans":
        K = args.K if args.K is not None else run.eval.K
        rep = ek.eval_kmeans(ds, trainer.model, trainer.head, alpha, K, seed=seed, kb=kb)
    else:
        rep = ek.eval_parametric(ds, trainer.model, trainer.head, trainer.bank, alpha, kb=kb, seed=seed)
    rep.config.update({"checkpoint": str(ckpt), "lam": trainer.weights.lam, "eps": trainer.weights.eps,
                       "tau": trainer.weights.tau, "tau_s": trainer.weights.tau_s,
                       "tau_t": trainer.weights.tau_t})
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"eval_{host}.csv", out / f"eval_{host}.json"
    if not args.force and (csv_path.exists() or json_path.exists()):
        raise OutputExists(f"{csv_path} exists; pass --force to overwrite")
    ek.write_report_csv([rep], csv_path)
    json_path.write_text(rep.to_json() + "\n")
    plotting.report_bars(rep, out / f"eval_{host}.png")
    print(rep.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = cfgm.load(args.config)
    if args.seeds is not None:
        run = run.replace("ablate", seeds=args.seeds)
    ds = synth.load_dataset(args.data) if args.data else synth.generate(run.synth)
    out = _prepare_out(args.out, args.force)
    _echo_config(run, out)
    rows = ek.ablate(ds, run, args.axis, log=log.info)
    summary = ek.summarize(rows)
    ek.write_ablation_csv(rows, out / f"ablate_{args.axis}.csv")
    ek.write_summary_csv(summary, out / f"ablate_{args.axis}_summary.csv")
    plotting.ablation(summary, args.axis, out / f"ablate_{args.axis}.png")
    _summary({"command": "ablate", "axis": args.axis, "runs": len(rows), "out": str(out),
              "summary": summary})
    return EXIT_OK


def cmd_kb(args) -> int:
    if args.kb_command == "build":
        ds = synth.load_dataset(args.data)
        out = _prepare_out(args.out, args.force)
        kb = kbm.build(ds)
        kbm.save(kb, out)
        _summary({"command": "kb build", "out": str(out), **kbm.info(kb)})
    elif args.kb_command == "prototypes":
        kb = kbm.as_prototypes(kbm.load(args.kb))
        out = _prepare_out(args.out, args.force)
        kbm.save(kb, out)
        _summary({"command": "kb prototypes", "out": str(out), **kbm.info(kb)})
    else:
        _summary({"command": "kb info", **kbm.info(kbm.load(args.kb))})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="algcd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic GCD benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1 (atcg) or stage 2 (gcd)")
    t.add_argument("--stage", choices=("atcg", "gcd"), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume-from", help="stage-1 checkpoint, or a stage-2 checkpoint to continue")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a stage-2 checkpoint")
    e.add_argument("--host", choices=cfgm.HOSTS)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--alpha", type=float)
    e.add_argument("--K", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="layer, alpha or component ablation")
    a.add_argument("--axis", choices=cfgm.AXES, required=True)
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    k = sub.add_parser("kb", help="knowledge base utilities")
    ksub = k.add_subparsers(dest="kb_command", required=True)
    kb_build = ksub.add_parser("build")
    kb_build.add_argument("--data", required=True)
    kb_build.add_argument("--out", required=True)
    kb_build.add_argument("--force", action="store_true")
    kb_proto = ksub.add_parser("prototypes")
    kb_proto.add_argument("--kb", required=True)
    kb_proto.add_argument("--out", required=True)
    kb_proto.add_argument("--force", action="store_true")
    kb_info = ksub.add_parser("info")
    kb_info.add_argument("--kb", required=True)
    k.set_defaults(func=cmd_kb)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_NUMERIC
    except (OSError, FormatError, ProtocolViolation) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
