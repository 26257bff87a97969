"""forgetkit command line. Exit codes: 0 success, 1 validation error, 2 runtime failure."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import analysis, harness, plotting
from .data import build_replay_buffer, ingest, segment
from .mitigation import (FisherDiagonal, MitigationConfig, eval_loss, fisher_diagonal, fisher_samples,
                         select_subset, subset_size, train_stage)
from .model import CorruptCheckpointError, Model, ModelConfig, init_checkpoint, load_checkpoint, save_checkpoint
from .synth import GRAMMARS, SyntheticDomainSpec, gen_domains, probe_data

log = logging.getLogger("forgetkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INPUT_FILES = ("corpus", "checkpoint", "init", "fisher", "replay_corpus", "replay_manifest", "a", "b",
               "config", "before", "after")
DEFAULT_OUTDIR = "runs"


class ValidationError(Exception):
    pass


@contextlib.contextmanager
def validating():
    """Errors raised while reading and checking inputs are validation failures."""
    try:
        yield
    except ValidationError:
        raise
    except (ValueError, OSError, KeyError, TypeError, CorruptCheckpointError) as exc:
        raise ValidationError(str(exc)) from exc


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def output_dir(args, command: str) -> Path:
    """``<outdir>/<config-hash>`` where the hash covers the command, its flags and input file contents."""
    cfg = {"command": command}
    for k, v in sorted(vars(args).items()):
        if k in ("outdir", "log_level", "func"):
            continue
        if k in INPUT_FILES and v is not None:
            v = {"path_digest": _file_digest(v)}
        cfg[k] = v
    out = Path(args.outdir or DEFAULT_OUTDIR) / harness.short_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "command.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _segments(path, domain, seed, length, max_len, part="train"):
    train, valid, test = ingest(path, domain, seed)
    length = length or max_len - 1
    return segment({"train": train, "valid": valid, "test": test}[part], length, max_len)


# commands ------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    with validating():
        specs = [SyntheticDomainSpec(name, grammar, num_docs=args.num_docs, tokens_per_doc=args.tokens_per_doc)
                 for name, grammar in (d.split(":") if ":" in d else (d, d) for d in args.domains)]
    out = output_dir(args, "gen")
    manifest = gen_domains(specs, args.seed, out)
    print(out)
    log.info("domain classifier accuracy %.3f", manifest["classifier_accuracy"])
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    return ModelConfig(vocab_size=args.vocab_size, num_layers=args.layers, hidden=args.hidden, heads=args.heads,
                       max_len=args.segment_length + 1, ff_dim=args.ff_dim)


def cmd_pretrain(args) -> int:
    with validating():
        if args.init:
            init = load_checkpoint(args.init)
            mc = init.config
        else:
            mc = _model_config(args)
            init = None
        segs = _segments(args.corpus, args.domain, args.data_seed, args.segment_length, mc.max_len)
        valid = _segments(args.corpus, args.domain, args.data_seed, args.segment_length, mc.max_len, "valid")
        cfg = MitigationConfig(lr=args.lr, batch_size=args.batch_size)
    out = output_dir(args, "pretrain")
    init = init or init_checkpoint(mc, args.seed)
    ckpt, tlog = train_stage(init, segs, cfg, args.steps, args.seed, stage=f"pretrain-{args.domain}",
                             log_every=10)
    save_checkpoint(ckpt, out / "model.ckpt")
    tlog.write_csv(out / "train_log.csv")
    _write_json(out / "metrics.json", {"checkpoint": ckpt.id, "domain": args.domain,
                                        "valid_loss": eval_loss(ckpt, valid)})
    print(out / "model.ckpt")
    return EXIT_OK


def _mitigation_cfg(args, **extra) -> MitigationConfig:
    keys = ("fisher_fraction", "fisher_min_samples", "strategy", "pooling", "pca_dim", "gmm_k", "num_bins",
            "batch_size")
    return MitigationConfig(**{k: getattr(args, k) for k in keys if hasattr(args, k)}, **extra)


def cmd_select(args) -> int:
    with validating():
        ckpt = load_checkpoint(args.checkpoint)
        segs = _segments(args.corpus, args.domain, args.data_seed, args.segment_length, ckpt.config.max_len)
        cfg = _mitigation_cfg(args)
        n = args.n if args.n is not None else subset_size(len(segs), cfg)
        if n > len(segs):
            raise ValidationError(f"cannot select {n} of {len(segs)} segments")
    out = output_dir(args, "select")
    idx, info = select_subset(Model(ckpt), segs, n, cfg, args.seed)
    buf = build_replay_buffer(segs, idx, len(idx), args.replay_ratio, cfg.strategy)
    buf.write_manifest(out / "selection.json")
    _write_json(out / "selection_info.json", {"checkpoint": ckpt.id, "n": int(n), **info})
    print(out / "selection.json")
    return EXIT_OK


def cmd_fisher(args) -> int:
    with validating():
        ckpt = load_checkpoint(args.checkpoint)
        segs = _segments(args.corpus, args.domain, args.data_seed, args.segment_length, ckpt.config.max_len)
        cfg = _mitigation_cfg(args)
        n = min(subset_size(len(segs), cfg), len(segs))
    out = output_dir(args, "fisher")
    model = Model(ckpt)
    idx, info = select_subset(model, segs, n, cfg, args.seed)
    fisher = fisher_diagonal(model, fisher_samples([segs[i] for i in idx], cfg.mask_rate, args.seed,
                                                   ckpt.config.vocab_size))
    fisher.save(out / "fisher.bin")
    _write_json(out / "selection_info.json", {"checkpoint": ckpt.id, "chosen_ids": [int(i) for i in idx],
                                               "num_samples": fisher.num_samples, **info})
    print(out / "fisher.bin")
    return EXIT_OK


def cmd_continue(args) -> int:
    with validating():
        ckpt = load_checkpoint(args.checkpoint)
        segs = _segments(args.corpus, args.domain, args.data_seed, args.segment_length, ckpt.config.max_len)
        cfg = MitigationConfig(mode=args.mode, lam=args.lam, rho=args.rho, lr=args.lr, use_fisher=not args.no_fisher,
                               replay_ratio=args.replay_ratio, batch_size=args.batch_size)
        fisher = buffer = aux = None
        if args.mode == "ewc":
            if not args.fisher:
                raise ValidationError("--mode ewc needs --fisher")
            fisher = FisherDiagonal.load(args.fisher)
            if fisher.anchor_id != ckpt.id:
                log.warning("Fisher anchor %s differs from checkpoint %s", fisher.anchor_id, ckpt.id)
        if args.mode in ("er", "mdl"):
            if not args.replay_corpus:
                raise ValidationError(f"--mode {args.mode} needs --replay-corpus")
            prev = _segments(args.replay_corpus, "replay", args.data_seed, args.segment_length, ckpt.config.max_len)
            if args.mode == "mdl":
                aux = prev
            else:
                if not args.replay_manifest:
                    raise ValidationError("--mode er needs --replay-manifest (see the select command)")
                manifest = json.loads(Path(args.replay_manifest).read_text())
                idx = [s["index"] for s in manifest["segments"]]
                buffer = build_replay_buffer(prev, idx, len(idx), manifest["ratio"], manifest["strategy"])
    out = output_dir(args, "continue")
    new, tlog = train_stage(ckpt, segs, cfg, args.steps, args.seed, fisher=fisher, buffer=buffer,
                            aux_segments=aux, stage=f"continue-{args.domain}")
    save_checkpoint(new, out / "model.ckpt")
    tlog.write_csv(out / "train_log.csv")
    print(out / "model.ckpt")
    return EXIT_OK


def cmd_probe(args) -> int:
    with validating():
        ckpt = load_checkpoint(args.checkpoint)
        spec = SyntheticDomainSpec(args.domain, args.grammar)
        layers = range(ckpt.config.num_layers + 1) if args.layer is None else [args.layer]
        for layer in layers:
            if not 0 <= layer <= ckpt.config.num_layers:
                raise ValidationError(f"layer {layer} outside [0, {ckpt.config.num_layers}]")
    out = output_dir(args, "probe")
    segs, tags = probe_data(spec, args.data_seed, num_docs=args.num_docs, length=ckpt.config.max_len - 1)
    ds = analysis.ProbeDataset.split(args.domain, segs, tags, seed=args.data_seed)
    results = [analysis.probe_layer(ckpt, layer, ds, args.seed, epochs=args.epochs, lr=args.lr).to_dict()
               for layer in layers]
    _write_json(out / "probe.json", {"checkpoint": ckpt.id, "results": results})
    for r in results:
        print(f"layer {r['layer']}: {r['metric']:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    with validating():
        a, b = load_checkpoint(args.a), load_checkpoint(args.b)
        if a.config != b.config:
            raise ValidationError("checkpoints have different model configs")
        before = json.loads(Path(args.before).read_text()) if args.before else None
        after = json.loads(Path(args.after).read_text()) if args.after else None
        if (before is None) != (after is None):
            raise ValidationError("--before and --after go together")
    out = output_dir(args, "analyze")
    prof = analysis.layerwise_cosine(a, b)
    prof.write_csv(out / "similarity.csv")
    prof.write_raw_csv(out / "similarity_raw.csv")
    plotting.plot_similarity_profiles({f"{a.id[:8]} vs {b.id[:8]}": prof.cosine}, out / "similarity.png")
    for g, c in enumerate(prof.cosine):
        print(f"group {g}: {c:.6f}")
    if before is not None:
        rep = analysis.forgetting_report(before, after, higher_is_better=not args.loss, decimals=args.decimals)
        rep.write_json(out / "forgetting.json")
        (out / "forgetting.txt").write_text(rep.table() + "\n")
        print(rep.table())
    return EXIT_OK


def cmd_report(args) -> int:
    with validating():
        root = Path(args.run_dir)
        if not any(root.glob("points/*/seed-*/metrics.json")):
            raise ValidationError(f"no completed grid points under {root}")
    harness.report(root)
    print((root / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    with validating():
        raw = json.loads(Path(args.config).read_text())
        raw["seeds"] = args.seed
        cfg = harness.ExperimentConfig.from_dict(raw)
    root, status = harness.run(cfg, args.outdir)
    print(root)
    log.info("completed %d, skipped %d, failed %d", status["completed"], status["skipped"], status["failed"])
    if status["completed"] + status["skipped"] == 0:
        return EXIT_RUNTIME
    return EXIT_OK


# parser ----------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_model_flags(p):
    p.add_argument("--segment-length", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=131)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ff-dim", type=int, default=256)


def _add_selection_flags(p):
    p.add_argument("--strategy", default="random", choices=["random", "low", "high", "uniform", "gmm"])
    p.add_argument("--fisher-fraction", type=float, default=0.001)
    p.add_argument("--fisher-min-samples", type=int, default=32)
    p.add_argument("--pooling", default="avg", choices=["avg", "cls"])
    p.add_argument("--pca-dim", type=int, default=100)
    p.add_argument("--gmm-k", type=int, default=5)
    p.add_argument("--num-bins", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forgetkit", description=__doc__)
    parser.add_argument("--outdir", help=f"output root (default {DEFAULT_OUTDIR}; run: the config's outdir)")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic domain corpora")
    p.add_argument("--domains", nargs="+", default=["generic:newswire", "biomed:biomed", "clinical:clinical"],
                   help=f"name:grammar pairs, grammars: {', '.join(GRAMMARS)}")
    p.add_argument("--num-docs", type=int, default=200)
    p.add_argument("--tokens-per-doc", type=int, default=400)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="masked-LM training from scratch or from --init")
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--init")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    _add_model_flags(p)
    p.add_argument("--data-seed", type=int, default=0, help="train/valid/test split seed")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("select", help="pick a replay / Fisher subset and write its manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", default="previous")
    p.add_argument("--n", type=int)
    p.add_argument("--replay-ratio", type=float, default=0.2)
    p.add_argument("--segment-length", type=int, help="default: the checkpoint's max_len - 1")
    _add_selection_flags(p)
    p.add_argument("--data-seed", type=int, default=0, help="train/valid/test split seed")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fisher", help="estimate the Fisher diagonal on a subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", default="previous")
    p.add_argument("--segment-length", type=int, help="default: the checkpoint's max_len - 1")
    _add_selection_flags(p)
    p.add_argument("--data-seed", type=int, default=0, help="train/valid/test split seed")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("continue", help="continual training stage with a mitigation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", default="current")
    p.add_argument("--mode", default="none", choices=["none", "ewc", "lrc", "er", "mdl"])
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--no-fisher", action="store_true")
    p.add_argument("--rho", type=float, default=1.3)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--fisher")
    p.add_argument("--replay-corpus")
    p.add_argument("--replay-manifest")
    p.add_argument("--replay-ratio", type=float)
    p.add_argument("--segment-length", type=int, help="default: the checkpoint's max_len - 1")
    p.add_argument("--data-seed", type=int, default=0, help="train/valid/test split seed")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("probe", help="linear token-tagging probes on frozen layers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--grammar", required=True, choices=list(GRAMMARS))
    p.add_argument("--layer", type=int)
    p.add_argument("--num-docs", type=int, default=20)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="layer-wise cosine similarity and optional forgetting table")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--before", help="JSON map task -> metric before")
    p.add_argument("--after", help="JSON map task -> metric after")
    p.add_argument("--loss", action="store_true", help="metrics are losses (lower is better)")
    p.add_argument("--decimals", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="rebuild tables and figures for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, nargs="+", required=True, help="replaces the config's seeds list")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
