"""Command-line entry point: ``hatsolver {gen,train,eval,solve,bench-cost}``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure, 5 oracle timeout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import datagen, hatlayer, tensor
from .datagen import GenConfig, dataset_stats, generate_dataset, read_dataset, write_dataset
from .ffpoly import format_poly, parse_system
from .groebner import OracleTimeout, buchberger, inter_reduce
from .model import HATSolver, ModelConfig, canonicalize, encode_sample, generate
from .tokenizer import TokenizeError, Vocab, detokenize, to_token_tree
from .training import (
    CurriculumConfig,
    NumericError,
    OptimConfig,
    TrainConfig,
    evaluate,
    load_model,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_TIMEOUT = 0, 2, 3, 4, 5

log = logging.getLogger("hatsolver")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run manifest

def code_hash() -> str:
    """Content hash of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    datasets: list = field(default_factory=list)
    vocab: Optional[dict] = None
    code: str = field(default_factory=code_hash)
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    @property
    def hash(self) -> str:
        body = asdict(self)
        body.pop("created")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, path):
        obj = asdict(self)
        obj["hash"] = self.hash
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# config file: flat key = value, keys named after the hyperparameter table

def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _field(v: str) -> int:
    s = str(v).strip().upper()
    return int(s[2:]) if s.startswith("GF") else int(s)


def _model_levels(v: str) -> int:
    s = str(v).strip().lower()
    if s in ("hatsolver.2", "hatsolver-2", "2"):
        return 2
    if s in ("hatsolver.3", "hatsolver-3", "3"):
        return 3
    raise UsageError(f"unknown model {v!r} (hatsolver.2 or hatsolver.3)")


TRAIN_KEYS = {
    "model": ("levels", _model_levels),
    "num_encoder_layers": ("enc_layers", int),
    "num_decoder_layers": ("dec_layers", int),
    "encoder_embedding_dim": ("d_model", int),
    "num_encoder_heads": ("enc_heads", int),
    "num_decoder_heads": ("dec_heads", int),
    "ffn_mult": ("ffn_mult", int),
    "dim_expansion_per_level": ("dim_expansion", float),
    "top_down_cross_attn": ("topdown", lambda v: "cross" if _bool(v) else "additive"),
    "pooling": ("pooling", str),
    "positional_encoding_combination": ("pos_combine", str),
    "max_sequence_length": ("max_tree", _ints),
    "max_output_sequence_length": ("max_out_len", int),
    "decoder_memory": ("memory", str),
    "dropout": ("dropout", float),
    "field": ("q", _field),
    "max_degree": ("max_degree", int),
    "num_variables": ("n", int),
    "lr": ("lr", float),
    "warmup_updates": ("warmup", int),
    "lr_decay_start": ("decay_start", int),
    "lr_decay_end": ("decay_end", int),
    "weight_decay": ("weight_decay", float),
    "clip_grad_norm": ("clip", float),
    "train_batch_size": ("batch_size", int),
    "val_batch_size": ("eval_batch_size", int),
    "eval_samples": ("eval_samples", int),
    "max_steps": ("max_steps", int),
    "num_train_epochs": ("epochs", float),
    "eval_every": ("eval_every", int),
    "log_every": ("log_every", int),
    "length_grouping": ("length_grouping", int),
    "curriculum_scheduler_ramp": ("v", float),
    "curriculum_pace": ("v", float),
    "curriculum_scheduler_sigma": ("sigma", float),
    "steps_per_epoch": ("steps_per_epoch", int),
    "target_exact": ("target_exact", float),
    "target_per_token": ("target_per_token", float),
    "time_budget": ("time_budget", float),
    "seed": ("seed", int),
    "torch_threads": ("threads", int),
}

TRAIN_DEFAULTS = {
    "levels": 2, "enc_layers": 2, "dec_layers": 2, "d_model": 128, "enc_heads": 1,
    "dec_heads": 4, "ffn_mult": 4, "dim_expansion": 1.0, "topdown": "cross",
    "pooling": "mean", "pos_combine": "concat", "max_tree": None, "max_out_len": 128,
    "memory": "leaves", "dropout": 0.0, "q": 7, "max_degree": 20, "n": None,
    "lr": 1e-5, "warmup": 1000, "decay_start": None, "decay_end": None,
    "weight_decay": 0.0, "clip": 1.0, "batch_size": 32,
    "eval_batch_size": 64, "eval_samples": 500, "max_steps": None, "epochs": 1.0,
    "eval_every": 500, "log_every": 50, "length_grouping": 1, "v": 0.5, "sigma": 2.0,
    "steps_per_epoch": None, "target_exact": None, "target_per_token": None,
    "time_budget": None, "seed": 0, "threads": None,
}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lower().replace(" ", "_").replace("-", "_")] = v
    return out


def resolve_train_config(raw: dict) -> dict:
    cfg = dict(TRAIN_DEFAULTS)
    for k, v in raw.items():
        if k not in TRAIN_KEYS:
            raise UsageError(f"unknown config key {k!r}")
        name, conv = TRAIN_KEYS[k]
        try:
            cfg[name] = conv(v)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {k}: {v!r} ({exc})") from None
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    try:
        cfg = GenConfig(n=args.n, q=args.q, max_degree_G=args.max_degree_G,
                        max_num_terms_G=args.max_num_terms_G, max_degree_F=args.max_degree_F,
                        max_num_terms_F=args.max_num_terms_F, max_size_F=args.max_size_F,
                        density=args.rho, degree_sampling=args.degree_sampling, seed=args.seed,
                        verify=args.verify, oracle_time_budget=args.oracle_budget)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = generate_dataset(cfg, args.count, start=args.start, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, samples)
    stats = dataset_stats(samples)
    stats["verified"] = sum(bool(s.meta.get("verified")) for s in samples)
    stats["oracle_timeouts"] = sum(s.meta.get("oracle") == "TIMEOUT" for s in samples)
    man = RunManifest("gen", asdict(cfg), {"seed": args.seed},
                      [str(out)], None)
    man.write(out.with_suffix(".manifest.json"))
    stats["manifest"] = man.hash
    print(json.dumps(stats, indent=1))
    return EXIT_OK


def _load_sets(paths) -> list:
    out = []
    for p in paths:
        samples = read_dataset(p)
        if not samples:
            raise UsageError(f"dataset {p} is empty")
        out.append(samples)
    return out


def cmd_train(args) -> int:
    raw = parse_config_text(Path(args.config).read_text()) if args.config else {}
    for item in args.set or []:
        raw.update(parse_config_text(item))
    c = resolve_train_config(raw)
    if c["threads"]:
        torch.set_num_threads(c["threads"])
    train_sets = _load_sets(args.train)
    eval_sets = _load_sets(args.eval) if args.eval else []
    n = c["n"] or train_sets[0][0].F.generators[0].n
    for ds in train_sets + eval_sets:
        if ds[0].F.generators[0].n != n:
            raise UsageError("all datasets must share the number of variables")
    vocab = Vocab(c["q"], c["max_degree"])
    levels = c["levels"]
    try:
        enc_train = [[encode_sample(s, vocab, levels, i) for i, s in enumerate(ds)] for ds in train_sets]
        enc_eval = [[encode_sample(s, vocab, levels, i) for i, s in enumerate(ds)] for ds in eval_sets]
    except TokenizeError as exc:
        raise UsageError(f"vocabulary too small for the data: {exc}") from None
    max_tree = c["max_tree"]
    if max_tree is None:
        every = [it for ds in enc_train + enc_eval for it in ds]
        max_tree = tuple(max(it.tree_ids.shape[a] for it in every) for a in range(levels))
    longest = max(len(it.target) for ds in enc_train + enc_eval for it in ds)
    if longest > c["max_out_len"]:
        raise UsageError(f"targets reach {longest} tokens > max_output_sequence_length")
    torch.manual_seed(c["seed"])
    mcfg = ModelConfig(vocab_size=len(vocab), d_model=c["d_model"], enc_layers=c["enc_layers"],
                       dec_layers=c["dec_layers"], levels=levels, enc_heads=c["enc_heads"],
                       dec_heads=c["dec_heads"], ffn_mult=c["ffn_mult"],
                       dim_expansion=c["dim_expansion"], pooling=c["pooling"],
                       topdown=c["topdown"], pos_combine=c["pos_combine"],
                       max_tree=tuple(max_tree), max_out_len=c["max_out_len"],
                       dropout=c["dropout"], memory=c["memory"], pad_id=vocab.pad_id,
                       bos_id=vocab.bos_id, eos_id=vocab.eos_id)
    model = HATSolver(mcfg)
    largest = max(len(ds) for ds in train_sets)
    spe = c["steps_per_epoch"] or max(1, largest // c["batch_size"])
    max_steps = c["max_steps"] or int(round(c["epochs"] * spe))
    ccfg = CurriculumConfig(len(train_sets), c["sigma"], c["v"], spe)
    decay_end = c["decay_end"] or (max_steps if c["decay_start"] is not None else None)
    try:
        ocfg = OptimConfig(lr=c["lr"], warmup=c["warmup"], clip=c["clip"],
                           weight_decay=c["weight_decay"], decay_start=c["decay_start"],
                           decay_end=decay_end)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tcfg = TrainConfig(batch_size=c["batch_size"], max_steps=max_steps, seed=c["seed"],
                       log_every=c["log_every"], eval_every=c["eval_every"],
                       eval_samples=c["eval_samples"], eval_batch_size=c["eval_batch_size"],
                       length_grouping=c["length_grouping"], target_exact=c["target_exact"],
                       target_per_token=c["target_per_token"], time_budget=c["time_budget"],
                       optim=ocfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("train", c, {"seed": c["seed"]},
                      [str(p) for p in args.train] + [str(p) for p in (args.eval or [])],
                      vocab.to_json())
    man.write(out / "run_manifest.json")
    res = train(model, enc_train, enc_eval, ccfg, tcfg, vocab, n, out_dir=out,
                resume_from=args.resume, manifest={"hash": man.hash, "code": man.code})
    print(json.dumps({"steps": res.steps, "best_exact": res.best_exact,
                      "best_step": res.best_step, "stop_reason": res.stop_reason,
                      "last_eval": res.last_eval, "seconds": round(res.elapsed, 1)}, indent=1))
    return EXIT_OK


def _oracle_verdict(F, pred, budget: float) -> tuple:
    t0 = time.perf_counter()
    try:
        gb = inter_reduce(buchberger(F, time_budget=budget))
    except OracleTimeout:
        return "TIMEOUT", time.perf_counter() - t0
    dt = time.perf_counter() - t0
    if pred is None:
        return "MISMATCH", dt
    return ("MATCH" if canonicalize(gb.basis) == canonicalize(pred) else "MISMATCH"), dt


def cmd_eval(args) -> int:
    model, vocab, extra = load_model(args.checkpoint)
    levels = model.cfg.levels
    rows = []
    for path in args.data:
        samples = read_dataset(path)
        if not samples:
            raise UsageError(f"evaluation set {path} is empty")
        if args.limit:
            samples = samples[:args.limit]
        n = samples[0].F.generators[0].n
        items = [encode_sample(s, vocab, levels, i) for i, s in enumerate(samples)]
        res = evaluate(model, items, vocab, n, batch_size=args.batch_size)
        row = {"dataset": str(path), "density": samples[0].meta.get("rho", ""),
               "samples": res.count, "exact": round(res.exact, 6),
               "support": round(res.support, 6), "per_token": round(res.per_token, 6),
               "teacher_forced": round(res.teacher_forced, 6),
               "runtime_per_sample": round(res.seconds / res.count, 6)}
        if args.oracle_budget is not None:
            ok, secs = 0, []
            for s in samples:
                verdict, dt = _oracle_verdict(s.F, s.G_system, args.oracle_budget)
                ok += verdict == "MATCH"
                secs.append(dt)
            row["oracle_success"] = round(ok / len(samples), 6)
            row["oracle_runtime"] = round(float(np.mean(secs)), 6)
        rows.append(row)
    fields = list(rows[0].keys())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    w = csv.DictWriter(sys.stdout, fieldnames=fields)
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def cmd_solve(args) -> int:
    model, vocab, extra = load_model(args.checkpoint)
    n = args.n or extra.get("n_vars")
    if not n:
        raise UsageError("--n is required for this checkpoint")
    text = Path(args.system_file).read_text() if args.system_file else args.system
    if not text:
        raise UsageError("give --system or --system-file")
    parts = [p.strip() for p in text.replace("\n", ";").split(";") if p.strip()]
    try:
        F = parse_system(parts, n, vocab.q)
        tree = to_token_tree(F, vocab, model.cfg.levels)
    except (ValueError, TokenizeError) as exc:
        raise UsageError(f"cannot read system: {exc}") from None
    ids = torch.from_numpy(tree.ids).unsqueeze(0)
    mask = torch.from_numpy(tree.mask).unsqueeze(0)
    gen = generate(model, ids, mask)
    seq = gen.sequences[0]
    try:
        pred = detokenize(seq, vocab, n)
        for p in pred:
            print(format_poly(p))
    except TokenizeError as exc:
        pred = None
        print(f"unparseable prediction: {exc}")
        print(" ".join(vocab.decode(seq)))
    if gen.truncated[0]:
        print("warning: output truncated at max length", file=sys.stderr)
    if args.oracle_budget is not None:
        verdict, dt = _oracle_verdict(F, pred, args.oracle_budget)
        print(f"oracle: {verdict} ({dt:.3f}s)")
        if verdict == "TIMEOUT":
            return EXIT_TIMEOUT
    return EXIT_OK


def cmd_bench_cost(args) -> int:
    configs = []
    if args.random:
        rng = np.random.default_rng(args.seed)
        for _ in range(args.random):
            L = int(rng.integers(2, 5))
            lengths = tuple(int(x) for x in rng.integers(2, 9, size=L))
            widths = tuple(int(x) for x in rng.integers(4, 33, size=L))
            configs.append((lengths, widths, int(rng.integers(4, 33))))
    else:
        lengths = _ints(args.lengths)
        widths = _ints(args.widths) if args.widths else (args.d,) * len(lengths)
        if len(widths) == 1:
            widths = widths * len(lengths)
        configs.append((lengths, widths, args.d_in or widths[0]))
    w = csv.writer(sys.stdout)
    w.writerow(["lengths", "widths", "d_in", "c_up", "c_down", "total", "measured", "flat", "ratio"])
    bad = 0
    for lengths, widths, d_in in configs:
        rep = hatlayer.cost_model(lengths, widths, d_in)
        measured = hatlayer.flop_counter(lengths, widths, d_in)
        bad += measured != rep.total
        w.writerow(["x".join(map(str, lengths)), "x".join(map(str, widths)), d_in,
                    "|".join(map(str, rep.up)), "|".join(map(str, rep.down)),
                    rep.total, measured, rep.flat, f"{rep.ratio:.6f}"])
    return EXIT_NUMERIC if bad else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hatsolver", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate (F, G) pairs by backward generation")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--q", type=int, default=7)
    g.add_argument("--rho", type=float, default=1.0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--start", type=int, default=0)
    g.add_argument("--max-degree-G", dest="max_degree_G", type=int, default=5)
    g.add_argument("--max-num-terms-G", dest="max_num_terms_G", type=int, default=5)
    g.add_argument("--max-degree-F", dest="max_degree_F", type=int, default=3)
    g.add_argument("--max-num-terms-F", dest="max_num_terms_F", type=int, default=2)
    g.add_argument("--max-size-F", dest="max_size_F", type=int, default=None)
    g.add_argument("--degree-sampling", choices=["fixed", "uniform"], default="fixed")
    g.add_argument("--verify", choices=["auto", "always", "never"], default="auto")
    g.add_argument("--oracle-budget", type=float, default=None)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--set", action="append", help="override, key=value")
    t.add_argument("--train", nargs="+", required=True, help="datasets, easiest first")
    t.add_argument("--eval", nargs="*")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--out")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--oracle-budget", type=float, default=None,
                   help="also run the oracle with this per-sample budget (seconds)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("solve", help="predict the basis of one system")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--system", help="polynomials separated by ';'")
    s.add_argument("--system-file")
    s.add_argument("--n", type=int)
    s.add_argument("--oracle-budget", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench-cost", help="closed-form vs measured attention cost")
    b.add_argument("--lengths", default="3,4", help="tree axes, outermost first")
    b.add_argument("--widths", default=None, help="d_0,...,d_{L-1}")
    b.add_argument("--d", type=int, default=8)
    b.add_argument("--d-in", type=int, default=None)
    b.add_argument("--random", type=int, default=0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, datagen.DatasetFormatError, tensor.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OracleTimeout as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT


if __name__ == "__main__":
    sys.exit(main())
