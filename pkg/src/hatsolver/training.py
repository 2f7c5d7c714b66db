"""Curriculum sampling, Adam with linear warmup and clipping, and the training
loop with evaluation, checkpointing and resumption."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import tensor as T
from .model import (
    EncodedSample,
    HATSolver,
    ModelConfig,
    collate,
    exact_match,
    generate,
    per_token_accuracy,
    support_match,
)
from .tokenizer import TokenizeError, Vocab, detokenize


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# curriculum

@dataclass(frozen=True)
class CurriculumConfig:
    num_datasets: int
    sigma: float = 2.0
    v: float = 0.5
    steps_per_epoch: int = 1000

    def __post_init__(self):
        if self.num_datasets < 1:
            raise ValueError("need at least one dataset")
        if not self.sigma > 0:
            raise ValueError(f"curriculum width sigma must be > 0, got {self.sigma}")
        if not self.v > 0:
            raise ValueError(f"learning pace v must be > 0, got {self.v}")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")


def curriculum_mu(t: int, cfg: CurriculumConfig) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    mu = cfg.v * (t // cfg.steps_per_epoch)
    return float(min(max(mu, 0.0), cfg.num_datasets - 1))


def curriculum_probs(t: int, cfg: CurriculumConfig) -> np.ndarray:
    """Gaussian weights centred on the curriculum position, normalized."""
    mu = curriculum_mu(t, cfg)
    i = np.arange(cfg.num_datasets, dtype=np.float64)
    e = -((i - mu) ** 2) / (2.0 * cfg.sigma ** 2)
    w = np.exp(e - e.max())
    return w / w.sum()


def eval_probs(num_datasets: int) -> np.ndarray:
    return np.full(num_datasets, 1.0 / num_datasets)


class CurriculumSampler:
    """Draws ``(dataset index, sample indices)`` batches.

    With ``length_grouping = g > 1`` one draw takes ``g * batch_size`` samples
    from a single dataset, sorts them by input size and serves them as ``g``
    consecutive batches, which cuts padding without changing which samples
    are seen.
    """

    def __init__(self, sizes: Sequence[int], cfg: CurriculumConfig, batch_size: int,
                 length_grouping: int = 1, lengths: Optional[Sequence[Sequence[int]]] = None):
        if len(sizes) != cfg.num_datasets:
            raise ValueError(f"{len(sizes)} datasets but curriculum expects {cfg.num_datasets}")
        if batch_size < 1 or length_grouping < 1:
            raise ValueError("batch_size and length_grouping must be >= 1")
        self.sizes = list(sizes)
        self.cfg = cfg
        self.batch_size = batch_size
        self.grouping = length_grouping
        self.lengths = lengths
        self.queue: list = []

    def draw(self, rng: np.random.Generator, t: int, evaluation: bool = False):
        if self.queue and not evaluation:
            return self.queue.pop(0)
        p = eval_probs(self.cfg.num_datasets) if evaluation else curriculum_probs(t, self.cfg)
        k = int(rng.choice(len(p), p=p))
        if self.sizes[k] == 0:
            raise ValueError(f"dataset {k} is empty")
        g = 1 if evaluation else self.grouping
        idx = rng.integers(0, self.sizes[k], size=self.batch_size * g)
        if g == 1:
            return k, [int(i) for i in idx]
        if self.lengths is not None:
            lens = self.lengths[k]
            idx = sorted(idx.tolist(), key=lambda i: (lens[i], i))
        else:
            idx = idx.tolist()
        chunks = [(k, [int(i) for i in idx[c * self.batch_size:(c + 1) * self.batch_size]])
                  for c in range(g)]
        self.queue.extend(chunks[1:])
        return chunks[0]


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-5
    warmup: int = 1000
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_start: Optional[int] = None  # linear decay to zero from here ...
    decay_end: Optional[int] = None  # ... reaching zero here

    def __post_init__(self):
        if self.decay_start is not None and (self.decay_end is None
                                             or self.decay_end <= self.decay_start):
            raise ValueError("decay_end must be given and exceed decay_start")


class Adam:
    """``torch.optim.AdamW`` with global-norm clipping, a linear-warmup
    learning rate (optionally decayed linearly to zero between
    ``decay_start`` and ``decay_end``) and a finiteness check that names the
    offending parameter."""

    def __init__(self, params: Dict[str, torch.Tensor], cfg: OptimConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.opt = torch.optim.AdamW(list(self.params.values()), lr=cfg.lr,
                                     betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                                     weight_decay=cfg.weight_decay, foreach=False)
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        lr = c.lr if c.warmup <= 0 else c.lr * min(1.0, step / c.warmup)
        if c.decay_start is not None and step > c.decay_start:
            span = max(1, c.decay_end - c.decay_start)
            lr *= max(0.0, 1.0 - (step - c.decay_start) / span)
        return lr

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.double() ** 2).sum())
        return math.sqrt(total)

    def step(self) -> dict:
        for n, p in self.params.items():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            elif not bool(torch.isfinite(p.grad).all()):
                raise NumericError(f"non-finite gradient in parameter {n}")
        norm = self.grad_norm()
        scale = 1.0
        if self.cfg.clip and norm > self.cfg.clip:
            scale = self.cfg.clip / norm
            with torch.no_grad():
                for p in self.params.values():
                    p.grad.mul_(scale)
        t = self.step_count + 1
        lr = self.lr_at(t)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.step_count = t
        return {"lr": lr, "grad_norm": norm, "clipped_norm": norm * scale}

    def state_tensors(self) -> dict:
        out = {}
        for n, p in self.params.items():
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"optim.m.{n}"] = st["exp_avg"]
            out[f"optim.v.{n}"] = st["exp_avg_sq"]
        return out

    def load_state(self, tensors: dict, step: int):
        self.step_count = int(step)
        for n, p in self.params.items():
            if f"optim.m.{n}" not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"optim.m.{n}"].clone().to(p.dtype),
                "exp_avg_sq": tensors[f"optim.v.{n}"].clone().to(p.dtype),
            }


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    exact: float
    support: float
    per_token: float
    teacher_forced: float
    count: int
    seconds: float
    truncated: int
    predictions: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"exact": self.exact, "support": self.support, "per_token": self.per_token,
                "teacher_forced": self.teacher_forced, "count": self.count,
                "seconds": self.seconds, "truncated": self.truncated}


def ids_metrics(pred_ids, gold_ids, vocab: Vocab, n: int) -> dict:
    tok = per_token_accuracy(pred_ids, gold_ids, vocab)
    gold = detokenize(gold_ids, vocab, n)
    try:
        pred = detokenize(pred_ids, vocab, n)
    except (TokenizeError, ValueError):
        return {"exact": 0.0, "support": 0.0, "per_token": tok}
    return {"exact": float(exact_match(pred, gold)), "support": float(support_match(pred, gold)),
            "per_token": tok}


@torch.no_grad()
def evaluate(model: HATSolver, items: Sequence[EncodedSample], vocab: Vocab, n: int,
             batch_size: int = 64, max_len: Optional[int] = None,
             keep_predictions: bool = False) -> EvalResult:
    if not items:
        raise ValueError("evaluation set is empty")
    if max_len is None:
        max_len = min(model.cfg.max_out_len, max(len(it.target) for it in items) + 8)
    was = model.training
    model.eval()
    sums = {"exact": 0.0, "support": 0.0, "per_token": 0.0}
    tf_hit = tf_total = 0
    trunc = 0
    preds = []
    seconds = 0.0
    try:
        order = sorted(range(len(items)), key=lambda i: (items[i].tree_ids.size, i))
        for s in range(0, len(order), batch_size):
            chunk = [items[i] for i in order[s:s + batch_size]]
            batch = collate(chunk, vocab.pad_id)
            t0 = time.perf_counter()
            gen = generate(model, batch.ids, batch.mask, max_len=max_len)
            seconds += time.perf_counter() - t0
            logits = model(batch.ids, batch.mask, batch.target[:, :-1])
            gold = batch.target[:, 1:]
            keep = gold != vocab.pad_id
            tf_hit += int(((logits.argmax(-1) == gold) & keep).sum())
            tf_total += int(keep.sum())
            for it, seq, tr in zip(chunk, gen.sequences, gen.truncated):
                trunc += tr
                m = ids_metrics(seq, it.target, vocab, n)
                for k in sums:
                    sums[k] += m[k]
                if keep_predictions:
                    preds.append((it.sample_id, seq, m))
    finally:
        model.train(was)
    c = len(items)
    return EvalResult(sums["exact"] / c, sums["support"] / c, sums["per_token"] / c,
                      tf_hit / max(tf_total, 1), c, seconds, trunc, preds)


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    eval_samples: int = 500
    eval_batch_size: int = 64
    length_grouping: int = 1
    target_exact: Optional[float] = None
    target_per_token: Optional[float] = None
    time_budget: Optional[float] = None
    optim: OptimConfig = field(default_factory=OptimConfig)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        obj = dict(obj)
        obj["optim"] = OptimConfig(**obj.get("optim", {}))
        return cls(**obj)


@dataclass
class TrainResult:
    steps: int
    best_exact: float
    best_step: int
    last_eval: dict
    elapsed: float
    stop_reason: str
    out_dir: Optional[Path]


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_training_state(path, model: HATSolver, opt: Adam, rng: np.random.Generator,
                        sampler: CurriculumSampler, step: int, extra: dict):
    tensors = {f"model.{n}": p.detach() for n, p in T.named_parameters(model).items()}
    tensors.update(opt.state_tensors())
    tensors["rng.torch"] = torch.get_rng_state()
    meta = dict(extra)
    meta.update({
        "step": step,
        "optim_step": opt.step_count,
        "rng": _rng_state_json(rng),
        "sampler_queue": sampler.queue,
        "model_config": model.cfg.to_json(),
        "init": {"projections": "xavier_uniform", "embeddings": "normal(0, 0.02)"},
    })
    return T.save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple:
    """``(model, vocab, extra)`` from a checkpoint directory."""
    tensors, extra = T.load_checkpoint(path)
    model = HATSolver(ModelConfig.from_json(extra["model_config"]))
    T.assign_parameters(model, tensors, "model.")
    vocab = Vocab.from_json(extra["vocab"]) if "vocab" in extra else None
    return model, vocab, extra


def _drop_rows_after(path: Path, step: int):
    """Remove log rows written after ``step`` (by an interrupted run)."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines(keepends=True):
        head = line.split(",", 1)[0]
        if not head.isdigit() or int(head) <= step:
            keep.append(line)
    path.write_text("".join(keep))


def _logged_wall_time(path: Path, step: int) -> float:
    """Wall time recorded for ``step`` in a run's timing.csv (0 if absent)."""
    if not path.exists():
        return 0.0
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if int(row["step"]) == step:
                return float(row["wall_time"])
    return 0.0


def _mean(results: List[EvalResult], key: str) -> float:
    return float(np.mean([getattr(r, key) for r in results]))


def train(model: HATSolver, train_sets: Sequence[Sequence[EncodedSample]],
          eval_sets: Sequence[Sequence[EncodedSample]], ccfg: CurriculumConfig,
          tcfg: TrainConfig, vocab: Vocab, n_vars: int, out_dir=None,
          resume_from=None, manifest: Optional[dict] = None) -> TrainResult:
    """Run the training loop.

    Writes ``metrics.csv`` (deterministic; a leading ``#`` line carries the
    run manifest hash), ``timing.csv`` (wall clock),
    ``last/`` and ``best/`` checkpoints under ``out_dir`` when given.
    Raises :class:`NumericError` on a non-finite loss after saving the last
    good state to ``out_dir/last``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    lengths = [[it.tree_ids.size for it in ds] for ds in train_sets]
    sampler = CurriculumSampler([len(d) for d in train_sets], ccfg, tcfg.batch_size,
                                tcfg.length_grouping, lengths)
    opt = Adam(T.named_parameters(model), tcfg.optim)
    rng = np.random.default_rng(tcfg.seed)
    start_step = 0
    resumed_elapsed = 0.0
    best_exact, best_step = -1.0, -1
    extra = {"vocab": vocab.to_json(), "train_config": tcfg.to_json(),
             "curriculum": asdict(ccfg), "n_vars": n_vars, "manifest": manifest or {}}
    if resume_from is not None:
        tensors, meta = T.load_checkpoint(resume_from)
        T.assign_parameters(model, tensors, "model.")
        opt.load_state(tensors, meta["optim_step"])
        rng.bit_generator.state = meta["rng"]
        torch.set_rng_state(tensors["rng.torch"])
        sampler.queue = [(int(k), [int(i) for i in idx]) for k, idx in meta["sampler_queue"]]
        start_step = int(meta["step"])
        resumed_elapsed = _logged_wall_time(Path(resume_from).parent / "timing.csv", start_step)
        best_exact = float(meta.get("best_exact", -1.0))
        best_step = int(meta.get("best_step", -1))

    evals = [list(ds[:tcfg.eval_samples]) for ds in eval_sets]
    header = ["step", "loss", "lr", "mu", "grad_norm"]
    for k in range(len(evals)):
        header += [f"d{k}_exact", f"d{k}_support", f"d{k}_per_token", f"d{k}_teacher_forced"]
    metrics_fh = timing_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None and (out_dir / "metrics.csv").exists() else "w"
        if mode == "a":
            for name in ("metrics.csv", "timing.csv"):
                _drop_rows_after(out_dir / name, start_step)
        metrics_fh = open(out_dir / "metrics.csv", mode, newline="")
        timing_fh = open(out_dir / "timing.csv", mode, newline="")
        mw, tw = csv.writer(metrics_fh), csv.writer(timing_fh)
        if mode == "w":
            if manifest and manifest.get("hash"):
                metrics_fh.write(f"# manifest {manifest['hash']}\n")
            mw.writerow(header)
            tw.writerow(["step", "wall_time"])

    def checkpoint(name, step):
        if out_dir is None:
            return
        meta = dict(extra, best_exact=best_exact, best_step=best_step)
        save_training_state(out_dir / name, model, opt, rng, sampler, step, meta)

    # wall time is cumulative across resumes
    t0 = time.perf_counter() - resumed_elapsed
    window: list = []
    last_eval: dict = {}
    stop = "max_steps"
    step = start_step
    model.train()
    try:
        while step < tcfg.max_steps:
            k, idx = sampler.draw(rng, step)
            batch = collate([train_sets[k][i] for i in idx], vocab.pad_id)
            loss = model.loss(batch)
            if not bool(torch.isfinite(loss)):
                checkpoint("last", step)
                raise NumericError(f"non-finite loss at step {step}")
            opt.zero_grad()
            T.backward(loss)
            info = opt.step()
            step += 1
            window.append(float(loss.detach()))
            do_eval = bool(evals) and tcfg.eval_every > 0 and step % tcfg.eval_every == 0
            do_log = step % tcfg.log_every == 0 or do_eval or step == tcfg.max_steps
            row_eval: list = []
            if do_eval:
                results = [evaluate(model, ev, vocab, n_vars, tcfg.eval_batch_size) for ev in evals]
                for r in results:
                    row_eval += [f"{r.exact:.6f}", f"{r.support:.6f}", f"{r.per_token:.6f}",
                                 f"{r.teacher_forced:.6f}"]
                last_eval = {"step": step, "exact": _mean(results, "exact"),
                             "support": _mean(results, "support"),
                             "per_token": _mean(results, "per_token"),
                             "teacher_forced": _mean(results, "teacher_forced"),
                             "per_dataset": [r.as_dict() for r in results]}
                if last_eval["exact"] > best_exact:
                    best_exact, best_step = last_eval["exact"], step
                    checkpoint("best", step)
            if do_log and metrics_fh is not None:
                row = [step, f"{np.mean(window):.6f}", f"{info['lr']:.6g}",
                       f"{curriculum_mu(step - 1, ccfg):.4f}", f"{info['grad_norm']:.6f}"]
                row += row_eval or [""] * (4 * len(evals))
                mw.writerow(row)
                tw.writerow([step, f"{time.perf_counter() - t0:.3f}"])
                metrics_fh.flush()
                timing_fh.flush()
            if do_log:
                window = []
            if do_eval:
                checkpoint("last", step)
                hit_exact = tcfg.target_exact is None or last_eval["exact"] >= tcfg.target_exact
                hit_tok = tcfg.target_per_token is None or last_eval["per_token"] >= tcfg.target_per_token
                if (tcfg.target_exact is not None or tcfg.target_per_token is not None) \
                        and hit_exact and hit_tok:
                    stop = "targets_reached"
                    break
            if tcfg.time_budget is not None and time.perf_counter() - t0 > tcfg.time_budget:
                stop = "time_budget"
                break
        checkpoint("last", step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    elapsed = time.perf_counter() - t0
    if out_dir is not None:
        with open(out_dir / "summary.json", "w") as fh:
            json.dump({"steps": step, "best_exact": best_exact, "best_step": best_step,
                       "last_eval": last_eval, "stop_reason": stop}, fh, indent=1)
    return TrainResult(step, best_exact, best_step, last_eval, elapsed, stop, out_dir)
