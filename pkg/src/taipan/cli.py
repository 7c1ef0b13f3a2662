"""Command-line front end.

Subcommands
-----------
check            fast self-tests of the numeric core (duality, decode parity,
                 checkpoint round-trip, gradients); ``--poison`` deliberately
                 corrupts one path to prove the checks can fail
train            run the training loop, streaming ``metrics.csv`` and writing
                 resumable checkpoints into ``--out``
eval             perplexity and recall accuracy at chosen context lengths
                 (``eval.csv``)
bench            decode throughput and state footprint across sequence
                 lengths and model variants (``bench.csv``)
ablate-capacity  train at a grid of attention budgets and report the realized
                 selection rate of each (``ablate.csv``)

Every run directory also gets a ``run.json`` describing the resolved
configuration, and each CSV starts with a ``# run_id=... config_hash=...``
comment line tying it to that record.

Exit codes: 0 success, 1 a check or criterion failed, 2 bad usage or
configuration, 3 runtime failure (out of memory, unreadable files, ...).
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime
import hashlib
import json
import os
import sys
import tempfile
import time
import uuid
from pathlib import Path

import numpy as np

from .attention import linear_attention_matmul
from .mamba2 import ssd_matrix, ssd_recurrent
from .model import (
    ModelConfig,
    TaipanModel,
    VARIANTS,
    load_checkpoint,
    read_container,
    save_checkpoint,
)
from .tensor import finite_difference_check
from .training import (
    LMTask,
    RecallTask,
    TrainConfig,
    evaluate_ppl,
    evaluate_recall,
    realized_selection,
    total_loss,
    train,
)

METRICS_HEADER = ["step", "ce_loss", "constraint_loss", "total_loss", "lr",
                  "sel_frac_mean", "sel_frac_per_sal"]
BENCH_HEADER = ["variant", "seq_len", "tokens_generated", "ns_per_token_median",
                "peak_state_bytes", "status"]
EVAL_HEADER = ["mode", "context_len", "ppl", "recall_acc", "n"]
ABLATE_HEADER = ["budget", "realized_frac", "realized_frac_per_sal",
                 "map_frac", "recall_acc", "final_ce"]


class ConfigError(ValueError):
    """Anything wrong with the run configuration (exit code 2)."""


# -- run configuration -----------------------------------------------------

DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "model": {},
    "train": {},
    "task": {"kind": "recall"},
    "eval": {"context_lens": [256], "n_batches": 4, "batch_size": 4},
    "bench": {"seq_lens": [256, 1024, 4096, 16384], "reps": 3},
    "ablate": {"budgets": [0.10, 0.15, 0.20, 0.25], "steps": 300,
               "n_batches": 4, "batch_size": 4},
}


def _parse_set(expr: str):
    if "=" not in expr:
        raise ConfigError(f"--set expects section.key=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are allowed unquoted
    return path.split("."), value


def load_run_config(config_path: str | None, sets) -> dict:
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if config_path is not None:
        try:
            with open(config_path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, val in user.items():
            if key not in cfg:
                raise ConfigError(f"unknown config section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                cfg[key].update(val)
            else:
                cfg[key] = val
    for expr in sets or []:
        keys, value = _parse_set(expr)
        node = cfg
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config path {'.'.join(keys)!r}")
            node = node[k]
        if keys[0] not in cfg:
            raise ConfigError(f"unknown config path {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return cfg


def resolve_config(args) -> dict:
    cfg = load_run_config(getattr(args, "config", None), getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None) is not None and args.variant != "all":
        cfg["model"]["variant"] = args.variant
    cfg["precision"] = getattr(args, "precision", "fp64")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def build_model(cfg: dict, *, seed_offset: int = 0) -> TaipanModel:
    try:
        mc = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg["model"]})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model section: {e}") from e
    dtype = np.float32 if cfg["precision"] == "fp32" else np.float64
    return TaipanModel(mc, seed=cfg["seed"] + seed_offset, dtype=dtype)


def build_task(cfg: dict, model_cfg: ModelConfig, *, seq_len: int | None = None):
    section = dict(cfg["task"])
    kind = section.pop("kind", "recall")
    section["vocab_size"] = model_cfg.vocab_size
    if seq_len is not None:
        section["seq_len"] = seq_len
    try:
        if kind == "recall":
            section["window"] = model_cfg.window
            return RecallTask(**section)
        if kind == "lm":
            return LMTask(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"task section: {e}") from e
    raise ConfigError(f"unknown task kind {kind!r} (expected 'recall' or 'lm')")


def build_train_config(cfg: dict, out_dir: str | None) -> TrainConfig:
    section = dict(cfg["train"])
    if "out_dir" in section or "seed" in section:
        raise ConfigError("train.out_dir comes from --out and train.seed from the top-level seed")
    try:
        return TrainConfig(seed=cfg["seed"] + 1, out_dir=out_dir, **section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train section: {e}") from e


# -- run records and CSV output --------------------------------------------


def _new_run_record(command: str, cfg: dict, argv) -> dict:
    return {
        "run_id": datetime.datetime.now().strftime("%Y%m%d-%H%M%S-") + uuid.uuid4().hex[:8],
        "config_hash": config_hash(cfg),
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "started": datetime.datetime.now().isoformat(timespec="seconds"),
        "status": "running",
    }


def _write_run_record(out_dir: str, record: dict) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "run.json", "w") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


def _finish_run_record(out_dir: str, record: dict) -> None:
    record["status"] = "complete"
    record["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
    _write_run_record(out_dir, record)


class CsvLog:
    """A CSV file with a run-identifying comment line above the header."""

    def __init__(self, path, header, record, *, append=False):
        self.path = Path(path)
        mode = "a" if append and self.path.exists() else "w"
        self.f = open(self.path, mode, newline="")
        self.w = csv.writer(self.f)
        if mode == "w":
            self.f.write(f"# run_id={record['run_id']} config_hash={record['config_hash']}\n")
            self.w.writerow(header)
            self.f.flush()

    def row(self, values) -> None:
        self.w.writerow(values)
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def read_csv_log(path):
    """Read back a CsvLog file: (comment dict, list of row dicts)."""
    with open(path, newline="") as f:
        first = f.readline().strip()
        meta = {}
        if first.startswith("#"):
            for part in first[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
        rows = list(csv.DictReader(f))
    return meta, rows


# -- check -----------------------------------------------------------------


def _check_ssd_duality(poison):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        L = int(rng.integers(2, 40))
        dh, ds = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.normal(size=(L, dh))
        a = rng.random(L)
        B = rng.normal(size=(L, ds))
        C = rng.normal(size=(L, ds))
        rec, _ = ssd_recurrent(x, a, B, C)
        if poison == "ssd":
            rec = rec * (1.0 + 1e-6)
        quad = ssd_matrix(x, a, B, C)
        err = np.max(np.abs(rec - quad)) / max(np.max(np.abs(quad)), 1e-30)
        worst = max(worst, float(err))
    return worst < 1e-9, f"max rel err {worst:.2e} over 20 instances"


def _check_linear_limit(poison):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        L, dh, ds = int(rng.integers(2, 30)), 5, 7
        x = rng.normal(size=(L, dh))
        B = rng.normal(size=(L, ds))
        C = rng.normal(size=(L, ds))
        ssd = ssd_matrix(x, np.ones(L), B, C)
        lin = linear_attention_matmul(C, B, x, phi="identity")
        if poison == "linear":
            lin = lin * (1.0 + 1e-6)
        err = np.max(np.abs(ssd - lin)) / max(np.max(np.abs(lin)), 1e-30)
        worst = max(worst, float(err))
    return worst < 1e-9, f"max rel err {worst:.2e} over 10 instances"


def _tiny_model_for_checks():
    cfg = ModelConfig(vocab_size=64, d_model=32, n_mamba_layers=2, sal_interval=2,
                      n_heads=4, window=8)
    return TaipanModel(cfg, seed=0)


def _check_decode_parity(poison):
    model = _tiny_model_for_checks()
    rng = np.random.default_rng(2)
    L = 12
    tokens = rng.integers(0, model.config.vocab_size, size=L)
    noise = [rng.gumbel(size=(L, 2)) for _ in range(model.config.n_sal)]
    full, _ = model.forward(tokens[None], noise=[n[None] for n in noise])
    dec, _, _ = model.decode_sequence(tokens, sal_noise=noise)
    err = float(np.max(np.abs(full.data[0] - dec)))
    return err < 1e-8, f"max |forward - decode| = {err:.2e} over {L} positions"


def _check_checkpoint(poison):
    model = _tiny_model_for_checks()
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ckpt.bin"
        save_checkpoint(path, model, extras={"note": "self-test"})
        back, extras = load_checkpoint(path)
        ok = extras.get("note") == "self-test"
        for (_, p), (_, q) in zip(model.params(), back.params()):
            ok = ok and np.array_equal(p.data, q.data)
    return ok, "round trip bit-exact" if ok else "round trip NOT bit-exact"


def _check_gradients(poison):
    model = _tiny_model_for_checks()
    rng = np.random.default_rng(3)
    tokens = rng.integers(0, model.config.vocab_size, size=(1, 8))
    targets = np.roll(tokens, -1, axis=1).copy()
    targets[:, -1] = -1
    noise = [rng.gumbel(size=(1, 8, 2)) for _ in range(model.config.n_sal)]

    def f():
        logits, decisions = model.forward(tokens, gate_mode="soft", noise=noise)
        loss, _, _ = total_loss(logits, targets, decisions, model.config.attn_budget)
        return loss

    names = dict(model.params())
    small = [names["final_norm_w"], names["blocks.2.b_g"], names["blocks.0.A_log"],
             names["blocks.1.b_dt"]]
    err = finite_difference_check(f, small)
    return err < 1e-4, f"max FD error {err:.2e} over {sum(p.data.size for p in small)} entries"


CHECKS = [
    ("ssd-duality", _check_ssd_duality),
    ("linear-attention-limit", _check_linear_limit),
    ("decode-parity", _check_decode_parity),
    ("checkpoint-roundtrip", _check_checkpoint),
    ("gradient-check", _check_gradients),
]


def cmd_check(args, argv) -> int:
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        ok, detail = fn(args.poison)
        dt = time.perf_counter() - t0
        status = "PASS" if ok else "FAIL"
        print(f"check {name}: {status} ({detail}) [{dt:.2f}s]")
        failures += not ok
    if failures:
        print(f"{failures} of {len(CHECKS)} checks failed")
        return 1
    print(f"all {len(CHECKS)} checks passed")
    return 0


# -- train -----------------------------------------------------------------


def _trim_metrics_for_resume(path: Path, start_step: int) -> None:
    """Drop rows at/after the resume point so the file never holds duplicates."""
    if not path.exists():
        return
    with open(path, newline="") as f:
        lines = f.readlines()
    kept = []
    for line in lines:
        first = line.split(",", 1)[0].strip()
        if first.isdigit() and int(first) >= start_step:
            continue
        kept.append(line)
    with open(path, "w", newline="") as f:
        f.writelines(kept)


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args)
    model = build_model(cfg)
    task = build_task(cfg, model.config)
    tc = build_train_config(cfg, args.out)
    record = _new_run_record("train", cfg, argv)
    _write_run_record(args.out, record)

    mpath = Path(args.out) / "metrics.csv"
    append = False
    if args.resume:
        ckpt = Path(args.out) / "checkpoint.bin"
        if not ckpt.exists():
            raise ConfigError(f"--resume: no checkpoint at {ckpt}")
        meta, _ = read_container(ckpt)
        _trim_metrics_for_resume(mpath, int(meta["extras"]["step"]))
        append = True
    log = CsvLog(mpath, METRICS_HEADER, record, append=append)

    def on_step(row):
        log.row([row["step"], row["ce_loss"], row["constraint_loss"],
                 row["total_loss"], row["lr"], row["sel_frac_mean"],
                 "|".join(f"{v:.6f}" for v in row["sel_frac_per_sal"])])
        if args.verbose and row["step"] % tc.log_every == 0:
            print(f"step {row['step']}: loss {row['total_loss']:.4f} "
                  f"sel {row['sel_frac_mean']:.3f} ({row['step_time_s']:.2f}s)")

    try:
        rows = train(model, task, tc, resume=args.resume, on_step=on_step)
    finally:
        log.close()
    record["last_step"] = rows[-1]["step"] if rows else None
    record["final_loss"] = rows[-1]["total_loss"] if rows else None
    _finish_run_record(args.out, record)
    print(f"trained to step {tc.steps}; metrics in {mpath}")
    return 0


# -- eval ------------------------------------------------------------------


def _require_list(value, name: str):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{name} must be a list, got {value!r}")
    return value


def _eval_task(cfg: dict, model_cfg: ModelConfig, kind: str, ctx: int):
    """The config's task section if it matches ``kind``, else that kind's defaults."""
    section = cfg["task"] if cfg["task"].get("kind", "recall") == kind else {"kind": kind}
    return build_task({**cfg, "task": section}, model_cfg, seq_len=ctx)


def cmd_eval(args, argv) -> int:
    cfg = resolve_config(args)
    if args.ckpt:
        dtype = np.float32 if cfg["precision"] == "fp32" else np.float64
        try:
            model, _ = load_checkpoint(args.ckpt, dtype=dtype)
        except (OSError, RuntimeError) as e:
            raise ConfigError(f"cannot load checkpoint: {e}") from e
    else:
        model = build_model(cfg)
    record = _new_run_record("eval", cfg, argv)
    _write_run_record(args.out, record)
    log = CsvLog(Path(args.out) / "eval.csv", EVAL_HEADER, record)
    ev = cfg["eval"]
    seed = cfg["seed"] + 2
    for ctx in _require_list(ev["context_lens"], "eval.context_lens"):
        lm = _eval_task(cfg, model.config, "lm", ctx)
        out = evaluate_ppl(model, lm, np.random.default_rng(seed),
                           n_batches=ev["n_batches"], batch_size=ev["batch_size"])
        log.row(["lm", ctx, out["ppl"], "", out["n_tokens"]])
        print(f"lm ctx={ctx}: ppl {out['ppl']:.3f} ({out['n_tokens']} tokens)")
        rtask = _eval_task(cfg, model.config, "recall", ctx)
        out = evaluate_recall(model, rtask, np.random.default_rng(seed + 1),
                              n_batches=ev["n_batches"], batch_size=ev["batch_size"])
        log.row(["recall", ctx, "", out["accuracy"], out["n_queries"]])
        print(f"recall ctx={ctx}: acc {out['accuracy']:.3f} ({out['n_queries']} queries)")
    log.close()
    _finish_run_record(args.out, record)
    return 0


# -- bench -----------------------------------------------------------------


def bench_decode(model: TaipanModel, seq_len: int, *, reps: int = 3,
                 seed: int = 0) -> dict:
    """Median decode cost and peak state footprint for one (model, length).

    Runs ``reps + 1`` full decodes of ``seq_len`` random tokens and discards
    the first (cache warmup).  Gating uses live Gumbel draws so selective
    layers do real attention work at roughly their budgeted rate.
    """
    V = model.config.vocab_size
    tokens = np.random.default_rng(seed).integers(0, V, size=seq_len)
    ns, peak, done = [], 0, 0
    try:
        for rep in range(reps + 1):
            state = model.alloc_decode_state()
            rng = np.random.default_rng(seed + 1 + rep)
            t0 = time.perf_counter_ns()
            for t in range(seq_len):
                model.step_decode(tokens[t], state, rng=rng)
                done = t + 1
            dt = time.perf_counter_ns() - t0
            peak = max(peak, state.nbytes)
            if rep > 0:
                ns.append(dt / seq_len)
    except MemoryError:
        return {"tokens_generated": done, "ns_per_token_median": "",
                "peak_state_bytes": peak, "status": "oom"}
    return {"tokens_generated": seq_len,
            "ns_per_token_median": float(np.median(ns)),
            "peak_state_bytes": peak, "status": "ok"}


def cmd_bench(args, argv) -> int:
    cfg = resolve_config(args)
    record = _new_run_record("bench", cfg, argv)
    _write_run_record(args.out, record)
    log = CsvLog(Path(args.out) / "bench.csv", BENCH_HEADER, record)
    variants = list(VARIANTS) if args.variant == "all" else [
        args.variant or cfg["model"].get("variant", "taipan")]
    seq_lens = _require_list(cfg["bench"]["seq_lens"], "bench.seq_lens")
    reps = cfg["bench"]["reps"]
    for variant in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg["model"]["variant"] = variant
        model = build_model(vcfg)
        for L in seq_lens:
            out = bench_decode(model, int(L), reps=reps, seed=cfg["seed"] + 3)
            log.row([variant, L, out["tokens_generated"],
                     out["ns_per_token_median"], out["peak_state_bytes"],
                     out["status"]])
            print(f"bench {variant} L={L}: {out['status']}, "
                  f"{out['ns_per_token_median'] if out['status'] == 'ok' else '-'} ns/token, "
                  f"state {out['peak_state_bytes']} bytes")
    log.close()
    _finish_run_record(args.out, record)
    return 0


# -- ablate-capacity -------------------------------------------------------


def cmd_ablate(args, argv) -> int:
    cfg = resolve_config(args)
    record = _new_run_record("ablate-capacity", cfg, argv)
    _write_run_record(args.out, record)
    log = CsvLog(Path(args.out) / "ablate.csv", ABLATE_HEADER, record)
    ab = cfg["ablate"]
    for budget in _require_list(ab["budgets"], "ablate.budgets"):
        bcfg = copy.deepcopy(cfg)
        bcfg["model"]["attn_budget"] = budget
        bcfg["train"]["steps"] = ab["steps"]
        model = build_model(bcfg)
        task = build_task(bcfg, model.config)
        tc = build_train_config(bcfg, None)
        rows = train(model, task, tc)
        per = realized_selection(model, task, np.random.default_rng(cfg["seed"] + 2),
                                 n_batches=ab["n_batches"], batch_size=ab["batch_size"])
        map_frac = realized_selection(
            model, task, np.random.default_rng(cfg["seed"] + 2),
            n_batches=ab["n_batches"], batch_size=ab["batch_size"], sampled=False,
        ).mean()
        acc = ""
        if isinstance(task, RecallTask):
            acc = evaluate_recall(model, task, np.random.default_rng(cfg["seed"] + 4),
                                  n_batches=ab["n_batches"],
                                  batch_size=ab["batch_size"])["accuracy"]
        log.row([budget, float(per.mean()), "|".join(f"{v:.6f}" for v in per),
                 float(map_frac), acc, rows[-1]["ce_loss"]])
        print(f"budget {budget}: realized {per.mean():.3f} "
              f"(per layer {np.round(per, 3).tolist()}), map {map_frac:.3f}"
              + (f", recall {acc:.3f}" if acc != "" else ""))
    log.close()
    _finish_run_record(args.out, record)
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taipan",
                                description="hybrid recurrent/attention LM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run-config file")
        sp.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override a config entry, e.g. --set train.steps=100")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--precision", choices=("fp64", "fp32"), default="fp64")
        sp.add_argument("--out", required=out_required,
                        help="directory for CSVs, run.json, and checkpoints")

    sp = sub.add_parser("check", help="run the numeric self-tests")
    sp.add_argument("--poison", choices=("ssd", "linear"),
                    help="corrupt one code path to prove the checks have teeth")
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--resume", action="store_true",
                    help="continue from the checkpoint in --out")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate perplexity and recall")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--ckpt", help="checkpoint to evaluate (default: fresh init)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="decode throughput and state size")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("ablate-capacity", help="sweep the attention budget")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    threads = os.environ.get("TAIPAN_THREADS")
    if threads:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args, argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (MemoryError, OSError, FloatingPointError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
