"""Command-line entry point: ``detq <subcommand>``.

Every command ends by emitting a one-line JSON run manifest (to stdout, or
appended to ``--manifest FILE``).  Exit codes: 0 success / Confirmed,
1 Refuted, 2 usage or I/O errors.
"""
import argparse
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attest as attest_mod
from .engine import Engine
from .floatref import LaneConfig, divergence_report_csv, fsum_lanes, measure_layer_divergence, run_divergence
from .hashing import tokens_hash
from .modelio import ModelConfig, ModelFormatError, deserialize, gen_toy_model, serialize
from .qarith import ONE, q16_from_real
from .trustlab import (PlatformDistribution, decay_bound, reduction_tree_count, reject_prob,
                       simulate_protocol, trust_entropy)

EXIT_OK, EXIT_REFUTED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_ids(text: str) -> list:
    try:
        ids = [int(t) for t in text.replace(" ", "").split(",") if t != ""]
    except ValueError as exc:
        raise UsageError(f"prompt must be comma-separated token ids: {exc}") from None
    if not ids:
        raise UsageError("prompt is empty")
    if any(t < 0 for t in ids):
        raise UsageError("token ids must be non-negative")
    return ids


def _prompt(args, vocab=None) -> list:
    if getattr(args, "bytes", None) is not None:
        if vocab is not None and vocab < 256:
            raise UsageError("--bytes needs a model with vocab >= 256")
        ids = list(args.bytes.encode("utf-8"))
        if not ids:
            raise UsageError("prompt is empty")
    elif getattr(args, "prompt", None) is not None:
        ids = _parse_ids(args.prompt)
    else:
        raise UsageError("give --prompt IDS or --bytes TEXT")
    if vocab is not None and max(ids) >= vocab:
        raise UsageError(f"token id {max(ids)} is outside the model vocabulary ({vocab})")
    return ids


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _load_model(path):
    raw = _read(path)
    try:
        return raw, deserialize(raw)
    except ModelFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _add_prompt(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prompt", help="comma-separated token ids, e.g. 1,2,3")
    g.add_argument("--bytes", help="use the UTF-8 bytes of this text as token ids 0-255")


def cmd_gen(args, out):
    try:
        cfg = ModelConfig(args.layers, args.dmodel, args.heads, args.ffn, args.vocab, args.ctx,
                          args.theta)
    except ValueError as exc:
        raise UsageError(f"invalid model config: {exc}") from None
    model = gen_toy_model(args.seed, cfg, gain=args.gain)
    _write(args.out, serialize(model))
    out(f"weight_hash {model.weight_hash.hex()}")
    return EXIT_OK, {"seeds": [args.seed], "model_hash": model.weight_hash.hex()}


def _temperature(mode: str):
    if mode == "greedy":
        return None
    if mode.startswith("sample:"):
        try:
            t = q16_from_real(Fraction(mode.split(":", 1)[1]))
        except (ValueError, ZeroDivisionError):
            raise UsageError(f"bad temperature in {mode!r}") from None
        if t <= 0:
            raise UsageError("temperature must be positive")
        return t
    raise UsageError("--mode must be 'greedy' or 'sample:TEMP'")


def cmd_infer(args, out):
    raw, model = _load_model(args.model)
    ids = _prompt(args, model.config.vocab)
    temp = _temperature(args.mode)
    hashes = []
    with Engine(model, threads=args.threads, chunk_size=args.chunk) as eng:
        for _ in range(args.repeat):
            try:
                if temp is None:
                    res = eng.generate_greedy(ids, args.max_new)
                else:
                    res = eng.generate_sampled(ids, args.max_new, temp)
            except (ValueError, IndexError) as exc:
                raise UsageError(str(exc)) from None
            hashes.append(res.output_hash.hex())
    out("tokens " + ",".join(map(str, res.token_ids)))
    out(f"output_hash {hashes[-1]}")
    if args.repeat > 1:
        out(f"unique_hashes {len(set(hashes))} of {args.repeat} runs")
    return EXIT_OK, {"model_hash": model.weight_hash.hex(), "output_hashes": hashes}


def cmd_attest(args, out):
    raw, model = _load_model(args.model)
    ids = _prompt(args, model.config.vocab)
    with Engine(model, threads=args.threads) as eng:
        try:
            res = eng.generate_greedy(ids, args.max_new)
        except (ValueError, IndexError) as exc:
            raise UsageError(str(exc)) from None
    att = attest_mod.make_attestation(raw, ids, res, args.bond, args.period)
    _write(args.out, att.to_bytes())
    for k, v in att.to_hex().items():
        out(f"{k} {v}")
    return EXIT_OK, {"model_hash": att.model_id.hex(), "output_hashes": [att.output_hash.hex()]}


def _verify_inputs(args):
    raw = _read(args.model)
    try:
        att = attest_mod.Attestation.from_bytes(_read(args.attestation))
    except ValueError as exc:
        raise UsageError(f"{args.attestation}: {exc}") from None
    ids = _prompt(args)
    return raw, att, ids


def _report_outcome(outcome, out):
    out(str(outcome))
    if not outcome.confirmed:
        out(f"expected {outcome.expected.hex()}")
        out(f"found    {outcome.found.hex()}")


def cmd_verify(args, out):
    raw, att, ids = _verify_inputs(args)
    try:
        outcome = attest_mod.verify_by_reexecution(att, raw, ids, args.max_new,
                                                   threads=args.threads)
    except ModelFormatError as exc:
        raise UsageError(f"{args.model}: {exc}") from None
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from None
    _report_outcome(outcome, out)
    return (EXIT_OK if outcome.confirmed else EXIT_REFUTED), {
        "model_hash": att.model_id.hex(), "verdict": str(outcome)}


def cmd_dispute(args, out):
    raw, att, ids = _verify_inputs(args)
    try:
        res = attest_mod.dispute_game(att, raw, ids, args.max_new, threads=args.threads)
    except ModelFormatError as exc:
        raise UsageError(f"{args.model}: {exc}") from None
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from None
    out(f"winner {res.winner}")
    _report_outcome(res.outcome, out)
    return (EXIT_OK if res.winner == "attester" else EXIT_REFUTED), {
        "winner": res.winner, "verdict": str(res.outcome)}


def cmd_diverge(args, out):
    raw, model = _load_model(args.model)
    ids = _prompt(args, model.config.vocab)
    try:
        cfg_a, cfg_b = LaneConfig(args.lanes_a), LaneConfig(args.lanes_b)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(ids) + args.horizon > model.config.max_ctx + 1:
        raise UsageError("prompt + horizon exceeds the model context")
    run = run_divergence(model, ids, cfg_a, cfg_b, args.horizon, backend=args.backend)
    rows = []
    if args.backend == "float" and args.layers:
        for layer, l2 in enumerate(measure_layer_divergence(model, ids, cfg_a, cfg_b)):
            rows.append({"kind": "layer", "index": layer, "l2": l2})
    for i, (a, b) in enumerate(zip(run.tokens_a, run.tokens_b)):
        rows.append({"kind": "token", "index": i, "token_a": a, "token_b": b})
    report = divergence_report_csv(rows)
    if args.csv:
        _write(args.csv, report.encode())
    else:
        out(report.rstrip("\n"))
    if run.index is None:
        out(f"no divergence up to horizon {args.horizon}")
    else:
        out(f"first divergence at token {run.index}: "
            f"{run.tokens_a[run.index]} vs {run.tokens_b[run.index]}")
    return EXIT_OK, {"model_hash": model.weight_hash.hex(), "first_divergence": run.index,
                     "output_hashes": [tokens_hash(run.tokens_a).hex(),
                                       tokens_hash(run.tokens_b).hex()]}


def cmd_theorem9(args, out):
    v = np.array([1.0, 2.0 ** -24, 2.0 ** -24, 2.0 ** -24], dtype=np.float32)
    seq, pair = fsum_lanes(v, 1), fsum_lanes(v, 2)
    out(f"left-to-right (1 lane):  {float(seq):.10f}")
    out(f"pairwise      (2 lanes): {float(pair):.10f}")
    out("differ" if seq != pair else "agree")
    return EXIT_OK, {"values": [float(seq), float(pair)]}


def cmd_entropy(args, out):
    try:
        probs = [float(p) for p in args.dist.split(",")]
        dist = PlatformDistribution.from_probs(probs)
    except ValueError as exc:
        raise UsageError(f"bad --dist: {exc}") from None
    h = trust_entropy(dist)
    out(f"H_T={h:.3f} reject={reject_prob(h):.3f}")
    meta = {"seeds": [args.seed], "H_T": h, "reject": reject_prob(h)}
    if args.trials:
        rate = simulate_protocol(dist, args.trials, args.seed)
        out(f"simulated_reject={rate:.4f} over {args.trials} trials")
        meta["simulated_reject"] = rate
    return EXIT_OK, meta


def cmd_decay(args, out):
    try:
        b = decay_bound(args.eps, args.lam, args.layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out(f"bound={b:.4f}")
    return EXIT_OK, {"bound": b}


def cmd_catalan(args, out):
    try:
        c = reduction_tree_count(args.d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out(f"reduction_trees({args.d}) = {c}")
    return EXIT_OK, {"count": str(c)}


def cmd_selftest(args, out):
    checks = []
    v = np.array([1.0, 2.0 ** -24, 2.0 ** -24, 2.0 ** -24], dtype=np.float32)
    checks.append(("theorem9", fsum_lanes(v, 1) == np.float32(1.0)
                   and fsum_lanes(v, 2) == np.float32(1.0 + 2.0 ** -23)))
    checks.append(("catalan", reduction_tree_count(20) == 1767263190))
    checks.append(("decay", 0.146 <= decay_bound(1e-5, 0.3, 32) <= 0.149))
    model = gen_toy_model(7, ModelConfig(2, 16, 2, 32, 32, 32))
    hashes = set()
    for threads, chunk in [(1, None), (2, 3), (1, 1)]:
        with Engine(model, threads=threads, chunk_size=chunk) as eng:
            hashes.add(eng.generate_greedy([1, 2, 3], 8).output_hash)
    checks.append(("determinism", len(hashes) == 1))
    res = Engine(model).generate_greedy([1, 2, 3], 8)
    att = attest_mod.make_attestation(model.raw, [1, 2, 3], res)
    checks.append(("attest", attest_mod.verify_by_reexecution(att, model.raw, [1, 2, 3], 8).confirmed))
    for name, ok in checks:
        out(f"{'PASS' if ok else 'FAIL'} {name}")
    ok = all(ok for _, ok in checks)
    return (EXIT_OK if ok else EXIT_REFUTED), {"passed": ok}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detq", description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", help="append the JSON run manifest to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a toy model file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--dmodel", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=128)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--ctx", type=int, default=512)
    p.add_argument("--theta", type=float, default=10000.0)
    p.add_argument("--gain", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("infer", help="run greedy or seeded-sampling generation")
    p.add_argument("model")
    _add_prompt(p)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--mode", default="greedy")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--chunk", type=int, default=None)
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("attest", help="generate and write an attestation")
    p.add_argument("model")
    _add_prompt(p)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--bond", type=int, default=0)
    p.add_argument("--period", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attest)

    for name, func, text in [("verify", cmd_verify, "verify an attestation by re-execution"),
                             ("dispute", cmd_dispute, "simulate a challenger dispute")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("model")
        p.add_argument("attestation")
        _add_prompt(p)
        p.add_argument("--max-new", type=int, default=16)
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("diverge", help="first-divergence experiment between two lane widths")
    p.add_argument("model")
    _add_prompt(p)
    p.add_argument("--horizon", type=int, default=256)
    p.add_argument("--lanes-a", type=int, default=2)
    p.add_argument("--lanes-b", type=int, default=8)
    p.add_argument("--backend", choices=("float", "int"), default="float")
    p.add_argument("--layers", action="store_true", help="also report per-layer L2 divergence")
    p.add_argument("--csv", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_diverge)

    p = sub.add_parser("theorem9", help="print the two FP32 reduction-order sums")
    p.set_defaults(func=cmd_theorem9)

    p = sub.add_parser("entropy", help="trust entropy and rejection probability")
    p.add_argument("--dist", required=True, help="comma-separated class probabilities")
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("decay", help="compositional divergence bound")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("catalan", help="count binary reduction trees of a d-term sum")
    p.add_argument("--d", type=int, required=True)
    p.set_defaults(func=cmd_catalan)

    p = sub.add_parser("selftest", help="quick end-to-end sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    lines = []

    def out(line):
        lines.append(line)
        print(line)

    t0 = time.perf_counter()
    try:
        code, meta = args.func(args, out)
    except UsageError as exc:
        print(f"detq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    arguments = {k: v for k, v in vars(args).items() if k not in ("func", "manifest", "command")}
    manifest = {"command": args.command, "arguments": arguments, "exit_code": code, **meta,
                "timing_s": round(time.perf_counter() - t0, 6)}
    record = json.dumps(manifest, sort_keys=True)
    if args.manifest:
        try:
            with open(args.manifest, "a") as fh:
                fh.write(record + "\n")
        except OSError as exc:
            print(f"detq: cannot write manifest: {exc.strerror}", file=sys.stderr)
            return EXIT_USAGE
    else:
        print(record)
    return code


if __name__ == "__main__":
    sys.exit(main())
