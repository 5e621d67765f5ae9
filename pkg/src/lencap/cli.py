"""Command-line entry point: ``lencap <subcommand> [flags]``.

Any subcommand accepts ``--config FILE``: flat ``key=value`` lines (``#`` starts
a comment) whose keys are the subcommand's flag names, with dashes or
underscores. Flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, evaluate, model as M, plotting, prompts, train as T, world
from .decode import DecodeConfig, ModelCaptioner
from .vocab import Vocab

log = logging.getLogger("lencap")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config files

def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        action.required = False  # the file supplies it; a flag may still override
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(text)
        elif action.type is not None:
            defaults[key] = action.type(text)
        else:
            defaults[key] = text
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------- argument helpers

def _model_args(p):
    g = p.add_argument_group("model")
    d = M.ModelConfig()
    g.add_argument("--image-size", type=int, default=d.image_size)
    g.add_argument("--patch", type=int, default=d.patch)
    g.add_argument("--d-model", type=int, default=d.d_model)
    g.add_argument("--enc-layers", type=int, default=d.enc_layers)
    g.add_argument("--dec-layers", type=int, default=d.dec_layers)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--max-tokens", type=int, default=d.max_tokens)
    g.add_argument("--ff-mult", type=int, default=d.ff_mult)
    g.add_argument("--no-first-target", action="store_true",
                   help="drop the loss on the word predicted from the length token")


def _model_config(a, vocab_size) -> M.ModelConfig:
    return M.ModelConfig(image_size=a.image_size, patch=a.patch, d_model=a.d_model,
                         enc_layers=a.enc_layers, dec_layers=a.dec_layers, heads=a.heads,
                         vocab_size=vocab_size, max_tokens=a.max_tokens, ff_mult=a.ff_mult,
                         loss_on_first=not a.no_first_target)


def _eval_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True, help="scene JSONL file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit", type=int, default=0, help="use only the first N scenes")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lencap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_):
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value defaults file")
        return p

    p = sub("gen-scenes", "generate scene records")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=6)

    p = sub("build-dataset", "turn scenes into a triplet shard")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=dataset.DEFAULT_MAX_TOKENS)
    p.add_argument("--p-attr", type=float, default=0.3)

    p = sub("stats", "prefix-sharing fractions and caption-length histogram")
    p.add_argument("--in", dest="shard", required=True)
    p.add_argument("--out-dir", help="also write stats.csv and a histogram figure")

    p = sub("train", "train a model on a shard")
    p.add_argument("--shard", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="loss-curve CSV path (a PNG is written beside it)")
    d = T.TrainConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--warmup", type=int, default=d.warmup)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--max-boxes", type=int, default=d.max_boxes)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)
    p.add_argument("--init-seed", type=int, default=d.init_seed)
    p.add_argument("--data-seed", type=int, default=d.data_seed)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    p.add_argument("--log-every", type=int, default=d.log_every)
    _model_args(p)

    p = sub("decode", "caption every object box of some scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", help="JSONL output (default: stdout)")
    p.add_argument("--prefix", default="LEN_2", help='e.g. "LEN_4 the color is"')
    p.add_argument("--mode", choices=("greedy", "nucleus"), default="greedy")
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)

    p = sub("eval-length", "length compliance per target length")
    _eval_args(p)
    p = sub("eval-region", "shape classification from sampled captions")
    _eval_args(p)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p = sub("eval-dense", "dense captioning mAP on proposal boxes")
    _eval_args(p)
    p = sub("eval-prefix", "attribute extraction by prefix conditioning")
    _eval_args(p)

    p = sub("prompt", "assemble a question-answering prompt")
    p.add_argument("--spec", required=True, help="JSON file describing the prompt inputs")

    p = sub("grad-check", "finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--precision", choices=("extended", "float64"), default="extended")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=0, help="probe at most N per array")
    return parser


# ---------------------------------------------------------------- commands

def _load_scenes(path, limit=0):
    scenes = world.read_scenes(path)
    return scenes[:limit] if limit else scenes


def _captioner(path):
    vocab = Vocab()
    params, config = T.load_checkpoint(path)
    if config.vocab_size != len(vocab):
        raise ValueError(f"checkpoint vocabulary {config.vocab_size} != {len(vocab)}")
    return ModelCaptioner(params, config, vocab)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scenes(a):
    cfg = world.WorldConfig(min_objects=a.min_objects, max_objects=a.max_objects)
    world.write_scenes(world.generate_scenes(a.seed, a.count, cfg), a.out)
    print(f"wrote {a.count} scenes to {a.out}")


def cmd_build_dataset(a):
    shard = dataset.build_dataset(world.read_scenes(a.scenes), Vocab(), a.max_tokens, a.p_attr)
    dataset.write_shard(shard, a.out)
    print(f"wrote {len(shard.triplets)} triplets over {len(shard.scenes)} scenes to {a.out}")


def cmd_stats(a):
    shard = dataset.read_shard(a.shard, len(Vocab()))
    bos = dataset.prefix_share_fraction(shard, "bos-token")
    length = dataset.prefix_share_fraction(shard, "length-token")
    hist = dataset.length_histogram(shard)
    print(f"scenes\t{len(shard.scenes)}")
    print(f"triplets\t{len(shard.triplets)}")
    print(f"prefix_share_bos\t{bos:.6f}")
    print(f"prefix_share_length\t{length:.6f}")
    for k, n in hist.items():
        print(f"length_{k}\t{n}")
    if a.out_dir:
        out = _out_dir(a.out_dir)
        with open(out / "stats.csv", "w") as fh:
            fh.write("key,value\n")
            fh.write(f"prefix_share_bos,{bos:.6f}\nprefix_share_length,{length:.6f}\n")
            for k, n in hist.items():
                fh.write(f"length_{k},{n}\n")
        plotting.plot_length_histogram(hist, out / "length_histogram.png")


def cmd_train(a):
    mcfg = _model_config(a, len(Vocab()))
    tcfg = T.TrainConfig(steps=a.steps, batch=a.batch, lr=a.lr, warmup=a.warmup,
                         weight_decay=a.weight_decay, max_boxes=a.max_boxes,
                         clip_norm=a.clip_norm, init_seed=a.init_seed, data_seed=a.data_seed,
                         checkpoint_every=a.checkpoint_every, log_every=a.log_every)
    shard = dataset.read_shard(a.shard, mcfg.vocab_size)
    result = T.train(mcfg, tcfg, shard, checkpoint_path=a.out, curve_path=a.curve)
    if a.curve:
        plotting.plot_loss_curve(result.curve, Path(a.curve).with_suffix(".png"))
    print(f"final loss {result.curve[-1][1]:.6f}; checkpoint {a.out}")


def cmd_decode(a):
    cap = _captioner(a.checkpoint)
    cfg = DecodeConfig(a.mode, a.p, a.temperature, a.samples, a.seed, a.prefix)
    prefix = cap.vocab.parse_prefix(cfg.prefix)
    out = open(a.out, "w") if a.out else sys.stdout
    try:
        for scene in _load_scenes(a.scenes, a.limit):
            for i, obj in enumerate(scene.objects):
                if cfg.mode == "greedy":
                    results = cap.greedy(scene, [obj.box], [prefix])
                else:
                    results = cap.sample(scene, obj.box, [prefix], cfg.samples, cfg.p,
                                         cfg.temperature, seed=cfg.seed * 1_000_003 + scene.seed * 16 + i)
                for res in results:
                    rec = {"scene": scene.seed, "object": i, **res.to_record()}
                    out.write(json.dumps(rec) + "\n")
    finally:
        if a.out:
            out.close()


def cmd_eval_length(a):
    cap, scenes, out = _captioner(a.checkpoint), _load_scenes(a.scenes, a.limit), _out_dir(a.out_dir)
    rows = evaluate.eval_length_compliance(cap, scenes, seed=a.seed)
    evaluate.write_compliance_csv(rows, out / "length_compliance.csv")
    plotting.plot_compliance(rows, out / "length_compliance.png")
    for r in rows:
        print(f"LEN_{r.length}\tmean {r.mean_length:.3f}\taccuracy {r.accuracy:.3f}\tn {r.count}")


def cmd_eval_region(a):
    cap, scenes, out = _captioner(a.checkpoint), _load_scenes(a.scenes, a.limit), _out_dir(a.out_dir)
    res = evaluate.eval_region_classification(cap, scenes, k=a.k, p=a.p,
                                              temperature=a.temperature, seed=a.seed)
    evaluate.write_region_csv(res, out / "region_classification.csv")
    plotting.plot_confusion(res, world.SHAPES, out / "region_confusion.png")
    print(f"accuracy\t{res.accuracy:.4f}")


def cmd_eval_dense(a):
    cap, scenes, out = _captioner(a.checkpoint), _load_scenes(a.scenes, a.limit), _out_dir(a.out_dir)
    preds = evaluate.dense_predictions(cap, scenes, seed=a.seed)
    res = evaluate.eval_dense_captioning(preds, evaluate.dense_ground_truth(scenes))
    evaluate.write_dense_csv(res, out / "dense_map.csv")
    plotting.plot_dense_grid(res, out / "dense_map.png")
    print(f"mAP\t{res.mean_ap:.4f}")


def cmd_eval_prefix(a):
    cap, scenes, out = _captioner(a.checkpoint), _load_scenes(a.scenes, a.limit), _out_dir(a.out_dir)
    scores = evaluate.eval_prefix_extraction(cap, scenes, cap.vocab)
    evaluate.write_prefix_csv(scores, out / "prefix_extraction.csv")
    plotting.plot_attribute_accuracy(scores, out / "prefix_extraction.png")
    for attr, acc in scores.items():
        print(f"{attr}\t{acc:.4f}")


def cmd_prompt(a):
    spec = json.loads(Path(a.spec).read_text())
    kind = spec.get("kind", "vqa")
    if kind == "video":
        frames = [(int(f["index"]), list(f["captions"])) for f in spec.get("frames", [])]
        text = prompts.build_video_prompt(frames, spec["question"])
    elif kind == "vqa":
        objects = [prompts.ObjectLine(tuple(o["captions"]), tuple(o["box"]), o.get("score"))
                   for o in spec.get("objects", [])]
        text = prompts.build_vqa_prompt(spec["width"], spec["height"], spec.get("captions", []),
                                        objects, spec["question"], spec.get("variant", "standard"))
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    sys.stdout.write(text + "\n")


def cmd_grad_check(a):
    from .gradcheck import check_loss_gradient

    dtype = np.longdouble if a.precision == "extended" else np.float64
    err = check_loss_gradient(seed=a.seed, eps=a.eps, dtype=dtype,
                              max_coords=a.max_coords or None)
    print(f"max relative error\t{err:.3e}")
    if not err < a.tolerance:
        raise RuntimeError(f"gradient error {err:.3e} exceeds {a.tolerance:g}")


COMMANDS = {
    "gen-scenes": cmd_gen_scenes, "build-dataset": cmd_build_dataset, "stats": cmd_stats,
    "train": cmd_train, "decode": cmd_decode, "eval-length": cmd_eval_length,
    "eval-region": cmd_eval_region, "eval-dense": cmd_eval_dense,
    "eval-prefix": cmd_eval_prefix, "prompt": cmd_prompt, "grad-check": cmd_grad_check,
}


def _config_path(argv):
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    config = _config_path(argv)
    if command and config:
        try:
            _apply_config(subparsers[command], read_config_file(config))
        except (UsageError, OSError, ValueError) as exc:
            subparsers[command].print_usage(sys.stderr)
            print(f"lencap: error: {exc}", file=sys.stderr)
            return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
        log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
        COMMANDS[args.command](args)
    except Exception as exc:  # every failure is reported with its stage
        print(f"lencap {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    finally:
        log.removeHandler(handler)
    return 0


def main() -> None:
    sys.exit(run())
