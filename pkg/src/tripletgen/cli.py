"""Command-line entry point: ``tripletgen <command> ...``.

Every command writes into ``<out>.partial`` and renames it to ``<out>`` only
on success, together with a ``run.json`` manifest listing every file it
produced.  Relative ``--out`` paths resolve under ``$TRIPLETGEN_RUN_ROOT``
when that variable is set.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from tripletgen import __version__, sbca
from tripletgen._util import promote, write_json
from tripletgen.codecs import reconstruction_report, train_codecs
from tripletgen.config import RunConfig, dump_config, load_config
from tripletgen.corpus import DatasetManifest, generate_corpus, save_triplet
from tripletgen.errors import ConfigError, DataError, TripletGenError
from tripletgen.eval import (consistency_metrics, diversity_metrics, present_classes, render_table,
                             run_protocol, save_grid, scaling_sweep)
from tripletgen.generator import (auto_conditions, load_codecs, load_generator, sample_triplets, save_codecs,
                                  save_generator, scene_groups_for, train_generator, weight_table)

log = logging.getLogger("tripletgen")

RUN_ROOT_ENV = "TRIPLETGEN_RUN_ROOT"
RUN_MANIFEST = "run.json"


def resolve_out(path) -> Path:
    path = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


class Stage:
    """Context manager for one command's output directory (partial -> final)."""

    def __init__(self, name: str, out, cfg: RunConfig, force: bool, inputs: dict | None = None):
        self.name, self.cfg, self.force = name, cfg, force
        self.final = resolve_out(out)
        self.partial = self.final.with_name(self.final.name + ".partial")
        self.inputs = {k: str(v) for k, v in (inputs or {}).items()}
        self.metrics: dict = {}

    def __enter__(self) -> Path:
        if self.final.exists() and not self.force:
            prev = _read_manifest(self.final)
            same = prev is not None and prev.get("config_hash") == self.cfg.hash()
            raise ConfigError(f"{self.final} already exists" + (" with the same config hash" if same else "")
                              + "; pass --force to overwrite")
        if self.partial.exists():
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)
        self.started = datetime.now(timezone.utc).isoformat()
        return self.partial

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        dump_config(self.cfg, self.partial / "config.yaml")
        outputs = sorted(str(p.relative_to(self.partial)) for p in self.partial.rglob("*") if p.is_file())
        write_json(self.partial / RUN_MANIFEST, {
            "stage": self.name, "config_hash": self.cfg.hash(), "version": __version__,
            "started": self.started, "finished": datetime.now(timezone.utc).isoformat(),
            "inputs": self.inputs, "outputs": outputs + [RUN_MANIFEST], "metrics": self.metrics,
        })
        promote(self.partial, self.final)
        return False


def _read_manifest(directory: Path):
    try:
        return json.loads((Path(directory) / RUN_MANIFEST).read_text())
    except (OSError, json.JSONDecodeError):
        return None


def find_orphans(root) -> list[Path]:
    """Files under ``root`` that no run manifest lists."""
    root = Path(root)
    owned = set()
    for man in root.rglob(RUN_MANIFEST):
        doc = _read_manifest(man.parent) or {}
        owned |= {(man.parent / o).resolve() for o in doc.get("outputs", [])}
    return sorted(p for p in root.rglob("*") if p.is_file() and p.resolve() not in owned)


# --------------------------------------------------------------------------- commands

def cmd_gen_corpus(cfg: RunConfig, out, force=False) -> Path:
    c = cfg.corpus
    with Stage("gen-corpus", out, cfg, force) as d:
        for i, (split, n) in enumerate((("train", c.n_train), ("val", c.n_val), ("test", c.n_test))):
            if n > 0:
                generate_corpus(c.spec, n, c.seed * 1000 + i, d / split)
    return resolve_out(out)


def _load_split(corpus_dir, split="train"):
    return DatasetManifest.load(Path(corpus_dir) / split)


def cmd_train_codecs(cfg: RunConfig, corpus_dir, out, force=False) -> Path:
    train = _load_split(corpus_dir).load_all()
    with Stage("train-codecs", out, cfg, force, {"corpus": corpus_dir}) as st_dir:
        codecs, curves = train_codecs(train, cfg.corpus.spec.n_classes, cfg.codec)
        save_codecs(codecs, st_dir, cfg.hash(), cfg.codec)
        write_json(st_dir / "loss_curves.json", curves)
        held = Path(corpus_dir) / "val"
        if (held / "manifest.json").exists():
            _stage_metrics(st_dir, reconstruction_report(codecs, DatasetManifest.load(held).load_all()))
    return resolve_out(out)


def _stage_metrics(directory, metrics):
    write_json(Path(directory) / "metrics.json", metrics)


def cmd_train_gen(cfg: RunConfig, corpus_dir, codec_dir, out, force=False) -> Path:
    train = _load_split(corpus_dir).load_all()
    codecs = load_codecs(codec_dir)
    with Stage("train-gen", out, cfg, force, {"corpus": corpus_dir, "codecs": codec_dir}) as d:
        gen, records = train_generator(train, codecs, cfg.corpus.spec, cfg.generator, log_path=d / "train_log.jsonl")
        save_generator(gen, d / "generator.safetensors", cfg.hash())
        write_json(d / "scene_groups.json", gen.groups.to_json())
        write_json(d / "vocabulary.json", gen.vocab.to_json())
    return resolve_out(out)


def cmd_sample(cfg: RunConfig, gen_dir, codec_dir, n: int, out, prompts_file=None, seed=0, force=False) -> Path:
    if n < 1:
        raise ConfigError("n must be at least 1")
    gen = load_generator(Path(gen_dir) / "generator.safetensors")
    codecs = load_codecs(codec_dir)
    if prompts_file:
        rows = [json.loads(line) for line in Path(prompts_file).read_text().splitlines() if line.strip()]
        prompts = [rows[i % len(rows)]["prompt"] for i in range(n)]
        scenes = [int(rows[i % len(rows)]["scene_id"]) for i in range(n)]
    else:
        prompts, scenes = auto_conditions(gen, n, seed)
    with Stage("sample", out, cfg, force, {"generator": gen_dir, "codecs": codec_dir}) as d:
        triplets = sample_triplets(gen, codecs, prompts, scenes, seed)
        write_synthetic(triplets, d, seed, cfg.hash())
        save_grid(triplets, d / "grid.png")
    return resolve_out(out)


def write_synthetic(triplets, root, seed, config_hash) -> DatasetManifest:
    entries = []
    for i, t in enumerate(triplets):
        e = save_triplet(t, root, f"{i:05d}")
        e.classes = present_classes(t.label)
        entries.append(e)
    man = DatasetManifest(Path(root), entries, seed, config_hash, {"synthetic": True})
    man.save()
    return man


def cmd_evaluate(cfg: RunConfig, real_dir, syn_dir, out, test_dir=None, force=False) -> Path:
    real = _load_split(real_dir).load_all()
    test = (DatasetManifest.load(test_dir) if test_dir else _load_split(real_dir, "test")).load_all()
    syn = DatasetManifest.load(syn_dir).load_all()
    spec = cfg.corpus.spec
    with Stage("evaluate", out, cfg, force, {"real": real_dir, "syn": syn_dir}) as d:
        res = run_protocol(real, syn, test, spec.n_classes, cfg.eval.regimes, cfg.eval.seeds, cfg.seg, cfg.hash())
        report = {"summary": res["summary"], "rows": res["rows"], "consistency": consistency_metrics(syn, spec),
                  "diversity": diversity_metrics(syn, scene_groups_for(real, cfg.generator.K, cfg.generator.seed),
                                                 spec)}
        write_json(d / "report.json", report)
        (d / "report.txt").write_text(render_table(res["summary"]) + "\n")
        print(render_table(res["summary"]))
    return resolve_out(out)


def cmd_sweep(cfg: RunConfig, kind: str, corpus_dir, codec_dir, out, force=False) -> Path:
    """Grid over one axis; each cell trains its own generator where the axis requires it."""
    import dataclasses

    real = _load_split(corpus_dir).load_all()
    test = _load_split(corpus_dir, "test").load_all()
    codecs = load_codecs(codec_dir)
    spec = cfg.corpus.spec
    nc = spec.n_classes
    table = {}
    with Stage(f"sweep-{kind}", out, cfg, force, {"corpus": corpus_dir, "codecs": codec_dir}) as d:
        if kind == "scale":
            gens = {s: train_generator(real, codecs, spec, dataclasses.replace(cfg.generator, seed=s))[0]
                    for s in cfg.eval.seeds}
            top = max(cfg.eval.syn_multiples)
            pools = {}
            for s, g in gens.items():
                p, sc = auto_conditions(g, top * len(real), s)
                pools[s] = sample_triplets(g, codecs, p, sc, s)
            syn = {k: {s: pools[s][: k * len(real)] for s in pools} for k in cfg.eval.syn_multiples}
            table = scaling_sweep(real, test, nc, syn, cfg.eval.seeds, cfg.seg)
        elif kind == "ratio":
            from tripletgen.eval import ratio_sweep

            def make_syn(subset, ratio, seed):
                g, _ = train_generator(subset, codecs, spec, dataclasses.replace(
                    cfg.generator, seed=seed, K=min(cfg.generator.K, len(subset))))
                p, sc = auto_conditions(g, len(subset), seed)
                return sample_triplets(g, codecs, p, sc, seed)

            table = ratio_sweep(real, test, nc, cfg.eval.ratios, make_syn, cfg.eval.seeds, cfg.seg)
        elif kind in ("alpha", "lambda"):
            values = cfg.eval.alphas if kind == "alpha" else cfg.eval.lambdas
            for v in values:
                cells = []
                for s in cfg.eval.seeds:
                    gcfg = dataclasses.replace(cfg.generator, seed=s)
                    if kind == "alpha":
                        gcfg = dataclasses.replace(gcfg, sbca=dataclasses.replace(gcfg.sbca, alpha=v))
                    else:
                        gcfg = dataclasses.replace(gcfg, lam=v)
                    g, rec = train_generator(real, codecs, spec, gcfg)
                    p, sc = auto_conditions(g, len(real), s)
                    syn = sample_triplets(g, codecs, p, sc, s)
                    tail = rec[-max(1, len(rec) // 10):]
                    cells.append({"seed": s, "loss_calib": float(np.mean([r["loss_calib"] for r in tail])),
                                  "diversity": diversity_metrics(syn, g.groups, spec),
                                  "consistency": consistency_metrics(syn, spec)})
                table[v] = cells
        else:
            raise ConfigError(f"unknown sweep kind {kind!r}")
        write_json(d / "sweep.json", {"kind": kind, "table": table})
    return resolve_out(out)


def cmd_export_weights(cfg: RunConfig, corpus_dir, out_csv) -> Path:
    train = _load_split(corpus_dir).load_all()
    groups = scene_groups_for(train, cfg.generator.K, cfg.generator.seed)
    table = weight_table(train, groups, cfg.generator.sbca)
    table.sample_ids = [e.id for e in _load_split(corpus_dir).entries]
    return table.to_csv(resolve_out(out_csv))


# --------------------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripletgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML config (keys override the preset)")
        sp.add_argument("--preset", default="tiny", choices=["tiny", "default"])
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        if out:
            sp.add_argument("--out", required=True)
            sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("gen-corpus", help="write train/val/test procedural corpora")
    common(sp)
    sp.add_argument("--n-train", type=int)

    sp = sub.add_parser("train-codecs")
    common(sp)
    sp.add_argument("--corpus", required=True)

    sp = sub.add_parser("train-gen")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--codecs", required=True)
    sp.add_argument("--no-sbca", action="store_true")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--epsilon-floor", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("sample")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="train-gen output directory")
    sp.add_argument("--codecs", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--prompts", help="JSON-lines file of {prompt, scene_id}; default: auto")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("evaluate")
    common(sp)
    sp.add_argument("--real", required=True, help="corpus directory (uses its train/test splits)")
    sp.add_argument("--syn", required=True)

    sp = sub.add_parser("sweep")
    common(sp)
    sp.add_argument("--kind", required=True, choices=["ratio", "scale", "alpha", "lambda"])
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--codecs", required=True)

    sp = sub.add_parser("export-weights", help="write the SBCA weight table as CSV")
    common(sp, out=False)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    return p


def _overrides(args) -> list[str]:
    ov = list(args.set)
    if getattr(args, "n_train", None) is not None:
        ov.append(f"corpus.n_train={args.n_train}")
    if getattr(args, "no_sbca", False):
        ov.append("generator.sbca.enabled=false")
    for flag, key in (("lam", "generator.lam"), ("alpha", "generator.sbca.alpha"),
                      ("epsilon_floor", "generator.sbca.epsilon_floor"), ("steps", "generator.steps")):
        if getattr(args, flag, None) is not None:
            ov.append(f"{key}={getattr(args, flag)}")
    if args.command == "train-gen" and args.seed is not None:
        ov.append(f"generator.seed={args.seed}")
    return ov


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.time()
    try:
        cfg = load_config(args.config, args.preset, _overrides(args))
        if args.command == "gen-corpus":
            out = cmd_gen_corpus(cfg, args.out, args.force)
        elif args.command == "train-codecs":
            out = cmd_train_codecs(cfg, args.corpus, args.out, args.force)
        elif args.command == "train-gen":
            out = cmd_train_gen(cfg, args.corpus, args.codecs, args.out, args.force)
        elif args.command == "sample":
            out = cmd_sample(cfg, args.checkpoint, args.codecs, args.n, args.out, args.prompts, args.seed, args.force)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.real, args.syn, args.out, force=args.force)
        elif args.command == "sweep":
            out = cmd_sweep(cfg, args.kind, args.corpus, args.codecs, args.out, args.force)
        else:
            out = cmd_export_weights(cfg, args.corpus, args.out)
    except TripletGenError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"command": args.command, "output": str(out), "seconds": round(time.time() - t0, 2)}))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
