"""Command-line entry points: gen-data, train, eval, bench-pack and pca-map.

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    ProbeConfig, domain_adaptation_report, evaluate_probe, extract_frozen_embeddings, fit_linear_probe,
    fit_token_pca, modality_robustness_report, patch_pca_map, select, write_pgm,
)
from .packing import packed_attention, padded_attention, padding_overhead
from .substrate import Tensor
from .synthetic import (
    LABELS, FileDataset, FormatError, SyntheticDataset, labels_to_mask, make_sample, write_raw,
)
from .tokenizer import CT3D, XRAY2D
from .training import NumericAbort, load_params, make_batch, run_stage

log = logging.getLogger("univit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MODALITY_ARG = {"2d": XRAY2D, "3d": CT3D}


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for modality, n in ((XRAY2D, args.n_2d), (CT3D, args.n_3d)):
        n_test = int(round(args.test_frac * n))
        for i in range(n):
            s = make_sample(args.seed, modality, i, domain=args.domain)
            sid = len(rows)
            fname = f"{sid:06d}_{'2d' if modality == XRAY2D else '3d'}.mmv"
            write_raw(out / fname, s)
            rows.append({"id": sid, "file": fname, "modality": modality, "index": i,
                         "label_mask": labels_to_mask(s.labels), "labels": [int(b) for b in s.labels],
                         "split": "test" if i >= n - n_test else "train"})
    manifest = {"generator_seed": args.seed, "domain": args.domain, "n_2d": args.n_2d, "n_3d": args.n_3d,
                "test_frac": args.test_frac, "label_names": list(LABELS), "samples": rows}
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d samples to %s", len(rows), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_data(cfg: RunConfig, need_3d: bool):
    d = cfg.data
    if d.root is not None:
        d2 = FileDataset(d.root, XRAY2D, "train")
        d3 = FileDataset(d.root, CT3D, "train") if need_3d else None
    else:
        d2 = SyntheticDataset(d.seed, XRAY2D, d.n_2d, domain=d.domain, cache_size=d.n_2d)
        d3 = SyntheticDataset(d.seed, CT3D, d.n_3d, domain=d.domain, cache_size=d.n_3d) if need_3d else None
    return d2, d3


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    stage = cfg.stage_config(args.stage, args.init_from)
    if stage.init == "from_checkpoint" and not stage.init_from:
        raise ConfigError("stage2 requires --init-from")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.yaml", cfg.to_yaml())
    d2, d3 = _train_data(cfg, stage.batch_3d > 0)
    res = run_stage(stage, cfg.optim, cfg.encoder, cfg.views, cfg.objective, d2, d3, out_dir=out,
                    resume=args.resume, ckpt_every=args.ckpt_every, extra_meta={"run_config": cfg.to_dict()})
    last = res.metrics[-1] if res.metrics else {}
    log.info("%s done: %d steps, consumed %s, final total loss %s", stage.stage, res.step, res.consumed,
             last.get("loss_total"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _probe_sets(cfg: RunConfig, data_root):
    """(train, test) triples of frozen-embedding inputs as sample lists per modality."""
    if data_root is not None:
        return ([FileDataset(data_root, m, "train") for m in (XRAY2D, CT3D)],
                [FileDataset(data_root, m, "test") for m in (XRAY2D, CT3D)])
    e = cfg.eval
    train = [SyntheticDataset(e.data_seed, XRAY2D, e.n_train_2d), SyntheticDataset(e.data_seed, CT3D, e.n_train_3d)]
    test = [SyntheticDataset(e.data_seed, XRAY2D, e.n_test_2d, start=10_000),
            SyntheticDataset(e.data_seed, CT3D, e.n_test_3d, start=10_000)]
    return train, test


def _embed(params, cfg: RunConfig, datasets) -> tuple:
    parts = [extract_frozen_embeddings(params, cfg.encoder, d, cfg.views) for d in datasets if len(d)]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def _dataset_id(root) -> dict:
    if root is None:
        return {"source": "in-memory synthetic"}
    m = json.loads((Path(root) / "manifest.json").read_text())
    return {"source": Path(root).name, "generator_seed": m["generator_seed"], "domain": m["domain"]}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params, meta = load_params(args.checkpoint, cfg.encoder)
    e = cfg.eval
    probe_cfg = ProbeConfig(args.probe_modality or e.probe_modality, e.l2, e.max_iter)
    train_sets, test_sets = _probe_sets(cfg, args.data)
    train, test = _embed(params, cfg, train_sets), _embed(params, cfg, test_sets)
    metadata = {
        "checkpoint_stage": meta.get("stage", {}).get("stage"),
        "checkpoint_step": meta.get("step"),
        "dataset": _dataset_id(args.data),
        "seeds": {"run": cfg.seed, "bootstrap": cfg.seed},
        "probe": {"modality": probe_cfg.modality, "l2": e.l2, "max_iter": e.max_iter, "n_boot": e.n_boot},
        "run_config": cfg.to_dict(),
    }
    probe = fit_linear_probe(*select(*train, probe_cfg.modality), probe_cfg)
    report = {"metadata": metadata, "by_eval_modality": {}}
    for ev in ("2d", "3d"):
        Ete, Yte = select(*test, ev)
        if len(Ete):
            r = evaluate_probe(probe, Ete, Yte, e.n_boot, cfg.seed, {"eval_modality": ev})
            report["by_eval_modality"][ev] = r.to_dict()
            log.info("probe %s on %s: macro AUROC %.4f [%.4f, %.4f]", probe_cfg.modality, ev, r.macro, *r.macro_ci)
    if args.robustness:
        grid = modality_robustness_report(train, test, probe_cfg, e.n_boot, cfg.seed)
        report["robustness"] = {f: {ev: r.to_dict() for ev, r in row.items()} for f, row in grid.items()}
    if args.refit_data:
        tgt_train, tgt_test = _probe_sets(cfg, args.refit_data)
        da = domain_adaptation_report(train, _embed(params, cfg, tgt_train), _embed(params, cfg, tgt_test),
                                      probe_cfg, e.n_boot, cfg.seed)
        report["domain_adaptation"] = {k: r.to_dict() for k, r in da.items()}
        report["domain_adaptation"]["target_dataset"] = _dataset_id(args.refit_data)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-pack


def _bench_batch(cfg: RunConfig, args):
    if args.lengths_from:
        d2, d3 = FileDataset(args.lengths_from, XRAY2D), FileDataset(args.lengths_from, CT3D)
        b2, b3 = min(cfg.stage.batch_2d, len(d2)), min(cfg.stage.batch_3d, len(d3))
        return make_batch(0, d2 if b2 else None, d3 if b3 else None, b2, b3, cfg.seed, cfg.views,
                          cfg.encoder.alpha)
    d2 = SyntheticDataset(cfg.data.seed, XRAY2D, cfg.stage.batch_2d)
    d3 = SyntheticDataset(cfg.data.seed, CT3D, cfg.stage.batch_3d)
    return make_batch(0, d2, d3, cfg.stage.batch_2d, cfg.stage.batch_3d, cfg.seed, cfg.views, cfg.encoder.alpha)


def bench_pack(boundaries, n_heads: int, head_dim: int, seed: int = 0, repeats: int = 3) -> dict:
    """Verify packed == padded attention on random q/k/v, then time both paths."""
    b = np.asarray(boundaries)
    lengths = np.diff(b)
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((int(b[-1]), n_heads, head_dim)).astype(np.float32) for _ in range(3))
    packed = packed_attention(Tensor(q), Tensor(k), Tensor(v), b).data
    padded = padded_attention(q, k, v, b)
    max_err = float(np.abs(packed - padded).max())
    if not np.allclose(packed, padded, atol=1e-5, rtol=0):
        raise NumericAbort(0, f"packed and padded attention disagree (max abs diff {max_err:.3g})")

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    return {
        "n_samples": int(len(lengths)),
        "total_tokens": int(b[-1]),
        "max_length": int(lengths.max()),
        "padding_overhead": padding_overhead(lengths),
        "outputs_equal": True,
        "max_abs_diff": max_err,
        "seconds_packed": best(lambda: packed_attention(Tensor(q), Tensor(k), Tensor(v), b)),
        "seconds_padded": best(lambda: padded_attention(q, k, v, b)),
    }


def cmd_bench_pack(args) -> int:
    cfg = load_config(args.config)
    batch = _bench_batch(cfg, args)
    rep = bench_pack(batch.packed.boundaries, cfg.encoder.n_heads, cfg.encoder.head_dim, cfg.seed, args.repeats)
    rep["source"] = args.lengths_from or "synthetic-mix"
    log.info("padding overhead %.3f; packed %.3fs vs padded %.3fs", rep["padding_overhead"],
             rep["seconds_packed"], rep["seconds_padded"])
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pca-map


def _pca_samples(cfg: RunConfig, args):
    """(target sample, reference samples) for the PCA map."""
    if args.data:
        root = Path(args.data)
        manifest = json.loads((root / "manifest.json").read_text())
        rows = {r["id"]: r for r in manifest["samples"]}
        if args.sample_id not in rows:
            raise FileNotFoundError(f"sample id {args.sample_id} not in {root / 'manifest.json'}")
        modality = rows[args.sample_id]["modality"]
        ds = FileDataset(root, modality)
        target = next(ds[i] for i in range(len(ds)) if ds.rows[i]["id"] == args.sample_id)
        ref = [ds[i] for i in range(min(args.n_ref, len(ds)))]
        return target, ref
    modality = MODALITY_ARG[args.modality]
    target = make_sample(cfg.eval.data_seed, modality, args.sample_id)
    ref = [make_sample(cfg.eval.data_seed, modality, i) for i in range(args.n_ref)]
    return target, ref


def cmd_pca_map(args) -> int:
    cfg = load_config(args.config)
    params, meta = load_params(args.checkpoint, cfg.encoder)
    target, ref = _pca_samples(cfg, args)
    *_, ref_tokens = extract_frozen_embeddings(params, cfg.encoder, ref, cfg.views, return_tokens=True)
    pca = fit_token_pca(ref_tokens, 3)
    *_, tok = extract_frozen_embeddings(params, cfg.encoder, [target], cfg.views, return_tokens=True)
    feats, grid = tok[0]
    maps = patch_pca_map(feats, grid, pca)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for c in range(maps.shape[0]):
        for z in range(grid[0]):
            name = f"pc{c}.pgm" if target.modality == XRAY2D else f"pc{c}_z{z:02d}.pgm"
            write_pgm(out / name, maps[c, z])
            files.append(name)
    _write_json(out / "pca_map.json", {"sample_id": args.sample_id, "modality": target.modality,
                                       "grid_shape": list(grid), "files": files,
                                       "checkpoint_step": meta.get("step"), "run_config": cfg.to_dict()})
    log.info("wrote %d maps to %s", len(files), out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="univit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic MMV-RAW samples and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-2d", type=int, default=100)
    g.add_argument("--n-3d", type=int, default=30)
    g.add_argument("--test-frac", type=float, default=0.3)
    g.add_argument("--domain", choices=("default", "shifted"), default="default")
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", help="stage1 | stage2 | stage3 (overrides the config)")
    t.add_argument("--init-from", help="checkpoint to start stage 2 from")
    t.add_argument("--resume", help="checkpoint of an interrupted run of the same stage")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--ckpt-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear-probe a frozen checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="gen-data directory (train split fits, test split scores)")
    e.add_argument("--config")
    e.add_argument("--probe-modality", choices=("2d", "3d", "all"))
    e.add_argument("--robustness", action="store_true", help="also emit the 3x2 probe-filter grid")
    e.add_argument("--refit-data", help="shifted-domain gen-data directory for the probe refit")
    e.add_argument("--out", help="report path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-pack", help="padding overhead and packed vs padded attention timing")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--lengths-from", help="gen-data directory")
    src.add_argument("--synthetic-mix", action="store_true")
    b.add_argument("--config")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_pack)

    m = sub.add_parser("pca-map", help="per-patch PCA maps as PGM images")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--sample-id", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--data", help="gen-data directory (sample id from its manifest)")
    m.add_argument("--modality", choices=("2d", "3d"), default="2d", help="synthetic sample modality without --data")
    m.add_argument("--n-ref", type=int, default=16, help="reference samples for fitting the components")
    m.add_argument("--config")
    m.set_defaults(func=cmd_pca_map)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, FormatError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
