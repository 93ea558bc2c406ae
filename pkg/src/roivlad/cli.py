"""Command-line pipeline: synth, train, encode, query, eval, bench.

Results go to stdout, diagnostics to stderr; any validation failure exits
nonzero.  Every command is a deterministic function of its inputs and the
configured seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pq, search, voronoi
from .clustering import kmeans, load_vocabulary, save_vocabulary, spatial_hkmeans
from .config import PipelineConfig, apply_overrides, load_config
from .encoder import (
    load_pca,
    pca_train,
    project,
    save_pca,
    ssr_normalize,
    vlad_encode,
    whiten_normalize,
)
from .features import (
    FeatureFileError,
    SyntheticDatasetSpec,
    crop_features,
    load_dataset,
    load_features,
    load_ground_truth,
    load_manifest,
    load_queries,
    save_features,
    save_ground_truth,
    save_manifest,
    save_queries,
    synth_generate,
)


def _check_overlap(cfg: PipelineConfig) -> None:
    if not cfg.train_manifest or not cfg.test_manifest:
        return
    if not Path(cfg.test_manifest).exists():
        return
    train = {p.resolve() for _, p in load_manifest(cfg.train_manifest)}
    test = {p.resolve() for _, p in load_manifest(cfg.test_manifest)}
    shared = sorted(train & test)
    if shared:
        msg = f"train/test manifests share {len(shared)} feature files (e.g. {shared[0]})"
        if not cfg.allow_overlap:
            raise ValueError(msg + "; pass --allow-overlap to proceed")
        print(f"warning: {msg}", file=sys.stderr)


def _encode_whole(fs, vocab, pca, ssr: bool) -> np.ndarray:
    raw = vlad_encode(fs, vocab)
    cell = ssr_normalize(raw) if ssr else raw
    return project(cell, pca)


def cmd_train_vocab(cfg: PipelineConfig) -> int:
    _check_overlap(cfg)
    sets = load_dataset(cfg.train_manifest)
    pool = np.vstack([fs.descriptors for fs in sets if fs.n])
    vocab = kmeans(pool, cfg.vocab_k, seed=cfg.seed)
    save_vocabulary(vocab, cfg.vocab_path)
    print(f"vocab\tk={vocab.k}\tdim={vocab.dim}\t{cfg.vocab_path}")
    return 0


def cmd_train_pca(cfg: PipelineConfig) -> int:
    _check_overlap(cfg)
    sets = load_dataset(cfg.train_manifest)
    vocab = load_vocabulary(cfg.vocab_path)
    rows = np.stack([_raw_whole(fs, vocab, cfg.ssr) for fs in sets])
    model = pca_train(rows, cfg.pca_dim)
    save_pca(model, cfg.pca_path)
    print(f"pca\tu={model.input_dim}\td={model.dim}\t{cfg.pca_path}")
    return 0


def _raw_whole(fs, vocab, ssr: bool) -> np.ndarray:
    raw = vlad_encode(fs, vocab)
    return ssr_normalize(raw) if ssr else raw


def _build_tree_indexes(sets, vocab, pca, cfg: PipelineConfig):
    rng = np.random.default_rng(cfg.seed)
    out = []
    for fs in sets:
        tree = spatial_hkmeans(fs, cfg.levels, cfg.branching, seed=rng)
        out.append(voronoi.ve_encode(fs, vocab, tree, pca, ssr=cfg.ssr))
    return out


def cmd_train_pq(cfg: PipelineConfig) -> int:
    _check_overlap(cfg)
    sets = load_dataset(cfg.train_manifest)
    vocab = load_vocabulary(cfg.vocab_path)
    pca = load_pca(cfg.pca_path)
    m = pca.dim if cfg.sign_limit else cfg.pq_m
    cells = []
    for index in _build_tree_indexes(sets, vocab, pca, cfg):
        for slot in np.flatnonzero(index.scoreable()):
            cells.append(
                whiten_normalize(index.descriptors[slot].astype(np.float64), pca, m)
            )
    model = pq.pq_train(np.stack(cells), m, cfg.pq_zp, seed=cfg.seed)
    pq.save_pq(model, cfg.pq_path)
    print(f"pq\tm={model.m}\tzp={model.zp}\t{cfg.pq_path}")
    return 0


def cmd_encode(cfg: PipelineConfig) -> int:
    sets = load_dataset(cfg.test_manifest)
    vocab = load_vocabulary(cfg.vocab_path)
    pca = load_pca(cfg.pca_path)
    if cfg.grid:
        if cfg.quantized or cfg.level_projection or cfg.sign_limit:
            raise ValueError("grid indexes support only unquantized full storage")
        indexes = [voronoi.multi_encode(fs, vocab, pca, cfg.levels, ssr=cfg.ssr) for fs in sets]
        voronoi.save_index(indexes, cfg.index_path)
        print(f"index\tgrid\timages={len(indexes)}\t{cfg.index_path}")
        return 0
    rng = np.random.default_rng(cfg.seed)
    indexes = []
    for fs in sets:
        tree = spatial_hkmeans(fs, cfg.levels, cfg.branching, seed=rng)
        if cfg.level_projection:
            indexes.append(voronoi.leaf_projections(fs, vocab, tree, pca, ssr=cfg.ssr))
        else:
            indexes.append(voronoi.ve_encode(fs, vocab, tree, pca, ssr=cfg.ssr))
    if cfg.level_projection:
        if cfg.quantized or cfg.sign_limit:
            raise ValueError("level-projection storage is unquantized")
        voronoi.save_index(indexes, cfg.index_path)
        print(f"index\tleaf\timages={len(indexes)}\t{cfg.index_path}")
        return 0
    if cfg.sign_limit:
        signed = []
        for idx in indexes:
            bits = np.zeros((idx.shape.slots, (pca.dim + 7) // 8), dtype=np.uint8)
            for slot in np.flatnonzero(idx.scoreable()):
                wd = whiten_normalize(idx.descriptors[slot].astype(np.float64), pca, pca.dim)
                bits[slot] = pq.sign_binarize(wd).packed
            signed.append(
                voronoi.SignVoronoiIndex(
                    idx.image_id, idx.shape, idx.counts, bits, pca.dim, idx.empty
                )
            )
        voronoi.save_index(signed, cfg.index_path, pq_m=pca.dim, pq_zp=2)
        print(f"index\tsign\timages={len(signed)}\t{cfg.index_path}")
        return 0
    if cfg.quantized:
        model = pq.load_pq(cfg.pq_path)
        quantized = []
        for idx in indexes:
            codes = np.zeros((idx.shape.slots, model.m), dtype=np.uint8)
            for slot in np.flatnonzero(idx.scoreable()):
                codes[slot] = pq.wnpq_encode(
                    idx.descriptors[slot].astype(np.float64), pca, model
                )
            quantized.append(
                voronoi.QuantizedVoronoiIndex(
                    idx.image_id, idx.shape, idx.counts, codes, idx.empty
                )
            )
        voronoi.save_index(quantized, cfg.index_path, pq_m=model.m, pq_zp=model.zp)
        print(f"index\tpq\timages={len(quantized)}\t{cfg.index_path}")
        return 0
    voronoi.save_index(indexes, cfg.index_path)
    print(f"index\tfull\timages={len(indexes)}\t{cfg.index_path}")
    return 0


def _load_search_indexes(cfg: PipelineConfig):
    indexes, header = voronoi.load_index(cfg.index_path)
    if header["codes"] == voronoi.CODES_LEAF:
        pca = load_pca(cfg.pca_path)
        indexes = [voronoi.level_project(store, pca) for store in indexes]
        header = dict(header, codes=voronoi.CODES_NONE)
    return indexes, header


def _prepare_query(cfg: PipelineConfig, query_path, roi, vocab, pca, header):
    fs = load_features(query_path)
    if roi is not None:
        fs = crop_features(fs, roi)
    if cfg.min_keypoints and fs.n < cfg.min_keypoints:
        print(
            f"warning: query {fs.image_id!r} has {fs.n} keypoints "
            f"(configured minimum {cfg.min_keypoints})",
            file=sys.stderr,
        )
    vec = _encode_whole(fs, vocab, pca, cfg.ssr)
    model = None
    if header["codes"] == voronoi.CODES_PQ:
        model = pq.load_pq(cfg.pq_path)
        wd = whiten_normalize(vec, pca, model.m)
        q = search.QueryDescriptor(point_count=fs.n, codes=pq.quantize(wd, model))
    elif header["codes"] == voronoi.CODES_SIGN:
        wd = whiten_normalize(vec, pca, pca.dim)
        q = search.QueryDescriptor(point_count=fs.n, sign_bits=pq.sign_binarize(wd))
    else:
        q = search.QueryDescriptor(point_count=fs.n, vector=vec)
    return fs, q, model


def _run_query(cfg: PipelineConfig, fs, q, model, indexes, header):
    method = cfg.method
    if cfg.subquery:
        method = "subquery"
    if method == "subquery":
        vocab = load_vocabulary(cfg.vocab_path)
        pca = load_pca(cfg.pca_path)
        encode_query = None
        if header["codes"] == voronoi.CODES_PQ:
            encode_query = lambda vec, count: search.QueryDescriptor(
                point_count=count,
                codes=pq.quantize(whiten_normalize(vec, pca, model.m), model),
            )
        elif header["codes"] == voronoi.CODES_SIGN:
            encode_query = lambda vec, count: search.QueryDescriptor(
                point_count=count,
                sign_bits=pq.sign_binarize(whiten_normalize(vec, pca, pca.dim)),
            )
        return search.subquery_search(
            fs,
            indexes,
            vocab,
            pca,
            levels=3,
            branching=2,
            seed=cfg.seed,
            ssr=cfg.ssr,
            encode_query=encode_query,
            model=model,
        )
    return search.rank_dataset(q, indexes, method=method, model=model)


def cmd_query(cfg: PipelineConfig, query_path: str, roi) -> int:
    vocab = load_vocabulary(cfg.vocab_path)
    pca = load_pca(cfg.pca_path)
    indexes, header = _load_search_indexes(cfg)
    fs, q, model = _prepare_query(cfg, query_path, roi, vocab, pca, header)
    ranked = _run_query(cfg, fs, q, model, indexes, header)
    for rank, entry in enumerate(ranked.entries, start=1):
        print(f"{rank}\t{entry.image_id}\t{entry.score:.6f}")
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    vocab = load_vocabulary(cfg.vocab_path)
    pca = load_pca(cfg.pca_path)
    indexes, header = _load_search_indexes(cfg)
    good, junk = load_ground_truth(cfg.ground_truth)
    queries = load_queries(cfg.queries)
    by_id = {iid: p for iid, p in load_manifest(cfg.test_manifest)}
    rankings = {}
    records = []
    ranked_list = []
    for rq in queries:
        if rq.image_id not in by_id:
            raise ValueError(f"query {rq.query_id}: source image {rq.image_id} not in manifest")
        fs, q, model = _prepare_query(cfg, by_id[rq.image_id], rq.rect, vocab, pca, header)
        ranked = _run_query(cfg, fs, q, model, indexes, header)
        # the query's own source image belongs to neither ground-truth set
        ranked.entries = [e for e in ranked.entries if e.image_id != rq.image_id]
        rankings[rq.query_id] = ranked
        ranked_list.append(ranked)
        records.append(
            evaluation.QueryRecord(
                rq.query_id, frozenset(good.get(rq.query_id, ())), frozenset(junk.get(rq.query_id, ()))
            )
        )
    map_score, per_query = evaluation.mean_average_precision(rankings, records)
    if header["codes"] == voronoi.CODES_PQ:
        report = evaluation.complexity_accounting(
            ranked_list, header["dim"], quantized=True, m=header["pq_m"] or 1
        )
    elif header["codes"] == voronoi.CODES_SIGN:
        # the Hamming path reads no tables; count one evaluation per cell
        report = evaluation.complexity_accounting(ranked_list, evaluation.BASELINE_DIM)
    else:
        report = evaluation.complexity_accounting(ranked_list, header["dim"])
    for qid in sorted(per_query):
        print(f"query\t{qid}\tap\t{per_query[qid]:.6f}")
    print(f"mAP\t{map_score:.6f}")
    print(f"complexity\t{report.macs_or_reads:.2f}\tnormalized\t{report.normalized:.4f}")
    return 0


def cmd_synth(cfg: PipelineConfig) -> int:
    spec = SyntheticDatasetSpec(
        dataset_size=cfg.synth_dataset_size,
        planted_roi_count=cfg.synth_roi_count,
        images_per_object=cfg.synth_images_per_object,
        roi_points_range=cfg.synth_roi_points,
        background_points_range=cfg.synth_background_points,
        descriptor_dim=cfg.synth_descriptor_dim,
        cluster_spread=cfg.synth_cluster_spread,
        signature_noise=cfg.synth_signature_noise,
        image_width=cfg.synth_image_width,
        image_height=cfg.synth_image_height,
        seed=cfg.seed,
    )
    sets, gt = synth_generate(spec)
    out = Path(cfg.synth_out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for fs in sets:
        rel = f"features/{fs.image_id}.vfea"
        save_features(fs, out / rel)
        entries.append((fs.image_id, rel))
    save_manifest(entries, out / "manifest.tsv")
    save_ground_truth(gt, out / "groundtruth.tsv")
    save_queries(gt.queries, out / "queries.tsv")
    print(f"synth\timages={len(sets)}\tqueries={len(gt.queries)}\t{out}")
    return 0


def cmd_bench(cfg: PipelineConfig, m_values: list[int], out_path: str | None) -> int:
    vocab = load_vocabulary(cfg.vocab_path)
    pca = load_pca(cfg.pca_path)
    train_sets = load_dataset(cfg.train_manifest)
    train_cells = []
    rng = np.random.default_rng(cfg.seed)
    for fs in train_sets:
        tree = spatial_hkmeans(fs, cfg.levels, cfg.branching, seed=rng)
        index = voronoi.ve_encode(fs, vocab, tree, pca, ssr=cfg.ssr)
        for slot in np.flatnonzero(index.scoreable()):
            train_cells.append(index.descriptors[slot].astype(np.float64))
    indexes, header = voronoi.load_index(cfg.index_path)
    if header["codes"] != voronoi.CODES_NONE or header["kind"] != voronoi.KIND_TREE:
        raise ValueError("bench needs an unquantized tree index")
    good, junk = load_ground_truth(cfg.ground_truth)
    roi_queries = load_queries(cfg.queries)
    by_id = {iid: p for iid, p in load_manifest(cfg.test_manifest)}
    queries = []
    records = []
    for rq in roi_queries:
        fs = crop_features(load_features(by_id[rq.image_id]), rq.rect)
        queries.append((rq.query_id, _encode_whole(fs, vocab, pca, cfg.ssr), fs.n))
        # folding the source image into junk removes it from the ranking
        records.append(
            evaluation.QueryRecord(
                rq.query_id,
                frozenset(good.get(rq.query_id, ())),
                frozenset(junk.get(rq.query_id, ())) | {rq.image_id},
            )
        )
    rows = evaluation.bench_m_sweep(
        pca,
        np.stack(train_cells),
        indexes,
        queries,
        records,
        m_values,
        cfg.pq_zp,
        seed=cfg.seed,
    )
    text = evaluation.write_bench_csv(rows, out_path)
    if out_path is None:
        sys.stdout.write(text)
    else:
        print(f"bench\trows={len(rows)}\t{out_path}")
    return 0


def _parse_roi(text: str | None):
    if text is None:
        return None
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4 or parts[2] <= 0 or parts[3] <= 0:
        raise ValueError("--roi expects X,Y,W,H with positive size")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roivlad",
        description="Region-of-interest retrieval over Voronoi cell encodings",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = [
        "train-vocab",
        "train-pca",
        "train-pq",
        "encode",
        "query",
        "eval",
        "synth",
        "bench",
    ]
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quantized", action="store_true", default=None)
        p.add_argument("--method", choices=["global", "fast", "subquery"], default=None)
        p.add_argument("--roi", default=None, help="X,Y,W,H keypoint filter for queries")
        p.add_argument("--allow-overlap", action="store_true", default=None)
        if name == "query":
            p.add_argument("--query", required=True, help="query feature file")
        if name == "bench":
            p.add_argument(
                "--m-values", default="8,16,32,64", help="comma-separated block counts"
            )
            p.add_argument("--out", default=None, help="CSV path (default stdout)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        apply_overrides(
            cfg,
            {
                "seed": args.seed,
                "quantized": args.quantized,
                "method": args.method,
                "allow_overlap": args.allow_overlap,
            },
        )
        cfg.validate()
        roi = _parse_roi(args.roi)
        if args.command == "train-vocab":
            return cmd_train_vocab(cfg)
        if args.command == "train-pca":
            return cmd_train_pca(cfg)
        if args.command == "train-pq":
            return cmd_train_pq(cfg)
        if args.command == "encode":
            return cmd_encode(cfg)
        if args.command == "query":
            return cmd_query(cfg, args.query, roi)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "bench":
            m_values = [int(v) for v in args.m_values.split(",")]
            return cmd_bench(cfg, m_values, args.out)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, OSError, FeatureFileError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
