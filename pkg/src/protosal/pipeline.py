"""Pipeline stages. Each stage reads its inputs from and writes its outputs
to the run directory, so any stage can be rerun on its own."""
from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import protopnet as pp
from .classifier import predict_proba, train_classifier, write_log
from .config import RunConfig
from .data import generate_synthetic, load_cache, load_image_dir, save_cache
from .formats import HeatmapRecord, export_json, read_csv, read_heatmaps, write_csv, write_heatmaps
from .metrics import METRICS, binarize_gt, evaluate_pair, normalize_map
from .nn import load_checkpoint, save_checkpoint
from .saliency import GraphModel, explain
from .stats import ScoreTable, friedman_test, model_agreement, nemenyi_cd, performance_metrics, rank_methods

log = logging.getLogger(__name__)


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"{stage}: missing {path} (run `{producer}` first)")
        self.stage, self.path = stage, path


class Paths:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def dataset(self):
        return self.root / "data" / "dataset.bin"

    def cnn(self, arch):
        return self.root / "models" / f"cnn-{arch}.ckpt"

    def cnn_log(self, arch):
        return self.root / "models" / f"cnn-{arch}-log.csv"

    def ppnet(self, arch):
        return self.root / "models" / f"ppnet-{arch}.ckpt"

    def ppnet_log(self, arch):
        return self.root / "models" / f"ppnet-{arch}-log.csv"

    def bank(self, arch):
        return self.root / "models" / f"ppnet-{arch}-prototypes.bin"

    def saliency(self, arch):
        return self.root / "explain" / f"saliency-{arch}.hm"

    def attribution(self, arch):
        return self.root / "explain" / f"attribution-{arch}.hm"

    def selection(self, arch):
        return self.root / "explain" / f"selection-{arch}.csv"

    def metrics(self, arch):
        return self.root / "evaluate" / f"metrics-{arch}.csv"

    def missing(self, arch):
        return self.root / "evaluate" / f"missing-{arch}.csv"

    @property
    def ranks(self):
        return self.root / "rank" / "ranks.csv"

    @property
    def rank_stats(self):
        return self.root / "rank" / "friedman-nemenyi.csv"

    @property
    def pairs(self):
        return self.root / "rank" / "significant-pairs.csv"

    @property
    def report_dir(self):
        return self.root / "report"


def _require(stage: str, path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(stage, path, producer)
    return path


def _load_splits(stage, paths):
    return load_cache(_require(stage, paths.dataset, "gen-data"))[0]


# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> Path:
    paths = Paths(cfg.out)
    paths.dataset.parent.mkdir(parents=True, exist_ok=True)
    if cfg.data.source == "synthetic":
        splits = generate_synthetic(cfg.synthetic, n_jobs=cfg.run.jobs)
        digest = cfg.synthetic.digest()
    else:
        root = Path(cfg.data.image_dir)
        splits = {}
        for name, labels in (("train", cfg.data.train_labels), ("val", cfg.data.val_labels),
                             ("test", cfg.data.test_labels)):
            _require("gen-data", Path(labels), "a labels file")
            splits[name] = load_image_dir(root, labels, cfg.synthetic.size)
        digest = b"\0" * 32
    save_cache(paths.dataset, splits, cfg.run.seed, digest)
    log.info("wrote %s", paths.dataset)
    return paths.dataset


def cmd_train(cfg: RunConfig) -> list[Path]:
    paths = Paths(cfg.out)
    splits = _load_splits("train", paths)
    tr, va = splits["train"], splits["val"]
    out = []
    for arch in cfg.run.architectures:
        paths.cnn(arch).parent.mkdir(parents=True, exist_ok=True)
        graph, history = train_classifier(cfg.model_config(arch), tr.X, tr.y, va.X, va.y, cfg.train)
        save_checkpoint(paths.cnn(arch), graph, {"architecture": arch, "epochs": len(history)})
        write_log(paths.cnn_log(arch), history)
        out.append(paths.cnn(arch))
        log.info("trained cnn-%s in %d epochs", arch, len(history))
    return out


def cmd_train_ppnet(cfg: RunConfig) -> list[Path]:
    paths = Paths(cfg.out)
    splits = _load_splits("train-ppnet", paths)
    tr, va = splits["train"], splits["val"]
    out = []
    for arch in cfg.run.architectures:
        paths.ppnet(arch).parent.mkdir(parents=True, exist_ok=True)
        graph, protos, history = pp.train_protopnet(cfg.model_config(arch), cfg.prototypes, cfg.loss,
                                                    tr.X, tr.y, va.X, va.y, cfg.schedule, train_ids=tr.ids)
        save_checkpoint(paths.ppnet(arch), graph, {"architecture": arch})
        pp.save_prototype_bank(paths.bank(arch), protos)
        pp.write_ppnet_log(paths.ppnet_log(arch), history)
        out.append(paths.ppnet(arch))
        log.info("trained ppnet-%s", arch)
    return out


def explain_indices(test, settings) -> np.ndarray:
    idx = np.arange(len(test))
    if settings.image_class != "all":
        idx = idx[test.y == (1 if settings.image_class == "malignant" else 0)]
    return idx[:settings.n_images]


def _explain_chunk(cnn, ppnet, X, ids, methods, mcfg, n_protos):
    model = GraphModel(cnn, mcfg.batch_size)
    size = X.shape[1:3]
    sal, att, sel = [], [], []
    # one image per forward pass, so values never depend on the chunking
    for i, image_id in enumerate(ids):
        xi = X[i:i + 1]
        c = int(predict_proba(cnn, xi)[0].argmax())
        for m in methods:
            smap = explain(model, X[i], c, m, mcfg, image_id=image_id)
            sal.append(HeatmapRecord(image_id, m, c, smap.values, smap.is_absolute))
        pc = int(pp.predict_protopnet(ppnet, xi)[0][0].argmax())
        grid = pp.similarity_grids(ppnet, xi)[0]
        for slot, j in enumerate(pp.select_prototypes(ppnet, pc, n_protos), 1):
            att.append(HeatmapRecord(image_id, f"prototype:{int(j)}", pc,
                                     pp.attribution_map(grid[..., j], size), True))
            sel.append((image_id, c, pc, slot, int(j)))
    return sal, att, sel


def _chunks(n: int, jobs: int):
    # fixed partitioning: the merge order never depends on scheduling
    size = max(1, -(-n // (jobs * 4)))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def cmd_explain(cfg: RunConfig) -> list[Path]:
    paths = Paths(cfg.out)
    test = _load_splits("explain", paths)["test"]
    idx = explain_indices(test, cfg.explain)
    X, ids = test.X[idx], [test.ids[i] for i in idx]
    out = []
    for arch in cfg.run.architectures:
        cnn, _ = load_checkpoint(_require("explain", paths.cnn(arch), "train"))
        ppnet, _ = load_checkpoint(_require("explain", paths.ppnet(arch), "train-ppnet"))
        parts = Parallel(n_jobs=cfg.run.jobs)(
            delayed(_explain_chunk)(cnn, ppnet, X[a:b], ids[a:b], cfg.explain.methods, cfg.methods,
                                    cfg.explain.n_prototypes)
            for a, b in _chunks(len(ids), cfg.run.jobs))
        sal = [r for p in parts for r in p[0]]
        att = [r for p in parts for r in p[1]]
        sel = [r for p in parts for r in p[2]]
        paths.saliency(arch).parent.mkdir(parents=True, exist_ok=True)
        write_heatmaps(paths.saliency(arch), sal)
        write_heatmaps(paths.attribution(arch), att)
        write_csv(paths.selection(arch), ["image_id", "cnn_class", "ppnet_class", "slot", "prototype_id"], sel)
        if cfg.explain.json_export:
            export_json(paths.saliency(arch).with_suffix(".json"), sal)
            export_json(paths.attribution(arch).with_suffix(".json"), att)
        out += [paths.saliency(arch), paths.attribution(arch)]
    return out


def _evaluate_chunk(arch, pairs, mcfg, fixations_by_source):
    rows, missing = [], []
    for image_id, method, proto, sal, att in pairs:
        others = None
        if mcfg.sauc_mode == "crossimage":
            others = [f for img, f in fixations_by_source[proto] if img != image_id]
        for r in evaluate_pair(sal, att, mcfg, key=(arch, image_id, method, proto), other_fixations=others):
            if r.missing:
                missing.append((image_id, method, proto, r.metric_id, r.reason))
            else:
                rows.append((image_id, method, proto, r.metric_id, r.value, r.orientation))
    return rows, missing


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    paths = Paths(cfg.out)
    out = []
    for arch in cfg.run.architectures:
        sal = read_heatmaps(_require("evaluate", paths.saliency(arch), "explain"))
        att = read_heatmaps(_require("evaluate", paths.attribution(arch), "explain"))
        by_image = defaultdict(list)
        for r in att:
            by_image[r.image_id].append(r)
        pairs = [(s.image_id, s.source, a.source.split(":", 1)[1], s.values, a.values)
                 for s in sal for a in by_image[s.image_id]]
        fix = defaultdict(list)
        if cfg.metrics.sauc_mode == "crossimage":
            for a in att:
                fix[a.source.split(":", 1)[1]].append(
                    (a.image_id, binarize_gt(normalize_map(a.values), cfg.metrics.binarize_fraction)))
        parts = Parallel(n_jobs=cfg.run.jobs)(
            delayed(_evaluate_chunk)(arch, pairs[a:b], cfg.metrics, fix)
            for a, b in _chunks(len(pairs), cfg.run.jobs))
        paths.metrics(arch).parent.mkdir(parents=True, exist_ok=True)
        write_csv(paths.metrics(arch), ["image_id", "method_id", "prototype_id", "metric_id", "value", "orientation"],
                  [r for p in parts for r in p[0]])
        write_csv(paths.missing(arch), ["image_id", "method_id", "prototype_id", "metric_id", "reason"],
                  [r for p in parts for r in p[1]])
        out.append(paths.metrics(arch))
    return out


def score_tables(metric_rows: list[dict], selection_rows: list[dict], methods, n_slots: int) -> dict:
    """slot -> ScoreTable of mean metric values (methods x metrics) over
    images, where slot s is each image's s-th selected prototype."""
    slot_of = {(r["image_id"], r["prototype_id"]): int(r["slot"]) for r in selection_rows}
    sums = defaultdict(float)
    counts = defaultdict(int)
    for r in metric_rows:
        slot = slot_of.get((r["image_id"], r["prototype_id"]))
        if slot is None:
            continue
        key = (slot, r["method_id"], r["metric_id"])
        sums[key] += float(r["value"])
        counts[key] += 1
    tables = {}
    for slot in range(1, n_slots + 1):
        vals = np.full((len(methods), len(METRICS)), np.nan)
        for i, m in enumerate(methods):
            for j, metric in enumerate(METRICS):
                if counts[(slot, m, metric)]:
                    vals[i, j] = sums[(slot, m, metric)] / counts[(slot, m, metric)]
        tables[slot] = ScoreTable(list(methods), list(METRICS), vals)
    return tables


def cmd_rank(cfg: RunConfig) -> list[Path]:
    paths = Paths(cfg.out)
    methods = list(cfg.explain.methods)
    header, columns, stats_rows, pair_rows = ["method"], [], [], []
    for arch in cfg.run.architectures:
        metric_rows = read_csv(_require("rank", paths.metrics(arch), "evaluate"))
        selection = read_csv(_require("rank", paths.selection(arch), "explain"))
        tables = score_tables(metric_rows, selection, methods, cfg.explain.n_prototypes)
        for slot, table in tables.items():
            ranks = rank_methods(table)
            header.append(f"{arch}:prototype{slot}")
            columns.append(ranks.average_rank)
            fr = friedman_test(ranks)
            ne = nemenyi_cd(ranks.k, ranks.n, 0.05, ranks)
            stats_rows.append((arch, slot, ranks.n, fr.chi_square, fr.f_statistic, fr.df1, fr.df2, fr.p_value,
                               ne.q_critical, ne.cd, ";".join(map(str, ranks.dropped))))
            pair_rows += [(arch, slot, a, b, diff, ne.cd) for a, b, diff in ne.significant_pairs]
    paths.ranks.parent.mkdir(parents=True, exist_ok=True)
    grid = np.column_stack(columns)
    write_csv(paths.ranks, header, [[m, *grid[i]] for i, m in enumerate(methods)])
    write_csv(paths.rank_stats, ["architecture", "slot", "n_metrics", "chi_square", "f_statistic", "df1", "df2",
                                 "p_value", "q_critical", "cd", "dropped_metrics"], stats_rows)
    write_csv(paths.pairs, ["architecture", "slot", "method_a", "method_b", "rank_difference", "cd"], pair_rows)
    return [paths.ranks, paths.rank_stats, paths.pairs]


def cmd_report(cfg: RunConfig) -> Path:
    from .report import write_report

    paths = Paths(cfg.out)
    test = _load_splits("report", paths)["test"]
    perf, agree = [], []
    for arch in cfg.run.architectures:
        cnn, _ = load_checkpoint(_require("report", paths.cnn(arch), "train"))
        ppnet, _ = load_checkpoint(_require("report", paths.ppnet(arch), "train-ppnet"))
        p_cnn = predict_proba(cnn, test.X)[:, 1]
        p_pp = pp.predict_protopnet(ppnet, test.X)[0][:, 1]
        perf.append((arch, "CNN", performance_metrics(p_cnn, test.y)))
        perf.append((arch, "ProtoPNet", performance_metrics(p_pp, test.y)))
        agree.append((arch, model_agreement(p_cnn, p_pp)))
    for p in (paths.ranks, paths.rank_stats, paths.pairs):
        _require("report", p, "rank")
    return write_report(cfg, paths, test, perf, agree)
