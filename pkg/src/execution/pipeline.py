# This file is part of the UrbanVerse tool

# src/execution/pipeline.py
"""
Stage orchestrator behind the CLI.

Every stage reads the artifacts of the stages before it from the output
directory and writes its own outputs plus the exact RunConfig used:

    grid/<city>/        cells.csv edges.csv grid.json regions.json targets.csv
    walks/<city>/       walks.jsonl
    pretrain/           encoder.json encoder.bin history.csv
    embed/<city>/       cell_embeddings.csv
    aggregate/<city>/   embeddings.csv
    train/              head.json head.bin history.csv split.json
    predict/<city>/     predictions.csv priors.csv
    eval/<city>/        metrics.json metrics.csv [density.csv density.svg]
    ablate/             ablation.csv
    finetune/           head.json head.bin history.csv
    sweep/              sweep.csv
"""
import dataclasses
import logging
import os

import numpy as np
import pandas as pd
import torch

from common.errors import ConfigError, DataError, MissingArtifactError
from data_processing.city_io import (
    load_city, read_embeddings, read_predictions, save_city, write_embeddings, write_json,
    write_predictions, write_priors,
)
from data_processing.synthetic_city import SyntheticCitySpec, generate_synthetic
from data_processing.walks import CellGraph, dump_walks_jsonl, sample_corpus_walks
from evaluation.eval_metrics import kde, metrics, quantile_coverage
from execution.run_config import ABLATIONS, RunConfig
from urban_models.cell_encoder import (
    CellEmbeddingSet, CellEncoder, EncoderConfig, extract_embeddings, load_encoder, pretrain, save_encoder,
)
from urban_models.cross_task import CrossTaskDiffusion, DiffusionConfig, PointBaseline, PredictionSet, load_head
from urban_models.numerics import Rng, count_parameters, set_precision
from urban_models.region_agg import aggregate_all
from visualization.density_plot import plot_density

logger = logging.getLogger(__name__)

STAGES = ("synth", "grid", "walks", "pretrain", "embed", "aggregate", "train", "predict", "eval", "ablate",
          "finetune", "sweep")

# sweep parameters by the earliest stage they invalidate
PREDICT_PARAMS = ("sr", "point_estimate")
HEAD_PARAMS = ("K", "T", "beta_1", "beta_T", "d_dn", "lr_diff", "weight_decay", "diff_epochs", "diff_batch",
               "prior", "retrieval", "conditioning", "head")
# fixed for the whole run: the cell grid and the process-wide setup
FIXED_PARAMS = {
    "edge_m": "it changes the cell grid, rerun `grid` into its own --out-dir per value",
    "protocol": "it changes the city roles, start a separate run per protocol",
    "precision": "it is process-wide, start a separate run per precision",
}


def region_key(city, region_id):
    return f"{city}/{region_id}"


def parse_names(text):
    return [s.strip() for s in str(text).split(",") if s.strip()] if text else []


class UrbanPipeline:
    """Main pipeline class: cross-city embedding learning followed by the cross-task regression head"""

    def __init__(self, config=None, out_dir="./output", city_dirs=None, train_cities=None, test_city=None,
                 external_embeddings=None, grid_root=None):
        self.config = config or RunConfig()
        self.out_dir = out_dir
        self.grid_root = grid_root or os.path.join(out_dir, "grid")
        self.city_dirs = {os.path.basename(os.path.normpath(d)): d for d in (city_dirs or [])}
        self.train_cities = list(train_cities or [])
        self.test_city = test_city
        self.external_embeddings = dict(external_embeddings or {})
        self._cities = {}

    # Setup

    def set_defaults(self):
        """Resolve the seed, validate the config and derive missing city roles"""
        self.config.resolve_seed()
        self.config.validate()
        if self.config.protocol == "same-city":
            if self.test_city is None and len(self.train_cities) == 1:
                self.test_city = self.train_cities[0]
            if self.test_city is not None:
                self.train_cities = [self.test_city]
        elif self.test_city is not None and self.test_city in self.train_cities:
            raise ConfigError(f"cross-city protocol: test city {self.test_city} is also a training city "
                              "(use --protocol same-city for a region split)")
        torch.set_num_threads(self.config.threads)
        set_precision(self.config.precision)
        logging.info(f"Run configuration: {self.config}")
        return self

    def stage_dir(self, stage, city=None):
        path = os.path.join(self.out_dir, stage, city) if city else os.path.join(self.out_dir, stage)
        os.makedirs(path, exist_ok=True)
        return path

    def snapshot(self, directory):
        """Write the exact RunConfig next to a stage's outputs"""
        return self.config.to_yaml(os.path.join(directory, "config.yaml"))

    def all_cities(self):
        names = list(self.train_cities)
        if self.test_city is not None and self.test_city not in names:
            names.append(self.test_city)
        if not names:
            names = sorted(self.city_dirs)
        if not names and os.path.isdir(self.grid_root):
            names = sorted(os.listdir(self.grid_root))
        if not names:
            raise ConfigError("no cities given, pass --cities and/or --train-cities/--test-city")
        return names

    def _require_train(self):
        if not self.train_cities:
            raise ConfigError("no training cities given, pass --train-cities")

    def _require_test(self):
        if self.test_city is None:
            raise ConfigError("no test city given, pass --test-city")

    def load_city(self, name):
        """Gridded city from the grid stage"""
        if name not in self._cities:
            path = os.path.join(self.grid_root, name)
            if not os.path.exists(os.path.join(path, "cells.csv")):
                raise MissingArtifactError(path, "grid")
            self._cities[name] = load_city(path, name=name, edge_m=self.config.edge_m)
        return self._cities[name]

    # Stage: synth

    def run_synth(self, spec_path, seeds, names=None, out_root="./data/synthetic"):
        """Write one synthetic city per seed; returns their directories"""
        spec = SyntheticCitySpec.from_yaml(spec_path)
        names = names or [f"{spec.name}{chr(ord('A') + i)}" if len(seeds) > 1 else spec.name
                          for i in range(len(seeds))]
        if len(names) != len(seeds):
            raise ConfigError(f"{len(names)} city names for {len(seeds)} seeds")
        dirs = []
        for name, seed in zip(names, seeds):
            city_dir = os.path.join(out_root, name)
            generate_synthetic(dataclasses.replace(spec, name=name), seed, out_dir=city_dir)
            self.snapshot(city_dir)
            dirs.append(city_dir)
        return dirs

    # Stage: grid

    def run_grid(self):
        """Validate each input city, grid raw POIs when needed, and store the normalised city"""
        if not self.city_dirs:
            raise ConfigError("grid needs --cities with at least one city directory")
        for name, city_dir in self.city_dirs.items():
            city = load_city(city_dir, name=name, edge_m=self.config.edge_m)
            out = self.stage_dir("grid", name)
            save_city(city, out)
            self.snapshot(out)
            self._cities[name] = city
        return list(self.city_dirs)

    # Stage: walks

    def run_walks(self):
        """Epoch-0 walk corpus per city, for inspection and frozen-walk runs"""
        cfg = self.config
        for name in self.all_cities():
            graph = CellGraph(self.load_city(name).cells, name=name)
            walks = sample_corpus_walks(graph, cfg.k, cfg.l, cfg.p, cfg.q, cfg.seed, epoch=0, threads=cfg.threads)
            out = self.stage_dir("walks", name)
            dump_walks_jsonl(walks, os.path.join(out, "walks.jsonl"))
            self.snapshot(out)

    # Stage: pretrain

    def run_pretrain(self):
        """Masked-reconstruction pretraining on the training cities only"""
        self._require_train()
        cfg = self.config
        corpus = []
        for name in self.train_cities:
            city = self.load_city(name)
            corpus.append((CellGraph(city.cells, name=name), city.cells.poi_matrix()))
        model = CellEncoder(EncoderConfig.from_run_config(cfg), seed=cfg.seed)
        logging.info(f"Pretraining cell encoder ({count_parameters(model)} parameters) on {self.train_cities}")
        history = pretrain(model, corpus, seed=cfg.seed)
        out = self.stage_dir("pretrain")
        save_encoder(model, os.path.join(out, "encoder"), seed=cfg.seed, history=history)
        pd.DataFrame(history, columns=["epoch", "loss"]).to_csv(os.path.join(out, "history.csv"), index=False)
        self.snapshot(out)
        return model

    # Stage: embed

    def run_embed(self):
        cfg = self.config
        model = load_encoder(os.path.join(self.out_dir, "pretrain", "encoder"))
        for name in self.all_cities():
            city = self.load_city(name)
            embeddings = extract_embeddings(model, CellGraph(city.cells, name=name), city.cells.poi_matrix(),
                                            seed=cfg.seed)
            out = self.stage_dir("embed", name)
            write_embeddings(os.path.join(out, "cell_embeddings.csv"), range(len(embeddings)), embeddings.vectors,
                             id_column="cell_id", prefix="z")
            self.snapshot(out)

    def cell_embeddings(self, name):
        path = os.path.join(self.out_dir, "embed", name, "cell_embeddings.csv")
        ids, matrix = read_embeddings(path, id_column="cell_id", producer="embed")
        if list(ids) != list(range(len(self.load_city(name).cells))):
            raise DataError("cell embeddings do not match the city's cells", path=path)
        return CellEmbeddingSet(city=name, vectors=matrix)

    # Stage: aggregate

    def run_aggregate(self):
        for name in self.all_cities():
            city = self.load_city(name)
            regions = aggregate_all(city.regions, city.cells, self.cell_embeddings(name))
            out = self.stage_dir("aggregate", name)
            write_embeddings(os.path.join(out, "embeddings.csv"), [r.region_id for r in regions],
                             np.stack([r.h for r in regions]))
            self.snapshot(out)

    def region_embeddings(self, name):
        """{region_id: h} from the aggregate stage, or from an external embeddings.csv"""
        path = self.external_embeddings.get(name, os.path.join(self.out_dir, "aggregate", name, "embeddings.csv"))
        ids, matrix = read_embeddings(path, producer="aggregate")
        try:
            ids = [int(i) for i in ids]
        except ValueError:
            raise DataError("region ids must be integers", path=path) from None
        return dict(zip(ids, matrix))

    # Splits

    def split(self):
        """
        (train, test) as lists of (city, [region ids]). Cross-city keeps whole
        cities apart; same-city draws a seeded region split of one city.
        """
        if self.config.protocol == "same-city":
            self._require_test()
            city = self.load_city(self.test_city)
            ids = np.asarray(city.region_ids)
            order = Rng(self.config.seed, ("split", self.test_city)).permutation(len(ids))
            n_test = min(len(ids) - 1, max(1, int(round(self.config.test_fraction * len(ids)))))
            if n_test < 1:
                raise DataError(f"city {self.test_city} has too few regions for a same-city split")
            test = sorted(ids[order[:n_test]].tolist())
            train = sorted(ids[order[n_test:]].tolist())
            return [(self.test_city, train)], [(self.test_city, test)]
        self._require_train()
        train = [(name, self.load_city(name).region_ids) for name in self.train_cities]
        if self.test_city is None:
            return train, []
        return train, [(self.test_city, self.load_city(self.test_city).region_ids)]

    def training_set(self, tasks=None):
        """(region keys, H, raw targets Y with NaN, task ids) over the training split"""
        train, _ = self.split()
        task_ids = tasks or sorted({t for name, _ in train for t in self.load_city(name).task_ids()})
        if not task_ids:
            raise DataError(f"training cities {[n for n, _ in train]} have no targets")
        keys, H, Y = [], [], []
        for name, ids in train:
            city = self.load_city(name)
            emb = self.region_embeddings(name)
            targets = city.target_matrix(task_ids)
            row = {rid: i for i, rid in enumerate(city.region_ids)}
            for rid in ids:
                if rid not in emb:
                    raise DataError(f"city {name}: no embedding for region {rid}")
                keys.append(region_key(name, rid))
                H.append(emb[rid])
                Y.append(targets[row[rid]])
        return keys, np.stack(H), np.stack(Y), list(task_ids)

    def test_set(self):
        """(city, region ids, H) of the prediction split"""
        self._require_test()
        _, test = self.split()
        name, ids = test[0]
        emb = self.region_embeddings(name)
        missing = [rid for rid in ids if rid not in emb]
        if missing:
            raise DataError(f"city {name}: no embedding for regions {missing[:5]}")
        return name, ids, np.stack([emb[rid] for rid in ids])

    # Stage: train

    def build_head(self, config=None):
        config = config or self.config
        head_config = DiffusionConfig.from_run_config(config)
        if config.head == "point":
            return PointBaseline(head_config, seed=config.seed)
        return CrossTaskDiffusion(head_config, seed=config.seed)

    def run_train(self, tasks=None):
        keys, H, Y, task_ids = self.training_set(tasks)
        head = self.build_head().fit(keys, H, Y, task_ids)
        out = self.stage_dir("train")
        head.save(os.path.join(out, "head"))
        pd.DataFrame(head.history, columns=["epoch", "loss"]).to_csv(os.path.join(out, "history.csv"), index=False)
        train, test = self.split()
        write_json(os.path.join(out, "split.json"), {"protocol": self.config.protocol,
                                                     "train": dict(train), "test": dict(test)})
        self.snapshot(out)
        return head

    def load_head(self, source="train"):
        return load_head(os.path.join(self.out_dir, source, "head"))

    # Stage: predict

    def predict_with(self, head, sr=None):
        name, ids, H = self.test_set()
        if isinstance(head, PointBaseline):
            return name, head.predict(ids, H), []
        return (name, *head.predict(ids, H, sr=sr or self.config.sr, return_priors=True))

    def run_predict(self, source="train"):
        head = self.load_head(source)
        name, predictions, priors = self.predict_with(head)
        out = self.stage_dir("predict", name)
        write_predictions(os.path.join(out, "predictions.csv"), predictions)
        if priors:
            write_priors(os.path.join(out, "priors.csv"), priors)
        self.snapshot(out)
        return predictions

    # Stage: eval

    def score(self, predictions, city_name=None):
        """Per-task MetricReports plus coverage of the sample quantile band"""
        city = self.load_city(city_name or self.test_city)
        truth = city.targets.set_index(["region_id", "task_id"])["value"]
        reports = []
        by_task = {}
        for p in predictions:
            by_task.setdefault(str(p.task_id), []).append(p)
        for task, preds in sorted(by_task.items()):
            pairs = [(p, truth.get((int(p.region_id), task))) for p in preds]
            pairs = [(p, y) for p, y in pairs if y is not None and np.isfinite(y)]
            if len(pairs) < 2:
                logger.warning(f"Task {task}: fewer than 2 test regions with a target, skipped")
                continue
            y = np.array([t for _, t in pairs])
            report = metrics(np.array([p.point for p, _ in pairs]), y, task_id=task)
            samples = [p.samples for p, _ in pairs]
            coverage = quantile_coverage(np.stack(samples), y) if len(samples[0]) > 1 else float("nan")
            reports.append((report, coverage))
            logging.info(f"{report}, band coverage {coverage:.3f}")
        return reports

    def run_eval(self, density_region=None, density_task=None, density_samples=100, source="train"):
        self._require_test()
        df, sample_columns = read_predictions(os.path.join(self.out_dir, "predict", self.test_city,
                                                           "predictions.csv"))
        predictions = [_row_prediction(row, sample_columns) for _, row in df.iterrows()]
        reports = self.score(predictions)
        if not reports:
            raise DataError(f"no task of city {self.test_city} has targets for at least 2 predicted regions")
        out = self.stage_dir("eval", self.test_city)
        table = pd.DataFrame([dict(r.to_dict(), coverage=c) for r, c in reports])
        table.to_csv(os.path.join(out, "metrics.csv"), index=False)
        write_json(os.path.join(out, "metrics.json"), {
            "city": self.test_city, "protocol": self.config.protocol,
            "tasks": {r.task_id: dict(r.to_dict(), coverage=c) for r, c in reports}})
        if density_region is not None:
            self.export_density(int(density_region), str(density_task), density_samples, out, source)
        self.snapshot(out)
        return reports

    def export_density(self, region_id, task_id, n_samples, out, source="train"):
        """KDE of n_samples reverse-diffusion draws for one region and task"""
        head = self.load_head(source)
        if isinstance(head, PointBaseline):
            raise ConfigError("density export needs the diffusion head")
        name, ids, H = self.test_set()
        if region_id not in ids:
            raise DataError(f"region {region_id} is not in the test split of {name}")
        h = H[ids.index(region_id)][None, :]
        prediction = head.predict([region_id], h, sr=n_samples, tasks=[task_id])[0]
        curve = kde(prediction.samples, bandwidth=self.config.kde_bandwidth)
        pd.DataFrame({"y": curve.grid, "f": curve.density}).to_csv(os.path.join(out, "density.csv"), index=False)
        truth = self.load_city(name).targets
        match = truth[(truth["region_id"] == region_id) & (truth["task_id"] == task_id)]["value"]
        plot_density(curve, prediction.samples, truth=float(match.iloc[0]) if len(match) else None,
                     title=f"{name} region {region_id}, task {task_id}", path=os.path.join(out, "density.svg"))
        return curve

    # Stage: ablate

    def run_ablate(self, variants=None):
        """Full model and every ablation variant on one split; writes ablation.csv"""
        variants = variants or list(ABLATIONS)
        unknown = [v for v in variants if v not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation variants {unknown}, choose from {list(ABLATIONS)}")
        keys, H, Y, task_ids = self.training_set()
        rows = []
        for variant in variants:
            config = self.config.with_overrides(**ABLATIONS[variant]).validate()
            logging.info(f"Ablation {variant}: {ABLATIONS[variant] or 'full model'}")
            head = self.build_head(config).fit(keys, H, Y, task_ids)
            _, predictions, _ = self.predict_with(head)
            for report, _ in self.score(predictions):
                rows.append({"variant": variant, "task": report.task_id, "MAE": report.mae,
                             "RMSE": report.rmse, "R2": report.r2})
        out = self.stage_dir("ablate")
        table = pd.DataFrame(rows, columns=["variant", "task", "MAE", "RMSE", "R2"])
        table.to_csv(os.path.join(out, "ablation.csv"), index=False)
        self.snapshot(out)
        return table

    # Stage: finetune

    def run_finetune(self, task_id, only_new_task=False):
        """Add task_id to the trained diffusion head and continue training warm-started"""
        head = self.load_head("train")
        if isinstance(head, PointBaseline):
            raise ConfigError("finetune needs the diffusion head")
        raw = self.task_values(head.repository.region_ids, task_id)
        head.finetune(task_id, raw, epochs=self.config.finetune_epochs, only_new_task=only_new_task)
        out = self.stage_dir("finetune")
        head.save(os.path.join(out, "head"))
        pd.DataFrame(head.history, columns=["epoch", "loss"]).to_csv(os.path.join(out, "history.csv"), index=False)
        self.snapshot(out)
        return head

    def task_values(self, keys, task_id):
        """Raw targets of one task aligned with repository region keys"""
        values = np.full(len(keys), np.nan)
        tables = {}
        for i, key in enumerate(keys):
            name, rid = str(key).rsplit("/", 1)
            if name not in tables:
                targets = self.load_city(name).targets
                tables[name] = targets[targets["task_id"].astype(str) == str(task_id)].set_index("region_id")["value"]
            values[i] = tables[name].get(int(rid), np.nan)
        if np.all(np.isnan(values)):
            raise DataError(f"task {task_id!r} has no targets in the training cities")
        return values

    # Stage: sweep

    def run_sweep(self, param, values):
        """Metrics for each value of one hyper-parameter; writes sweep.csv"""
        if param not in RunConfig.field_names():
            raise ConfigError(f"unknown sweep parameter {param!r}")
        if param in FIXED_PARAMS:
            raise ConfigError(f"cannot sweep {param}: {FIXED_PARAMS[param]}")
        rows = []
        base = self.load_head("train") if param in PREDICT_PARAMS else None
        for text in values:
            value = _cast(param, text)
            config = self.config.with_overrides(**{param: value}).validate()
            logging.info(f"Sweep {param}={value}")
            source = self
            if param in PREDICT_PARAMS:
                base.config = dataclasses.replace(base.config, sr=config.sr, point_estimate=config.point_estimate)
                head = base
            elif param in HEAD_PARAMS:
                keys, H, Y, task_ids = self.training_set()
                head = self.build_head(config).fit(keys, H, Y, task_ids)
            else:
                child = UrbanPipeline(config, out_dir=os.path.join(self.out_dir, "sweep", f"{param}={value}"),
                                      train_cities=self.train_cities, test_city=self.test_city,
                                      grid_root=self.grid_root)
                child._cities = self._cities
                source = child
                child.run_pretrain()
                child.run_embed()
                child.run_aggregate()
                head = child.run_train()
            _, predictions, _ = source.predict_with(head, sr=config.sr)
            for report, _ in self.score(predictions):
                rows.append({"param": param, "value": value, "task": report.task_id, "MAE": report.mae,
                             "RMSE": report.rmse, "R2": report.r2})
        out = self.stage_dir("sweep")
        table = pd.DataFrame(rows, columns=["param", "value", "task", "MAE", "RMSE", "R2"])
        table.to_csv(os.path.join(out, "sweep.csv"), index=False)
        self.snapshot(out)
        return table

    def run_all(self):
        """grid through eval in one go"""
        self.run_grid()
        self.run_walks()
        self.run_pretrain()
        self.run_embed()
        self.run_aggregate()
        self.run_train()
        self.run_predict()
        return self.run_eval()


def _row_prediction(row, sample_columns):
    samples = row[sample_columns].to_numpy(dtype=np.float64)
    samples = samples[~np.isnan(samples)]
    return PredictionSet(region_id=int(row["region_id"]), task_id=str(row["task_id"]), samples=samples,
                         point=float(row["point"]))


def _cast(param, text):
    kind = {f.name: f.type for f in dataclasses.fields(RunConfig)}[param]
    try:
        if kind is bool:
            return str(text).lower() in ("1", "true", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"sweep value {text!r} is not a valid {kind.__name__} for {param}") from None
    return str(text)
