import logging
import os
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence, Tuple, Union

from core.types import NO_POOLING, ExperimentResult, GraphPool, GraphPoolKind, JobResult, NetworkConfig, TrainConfig
from engines import report
from engines.dataprep import PreparedDataset
from engines.model import DEFAULT_HIDDEN, Network, infer_shapes, preset
from engines.trainer import evaluate, stack_samples, train

logger = logging.getLogger(__name__)

Job = Tuple[str, str, int]   # (preset, pooling, seed)


def job_label(name: str, pooling: str, seed: int) -> str:
    return f"{name} seed {seed}" if pooling == NO_POOLING else f"{name}[{pooling}] seed {seed}"


class ExperimentRunner:
    def __init__(
        self,
        dataset: PreparedDataset,
        presets: Sequence[str],
        cfg: TrainConfig,
        out_dir: str,
        pooling: Union[GraphPoolKind, Sequence[GraphPoolKind]] = GraphPoolKind.MEAN,
        kernel: Optional[int] = None,
        hidden_units: int = DEFAULT_HIDDEN,
        workers: int = 1,
    ):
        """
        Trains every (preset, pooling, seed) combination on one prepared
        dataset. Layouts without a graph stage run once per seed whatever
        the pooling list. Every layout is shape-checked before any job runs.
        """
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = out_dir
        poolings = [pooling] if isinstance(pooling, (str, GraphPoolKind)) else list(pooling)
        self.poolings = tuple(dict.fromkeys(GraphPoolKind(p) for p in poolings))
        self.kernel = kernel
        self.hidden_units = hidden_units
        self.workers = max(1, workers)
        self.configs: Dict[Tuple[str, str], NetworkConfig] = {}
        for name in presets:
            for kind in self.poolings:
                config = self._config(name, kind)
                infer_shapes(config)
                label = kind.value if any(isinstance(s, GraphPool) for s in config.layout) else NO_POOLING
                self.configs.setdefault((name, label), config)
        self.jobs: List[Job] = [(name, label, s) for (name, label) in self.configs for s in cfg.seeds]
        self.successful_jobs: List[Job] = []
        self.failed_jobs: List[Tuple[str, str, int, str]] = []
        self.error_log_path = os.path.join(out_dir, "experiment_errors.log")
        self._lock = threading.Lock()
        self._segments = dataset.segments()

    def _config(self, name: str, pooling: GraphPoolKind) -> NetworkConfig:
        return preset(
            name,
            window=self.dataset.window,
            n_features=self.dataset.panel.n_features,
            head=self.cfg.head,
            pooling=pooling,
            kernel=self.kernel,
            hidden_units=self.hidden_units,
        )

    def build_network(self, name: str, pooling: str, seed: int) -> Network:
        return Network(self.configs[(name, pooling)], self.dataset.graph, seed=seed)

    def job_paths(self, name: str, pooling: str, seed: int) -> Tuple[str, str]:
        stem = f"{name}_seed{seed}" if pooling == NO_POOLING else f"{name}_{pooling}_seed{seed}"
        return (os.path.join(self.out_dir, "weights", f"{stem}.gcnp"),
                os.path.join(self.out_dir, "predictions", f"{stem}.csv"))

    def run_job(self, name: str, pooling: str, seed: int) -> JobResult:
        """Train, score the test segment, then save weights and test predictions"""
        train_set, val_set, test_set = self._segments
        network = self.build_network(name, pooling, seed)
        history = train(network, train_set, val_set, self.cfg, seed)

        x_test, y_test = stack_samples(test_set)
        scores = evaluate(network, x_test, y_test)
        weights_path, predictions_path = self.job_paths(name, pooling, seed)
        network.save(weights_path, {
            "data_hash": self.dataset.data_hash,
            "seed": seed,
            "pooling": pooling,
            "best_epoch": history.best_epoch,
            "epochs_run": len(history.history),
        })
        predictions = network.predict(x_test, [s.anchor_date for s in test_set])
        report.write_predictions(predictions, predictions_path)
        logger.info(f"{job_label(name, pooling, seed)}: test macro-F {scores.macro_f:.4f} "
                    f"({', '.join(f'{f:.3f}' for f in scores.f_measures)})")
        return JobResult(preset=name, seed=seed, pooling=pooling, f_measures=scores.f_measures,
                         val_score=history.best_score, weights_path=weights_path,
                         predictions_path=predictions_path)

    def _guarded(self, name: str, pooling: str, seed: int) -> JobResult:
        label = job_label(name, pooling, seed)
        try:
            result = self.run_job(name, pooling, seed)
        except Exception as e:
            error_details = traceback.format_exc()
            logger.warning(f"Failed: {label}: {e}")
            logger.debug(f"Full traceback:\n{error_details}")
            with self._lock:
                os.makedirs(self.out_dir, exist_ok=True)
                with open(self.error_log_path, "a", encoding="utf-8") as f:
                    f.write(f"\n{'=' * 60}\n")
                    f.write(f"Job: {label}\n")
                    f.write(f"Error: {e}\n")
                    f.write(f"Traceback:\n{error_details}\n")
                    f.write(f"{'=' * 60}\n")
                self.failed_jobs.append((name, pooling, seed, str(e)))
            return JobResult(preset=name, seed=seed, pooling=pooling, f_measures=None,
                             error=f"{type(e).__name__}: {e}")
        with self._lock:
            self.successful_jobs.append((name, pooling, seed))
        return result

    def process_all(self) -> ExperimentResult:
        """Runs all jobs and returns their results in job order"""
        if not self.jobs:
            logger.error("No experiment jobs to run")
            return ExperimentResult()

        logger.info(f"Running {len(self.jobs)} job(s) on {self.workers} worker(s)")
        results = {}
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            futures = {executor.submit(self._guarded, *job): job for job in self.jobs}
            for future in as_completed(futures):
                results[futures[future]] = future.result()

        self.print_summary()
        if self.failed_jobs:
            logger.info(f"Detailed errors saved to: {self.error_log_path}")
        return ExperimentResult(jobs=[results[job] for job in self.jobs])

    def print_summary(self):
        """Print experiment summary"""
        print("\n" + "=" * 60)
        print("EXPERIMENT SUMMARY")
        print("=" * 60)
        print(f"Total jobs: {len(self.jobs)}")
        print(f"Successful: {len(self.successful_jobs)}")
        print(f"Failed: {len(self.failed_jobs)}")

        if self.failed_jobs:
            print("\nFailed jobs:")
            for name, pooling, seed, error in sorted(self.failed_jobs):
                print(f"  - {job_label(name, pooling, seed)}: {error}")

        print("=" * 60 + "\n")


def run_experiments(dataset: PreparedDataset, presets: Sequence[str], cfg: TrainConfig, out_dir: str,
                    **runner_options) -> ExperimentResult:
    """
    Trains every preset under every seed in `cfg.seeds` (and every pooling
    kind in `pooling` for graph layouts), then writes runs.csv (one row per
    job) and results.csv (mean and best per variant) into `out_dir`.
    """
    runner = ExperimentRunner(dataset, presets, cfg, out_dir, **runner_options)
    result = runner.process_all()
    report.write_runs(result, os.path.join(out_dir, "runs.csv"))
    report.write_results(result, os.path.join(out_dir, "results.csv"))
    return result
