# src/pipeline_tools/fold_runner.py

import logging
import time
import numpy as np
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Dict, List, Sequence

from wgmm_tools.dadil_utils import DadilParams, fit_offline, fit_online, reconstruct_target, source_only_baseline, target_predict
from wgmm_tools.dataset_utils import LabeledDataset, as_stream, kfold_split
from wgmm_tools.errors import EXIT_DATA, WgmmError
from wgmm_tools.gmm_utils import em_fit, fit_labeled, map_predict
from wgmm_tools.io_utils import dictionary_to_dict
from wgmm_tools.ot_utils import mw2_sq
from pipeline_tools.run_config import MsdaConfig

logger = logging.getLogger(__name__)


def _accuracy(pred, y) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


def run_fold(fold: int, sources: Sequence[LabeledDataset], target: LabeledDataset,
             train_idx: np.ndarray, test_idx: np.ndarray, cfg: MsdaConfig) -> Dict[str, Any]:
    """
    One MSDA fold: source labeled GMMs, online GMM-DaDiL over the streamed
    target training part, then the optional offline reference, source-only
    baseline and within-domain oracle. Seeds are derived as cfg.seed + fold.
    """
    started = time.perf_counter()
    seed = cfg.seed + fold
    n_c = max(s.n_classes for s in sources)
    # the target stream arrives in random order
    train_idx = np.random.default_rng(seed).permutation(train_idx)
    train, test = target.subset(train_idx), target.subset(test_idx)
    eval_data = (test.X, test.y) if test.labeled else None

    source_gmms = [fit_labeled(s.X, s.y, cfg.k_per_class, seed=seed, n_classes=n_c) for s in sources]
    params: DadilParams = cfg.dadil_params(seed)
    stream = cfg.stream_params(seed)

    dictionary, target_gmm, metrics = fit_online(source_gmms, as_stream(train, stream.batch_size), stream, params,
                                                 eval_data=eval_data)
    n_stream = sum(1 for m in metrics if m["phase"] == "stream")
    n_steps = n_stream * cfg.steps_per_batch + len(metrics) - n_stream
    result: Dict[str, Any] = {
        "fold": fold,
        "status": "SUCCESS",
        "n_train": train.n,
        "n_test": test.n,
        "stream_end_step": next(m["step"] for m in metrics if m.get("stream_end")),
        "final_loss": metrics[-1]["loss"],
        "final_recon_mw2_sq": metrics[-1]["recon_mw2_sq"],
        "metrics": metrics,
        "dictionary": dictionary_to_dict(dictionary, cfg.beta, {"seed": seed, "iters": n_steps}),
        "accuracy": {},
    }
    if test.labeled:
        result["accuracy"]["online"] = _accuracy(target_predict(dictionary, test.X, params), test.y)

    if cfg.offline:
        # Offline reference: target GMM fitted on all training data, same number of DaDiL steps
        offline_target = em_fit(train.X, stream.K_max, seed=seed)
        offline_params = params.model_copy(update={"n_iters": n_steps})
        history: List[float] = []
        offline_dict = fit_offline(source_gmms, offline_target, offline_params, history=history)
        result["offline"] = {
            "final_loss": history[-1],
            "initial_loss": history[0],
            "recon_mw2_sq": mw2_sq(offline_target, reconstruct_target(offline_dict, offline_params))[0],
        }
        if test.labeled:
            result["accuracy"]["offline"] = _accuracy(target_predict(offline_dict, test.X, offline_params), test.y)

    if cfg.baseline and test.labeled:
        baseline = source_only_baseline(source_gmms, cfg.n_replay, cfg.k_per_class, seed=seed)
        result["accuracy"]["source_only"] = _accuracy(map_predict(baseline, test.X), test.y)

    if cfg.oracle and test.labeled and train.labeled:
        oracle = fit_labeled(train.X, train.y, cfg.k_per_class, seed=seed, n_classes=n_c)
        result["accuracy"]["oracle"] = _accuracy(map_predict(oracle, test.X), test.y)

    result["wall_ms"] = (time.perf_counter() - started) * 1000.0
    return result


def _run_fold_wrapper(fold, sources, target, train_idx, test_idx, cfg) -> Dict[str, Any]:
    """Runs one fold in a worker process; failures come back as a FAILED status dict."""
    try:
        return run_fold(fold, sources, target, train_idx, test_idx, cfg)
    except WgmmError as e:
        return {"fold": fold, "status": "FAILED", "error": str(e), "exit_code": e.exit_code}
    except Exception as e:
        return {"fold": fold, "status": "FAILED", "error": f"{type(e).__name__}: {e}", "exit_code": EXIT_DATA}


def run_folds(sources: Sequence[LabeledDataset], target: LabeledDataset, cfg: MsdaConfig) -> List[Dict[str, Any]]:
    """
    Splits the target into cfg.folds partitions and runs every fold, in worker
    processes when cfg.workers > 1. Results come back sorted by fold.
    """
    splits = kfold_split(target, cfg.folds, seed=cfg.seed)
    results = []

    if cfg.workers == 1:
        for fold, (train_idx, test_idx) in enumerate(splits):
            results.append(_run_fold_wrapper(fold, sources, target, train_idx, test_idx, cfg))
            _log_fold(results[-1])
    else:
        workers = min(cfg.workers, len(splits))
        logger.info(f"Running {len(splits)} folds with {workers} processes")
        with ProcessPoolExecutor(max_workers=workers) as executor:
            future_to_fold = {
                executor.submit(_run_fold_wrapper, fold, sources, target, train_idx, test_idx, cfg): fold
                for fold, (train_idx, test_idx) in enumerate(splits)
            }
            for future in as_completed(future_to_fold):
                results.append(future.result())
                _log_fold(results[-1])

    return sorted(results, key=lambda r: r["fold"])


def _log_fold(result: Dict[str, Any]) -> None:
    if result["status"] == "SUCCESS":
        logger.info(f"Fold {result['fold']} done: loss={result['final_loss']:.6e}, accuracy={result['accuracy']}")
    else:
        logger.error(f"Fold {result['fold']} failed: {result['error']}")


def summarize(results: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Per-method mean, std and the mean +/- 2 std band of fold accuracies."""
    methods = sorted({m for r in results if r["status"] == "SUCCESS" for m in r["accuracy"]})
    summary = {}
    for method in methods:
        values = np.array([r["accuracy"][method] for r in results if r["status"] == "SUCCESS" and method in r["accuracy"]])
        mean, std = float(values.mean()), float(values.std())
        summary[method] = {
            "per_fold": values.tolist(),
            "mean": mean,
            "std": std,
            "lower_2sigma": mean - 2 * std,
            "upper_2sigma": mean + 2 * std,
        }
    return summary
