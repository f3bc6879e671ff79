"""
Module for training, running and scoring the TEED edge detector.
"""
import os

from . import benchmark, trainer
from .architecture import build, forward, predict_maps
from .checkpoint import load_checkpoint, save_checkpoint
from .utils.config import RunConfig

def train_and_evaluate(config: RunConfig, test_root: str, test_split: str = "test", out_prefix: str = "output",
                       teedup: bool = False, quiet: bool = False) -> benchmark.EvalReport:
    """Run the full pipeline: train, predict the test images with the last checkpoint and score them.
    Test data follows the <root>/imgs/<split> + <root>/edge_maps/<split> layout.

    Args:
        config (RunConfig): run configuration
        test_root (str): dataset root of the test images
        test_split (str, optional): Defaults to "test".
        out_prefix (str, optional): folder for predictions and the report. Defaults to "output".
        teedup (bool, optional): predict at 1.5x input scale. Defaults to False.
        quiet (bool, optional): Defaults to False.

    Returns:
        benchmark.EvalReport: report, also written to <out_prefix>/report.json
    """
    fn_pred = os.path.join(out_prefix, "pred")
    fn_report = os.path.join(out_prefix, "report.json")

    print("1. Train")
    result = trainer.train(config, quiet=quiet)

    print("2. Predict test images")
    trainer.predict(result.params, os.path.join(test_root, "imgs", test_split), fn_pred, teedup=teedup, quiet=quiet)

    print("3. Score")
    report = benchmark.evaluate_directories(fn_pred, os.path.join(test_root, "edge_maps", test_split), quiet=quiet)
    report.write(fn_report)
    print(f"Done. ODS {report.ods:.3f} OIS {report.ois:.3f}, report in {fn_report}")
    return report
