"""
Two-step pipeline from the command line
=======================================

Trains a feature extractor, freezes it, trains registration models with it
and with classical metrics, then evaluates, compares and plots. Everything
goes through the ``deepsimreg`` command-line interface, so each step leaves
CSV/SVG reports and a run manifest behind.

The settings below are deliberately small (32x32 images, a handful of
epochs) and finish in a few minutes on one CPU. Raise ``PAIRS``, the image
size and the epoch counts for more meaningful numbers.

Run with ``python3 notebooks/two_step_pipeline.py [output-dir]``.
"""

import sys
from pathlib import Path

from deepsimreg.cli import run

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "pipeline_out")
PAIRS = 120
TRAIN = ["--epochs", "4", "--lr", "1e-3", "--channels", "8,16,32"]


def step(*argv):
    print("$ deepsimreg", " ".join(argv))
    code = run(list(argv))
    if code != 0:
        sys.exit(f"step failed with exit code {code}")


###############################################################################
# 1. A synthetic dataset split 80/10/10 into train, validation and test.

data = OUT / "data"
step("gen-data", "--out", str(data), "--pairs", str(PAIRS), "--height", "32", "--width", "32",
     "--amplitude", "3", "--smoothness", "5", "--seed", "1", "--overwrite")

###############################################################################
# 2. The surrogate task: an autoencoder learns to reconstruct the images.
# Its encoder becomes the frozen feature extractor for DeepSim.

step("train-extractor", "--task", "ae", "--data", str(data), "--out", str(OUT / "ae.dsrc"), *TRAIN)

###############################################################################
# 3. Registration models: DeepSim-AE uses the frozen extractor; MSE and NCC
# are the classical baselines. The regularizer weight is picked by a sweep
# for NCC to show the ``sweep`` subcommand.

step("train-reg", "--metric", "deepsim_ae", "--extractor", str(OUT / "ae.dsrc"), "--lambda", "0.1",
     "--data", str(data), "--out", str(OUT / "deepsim.dsrc"), *TRAIN)
step("train-reg", "--metric", "mse", "--lambda", "0.1", "--data", str(data), "--out", str(OUT / "mse.dsrc"), *TRAIN)
step("sweep", "--metric", "ncc", "--lambdas", "0.01,0.1,1", "--data", str(data), "--out", str(OUT / "ncc_sweep"), *TRAIN)

###############################################################################
# 4. Test-set evaluation: per-class and mean Dice, Jacobian variance and
# folding percentage for every pair.

for name, model in (("deepsim", OUT / "deepsim.dsrc"), ("mse", OUT / "mse.dsrc"),
                    ("ncc", OUT / "ncc_sweep" / "best.dsrc")):
    step("evaluate", "--model", str(model), "--data", str(data), "--report", str(OUT / f"{name}.csv"))

###############################################################################
# 5. Paired Wilcoxon tests with Bonferroni correction over the three pairs,
# plus Cohen's d.

reports = [str(OUT / f"{n}.csv") for n in ("deepsim", "mse", "ncc")]
step("compare", "--reports", *reports, "--out", str(OUT / "compare.csv"))
print((OUT / "compare.csv").read_text())

###############################################################################
# 6. Figures: validation Dice per epoch, the lambda sweep, and test Dice box
# plots.

logs = [str(OUT / "deepsim.dsrc.train_log.csv"), str(OUT / "mse.dsrc.train_log.csv"),
        str(OUT / "ncc_sweep" / "lambda_0.1" / "train_log.csv")]
step("plot", "--kind", "convergence", "--inputs", *logs, "--labels", "deepsim_ae", "mse", "ncc",
     "--out", str(OUT / "convergence.svg"))
step("plot", "--kind", "sweep", "--inputs", str(OUT / "ncc_sweep" / "sweep.csv"), "--out", str(OUT / "sweep.svg"))
step("plot", "--kind", "boxplot", "--inputs", *reports, "--labels", "deepsim_ae", "mse", "ncc",
     "--out", str(OUT / "boxplot.svg"))
print("reports and figures in", OUT)
