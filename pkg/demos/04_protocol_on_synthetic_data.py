"""
The whole protocol, small
=========================

Train every model for three experiments on synthetic volumes, score the
held-out split, then build the mean and t-test tables. This is the same
sequence of CLI calls used on a prepared cache, just with tiny networks
and two epochs. The Transfer ensemble reuses the Deep and Wide checkpoints,
so those are trained first.
"""

import sys
import tempfile

from pnnunet.runner import main

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="pnnunet-demo-")
common = ["--data", "synthetic:10", "--out", out, "--experiments", "1..3", "--scale", "32", "--epochs", "2"]

for model in ("deep", "wide", "ensemble-transfer", "ensemble-retrain", "pnn"):
    assert main(["train", "--model", model, *common]) == 0
    assert main(["evaluate", "--model", model, *common]) == 0

# three runs instead of five, so the tables say so
main(["report", *common])
main(["compare", *common])
print("outputs in", out)
