"""Small end-to-end run through the command-line interface.

Every stage writes into ``demo_out/`` (or the directory given as the first
argument). Sizes are tiny so the run takes about a minute. Replace them with
``--desk-scale`` for the preset used by the acceptance suite.
"""

# %% setup
import json
import sys
from pathlib import Path

from sidoa.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
corpus = out / "corpus"


def run(*args):
    code = main([str(a) for a in args])
    if code:
        sys.exit(f"sidoa {args[0]} exited with {code}")


# %% a synthetic speech corpus stands in for a real WAV directory
run("synth-corpus", "--out", corpus, "--speakers", "6", "--seed", "1")

# %% training features: one GCC-PHAT map per sample, plus class labels
run("gen-data", "--corpus", corpus, "--count", "300", "--out", out / "data")

# %% a few epochs over the stored features
run("train", "--data", out / "data", "--epochs", "3", "--lr", "1e-3", "--out", out / "model")
log = [json.loads(line) for line in (out / "model/train_log.jsonl").read_text().splitlines()]
print(f"loss {log[0]['loss']:.3f} at step 1, {log[-1]['loss']:.3f} at step {log[-1]['step']}")

# %% median error with and without the mask, single talker and two interferers
# (a three-epoch model is still close to chance; this only shows the plumbing)
run("eval", "--model", out / "model/model.sdm", "--corpus", corpus, "--J", "0,2",
    "--trials", "4", "--percentiles", "50", "--duration", "2.0", "--out", out / "eval")

# %% the reverberation check dumps one response and its decay estimate
run("rir-check", "--t60", "0.6", "--out", out / "rir")
