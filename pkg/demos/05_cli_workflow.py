"""The whole pipeline through the command-line interface.

Every step is a subcommand with deterministic outputs: generate a dataset
file, pretrain, train adapters, track a grid of queries, evaluate both
query modes, and dump PCA feature images. This script shells out exactly
as you would from a terminal, with tiny budgets.

Run:  python3 demos/05_cli_workflow.py
"""

import pathlib
import subprocess
import sys
import tempfile

work = pathlib.Path(tempfile.mkdtemp(prefix="tempotrack_demo_"))
print(f"working in {work}")


def run(*args):
    cmd = [sys.executable, "-m", "tempotrack.cli", *args]
    print("$ tempotrack", " ".join(args))
    subprocess.run(cmd, check=True)


run("generate-data", "--n-clips", "12", "--seed", "0", "--frames", "12",
    "--tracks", "24", "--out", str(work / "data.chrd"))

run("pretrain", "--data", str(work / "data.chrd"), "--out", str(work / "stage_a.ckpt"),
    "--iters", "120", "--warmup-iters", "10", "--lr", "3e-4",
    "--queries-per-batch", "32", "--seed", "0",
    "--loss-log", str(work / "pretrain_loss.log"))

run("train-adapter", "--data", str(work / "data.chrd"),
    "--backbone", str(work / "stage_a.ckpt"), "--out", str(work / "adapted.ckpt"),
    "--window", "7", "--aggregation", "attn1d", "--placement", "all",
    "--iters", "60", "--warmup-iters", "10", "--lr", "1e-3",
    "--queries-per-batch", "32", "--seed", "1")

run("track", "--checkpoint", str(work / "adapted.ckpt"), "--data", str(work / "data.chrd"),
    "--clip", "1", "--grid", "4", "--out", str(work / "tracks.traj"))

for mode in ("strided", "first"):
    run("evaluate", "--checkpoint", str(work / "adapted.ckpt"),
        "--data", str(work / "data.chrd"), "--mode", mode,
        "--out", str(work / f"report_{mode}.txt"))

run("dump-features", "--checkpoint", str(work / "adapted.ckpt"),
    "--data", str(work / "data.chrd"), "--clip", "1",
    "--out-dir", str(work / "features"))

print(f"\nartifacts left in {work} for inspection")
