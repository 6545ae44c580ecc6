"""Plots the closed-loop CSVs written by `apdg closed-loop`.

Run from the output directory: python3 plot.py
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(name):
    with open(Path(__file__).with_name(name), newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        sys.exit(f"{name} has no rows")
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def solve_time():
    d = read("fig3_solve_time.csv")
    fig, ax = plt.subplots()
    ax.step(d["t"], d["async_seconds"], where="post", label="asynchronous")
    ax.step(d["t"], d["sync_seconds"], where="post", label="synchronous", linestyle="--")
    ax.set(xlabel="t", ylabel="simulated solve time [s]")
    ax.legend()
    fig.savefig("fig3_solve_time.png", dpi=150)


def constraint_and_inputs():
    d = read("fig4_constraint.csv")
    inputs = [k for k in d if k.startswith("u")]
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
    total = [sum(d[k][i] for k in inputs) for i in range(len(d["t"]))]
    top.step(d["t"], total, where="post", label="sum of inputs")
    top.axhline(1.5, color="k", linewidth=0.8)
    top.axhline(-1.5, color="k", linewidth=0.8)
    top.legend()
    for k in inputs:
        bottom.step(d["t"], d[k], where="post", label=k)
    bottom.set(xlabel="t", ylabel="u")
    bottom.legend(ncol=len(inputs))
    fig.savefig("fig4_constraint.png", dpi=150)


def states():
    d = read("fig5_states.csv")
    fig, ax = plt.subplots()
    for k in d:
        if k != "t":
            ax.plot(d["t"], d[k], label=k)
    ax.set(xlabel="t", ylabel="x")
    ax.legend(ncol=2)
    fig.savefig("fig5_states.png", dpi=150)


if __name__ == "__main__":
    solve_time()
    constraint_and_inputs()
    states()
