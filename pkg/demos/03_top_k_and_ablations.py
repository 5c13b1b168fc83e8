# How many channels should each target look at? Sweep k on the paired
# sinusoids, then run the ablation table through the same code the command
# line uses. k=1 is channel independent; k=8 lets every target see all
# channels.
# Run: python demos/03_top_k_and_ablations.py   (about 1 min)

# %%
import dataclasses
import tempfile
from pathlib import Path

from adapformer import cli, dataio
from adapformer.synthetic import paired_sinusoids

work = Path(tempfile.mkdtemp(prefix="adapformer_demo_"))
values, _ = paired_sinusoids(n_rows=2000, seed=0)
csv_path = work / "pairs.csv"
dataio.save_csv(csv_path, values, [f"c{i}" for i in range(8)])

base = cli.RunConfig(dataset=str(csv_path), lookback=48, horizon=24, d_model=32, rank=8, n_heads=2,
                     n_layers=1, d_ff=64, max_epochs=10, out=str(work))

# %% k sweep
rows, path = cli.cmd_sweep(base, cli.parse_grid("topk=1,2,3,4,8"))
best = min(rows, key=lambda r: r["mse"])
print(f"best k = {best['topk']} (mse {best['mse']:.4f}); table in {path}")

# %% ablations: drop ACE, replace the selective heads, drop the relevance loss
rows, path = cli.cmd_ablate(dataclasses.replace(base, seed=0), seeds=[0])

# %% Train once more and export one window for plotting, as `adapformer forecast
# --plot-data` would.
cli.cmd_train(base)
ckpt = base.run_dir() / "checkpoint.npz"
args = cli.build_parser().parse_args(["forecast", "--checkpoint", str(ckpt), "--input", str(csv_path),
                                      "--split", "test", "--predictions", str(work / "pred.csv"),
                                      "--plot-data", str(work / "plot.csv"), "--plot-channel", "0"])
cli.cmd_forecast(args, base)
print((work / "plot.csv").read_text().splitlines()[:3])
