"""
The command-line pipeline on a simulated city
==============================================

Every step of an analysis is a subcommand reading one YAML file. This
script writes a configuration into a temporary folder, simulates a small
system and runs ingestion, exploration, clustering and the model fit.
The same steps run from a shell as ``stfda <command> --config run.yaml``.
"""

import json
import tempfile
from pathlib import Path

from stfda.cli import main

CONFIG = """
seed: 7
output: out
grid: {points_per_day: 24}
data:
  hire: out/simulate/hire.csv
  stations: out/simulate/stations.csv
  weather: out/simulate/weather.csv
model:
  basis_mu: {order: 2, break_points: [0, 12, 24]}
  basis_omega: {order: 2, break_points: [0, 12, 24]}
  basis_eps: {order: 1, break_points: [0, 24]}
  covariates: [temperature]
  design: interaction
simulate:
  n_stations: 12
  days: 21
  missing: 0.05
  params:
    beta: {Cluster1: [10, 20, 10], Cluster2: [20, 8, 20], "Cluster1*temperature": 0.3}
    g: 0.5
    v: 4
    theta: 300
    sigma2_eps: 1
"""

root = Path(tempfile.mkdtemp())
(root / "run.yaml").write_text(CONFIG)
for command in ("simulate", "ingest", "explore", "cluster", "fit"):
    code = main([command, "--config", str(root / "run.yaml")])
    print("%-8s exit %d" % (command, code))

out = root / "out"
print(json.loads((out / "ingest" / "summary.json").read_text())["missing_percent"], "% missing")
print("cluster shares:", json.loads((out / "cluster" / "shares.json").read_text()))
model = json.loads((out / "fit" / "model.json").read_text())
print("fitted g:", [round(x, 3) for x in model["params"]["g"]], " theta: %.0f m" % model["params"]["theta"])
print("outputs under", out)
