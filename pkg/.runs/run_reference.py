import json
import time

import torch

torch.set_num_threads(1)

from geomark.config import ExperimentConfig
from geomark.experiment import run_experiment

t0 = time.time()
report = run_experiment(ExperimentConfig(), "/root/pkg/.runs/reference")
print("TOTAL_SECONDS", time.time() - t0)
print(json.dumps(report["phases"], indent=1))
print(json.dumps(report["criteria"], indent=1))
