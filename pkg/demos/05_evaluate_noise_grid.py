"""Score held-out toy trials under clean and noisy conditions.

Expects the work directory written by demo 04.

    python3 demos/05_evaluate_noise_grid.py [workdir]
"""

import sys
from pathlib import Path

from diffsv.evaluation import format_table, make_trials, run_condition_grid
from diffsv.features import read_manifest, synth_toy_noise
from diffsv.training import load_model

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
model = load_model(work / "run" / "last.ckpt")
test = [e for e in read_manifest(work / "data" / "manifest.jsonl") if int(e.utt_id[-3:]) >= 15]
trials = make_trials(test, seed=0)
noise = synth_toy_noise(2, seed=9, out_dir=work / "noise_test")  # unseen noise recordings
print(f"{len(trials)} trials over {len(test)} held-out utterances")

rows, average = run_condition_grid(model, test, noise, trials, snrs=[0, 10, 20],
                                   categories=["babble", "music", "noise"])
print(format_table(rows, average))
