"""Train the full model on the synthetic toy corpus.

Writes a small corpus and noise bank, trains the unified model for a few
epochs and saves a checkpoint for demo 05.

    python3 demos/04_train_toy_model.py [workdir] [epochs]
"""

import sys
import time
from pathlib import Path

from diffsv.config import preset
from diffsv.features import synth_toy_corpus, synth_toy_noise
from diffsv.training import Trainer

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10

manifest = synth_toy_corpus(8, 20, seed=7, out_dir=work / "data")
train = [e for e in manifest if int(e.utt_id[-3:]) < 15]
noise = synth_toy_noise(2, seed=8, out_dir=work / "noise")
print(f"{len(train)} training utterances, {len(noise)} noise recordings")

cfg = preset("desk").replace(training={"epochs": epochs})
trainer = Trainer(cfg, train, noise, run_dir=work / "run")
n_params = sum(p.numel() for p in trainer.model.parameters())
print(f"{n_params} parameters, {trainer.steps_per_epoch} steps per epoch")

start = time.time()
result = trainer.fit(on_epoch=lambda tr: print(
    "epoch {epoch:3d}  L_enh {l_enh:9.1f}  L_dif {l_dif:8.1f}  L_spk {l_spk:6.2f}".format(
        epoch=tr.epoch, **tr.epoch_summary(tr.epoch - 1))))
print(f"status {result.status} after {time.time() - start:.0f} s")
trainer.save_checkpoint(work / "run" / "last.ckpt")
print(f"checkpoint: {work / 'run' / 'last.ckpt'}")
