"""Ten-fold CPAC training on a separable synthetic corpus, with the three
architecture ablations:

1. single large convolution in place of the CNN-pooling blocks
2. no capsule self-attention
3. a recurrent aggregator in place of dynamic routing (and no attention)

Takes a couple of minutes on one core.
"""

import time

from ctlmtnet.data import SynthSpec, synth_corpus
from ctlmtnet.experiment import RunConfig, run_single_corpus
from ctlmtnet.model import CpacConfig
from ctlmtnet.train import TrainConfig

model = CpacConfig(num_classes=5, input_frames=16, conv_filters=8, num_primary_caps=4, primary_dim=4, digit_dim=4)
corpus = synth_corpus(SynthSpec(per_class=100, frames=16, separation=3.0, seed=0))
config = RunConfig(model=model, train=TrainConfig(epochs=6, batch_size=32, lr=3e-3), folds=10)

print(f"{len(corpus)} utterances, classes {corpus.label_space}")
for algorithm, label in [(None, "CPAC"), (1, "single conv"), (2, "no attention"), (3, "recurrent")]:
    start = time.time()
    result = run_single_corpus(config.with_algorithm(algorithm), corpus)
    print(f"{label:<14} WAR {result.war:.3f}  UAR {result.uar:.3f}  ({time.time() - start:.0f}s)")
