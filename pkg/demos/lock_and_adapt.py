"""Walk through one lock / adapt / unlock cycle on a small blob problem.

Run with ``python3 demos/lock_and_adapt.py``; it finishes in a few seconds.
"""

import numpy as np

from adaloc import (
    KeySpec,
    NetworkSpec,
    TrainConfig,
    evaluate,
    finetune,
    gen_blobs,
    init_network,
    localize_key,
    lock,
    refresh_key,
    unlock,
)
from adaloc.locking import drift_outside

spec = NetworkSpec.mlp(16, [64, 64], 6)
source = gen_blobs(6, 16, per_class=200, spread=0.2, seed=1)
target = gen_blobs(6, 16, per_class=200, spread=0.2, seed=2, sample_seed=5)
target_test = gen_blobs(6, 16, per_class=100, spread=0.2, seed=2, sample_seed=6)

# pretrain on the source task
base, _ = finetune(init_network(spec, 0), source, TrainConfig(eta=0.1, epochs=15, weight_decay=0.01))
print("pretrained on target:", evaluate(spec, base, target_test).accuracy)

# pick the 10% of hidden units with the largest incoming l1 norm
key = localize_key(base, KeySpec(rho=0.1))
print(f"key covers {len(key)} of {spec.param_count} parameters")

# the head was not reset here, so the locked net keeps some signal from the remaining units
locked = lock(base, key)
print("locked model:", evaluate(spec, locked.params, target_test).accuracy)

# only key coordinates move during adaptation
adapted, _ = finetune(base, target, TrainConfig(eta=0.1, epochs=10, strategy="key-top"), key=key)
assert drift_outside(base, adapted, key).size == 0
print("key-only adapted:", evaluate(spec, adapted, target_test).accuracy)

# the same locked file now unlocks to the adapted model with the refreshed key
new_key = refresh_key(adapted, key)
restored = unlock(locked, new_key)
assert np.array_equal(restored.flat, adapted.flat)
print("unlocked with refreshed key:", evaluate(spec, restored, target_test).accuracy)
