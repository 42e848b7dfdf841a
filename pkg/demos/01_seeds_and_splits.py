"""
Seeds, streams and splits
=========================

Every run is keyed by an experiment number k. The seed comes from k, and
three SplitMix64 streams hang off that seed: data order, weight init and
augmentation.
"""

from pnnunet.volumedata import Rng, derive_seed, split_dataset, stream_seeds

for k in range(1, 6):
    seed = derive_seed(k)
    print(k, seed, stream_seeds(seed))

# the split is a seeded Fisher-Yates shuffle of the sorted ids, cut 60/20/20
ids = [f"hippocampus_{i:03d}" for i in range(260)]
train, val, test = split_dataset(ids, derive_seed(1))
print(len(train), len(val), len(test))
print("first test volumes:", test[:4])

# same seed, same split, whatever order the ids arrive in
assert split_dataset(list(reversed(ids)), derive_seed(1)) == (train, val, test)

# streams are plain SplitMix64; seed 0 gives the usual reference word
print(hex(Rng(0).next_u64()))
