import numpy as np

from dasa.bank import DomainSnapshot
from dasa.bn import BnLayerState
from dasa.sa import SaKernel


def random_snapshot(rng, domain_id="d", ordinal=0, channels=(8, 16, 32, 32), sa_channels=(8, 16, 32), k=5,
                    arch_id="tiny", cameras=("d:c1",)):
    f32 = lambda *shape: rng.normal(size=shape).astype(np.float32)
    bns = [BnLayerState(f32(c), np.abs(f32(c)), f32(c), f32(c), float(rng.uniform(1e-6, 1e-3)),
                        float(rng.uniform(0.01, 0.5))) for c in channels]
    sas = [SaKernel(f32(c, k, k)) for c in sa_channels]
    return DomainSnapshot(domain_id, ordinal, arch_id, bns, sas, [1, 5, 9, 12][:len(channels)],
                          [0, 4, 8][:len(sa_channels)], frozenset(cameras))
