"""Split one block's parameters into auxiliary and complementary parts.

With the mask net zeroed every mask entry is sigmoid(0) = 0.5, so both
reconstructed blocks coincide.  After random mask weights they separate.
"""
import numpy as np

from aimlab.net import Block, LayerSpec
from aimlab.pdm import LayerDecoupler, decouple

rng = np.random.default_rng(0)
block = Block([LayerSpec(4, 3)], rng)
ld = LayerDecoupler(block.layers[0].spec.n_params, 8, rng)


def gap(parts):
    (wa, ba), (wc, bc) = parts.aux[0], parts.comp[0]
    return np.abs(wa.value - wc.value).max(), parts.recon.item()


ld.mask_w.value[...] = 0.0
print("zero mask net:   max |aux - comp| = %.2e, reconstruction error %.4f" % gap(decouple([ld], block)))
ld.mask_w.value[...] = rng.standard_normal(ld.mask_w.shape)
print("random mask net: max |aux - comp| = %.2e, reconstruction error %.4f" % gap(decouple([ld], block)))
