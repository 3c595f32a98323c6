"""
Bias fields on a synthetic head
===============================

Draws the eight gain fields and contaminates one phantom slice with each.
Writes bias_fields.png next to this script.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mti.biasfield import all_fields, contaminate
from mti.dataset import resize_slice, stretch_intensity, synthetic_volume

# one mid-depth T1 slice at 128 x 128, stretched to [0, 255]
vol = stretch_intensity(synthetic_volume("s0"))
clean = resize_slice(vol.modalities["T1"][6], 128, 128)

fields = all_fields(128, 128)
for f in fields:
    print(f"field {f.field_id}: gain {f.values.min():.3f} .. {f.values.max():.3f}")

fig, axes = plt.subplots(2, 8, figsize=(16, 4.5))
for ax_f, ax_s, f in zip(axes[0], axes[1], fields):
    ax_f.imshow(f.values, cmap="coolwarm", vmin=0.7, vmax=1.3)
    ax_f.set_title(f"field {f.field_id}", fontsize=8)
    ax_s.imshow(contaminate(clean, f), cmap="gray", vmin=0, vmax=255)
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()

out = Path(__file__).with_name("bias_fields.png")
fig.savefig(out, dpi=80)
print("wrote", out)

# division by the known field undoes the contamination wherever nothing clipped
f = fields[3]
dirty = contaminate(clean, f)
ok = clean * f.values <= 255
print("max recovery error:", np.abs(dirty[ok] / f.values[ok] - clean[ok]).max())
