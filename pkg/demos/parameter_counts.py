"""
Parameter counts at full scale
==============================

Builds the four generator/discriminator combinations at 512 x 512 and prints
their sizes in two conventions: trainable only, and trainable plus the
batch-norm running statistics.
"""
from mti.nets import NetworkConfig, REFERENCE_TOTALS, build_discriminator, build_unet, count_parameters

base = NetworkConfig()
print("encoder widths:", base.encoder_widths())

for n_tasks, tag in ((1, "st"), (2, "mt")):
    cfg = base.with_tasks(n_tasks)
    gen, disc = build_unet(cfg), build_discriminator(cfg)
    g, g_stats, d = count_parameters(gen), count_parameters(gen, include_statistics=True), count_parameters(disc)
    print(f"\n{tag.upper()}: {cfg.out_channels} output channels")
    print(f"  generator trainable          {g:>12,}")
    print(f"  generator + BN statistics    {g_stats:>12,}   reference unet_{tag} {REFERENCE_TOTALS['unet_' + tag]:>12,}")
    print(f"  discriminator trainable      {d:>12,}")
    print(f"  generator + discriminator    {g + d:>12,}   reference cgan_{tag} {REFERENCE_TOTALS['cgan_' + tag]:>12,}")

# ST -> MT only widens the last transposed conv (and the discriminator's first conv)
print("\nU-Net MT - ST:", REFERENCE_TOTALS["unet_mt"] - REFERENCE_TOTALS["unet_st"], "=", 3 * 9 * 200 + 3)
print("cGAN  MT - ST:", REFERENCE_TOTALS["cgan_mt"] - REFERENCE_TOTALS["cgan_st"], "=", 3 * 9 * 200 + 3, "+", 3 * 9 * 64)
