"""A walk through one simulated factory and the radio link of one user.

We draw a layout, let its vehicles and arms move for a few seconds, and
look at how the optimal beam pair of each base station changes as the
user walks along its route.

    python3 demos/01_factory_channel.py
"""
import numpy as np

from beamsense import channel, scene
from beamsense.rng import substream

layout = scene.sample_environment(rng=substream(1, "demo-layout"))
print(f"layout: {len(layout.objects)} objects, "
      f"{len(layout.dynamic_objects)} of them move (vehicles and arms)")

path = scene.simulate_path(layout, rng=substream(1, "demo-path"), resolution=(180, 270))
traj = path.trajectory.positions
print(f"user path: {len(traj)} frames of 50 ms, "
      f"{np.linalg.norm(traj[-1] - traj[0]):.1f} m from start to end")

upa_t, upa_r = channel.UPAConfig(8, 4), channel.UPAConfig(4, 2)
cb_t, cb_r = channel.build_dft_codebook(upa_t), channel.build_dft_codebook(upa_r)
ofdm = channel.OFDMConfig()

# Every 40th frame: trace the specular paths and sweep the codebooks.
print("\nframe  bs  paths  strongest(dBm)  beam(t,r)  rate(bit/s/Hz)")
for f in range(0, len(traj), 40):
    geom = channel.layout_geometry(layout, path.states[f])
    for b, bs in enumerate(layout.bs_positions):
        ps = channel.trace_paths(geom, bs, traj[f])
        ps = channel.align_to_first_arrival(ps, ofdm)
        H = channel.assemble_channel(ps, upa_t, upa_r, ofdm)
        r, t, rate = channel.optimal_beam_pair(H, cb_r, cb_t, ofdm)
        top = ps.power_dbm.max() if len(ps.power_dbm) else float("nan")
        print(f"{f:5d}  {b:2d}  {len(ps.power_dbm):5d}  {top:14.1f}  ({t:3d},{r:2d})  {rate:10.2f}")

# The beam index drifts slowly as the geometry changes, which is what makes
# it predictable from a short history of positions and scene snapshots.
