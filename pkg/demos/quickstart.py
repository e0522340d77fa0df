"""A first look: seal a packet, then watch a message cross a small mesh.

Run with ``python3 demos/quickstart.py``.
"""
from meshmsg import analysis, crypto, simnet

alice, bob = crypto.keygen(1), crypto.keygen(2)

# every packet is the same size, whatever it carries
pkt = crypto.signcrypt(alice, bob.pk, crypto.pad(b"meet at the library"))
print(f"packet: {len(pkt)} bytes")
sender, plaintext = crypto.designcrypt(bob, pkt)
print("bob reads:", crypto.unpad(plaintext), "from alice:", sender == alice.pk)
print("eve reads:", crypto.designcrypt(crypto.keygen(3), pkt))

# nine phones on a 15 ft grid; device 0 messages device 8 once everyone is up
cfg = simnet.SimConfig(minutes=2, devices=9, spacing_ft=15, rate_ms=2000,
                       ds_interval_ms=2000, broadcast="smart",
                       messages=[[65_000, 0, 8, "hello from the corner"]])
res = simnet.run(cfg)
for d in res.nodes[8].inbox:
    print(f"device 8 got {d.text!r} at {d.time_ms / 1000:.1f} s")

stats = analysis.delivery_times(res)
print(f"{len(stats.messages)} packets tracked, median spread to all devices "
      f"{stats.median() / 1000:.1f} s")
print(f"95th percentile bandwidth: {analysis.percentile(analysis.bandwidth(res), 95):,.0f} b/s")
