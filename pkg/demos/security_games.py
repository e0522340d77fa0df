"""The three security games, played once each.

Integrity: a coalition of two devices controls the radio links, replays and
flips bits in honest packets; with real crypto nobody is fooled, with a
suite that drops authentication the forgery shows up quickly.

Confidentiality: the same script is run twice, with the honest challenge
message sent to different recipients; the coalition sees identical traces.

Key privacy: distinguishers try to tell which of two keys packets were
sealed for.
"""
import numpy as np

from meshmsg import crypto, secgames

params = secgames.GameParams.make(5, 200, {3, 4}, seed=7)
for name in ("replay", "bitflip", "drop"):
    res = secgames.run_mint(params, secgames.ADVERSARIES[name]())
    print(f"integrity vs {name:8s} verdict {res.verdict}  "
          f"({len(res.ledger.S)} sent, {len(res.ledger.R)} accepted)")

res = secgames.run_mint(params, secgames.ADVERSARIES["bitflip"](),
                        suite=crypto.UnauthenticatedSuite(), stop_on_forgery=True)
print(f"integrity, no authentication: verdict {res.verdict} "
      f"after {res.first_forgery_round + 1} rounds")

p = secgames.GameParams.make(8, 40, {6, 7}, seed=1)
script = secgames.random_mconf_script(p, np.random.default_rng(1))
res = secgames.run_mconf_trace_pair(p, script)
print(f"confidentiality: coalition traces identical across worlds: {res.invariant()}")

kp = secgames.run_key_privacy(crypto.keygen(1).pk, crypto.keygen(2).pk, 5000)
print(f"key privacy over {kp.queries} packets: advantage {kp.advantage:.3f}, "
      f"byte uniformity p = {kp.uniformity_p:.2f}")
