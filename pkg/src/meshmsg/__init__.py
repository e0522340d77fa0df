"""Anonymous mesh messaging: key-private signcryption, digest-based broadcast
with cover traffic, a discrete-time simulator, log analysis and security games."""

from . import analysis, crypto, digest, node, secgames, simnet
from .crypto import KeyPair, keygen, signcrypt, designcrypt
from .simnet import SimConfig, run

__version__ = "0.1.0"

__all__ = ["analysis", "crypto", "digest", "node", "secgames", "simnet",
           "KeyPair", "keygen", "signcrypt", "designcrypt", "SimConfig", "run"]
